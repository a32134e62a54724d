#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "corestack/common/log.hpp"
#include "corestack/detect/geometry.hpp"

namespace corestack::detect {

struct Detection {
    Box box;
    BinaryMask mask;
    double score = 0.0;
    std::optional<data::Circle> circle;  // geometry the mask was rasterized from
};

/// A ground-truth instance: box plus rasterized mask.
struct Instance {
    Box box;
    BinaryMask mask;
};

inline Instance instance_from_hole(const data::HoleAnnotation& h, int rows, int cols) {
    Instance out;
    out.mask = hole_to_mask(h, rows, cols);
    if (auto b = mask_box(out.mask)) {
        out.box = *b;
    } else if (h.is_circle()) {
        const auto& c = h.circle();
        out.box = {c.cx - c.r, c.cy - c.r, c.cx + c.r, c.cy + c.r};
    }
    return out;
}

/// Greedy suppression by descending score; equal scores keep the earlier index.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<std::size_t> kept;
    for (auto i : order) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
            return iou_box(dets[k].box, dets[i].box) > iou_threshold;
        });
        if (!suppressed) kept.push_back(i);
    }
    std::vector<Detection> out;
    out.reserve(kept.size());
    for (auto i : kept) out.push_back(std::move(dets[i]));
    return out;
}

/// Union of the masks of detections scoring at least `cutoff`.
inline BinaryMask union_mask(const std::vector<Detection>& dets, int rows, int cols, double cutoff = 0.5) {
    BinaryMask out(rows, cols);
    for (const auto& d : dets)
        if (d.score >= cutoff) out |= d.mask;
    return out;
}

enum class MatchOn { box, mask };

struct PrPoint {
    double recall = 0;
    double precision = 0;
    double score = 0;  // lowest score admitted at this point
};

struct ApResult {
    double ap = 0;
    std::vector<PrPoint> curve;
    std::size_t n_ground_truth = 0;
    std::size_t n_detections = 0;
    std::size_t true_positives = 0;
};

namespace detail {

inline double match_iou(const Detection& d, const Instance& g, MatchOn on) {
    return on == MatchOn::box ? iou_box(d.box, g.box) : iou_mask(d.mask, g.mask);
}

/// Area under the running-max precision envelope over recall.
inline double interpolated_area(const std::vector<PrPoint>& curve) {
    double ap = 0, prev_recall = 0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        double p = 0;
        for (std::size_t j = i; j < curve.size(); ++j) p = std::max(p, curve[j].precision);
        ap += (curve[i].recall - prev_recall) * p;
        prev_recall = curve[i].recall;
    }
    return ap;
}

}  // namespace detail

/// Average precision over a set of images. `detections[i]` and `truths[i]`
/// describe image i. PR points are taken after each group of equal scores.
inline ApResult evaluate_ap(const std::vector<std::vector<Detection>>& detections,
                            const std::vector<std::vector<Instance>>& truths, double iou_threshold = 0.5,
                            MatchOn on = MatchOn::box) {
    if (detections.size() != truths.size()) throw PreconditionError("detections and ground truth cover different image counts");
    ApResult res;
    struct Ref {
        double score;
        std::size_t image, index;
    };
    std::vector<Ref> refs;
    for (std::size_t i = 0; i < detections.size(); ++i) {
        res.n_ground_truth += truths[i].size();
        for (std::size_t k = 0; k < detections[i].size(); ++k) refs.push_back({detections[i][k].score, i, k});
    }
    res.n_detections = refs.size();
    if (res.n_ground_truth == 0) {
        log::warn("evaluate_ap: no ground-truth instances, AP reported as 0");
        return res;
    }
    std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

    std::vector<std::vector<bool>> taken(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) taken[i].assign(truths[i].size(), false);
    std::size_t tp = 0;
    const auto n_gt = static_cast<double>(res.n_ground_truth);
    for (std::size_t k = 0; k < refs.size(); ++k) {
        const auto& ref = refs[k];
        const auto& det = detections[ref.image][ref.index];
        double best = -1;
        std::size_t best_g = 0;
        for (std::size_t g = 0; g < truths[ref.image].size(); ++g) {
            if (taken[ref.image][g]) continue;
            const double iou = detail::match_iou(det, truths[ref.image][g], on);
            if (iou >= iou_threshold && iou > best) {
                best = iou;
                best_g = g;
            }
        }
        if (best >= 0) {
            taken[ref.image][best_g] = true;
            ++tp;
        }
        const bool group_end = k + 1 == refs.size() || refs[k + 1].score != ref.score;
        if (group_end)
            res.curve.push_back({static_cast<double>(tp) / n_gt, static_cast<double>(tp) / static_cast<double>(k + 1), ref.score});
    }
    res.true_positives = tp;
    res.ap = detail::interpolated_area(res.curve);
    return res;
}

}  // namespace corestack::detect
