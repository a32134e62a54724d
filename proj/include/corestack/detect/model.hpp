#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corestack/common/log.hpp"
#include "corestack/common/rng.hpp"
#include "corestack/detect/evaluate.hpp"
#include "corestack/detect/geometry.hpp"
#include "corestack/nn/checkpoint.hpp"
#include "corestack/nn/layers.hpp"
#include "corestack/nn/optim.hpp"

// Anchor-free hole detector: a strided conv trunk predicts, per output cell, a
// center-likelihood logit, the disk radius and the sub-cell center offset.
// Masks are disks of the regressed radius.

namespace corestack::detect {

inline constexpr const char* kDetectorKind = "corestack.detector";

struct DetectorConfig {
    int width = 32;  // trunk base channel count
    std::uint64_t seed = 1;
    double min_score = 0.05;  // peaks below are never reported
    double nms_iou = 0.3;
    int max_detections = 100;

    static constexpr int stride = 4;
};

inline void to_json(nlohmann::json& j, const DetectorConfig& c) {
    j = {{"width", c.width}, {"seed", c.seed}, {"min_score", c.min_score}, {"nms_iou", c.nms_iou},
         {"max_detections", c.max_detections}, {"stride", DetectorConfig::stride}};
}

inline void from_json(const nlohmann::json& j, DetectorConfig& c) {
    c.width = j.value("width", c.width);
    c.seed = j.value("seed", c.seed);
    c.min_score = j.value("min_score", c.min_score);
    c.nms_iou = j.value("nms_iou", c.nms_iou);
    c.max_detections = j.value("max_detections", c.max_detections);
    if (j.value("stride", DetectorConfig::stride) != DetectorConfig::stride)
        throw ValidationError("detector checkpoint has unsupported stride");
}

/// Output channels of the head.
enum HeadChannel { kHeat = 0, kRadius = 1, kOffsetX = 2, kOffsetY = 3, kHeadChannels = 4 };

class Detector {
public:
    explicit Detector(DetectorConfig cfg = {}) : cfg_(cfg) { build(); }

    const DetectorConfig& config() const { return cfg_; }
    nn::Sequential& net() { return net_; }

    /// Raw head output for a batch already padded to a multiple of the stride.
    nn::Tensor forward(const nn::Tensor& x) { return net_.forward(x); }

    /// Image to normalized tensor, edge-padded at the bottom/right to a multiple of the stride.
    static nn::Tensor prepare(const ImageU8& img) {
        if (img.channels() != 3) throw PreconditionError("detector expects an RGB image");
        const int s = DetectorConfig::stride;
        const int H = (img.rows() + s - 1) / s * s, W = (img.cols() + s - 1) / s * s;
        nn::Tensor t(1, 3, H, W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int sy = std::min(y, img.rows() - 1), sx = std::min(x, img.cols() - 1);
                for (int ch = 0; ch < 3; ++ch) t.at(0, ch, y, x) = img(sy, sx, ch) / 127.5f - 1.0f;
            }
        return t;
    }

    std::vector<Detection> detect(const ImageU8& img) {
        if (img.rows() < 1 || img.cols() < 1) return {};
        const nn::Tensor out = forward(prepare(img));
        return decode(out, img.rows(), img.cols());
    }

    /// Peak picking on the head output, disk masks, NMS; sorted by descending score.
    std::vector<Detection> decode(const nn::Tensor& out, int rows, int cols) const {
        const int s = DetectorConfig::stride;
        struct Peak {
            float score;
            int i, j;
        };
        std::vector<Peak> peaks;
        auto prob = [&](int i, int j) { return 1.0f / (1.0f + std::exp(-out.at(0, kHeat, i, j))); };
        for (int i = 0; i < out.h; ++i)
            for (int j = 0; j < out.w; ++j) {
                const float logit = out.at(0, kHeat, i, j);
                bool is_max = true;
                for (int di = -1; di <= 1 && is_max; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const int a = i + di, b = j + dj;
                        if ((di || dj) && a >= 0 && b >= 0 && a < out.h && b < out.w && out.at(0, kHeat, a, b) > logit) {
                            is_max = false;
                            break;
                        }
                    }
                const float p = prob(i, j);
                if (is_max && p >= cfg_.min_score) peaks.push_back({p, i, j});
            }
        std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.score > b.score; });
        if (peaks.size() > static_cast<std::size_t>(cfg_.max_detections)) peaks.resize(static_cast<std::size_t>(cfg_.max_detections));
        std::vector<Detection> dets;
        for (const auto& pk : peaks) {
            const double ox = std::clamp<double>(out.at(0, kOffsetX, pk.i, pk.j), 0.0, 1.0);
            const double oy = std::clamp<double>(out.at(0, kOffsetY, pk.i, pk.j), 0.0, 1.0);
            const data::Circle c{(pk.j + ox) * s, (pk.i + oy) * s, std::max(1.0, static_cast<double>(out.at(0, kRadius, pk.i, pk.j)) * s)};
            if (c.cx >= cols || c.cy >= rows) continue;  // center in the padding
            Detection d;
            d.mask = circle_to_mask(c, rows, cols);
            const auto box = mask_box(d.mask);
            if (!box) continue;
            d.box = *box;
            d.score = pk.score;
            d.circle = c;
            dets.push_back(std::move(d));
        }
        return nms(std::move(dets), cfg_.nms_iou);
    }

    void save(const std::filesystem::path& path) { nn::save_checkpoint(path, kDetectorKind, cfg_, net_.named_params()); }

    static Detector load(const std::filesystem::path& path) {
        const auto ck = nn::load_checkpoint(path, kDetectorKind);
        Detector d(ck.config().get<DetectorConfig>());
        nn::restore_params(ck, d.net_.named_params());
        return d;
    }

private:
    void build() {
        Rng rng(cfg_.seed);
        const int w = cfg_.width;
        using nn::Conv2d;
        using nn::Conv2dSpec;
        net_.emplace<Conv2d>(Conv2dSpec{3, w / 2, 3, 2}, rng);
        net_.add(nn::relu());
        net_.emplace<Conv2d>(Conv2dSpec{w / 2, w, 3, 1}, rng);
        net_.add(nn::relu());
        net_.emplace<Conv2d>(Conv2dSpec{w, w, 3, 2}, rng);
        net_.add(nn::relu());
        net_.emplace<Conv2d>(Conv2dSpec{w, w * 3 / 2, 3, 1}, rng);
        net_.add(nn::relu());
        net_.emplace<Conv2d>(Conv2dSpec{w * 3 / 2, w * 3 / 2, 3, 1, -1, 2}, rng);
        net_.add(nn::relu());
        net_.emplace<Conv2d>(Conv2dSpec{w * 3 / 2, w * 3 / 2, 3, 1, -1, 4}, rng);
        net_.add(nn::relu());
        net_.emplace<Conv2d>(Conv2dSpec{w * 3 / 2, w, 3, 1}, rng);
        net_.add(nn::relu());
        auto& head = net_.emplace<Conv2d>(Conv2dSpec{w, kHeadChannels, 1, 1, 0, 1, true, false, 0.1f}, rng);
        // Prior of ~0.1 center probability keeps the early focal loss stable.
        head.bias().value.data[kHeat] = -2.19f;
        head.bias().value.data[kRadius] = 1.0f;
        head.bias().value.data[kOffsetX] = 0.5f;
        head.bias().value.data[kOffsetY] = 0.5f;
    }

    DetectorConfig cfg_;
    nn::Sequential net_;
};

/// One training image with its hole annotations.
struct DetectSample {
    ImageU8 image;
    std::vector<data::HoleAnnotation> holes;
};

/// Disk parameters used as regression targets: mask centroid and area-equivalent radius.
struct DiskTarget {
    double cx, cy, r;
};

inline std::vector<DiskTarget> disk_targets(const DetectSample& s) {
    std::vector<DiskTarget> out;
    for (const auto& h : s.holes) {
        if (h.is_circle()) {
            out.push_back({h.circle().cx, h.circle().cy, h.circle().r});
            continue;
        }
        const auto m = hole_to_mask(h, s.image.rows(), s.image.cols());
        if (m.empty()) continue;
        double sx = 0, sy = 0;
        for (int r = 0; r < m.rows(); ++r)
            for (int c = 0; c < m.cols(); ++c)
                if (m.get(r, c)) {
                    sx += c + 0.5;
                    sy += r + 0.5;
                }
        const double a = static_cast<double>(m.area());
        out.push_back({sx / a, sy / a, std::sqrt(a / std::numbers::pi)});
    }
    return out;
}

struct DetectTargets {
    nn::Tensor heat;                      // 1 x 1 x h x w gaussian peaks
    std::vector<std::array<int, 2>> pos;  // (i, j) center cells
    std::vector<std::array<float, 3>> reg;  // radius, offset x, offset y (cell units)
};

inline DetectTargets build_targets(const std::vector<DiskTarget>& disks, int out_h, int out_w) {
    const double s = DetectorConfig::stride;
    DetectTargets t;
    t.heat = nn::Tensor(1, 1, out_h, out_w);
    for (const auto& d : disks) {
        const double gx = d.cx / s, gy = d.cy / s;
        const int j = static_cast<int>(std::floor(gx)), i = static_cast<int>(std::floor(gy));
        if (i < 0 || j < 0 || i >= out_h || j >= out_w) continue;
        const double sigma = std::max(0.5, 2.0 * d.r / s / 6.0);
        const int rad = static_cast<int>(std::ceil(3 * sigma));
        for (int y = std::max(0, i - rad); y <= std::min(out_h - 1, i + rad); ++y)
            for (int x = std::max(0, j - rad); x <= std::min(out_w - 1, j + rad); ++x) {
                const double g = std::exp(-((x - j) * (x - j) + (y - i) * (y - i)) / (2 * sigma * sigma));
                float& v = t.heat.at(0, 0, y, x);
                v = std::max(v, static_cast<float>(g));
            }
        t.heat.at(0, 0, i, j) = 1.0f;
        t.pos.push_back({i, j});
        t.reg.push_back({static_cast<float>(d.r / s), static_cast<float>(gx - j), static_cast<float>(gy - i)});
    }
    return t;
}

/// Focal loss on heat logits plus L1 on radius/offsets at centers. Writes the
/// gradient w.r.t. the head output into `grad` (sample `n`); returns the loss.
inline double detection_loss(const nn::Tensor& out, int n, const DetectTargets& t, nn::Tensor& grad) {
    constexpr double alpha = 2.0, beta = 4.0;
    const double norm = std::max<std::size_t>(1, t.pos.size());
    double loss = 0;
    for (int i = 0; i < out.h; ++i)
        for (int j = 0; j < out.w; ++j) {
            const double x = out.at(n, kHeat, i, j);
            const double p = std::clamp(1.0 / (1.0 + std::exp(-x)), 1e-6, 1 - 1e-6);
            const double y = t.heat.at(0, 0, i, j);
            double l, g;
            if (y == 1.0) {
                l = -std::pow(1 - p, alpha) * std::log(p);
                g = alpha * p * std::pow(1 - p, alpha) * std::log(p) - std::pow(1 - p, alpha + 1);
            } else {
                const double wneg = std::pow(1 - y, beta);
                l = -wneg * std::pow(p, alpha) * std::log(1 - p);
                g = -wneg * (alpha * std::pow(p, alpha) * (1 - p) * std::log(1 - p) - std::pow(p, alpha + 1));
            }
            loss += l / norm;
            grad.at(n, kHeat, i, j) += static_cast<float>(g / norm);
        }
    for (std::size_t k = 0; k < t.pos.size(); ++k) {
        const auto [i, j] = t.pos[k];
        for (int c = 0; c < 3; ++c) {
            const double diff = out.at(n, kRadius + c, i, j) - t.reg[k][static_cast<std::size_t>(c)];
            loss += std::abs(diff) / norm;
            grad.at(n, kRadius + c, i, j) += static_cast<float>((diff > 0 ? 1.0 : diff < 0 ? -1.0 : 0.0) / norm);
        }
    }
    return loss;
}

struct DetectTrainConfig {
    int epochs = 30;
    int batch = 8;
    float lr = 2e-3f;
    std::uint64_t seed = 1;
    bool flip = true;  // random horizontal/vertical flips
    std::function<void(int epoch, double loss)> on_epoch;
};

struct DetectTrainResult {
    std::vector<double> epoch_loss;
    double final_loss = 0;
    double seconds = 0;
};

namespace detail {

inline DetectSample flipped(const DetectSample& s, bool horizontal, bool vertical) {
    if (!horizontal && !vertical) return s;
    DetectSample o;
    const int H = s.image.rows(), W = s.image.cols();
    o.image = ImageU8(H, W, s.image.channels());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int ch = 0; ch < s.image.channels(); ++ch)
                o.image(y, x, ch) = s.image(vertical ? H - 1 - y : y, horizontal ? W - 1 - x : x, ch);
    for (auto h : s.holes) {
        if (h.is_circle()) {
            auto c = h.circle();
            if (horizontal) c.cx = W - c.cx;
            if (vertical) c.cy = H - c.cy;
            h.geometry = c;
        } else {
            auto p = h.polygon();
            for (auto& v : p.vertices) {
                if (horizontal) v.x = W - v.x;
                if (vertical) v.y = H - v.y;
            }
            h.geometry = p;
        }
        o.holes.push_back(std::move(h));
    }
    return o;
}

}  // namespace detail

/// Trains in place. Deterministic given the model seed, the config and the corpus order.
inline DetectTrainResult train_detector(Detector& model, const std::vector<DetectSample>& corpus,
                                        const DetectTrainConfig& cfg) {
    if (corpus.empty()) throw PreconditionError("detector training corpus is empty");
    const auto t0 = std::chrono::steady_clock::now();
    auto params = model.net().trainable_params();
    nn::Adam opt(params, {cfg.lr});
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    DetectTrainResult res;
    const int total_steps = cfg.epochs * static_cast<int>((corpus.size() + cfg.batch - 1) / cfg.batch);
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double epoch_loss = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
            opt.zero_grad();
            double batch_loss = 0;
            for (std::size_t k = b0; k < b1; ++k) {
                const bool fh = cfg.flip && rng.bernoulli(0.5), fv = cfg.flip && rng.bernoulli(0.5);
                const auto sample = detail::flipped(corpus[order[k]], fh, fv);
                const nn::Tensor x = Detector::prepare(sample.image);
                const nn::Tensor out = model.forward(x);
                const auto targets = build_targets(disk_targets(sample), out.h, out.w);
                nn::Tensor grad = out.zeros_like();
                batch_loss += detection_loss(out, 0, targets, grad);
                grad *= 1.0f / static_cast<float>(b1 - b0);
                model.net().backward(grad);
            }
            // Cosine decay to 5% of the base rate.
            const double frac = static_cast<double>(step++) / std::max(1, total_steps);
            opt.set_lr(static_cast<float>(cfg.lr * (0.05 + 0.95 * 0.5 * (1 + std::cos(std::numbers::pi * frac)))));
            opt.step();
            epoch_loss += batch_loss;
        }
        epoch_loss /= static_cast<double>(corpus.size());
        res.epoch_loss.push_back(epoch_loss);
        if (cfg.on_epoch) cfg.on_epoch(epoch, epoch_loss);
    }
    res.final_loss = res.epoch_loss.empty() ? 0 : res.epoch_loss.back();
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

/// Box or mask AP of the model over a labelled set.
inline ApResult evaluate_detector(Detector& model, const std::vector<DetectSample>& set, double iou_threshold = 0.5,
                                  MatchOn on = MatchOn::box) {
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<Instance>> truths;
    for (const auto& s : set) {
        dets.push_back(model.detect(s.image));
        std::vector<Instance> gt;
        for (const auto& h : s.holes) gt.push_back(instance_from_hole(h, s.image.rows(), s.image.cols()));
        truths.push_back(std::move(gt));
    }
    return evaluate_ap(dets, truths, iou_threshold, on);
}

}  // namespace corestack::detect
