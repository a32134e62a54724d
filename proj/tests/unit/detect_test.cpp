#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "corestack/common/log.hpp"
#include "corestack/detect/evaluate.hpp"
#include "corestack/detect/geometry.hpp"
#include "corestack/detect/model.hpp"
#include "corestack/ingest/synth.hpp"
#include "test_util.hpp"

using namespace corestack;
using namespace corestack::detect;

namespace {

bool pnpoly(const std::vector<data::Point>& v, double x, double y) {
    bool inside = false;
    for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++)
        if (((v[i].y > y) != (v[j].y > y)) && (x < (v[j].x - v[i].x) * (y - v[i].y) / (v[j].y - v[i].y) + v[i].x))
            inside = !inside;
    return inside;
}

Box random_box(Rng& rng, int grid = 8) {
    const double x0 = static_cast<double>(rng.range(0, grid - 1)), y0 = static_cast<double>(rng.range(0, grid - 1));
    return {x0, y0, x0 + static_cast<double>(rng.range(1, 4)), y0 + static_cast<double>(rng.range(1, 4))};
}

Detection box_det(Box b, double score) {
    Detection d;
    d.box = b;
    d.score = score;
    return d;
}

/// Repeatedly keep the best remaining detection and drop its overlaps.
std::vector<std::size_t> reference_nms(const std::vector<Detection>& dets, double thr) {
    std::vector<bool> alive(dets.size(), true);
    std::vector<std::size_t> kept;
    while (true) {
        std::size_t best = dets.size();
        for (std::size_t i = 0; i < dets.size(); ++i)
            if (alive[i] && (best == dets.size() || dets[i].score > dets[best].score)) best = i;
        if (best == dets.size()) break;
        kept.push_back(best);
        alive[best] = false;
        for (std::size_t i = 0; i < dets.size(); ++i)
            if (alive[i] && iou_box(dets[best].box, dets[i].box) > thr) alive[i] = false;
    }
    return kept;
}

/// Brute force: rerun matching for every score threshold, then integrate the
/// interpolated precision over each unit recall step.
double brute_force_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Instance>>& gts,
                      double thr) {
    std::size_t n_gt = 0;
    for (const auto& g : gts) n_gt += g.size();
    if (n_gt == 0) return 0;
    std::set<double, std::greater<>> thresholds;
    for (const auto& d : dets)
        for (const auto& x : d) thresholds.insert(x.score);
    std::vector<std::pair<double, double>> pr;  // recall, precision
    for (double t : thresholds) {
        struct Ref {
            double s;
            std::size_t img, k;
        };
        std::vector<Ref> sel;
        for (std::size_t i = 0; i < dets.size(); ++i)
            for (std::size_t k = 0; k < dets[i].size(); ++k)
                if (dets[i][k].score >= t) sel.push_back({dets[i][k].score, i, k});
        std::sort(sel.begin(), sel.end(), [](const Ref& a, const Ref& b) {
            if (a.s != b.s) return a.s > b.s;
            if (a.img != b.img) return a.img < b.img;
            return a.k < b.k;
        });
        std::vector<std::vector<bool>> used(gts.size());
        for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
        std::size_t tp = 0;
        for (const auto& r : sel) {
            int best = -1;
            double best_iou = 0;
            for (std::size_t g = 0; g < gts[r.img].size(); ++g) {
                const double iou = iou_box(dets[r.img][r.k].box, gts[r.img][g].box);
                if (!used[r.img][g] && iou >= thr && (best < 0 || iou > best_iou)) {
                    best = static_cast<int>(g);
                    best_iou = iou;
                }
            }
            if (best >= 0) {
                used[r.img][static_cast<std::size_t>(best)] = true;
                ++tp;
            }
        }
        pr.emplace_back(static_cast<double>(tp) / n_gt, static_cast<double>(tp) / sel.size());
    }
    double ap = 0;
    for (std::size_t m = 1; m <= n_gt; ++m) {
        const double level = static_cast<double>(m) / n_gt;
        double best = 0;
        for (const auto& [r, p] : pr)
            if (r >= level - 1e-12) best = std::max(best, p);
        ap += best / n_gt;
    }
    return ap;
}

}  // namespace

TEST(CircleMask, Examples) {
    EXPECT_EQ(circle_to_mask({5.5, 5.5, 2.0}, 11, 11).area(), 13u);
    EXPECT_EQ(circle_to_mask({5.5, 5.5, 0.0}, 11, 11).area(), 1u);
    EXPECT_EQ(circle_to_mask({5.2, 5.5, 0.0}, 11, 11).area(), 0u);
    EXPECT_EQ(circle_to_mask({-30, -30, 5}, 11, 11).area(), 0u);
}

TEST(CircleMask, MatchesPixelScanOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const int H = static_cast<int>(rng.range(1, 24)), W = static_cast<int>(rng.range(1, 24));
        const data::Circle c{rng.uniform(-5, W + 5), rng.uniform(-5, H + 5), rng.uniform(0, 10)};
        const auto m = circle_to_mask(c, H, W);
        std::size_t area = 0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const bool in = std::pow(x + 0.5 - c.cx, 2) + std::pow(y + 0.5 - c.cy, 2) <= c.r * c.r;
                ASSERT_EQ(m.get(y, x), in);
                area += in;
            }
        ASSERT_EQ(m.area(), area);
    }
}

TEST(CircleMask, AreaConvergesForLargeRadii) {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const double r = rng.uniform(10, 40);
        const auto m = circle_to_mask({rng.uniform(45, 55), rng.uniform(45, 55), r}, 100, 100);
        const double ideal = std::numbers::pi * r * r;
        EXPECT_LE(std::abs(static_cast<double>(m.area()) - ideal) / ideal, 0.05);
    }
}

TEST(PolygonMask, Examples) {
    data::Polygon square{{{0, 0}, {10, 0}, {10, 10}, {0, 10}}};
    EXPECT_EQ(polygon_to_mask(square, 10, 10).area(), 100u);
    data::Polygon tri{{{0, 0}, {4, 0}, {0, 4}}};
    std::size_t strict = 0;  // centers strictly inside the half-planes
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x)
            strict += (x + 0.5) + (y + 0.5) < 4.0;
    EXPECT_EQ(polygon_to_mask(tri, 10, 10).area(), strict);
    EXPECT_EQ(strict, 6u);
    data::Polygon flat{{{1, 1}, {5, 5}, {8, 8}}};
    EXPECT_EQ(polygon_to_mask(flat, 10, 10).area(), 0u);
    EXPECT_THROW(polygon_to_mask(data::Polygon{{{0, 0}, {1, 1}}}, 4, 4), PreconditionError);
}

TEST(PolygonMask, MatchesEvenOddOracleAndIgnoresOrientation) {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        const int H = static_cast<int>(rng.range(1, 20)), W = static_cast<int>(rng.range(1, 20));
        data::Polygon p;
        const int n = static_cast<int>(rng.range(3, 8));
        for (int k = 0; k < n; ++k) {
            // Mix of integer and half-integer vertices to hit pixel-center edges.
            const double x = static_cast<double>(rng.range(-2, 2 * W + 2)) / 2.0;
            const double y = static_cast<double>(rng.range(-2, 2 * H + 2)) / 2.0;
            p.vertices.push_back({x, y});
        }
        const auto m = polygon_to_mask(p, H, W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) ASSERT_EQ(m.get(y, x), pnpoly(p.vertices, x + 0.5, y + 0.5)) << trial;
        data::Polygon rev{{p.vertices.rbegin(), p.vertices.rend()}};
        ASSERT_EQ(polygon_to_mask(rev, H, W), m);
    }
}

TEST(Iou, BoxExamplesAndProperties) {
    EXPECT_DOUBLE_EQ(iou_box({0, 0, 2, 1}, {1, 0, 3, 1}), 1.0 / 3.0);
    EXPECT_DOUBLE_EQ(iou_box({0, 0, 2, 2}, {0, 0, 2, 2}), 1.0);
    EXPECT_DOUBLE_EQ(iou_box({0, 0, 1, 1}, {2, 2, 3, 3}), 0.0);
    Rng rng(4);
    for (int trial = 0; trial < 1000; ++trial) {
        const Box a = random_box(rng), b = random_box(rng);
        const double ab = iou_box(a, b);
        ASSERT_EQ(ab, iou_box(b, a));
        ASSERT_GE(ab, 0.0);
        ASSERT_LE(ab, 1.0);
        ASSERT_EQ(ab == 1.0, a == b);
        // Unit-cell oracle on the integer grid.
        int inter = 0, uni = 0;
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x) {
                const bool ia = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
                const bool ib = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
                inter += ia && ib;
                uni += ia || ib;
            }
        ASSERT_NEAR(ab, static_cast<double>(inter) / uni, 1e-12);
    }
}

TEST(Iou, MaskExamplesAndProperties) {
    const auto a = circle_to_mask({5, 5, 3}, 12, 12);
    const auto b = circle_to_mask({7, 5, 3}, 12, 12);
    EXPECT_DOUBLE_EQ(iou_mask(a, a), 1.0);
    EXPECT_EQ(iou_mask(a, b), iou_mask(b, a));
    EXPECT_DOUBLE_EQ(iou_mask(BinaryMask(4, 4), BinaryMask(4, 4)), 0.0);
    EXPECT_DOUBLE_EQ(iou_mask(a, circle_to_mask({-20, -20, 1}, 12, 12)), 0.0);
    EXPECT_THROW(iou_mask(a, BinaryMask(12, 11)), PreconditionError);
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        BinaryMask x(5, 6), y(5, 6);
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 6; ++c) {
                x.set(r, c, rng.bernoulli(0.4));
                y.set(r, c, rng.bernoulli(0.4));
            }
        int inter = 0, uni = 0;
        for (int r = 0; r < 5; ++r)
            for (int c = 0; c < 6; ++c) {
                inter += x.get(r, c) && y.get(r, c);
                uni += x.get(r, c) || y.get(r, c);
            }
        ASSERT_NEAR(iou_mask(x, y), uni ? static_cast<double>(inter) / uni : 0.0, 1e-12);
        ASSERT_EQ(iou_mask(x, y) == 1.0, x == y && !x.empty());
    }
}

TEST(Nms, Examples) {
    auto one = nms({box_det({0, 0, 2, 2}, 0.7)}, 0.5);
    ASSERT_EQ(one.size(), 1u);
    auto two = nms({box_det({0, 0, 2, 2}, 0.8), box_det({0, 0, 2, 2}, 0.9)}, 0.5);
    ASSERT_EQ(two.size(), 1u);
    EXPECT_DOUBLE_EQ(two[0].score, 0.9);
}

TEST(Nms, MatchesReferenceOnRandomSets) {
    Rng rng(6);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<Detection> dets;
        const int n = static_cast<int>(rng.range(0, 12));
        for (int i = 0; i < n; ++i) dets.push_back(box_det(random_box(rng, 5), static_cast<double>(rng.range(1, 5)) / 5.0));
        const double thr = rng.uniform(0.0, 0.8);
        const auto got = nms(dets, thr);
        const auto want = reference_nms(dets, thr);
        ASSERT_EQ(got.size(), want.size());
        for (std::size_t k = 0; k < want.size(); ++k) {
            ASSERT_EQ(got[k].box, dets[want[k]].box);
            ASSERT_EQ(got[k].score, dets[want[k]].score);
        }
    }
}

TEST(Ap, Examples) {
    const Instance gt{{0, 0, 10, 10}, {}};
    EXPECT_DOUBLE_EQ(evaluate_ap({{box_det({0, 0, 10, 12}, 0.9)}}, {{gt}}).ap, 1.0);  // IoU 0.83
    EXPECT_DOUBLE_EQ(evaluate_ap({{box_det({0, 0, 10, 10}, 0.9), box_det({20, 20, 30, 30}, 0.8)}}, {{gt}}).ap, 1.0);
    EXPECT_DOUBLE_EQ(evaluate_ap({{box_det({0, 0, 10, 10}, 0.8), box_det({20, 20, 30, 30}, 0.9)}}, {{gt}}).ap, 0.5);
    EXPECT_DOUBLE_EQ(evaluate_ap({{}}, {{gt}}).ap, 0.0);
    log::ScopedCapture cap;
    EXPECT_DOUBLE_EQ(evaluate_ap({{box_det({0, 0, 1, 1}, 0.9)}}, {{}}).ap, 0.0);
    EXPECT_EQ(cap.warnings().size(), 1u);
}

TEST(Ap, MatchesBruteForceEvaluator) {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n_img = static_cast<int>(rng.range(1, 3));
        std::vector<std::vector<Detection>> dets(static_cast<std::size_t>(n_img));
        std::vector<std::vector<Instance>> gts(static_cast<std::size_t>(n_img));
        int budget = static_cast<int>(rng.range(0, 20));
        for (int i = 0; i < n_img; ++i) {
            const int n_gt = static_cast<int>(rng.range(0, 4));
            for (int g = 0; g < n_gt; ++g) gts[static_cast<std::size_t>(i)].push_back({random_box(rng, 5), {}});
        }
        while (budget-- > 0) {
            auto& d = dets[rng.below(static_cast<std::uint64_t>(n_img))];
            d.push_back(box_det(random_box(rng, 5), static_cast<double>(rng.range(1, 6)) / 6.0));
        }
        const double thr = rng.bernoulli(0.5) ? 0.5 : 0.3;
        log::ScopedCapture cap;
        const auto got = evaluate_ap(dets, gts, thr);
        ASSERT_NEAR(got.ap, brute_force_ap(dets, gts, thr), 1e-9) << trial;
    }
}

TEST(Ap, MaskMatching) {
    Instance gt;
    gt.mask = circle_to_mask({10, 10, 5}, 20, 20);
    gt.box = *mask_box(gt.mask);
    Detection d;
    d.mask = circle_to_mask({10.5, 10, 5}, 20, 20);
    d.box = *mask_box(d.mask);
    d.score = 0.7;
    EXPECT_DOUBLE_EQ(evaluate_ap({{d}}, {{gt}}, 0.5, MatchOn::mask).ap, 1.0);
    d.mask = circle_to_mask({17, 10, 5}, 20, 20);
    EXPECT_DOUBLE_EQ(evaluate_ap({{d}}, {{gt}}, 0.5, MatchOn::mask).ap, 0.0);
}

TEST(UnionMask, EmptyAndCutoff) {
    EXPECT_TRUE(union_mask({}, 8, 8).empty());
    Detection a;
    a.mask = circle_to_mask({2, 2, 1.5}, 8, 8);
    a.score = 0.9;
    Detection b;
    b.mask = circle_to_mask({6, 6, 1.5}, 8, 8);
    b.score = 0.3;
    EXPECT_EQ(union_mask({a, b}, 8, 8), a.mask);
    EXPECT_EQ(union_mask({a, b}, 8, 8, 0.2).area(), a.mask.area() + b.mask.area());
}

TEST(DetectorTargets, CenterCellAndRegression) {
    const auto t = build_targets({{22.0, 30.0, 8.0}}, 16, 16);
    ASSERT_EQ(t.pos.size(), 1u);
    EXPECT_EQ(t.pos[0][0], 7);
    EXPECT_EQ(t.pos[0][1], 5);
    EXPECT_FLOAT_EQ(t.reg[0][0], 2.0f);
    EXPECT_FLOAT_EQ(t.reg[0][1], 0.5f);
    EXPECT_FLOAT_EQ(t.reg[0][2], 0.5f);
    EXPECT_EQ(t.heat.at(0, 0, 7, 5), 1.0f);
    EXPECT_LT(t.heat.at(0, 0, 7, 6), 1.0f);
    EXPECT_GT(t.heat.at(0, 0, 7, 6), 0.0f);
}

TEST(DetectorLoss, GradientMatchesFiniteDifferences) {
    Rng rng(8);
    nn::Tensor out(1, kHeadChannels, 6, 6);
    for (auto& v : out.data) v = static_cast<float>(rng.normal());
    const auto t = build_targets({{9.0, 10.0, 6.0}, {17.0, 4.0, 3.0}}, 6, 6);
    nn::Tensor grad = out.zeros_like();
    detection_loss(out, 0, t, grad);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const float saved = out.data[i];
        nn::Tensor scratch = out.zeros_like();
        out.data[i] = saved + 1e-3f;
        const double lp = detection_loss(out, 0, t, scratch);
        out.data[i] = saved - 1e-3f;
        const double lm = detection_loss(out, 0, t, scratch);
        out.data[i] = saved;
        EXPECT_NEAR((lp - lm) / 2e-3, grad.data[i], 2e-2) << i;
    }
}

TEST(Detector, DecodePlacesDiskAndDropsPadding) {
    Detector det({16, 1, 0.3, 0.3, 10});
    nn::Tensor out(1, kHeadChannels, 8, 8, 0.0f);
    for (auto& v : out.data) v = -5.0f;
    auto set_peak = [&](int i, int j, float logit, float r, float ox, float oy) {
        out.at(0, kHeat, i, j) = logit;
        out.at(0, kRadius, i, j) = r;
        out.at(0, kOffsetX, i, j) = ox;
        out.at(0, kOffsetY, i, j) = oy;
    };
    set_peak(2, 3, 3.0f, 1.5f, 0.25f, 0.5f);
    set_peak(7, 7, 2.0f, 1.0f, 0.5f, 0.5f);  // center (30, 30) lies outside a 28x28 image
    const auto dets = det.decode(out, 28, 28);
    ASSERT_EQ(dets.size(), 1u);
    EXPECT_EQ(dets[0].mask, circle_to_mask({13.0, 10.0, 6.0}, 28, 28));
    EXPECT_EQ(dets[0].box, *mask_box(dets[0].mask));
    EXPECT_NEAR(dets[0].score, 1.0 / (1.0 + std::exp(-3.0)), 1e-6);
}

TEST(Detector, HeadOutputUnaffectedByRowsBelowReceptiveField) {
    Detector det({16, 3});
    auto cfg = ingest::SynthCorpusConfig{};
    cfg.n_wells = 3;
    cfg.images_per_well = 1;
    cfg.height = 256;
    cfg.width = 64;
    const auto corpus = ingest::synth_corpus(cfg);
    const auto& img = corpus.images[0].pixels;
    const auto top = img.crop_rows(0, 128);
    const nn::Tensor a = det.forward(Detector::prepare(top));
    const nn::Tensor b = det.forward(Detector::prepare(img));
    // The trunk sees ~80 px; compare output rows well clear of the crop edge.
    int differing = 0;
    for (int c = 0; c < a.c; ++c)
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < a.w; ++j) differing += a.at(0, c, i, j) != b.at(0, c, i, j);
    EXPECT_EQ(differing, 0);
}

TEST(Detector, CheckpointRoundTrip) {
    corestack::testing::TempDir dir;
    Detector det({16, 5});
    det.save(dir.path() / "d.ckpt");
    Detector back = Detector::load(dir.path() / "d.ckpt");
    EXPECT_EQ(back.config().width, 16);
    ImageU8 img(40, 36, 3, 90);
    EXPECT_EQ(det.forward(Detector::prepare(img)).data, back.forward(Detector::prepare(img)).data);
}

TEST(Detector, TrainingIsDeterministicAndRejectsEmptyCorpus) {
    ingest::SynthCorpusConfig cfg;
    cfg.n_wells = 3;
    cfg.images_per_well = 2;
    cfg.height = 48;
    cfg.width = 48;
    cfg.holes_per_image = {1, 2};
    cfg.hole_radius_frac = {0.1, 0.2};
    const auto corpus = ingest::synth_corpus(cfg);
    std::vector<DetectSample> samples;
    for (const auto& img : corpus.images) samples.push_back({img.pixels, corpus.annotations.holes_of(img.image_id)});
    DetectTrainConfig tc;
    tc.epochs = 2;
    tc.batch = 2;
    Detector a({8, 1}), b({8, 1});
    const auto ra = train_detector(a, samples, tc);
    const auto rb = train_detector(b, samples, tc);
    EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
    EXPECT_TRUE(std::isfinite(ra.final_loss));
    EXPECT_THROW(train_detector(a, {}, tc), PreconditionError);
}
