#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "corestack/common/log.hpp"
#include "corestack/common/rng.hpp"
#include "corestack/detect/geometry.hpp"
#include "corestack/inpaint/cra.hpp"
#include "corestack/nn/checkpoint.hpp"
#include "corestack/nn/layers.hpp"
#include "corestack/nn/optim.hpp"

namespace corestack::inpaint {

inline constexpr const char* kGeneratorKind = "corestack.generator";

struct GeneratorConfig {
    CraConfig cra;
    int width = 32;
    std::uint64_t seed = 1;
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& c) {
    j = {{"cra", c.cra}, {"width", c.width}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, GeneratorConfig& c) {
    if (j.contains("cra")) c.cra = j.at("cra").get<CraConfig>();
    c.width = j.value("width", c.width);
    c.seed = j.value("seed", c.seed);
}

namespace detail {

/// RGB in [-1, 1] with the hole zeroed, plus the mask as a fourth channel.
inline nn::Tensor generator_input(const ImageF& low, const BinaryMask& mask_low) {
    const int L = low.rows();
    nn::Tensor x(1, 4, L, low.cols());
    for (int r = 0; r < L; ++r)
        for (int c = 0; c < low.cols(); ++c) {
            const bool hole = mask_low.get(r, c);
            for (int k = 0; k < 3; ++k) x.at(0, k, r, c) = hole ? 0.0f : low(r, c, k) / 127.5f - 1.0f;
            x.at(0, 3, r, c) = hole ? 1.0f : 0.0f;
        }
    return x;
}

inline ImageF tensor_to_image(const nn::Tensor& t) {
    ImageF out(t.h, t.w, 3);
    for (int r = 0; r < t.h; ++r)
        for (int c = 0; c < t.w; ++c)
            for (int k = 0; k < 3; ++k) out(r, c, k) = (t.at(0, k, r, c) + 1.0f) * 127.5f;
    return out;
}

}  // namespace detail

/// Gated-convolution encoder-decoder with a dilated bottleneck, run at low_res.
class Generator {
public:
    explicit Generator(GeneratorConfig cfg = {}) : cfg_(cfg) {
        cfg_.cra.validate();
        if (cfg_.cra.low_res % 4) throw PreconditionError("generator low_res must be a multiple of 4");
        build();
    }

    const GeneratorConfig& config() const { return cfg_; }
    nn::Sequential& net() { return net_; }
    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; }

    nn::Tensor forward(const nn::Tensor& x) { return net_.forward(x); }

    void save(const std::filesystem::path& path) {
        nlohmann::json c = cfg_;
        c["trained"] = trained_;
        nn::save_checkpoint(path, kGeneratorKind, c, net_.named_params());
    }

    static Generator load(const std::filesystem::path& path) {
        const auto ck = nn::load_checkpoint(path, kGeneratorKind);
        Generator g(ck.config().get<GeneratorConfig>());
        nn::restore_params(ck, g.net_.named_params());
        g.trained_ = ck.config().value("trained", false);
        return g;
    }

private:
    void build() {
        Rng rng(cfg_.seed);
        const int c = cfg_.width;
        using nn::Conv2dSpec;
        using nn::GatedConv2d;
        net_.emplace<GatedConv2d>(Conv2dSpec{4, c, 5}, rng);
        net_.emplace<GatedConv2d>(Conv2dSpec{c, 2 * c, 3, 2}, rng);
        net_.emplace<GatedConv2d>(Conv2dSpec{2 * c, 2 * c, 3}, rng);
        net_.emplace<GatedConv2d>(Conv2dSpec{2 * c, 4 * c, 3, 2}, rng);
        for (int d : {2, 4, 8}) net_.emplace<GatedConv2d>(Conv2dSpec{4 * c, 4 * c, 3, 1, -1, d}, rng);
        net_.emplace<GatedConv2d>(Conv2dSpec{4 * c, 4 * c, 3}, rng);
        net_.emplace<nn::Upsample>(2);
        net_.emplace<GatedConv2d>(Conv2dSpec{4 * c, 2 * c, 3}, rng);
        net_.emplace<nn::Upsample>(2);
        net_.emplace<GatedConv2d>(Conv2dSpec{2 * c, c, 3}, rng);
        net_.emplace<nn::Conv2d>(Conv2dSpec{c, 3, 3}, rng);
        net_.add(nn::tanh_act());
    }

    GeneratorConfig cfg_;
    nn::Sequential net_;
    bool trained_ = false;
};

/// Spectrally normalized patch discriminator over RGB + mask.
inline nn::Sequential make_discriminator(int width, std::uint64_t seed) {
    Rng rng(seed);
    nn::Sequential d;
    using nn::Conv2d;
    using nn::Conv2dSpec;
    d.emplace<Conv2d>(Conv2dSpec{4, width, 5, 2, -1, 1, true, true}, rng);
    d.add(nn::leaky_relu());
    d.emplace<Conv2d>(Conv2dSpec{width, 2 * width, 5, 2, -1, 1, true, true}, rng);
    d.add(nn::leaky_relu());
    d.emplace<Conv2d>(Conv2dSpec{2 * width, 4 * width, 5, 2, -1, 1, true, true}, rng);
    d.add(nn::leaky_relu());
    d.emplace<Conv2d>(Conv2dSpec{4 * width, 1, 3, 1, -1, 1, true, true}, rng);
    return d;
}

/// Raw generator prediction at low resolution, in [0, 255]. Values outside the
/// hole are re-predicted and get discarded at composition.
inline ImageF coarse_inpaint(Generator& gen, const ImageF& low, const BinaryMask& mask_low) {
    if (!gen.trained()) throw PreconditionError("generator has not been trained");
    const int L = gen.config().cra.low_res;
    if (low.rows() != L || low.cols() != L || low.channels() != 3 || mask_low.rows() != L || mask_low.cols() != L)
        throw PreconditionError("coarse_inpaint expects " + std::to_string(L) + "x" + std::to_string(L) + " RGB input and mask");
    return detail::tensor_to_image(gen.forward(detail::generator_input(low, mask_low)));
}

/// Low-resolution image with hole pixels replaced by `fill`.
inline ImageF composite_low(const ImageF& low, const BinaryMask& mask_low, const ImageF& fill) {
    ImageF out = low;
    for (int r = 0; r < low.rows(); ++r)
        for (int c = 0; c < low.cols(); ++c)
            if (mask_low.get(r, c))
                for (int k = 0; k < low.channels(); ++k) out(r, c, k) = fill(r, c, k);
    return out;
}

/// Intermediate rasters of one run, all at padded size or low resolution.
struct InpaintTrace {
    InpaintRequest request;
    ImageF low;
    BinaryMask mask_low;
    ImageF coarse;  // raw generator output, low resolution
    AttentionMap attention;
    ImageF residual;  // masked to context pixels
    ImageF aggregated;
    ImageF up_coarse;
    ImageU8 output;  // padded size
};

inline InpaintTrace inpaint_trace(Generator& gen, const ImageU8& image, const BinaryMask& mask) {
    if (!gen.trained()) throw PreconditionError("generator has not been trained");
    const auto& cra = gen.config().cra;
    InpaintTrace t;
    t.request = preprocess(image, mask, cra.low_res);
    const auto& req = t.request;
    const int H = req.image.rows(), W = req.image.cols();
    t.low = downsample(req.image, cra.low_res);
    t.mask_low = downsample_mask(req.mask, cra.low_res);
    t.coarse = coarse_inpaint(gen, t.low, t.mask_low);
    t.attention = compute_attention(composite_low(t.low, t.mask_low, t.coarse), req.mask, cra);
    t.residual = contextual_residual(req.image, upsample(t.low, H, W));
    mask_out(t.residual, req.mask);
    t.aggregated = aggregate_residuals(t.residual, t.attention);
    t.up_coarse = upsample(t.coarse, H, W);
    t.output = compose(req.image, req.mask, t.up_coarse, t.aggregated);
    return t;
}

/// Full pipeline, cropped back to the input size.
inline ImageU8 inpaint(Generator& gen, const ImageU8& image, const BinaryMask& mask) {
    const auto t = inpaint_trace(gen, image, mask);
    return crop_to_original(t.output, t.request);
}

/// Harmonic fill of the hole pixels (Jacobi iterations from the context mean).
inline ImageF diffusion_fill(const ImageF& img, const BinaryMask& mask, int iterations = 0) {
    const int H = img.rows(), W = img.cols(), C = img.channels();
    ImageF cur = img;
    std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
    std::size_t n = 0;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            if (!mask.get(r, c)) {
                for (int k = 0; k < C; ++k) mean[static_cast<std::size_t>(k)] += img(r, c, k);
                ++n;
            }
    for (auto& m : mean) m = n ? m / static_cast<double>(n) : 127.5;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            if (mask.get(r, c))
                for (int k = 0; k < C; ++k) cur(r, c, k) = static_cast<float>(mean[static_cast<std::size_t>(k)]);
    if (n == 0) return cur;
    if (iterations <= 0) iterations = 2 * std::max(H, W);
    ImageF next = cur;
    for (int it = 0; it < iterations; ++it) {
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) {
                if (!mask.get(r, c)) continue;
                for (int k = 0; k < C; ++k) {
                    double s = 0;
                    int cnt = 0;
                    if (r > 0) s += cur(r - 1, c, k), ++cnt;
                    if (r + 1 < H) s += cur(r + 1, c, k), ++cnt;
                    if (c > 0) s += cur(r, c - 1, k), ++cnt;
                    if (c + 1 < W) s += cur(r, c + 1, k), ++cnt;
                    next(r, c, k) = static_cast<float>(s / cnt);
                }
            }
        std::swap(cur, next);
    }
    return cur;
}

/// Model-free reference: diffusion-filled low-resolution image, upsampled into
/// the hole with no residual.
inline ImageU8 blur_fill_baseline(const ImageU8& image, const BinaryMask& mask, int low_res) {
    const auto req = preprocess(image, mask, low_res);
    const int H = req.image.rows(), W = req.image.cols();
    const ImageF low = downsample(req.image, low_res);
    const BinaryMask mask_low = downsample_mask(req.mask, low_res);
    const ImageF up = upsample(diffusion_fill(low, mask_low), H, W);
    return crop_to_original(compose(req.image, req.mask, up, ImageF(H, W, 3)), req);
}

// ---------------------------------------------------------------- training

struct InpaintTrainConfig {
    int steps = 2000;
    int batch = 4;
    float lr = 1e-3f;
    float adv_weight = 0.01f;  // 0 disables the discriminator
    float hole_weight = 1.0f;
    float valid_weight = 0.5f;
    int disc_width = 16;
    std::uint64_t seed = 1;
    int holes_min = 1, holes_max = 3;
    double radius_min = 0.05, radius_max = 0.15;  // fraction of the shorter image side
    std::array<std::uint8_t, 3> hole_fill{12, 12, 12};
    std::function<void(int step, double rec, double adv, double disc)> on_step;
};

struct InpaintTrainResult {
    std::vector<double> rec_loss;  // per step, batch mean
    double final_loss = 0;
    double seconds = 0;
};

namespace detail {

/// Random plug-hole style circles over an H x W image.
inline BinaryMask random_hole_mask(int H, int W, const InpaintTrainConfig& cfg, Rng& rng) {
    BinaryMask m(H, W);
    const int n = static_cast<int>(rng.range(cfg.holes_min, cfg.holes_max));
    const double side = std::min(H, W);
    for (int k = 0; k < n; ++k) {
        const data::Circle c{rng.uniform(0, W), rng.uniform(0, H), rng.uniform(cfg.radius_min, cfg.radius_max) * side};
        m |= detect::circle_to_mask(c, H, W);
    }
    return m;
}

inline ImageU8 flip(const ImageU8& in, bool h, bool v) {
    if (!h && !v) return in;
    ImageU8 out(in.rows(), in.cols(), in.channels());
    for (int r = 0; r < in.rows(); ++r)
        for (int c = 0; c < in.cols(); ++c)
            for (int k = 0; k < in.channels(); ++k)
                out(r, c, k) = in(v ? in.rows() - 1 - r : r, h ? in.cols() - 1 - c : c, k);
    return out;
}

/// Hinge-loss gradient of mean(relu(1 - s * o)) w.r.t. o, s = +1 for real and -1 for fake.
inline double hinge(const nn::Tensor& o, float s, nn::Tensor& grad, float scale) {
    double loss = 0;
    const double n = static_cast<double>(o.numel());
    for (std::size_t i = 0; i < o.numel(); ++i) {
        const double m = 1.0 - s * o.data[i];
        if (m > 0) {
            loss += m / n;
            grad.data[i] = static_cast<float>(-s * scale / n);
        } else {
            grad.data[i] = 0.0f;
        }
    }
    return loss;
}

}  // namespace detail

/// One training example as the pipeline would see it: low-res holed input,
/// low-res mask, and low-res clean target.
struct InpaintSample {
    ImageF low;
    BinaryMask mask_low;
    ImageF target;
};

inline InpaintSample make_inpaint_sample(const ImageU8& clean, const BinaryMask& mask, int low_res,
                                         std::array<std::uint8_t, 3> hole_fill) {
    ImageU8 holed = clean;
    for (int r = 0; r < clean.rows(); ++r)
        for (int c = 0; c < clean.cols(); ++c)
            if (mask.get(r, c))
                for (int k = 0; k < 3; ++k) holed(r, c, k) = hole_fill[static_cast<std::size_t>(k)];
    return {downsample(holed, low_res), downsample_mask(mask, low_res), downsample(clean, low_res)};
}

/// Trains in place with random circular holes. `gen` may hold pretrained
/// weights to fine-tune. Deterministic given the seeds and corpus order.
inline InpaintTrainResult train_inpaint(Generator& gen, const std::vector<ImageU8>& corpus, const InpaintTrainConfig& cfg) {
    if (corpus.empty()) throw PreconditionError("inpainting training corpus is empty");
    for (const auto& img : corpus)
        if (img.channels() != 3 || img.rows() < 2 || img.cols() < 2) throw PreconditionError("training images must be RGB, at least 2x2");
    if (cfg.steps < 0 || cfg.batch < 1) throw PreconditionError("invalid training schedule");
    const auto t0 = std::chrono::steady_clock::now();
    const int L = gen.config().cra.low_res;
    Rng rng(cfg.seed);
    nn::Adam gopt(gen.net().trainable_params(), {cfg.lr, 0.5f, 0.999f});
    nn::Sequential disc = make_discriminator(cfg.disc_width, mix64(cfg.seed, 0xD15C));
    nn::Adam dopt(disc.trainable_params(), {cfg.lr, 0.5f, 0.999f});
    const bool adversarial = cfg.adv_weight > 0;
    InpaintTrainResult res;
    for (int step = 0; step < cfg.steps; ++step) {
        gopt.zero_grad();
        std::vector<nn::Tensor> fakes, reals;
        double rec = 0, adv = 0, dl = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& src = corpus[rng.below(corpus.size())];
            const ImageU8 img = detail::flip(src, rng.bernoulli(0.5), rng.bernoulli(0.5));
            const auto s = make_inpaint_sample(img, detail::random_hole_mask(img.rows(), img.cols(), cfg, rng), L, cfg.hole_fill);
            const nn::Tensor x = detail::generator_input(s.low, s.mask_low);
            const nn::Tensor y = gen.forward(x);
            nn::Tensor grad = y.zeros_like();
            nn::Tensor real(1, 4, L, L), fake(1, 4, L, L);
            const double n = 3.0 * L * L;
            for (int r = 0; r < L; ++r)
                for (int c = 0; c < L; ++c) {
                    const bool hole = s.mask_low.get(r, c);
                    const float w = hole ? cfg.hole_weight : cfg.valid_weight;
                    for (int k = 0; k < 3; ++k) {
                        const float t = s.target(r, c, k) / 127.5f - 1.0f;
                        const float d = y.at(0, k, r, c) - t;
                        rec += w * std::abs(d) / n / cfg.batch;
                        grad.at(0, k, r, c) = static_cast<float>(w * (d > 0 ? 1 : d < 0 ? -1 : 0) / n / cfg.batch);
                        real.at(0, k, r, c) = t;
                        fake.at(0, k, r, c) = hole ? y.at(0, k, r, c) : t;
                    }
                    real.at(0, 3, r, c) = fake.at(0, 3, r, c) = hole ? 1.0f : 0.0f;
                }
            if (adversarial) {
                const nn::Tensor o = disc.forward(fake);
                adv += -std::accumulate(o.data.begin(), o.data.end(), 0.0) / static_cast<double>(o.numel()) / cfg.batch;
                const nn::Tensor dout(o.n, o.c, o.h, o.w, -cfg.adv_weight / static_cast<float>(o.numel() * cfg.batch));
                const nn::Tensor dfake = disc.backward(dout);
                for (int r = 0; r < L; ++r)
                    for (int c = 0; c < L; ++c)
                        if (s.mask_low.get(r, c))
                            for (int k = 0; k < 3; ++k) grad.at(0, k, r, c) += dfake.at(0, k, r, c);
                fakes.push_back(std::move(fake));
                reals.push_back(std::move(real));
            }
            gen.net().backward(grad);
        }
        gopt.step();
        if (adversarial) {
            dopt.zero_grad();
            const float scale = 1.0f / static_cast<float>(cfg.batch);
            for (std::size_t i = 0; i < fakes.size(); ++i) {
                for (auto [t, sign] : {std::pair{&reals[i], 1.0f}, std::pair{&fakes[i], -1.0f}}) {
                    const nn::Tensor o = disc.forward(*t);
                    nn::Tensor g = o.zeros_like();
                    dl += detail::hinge(o, sign, g, scale) * scale;
                    disc.backward(g);
                }
            }
            dopt.step();
        }
        res.rec_loss.push_back(rec);
        if (cfg.on_step) cfg.on_step(step, rec, adv, dl);
    }
    gen.mark_trained();
    res.final_loss = res.rec_loss.empty() ? 0 : res.rec_loss.back();
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace corestack::inpaint
