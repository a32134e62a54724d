#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "corestack/common/error.hpp"
#include "corestack/common/image_io.hpp"
#include "corestack/common/log.hpp"
#include "corestack/common/raster.hpp"
#include "corestack/detect/geometry.hpp"

// Contextual residual aggregation stages. Everything here is model-free; the
// coarse generator lives in generator.hpp.

namespace corestack::inpaint {

using detect::BinaryMask;

struct CraConfig {
    int low_res = 512;  // generator resolution; padded sizes are multiples of this
    int grid = 32;      // attention cells per side
    double lambda = 10.0;
    double context_max_coverage = 0.5;  // cells below this hole fraction supply context

    void validate() const {
        if (low_res < 8) throw PreconditionError("low_res must be at least 8");
        if (grid < 1 || low_res % grid != 0) throw PreconditionError("grid must divide low_res");
        if (lambda <= 0) throw PreconditionError("lambda must be positive");
    }
};

inline void to_json(nlohmann::json& j, const CraConfig& c) {
    j = {{"low_res", c.low_res}, {"grid", c.grid}, {"lambda", c.lambda}, {"context_max_coverage", c.context_max_coverage}};
}

inline void from_json(const nlohmann::json& j, CraConfig& c) {
    c.low_res = j.value("low_res", c.low_res);
    c.grid = j.value("grid", c.grid);
    c.lambda = j.value("lambda", c.lambda);
    c.context_max_coverage = j.value("context_max_coverage", c.context_max_coverage);
}

// ---------------------------------------------------------------- preprocess

struct InpaintRequest {
    ImageU8 image;
    BinaryMask mask;
    int orig_rows = 0;
    int orig_cols = 0;
    int pad_bottom = 0;
    int pad_right = 0;
};

inline int next_multiple(int v, int m) { return std::max(m, (v + m - 1) / m * m); }

/// Reflect-pads image and mask at the bottom/right to multiples of `multiple`.
inline InpaintRequest preprocess(const ImageU8& image, const BinaryMask& mask, int multiple = 512) {
    if (image.rows() != mask.rows() || image.cols() != mask.cols())
        throw PreconditionError("mask " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                                " does not match image " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()));
    if (image.rows() < 1 || image.cols() < 1) throw PreconditionError("empty image");
    if (image.channels() != 3) throw PreconditionError("inpainting expects an RGB image");
    InpaintRequest req;
    req.orig_rows = image.rows();
    req.orig_cols = image.cols();
    req.pad_bottom = next_multiple(image.rows(), multiple) - image.rows();
    req.pad_right = next_multiple(image.cols(), multiple) - image.cols();
    if (req.pad_bottom == 0 && req.pad_right == 0) {
        req.image = image;
        req.mask = mask;
        return req;
    }
    // OpenCV reflect-101 needs at least two pixels along a padded axis.
    auto pad = [&](const cv::Mat& m) {
        cv::Mat src = m, out;
        const int border = (src.rows < 2 || src.cols < 2) ? cv::BORDER_REPLICATE : cv::BORDER_REFLECT_101;
        cv::copyMakeBorder(src, out, 0, req.pad_bottom, 0, req.pad_right, border);
        return out;
    };
    cv::Mat img(image.rows(), image.cols(), CV_8UC3, const_cast<std::uint8_t*>(image.data()));
    cv::Mat padded = pad(img);
    req.image = ImageU8(padded.rows, padded.cols, 3);
    std::copy_n(padded.ptr<std::uint8_t>(), req.image.size(), req.image.data());
    cv::Mat mk(mask.rows(), mask.cols(), CV_8UC1, const_cast<std::uint8_t*>(mask.bits().data()));
    cv::Mat mpad = pad(mk);
    ImageU8 mraw(mpad.rows, mpad.cols, 1);
    std::copy_n(mpad.ptr<std::uint8_t>(), mraw.size(), mraw.data());
    req.mask = BinaryMask(mraw);
    return req;
}

/// Crops a padded result back to the request's original size.
template <typename T>
Raster<T> crop_to_original(const Raster<T>& padded, const InpaintRequest& req) {
    return padded.crop(0, 0, req.orig_rows, req.orig_cols);
}

// ---------------------------------------------------------------- resampling

/// Bilinear resampling with corner-aligned coordinates: output index i maps to
/// source position i * (in - 1) / (out - 1).
inline ImageF resize_bilinear(const ImageF& in, int rows, int cols) {
    if (in.rows() < 1 || in.cols() < 1 || rows < 1 || cols < 1) throw PreconditionError("resize of empty raster");
    const int C = in.channels();
    auto coords = [](int n_out, int n_in) {
        std::vector<std::pair<int, double>> m(static_cast<std::size_t>(n_out));
        for (int i = 0; i < n_out; ++i) {
            const double s = n_out == 1 ? 0.0 : static_cast<double>(i) * (n_in - 1) / (n_out - 1);
            int i0 = std::min(static_cast<int>(std::floor(s)), n_in - 1);
            double f = s - i0;
            if (i0 == n_in - 1) f = 0.0;
            m[static_cast<std::size_t>(i)] = {i0, f};
        }
        return m;
    };
    const auto my = coords(rows, in.rows()), mx = coords(cols, in.cols());
    // Horizontal pass into a double buffer, then vertical.
    std::vector<double> tmp(static_cast<std::size_t>(in.rows()) * cols * C);
    for (int r = 0; r < in.rows(); ++r)
        for (int c = 0; c < cols; ++c) {
            const auto [x0, fx] = mx[static_cast<std::size_t>(c)];
            const int x1 = std::min(x0 + 1, in.cols() - 1);
            for (int ch = 0; ch < C; ++ch)
                tmp[(static_cast<std::size_t>(r) * cols + c) * C + ch] = (1 - fx) * in(r, x0, ch) + fx * in(r, x1, ch);
        }
    ImageF out(rows, cols, C);
    for (int r = 0; r < rows; ++r) {
        const auto [y0, fy] = my[static_cast<std::size_t>(r)];
        const int y1 = std::min(y0 + 1, in.rows() - 1);
        for (int c = 0; c < cols; ++c)
            for (int ch = 0; ch < C; ++ch) {
                const double a = tmp[(static_cast<std::size_t>(y0) * cols + c) * C + ch];
                const double b = tmp[(static_cast<std::size_t>(y1) * cols + c) * C + ch];
                out(r, c, ch) = static_cast<float>((1 - fy) * a + fy * b);
            }
    }
    return out;
}

inline ImageF downsample(const ImageF& image, int low_res = 512) { return resize_bilinear(image, low_res, low_res); }
inline ImageF downsample(const ImageU8& image, int low_res = 512) {
    return downsample(raster_cast<float>(image), low_res);
}
inline ImageF upsample(const ImageF& low, int rows, int cols) { return resize_bilinear(low, rows, cols); }

/// Hole mask at low resolution: a low pixel is a hole when at least half its
/// footprint is.
inline BinaryMask downsample_mask(const BinaryMask& mask, int low_res) {
    cv::Mat m(mask.rows(), mask.cols(), CV_8UC1, const_cast<std::uint8_t*>(mask.bits().data()));
    cv::Mat f, low;
    m.convertTo(f, CV_32F);
    cv::resize(f, low, cv::Size(low_res, low_res), 0, 0, cv::INTER_AREA);
    BinaryMask out(low_res, low_res);
    for (int r = 0; r < low_res; ++r)
        for (int c = 0; c < low_res; ++c)
            if (low.at<float>(r, c) >= 0.5f - 1e-6f) out.set(r, c);
    return out;
}

// ---------------------------------------------------------------- attention

/// Hole cells attend over context cells. Cell indices are row-major in the grid.
struct AttentionMap {
    int grid = 0;
    std::vector<double> coverage;    // hole fraction per cell
    std::vector<int> hole_cells;     // coverage > 0
    std::vector<int> context_cells;  // coverage < threshold
    Eigen::MatrixXd weights;         // hole_cells x context_cells

    /// Weight of context cell q for hole cell p; 0 when either is not in the map.
    double weight(int p, int q) const {
        const auto pi = std::find(hole_cells.begin(), hole_cells.end(), p);
        const auto qi = std::find(context_cells.begin(), context_cells.end(), q);
        if (pi == hole_cells.end() || qi == context_cells.end()) return 0.0;
        return weights(pi - hole_cells.begin(), qi - context_cells.begin());
    }
};

/// Per-cell hole fraction of a mask whose sides are multiples of `grid`.
inline std::vector<double> cell_coverage(const BinaryMask& mask, int grid) {
    if (mask.rows() % grid || mask.cols() % grid) throw PreconditionError("mask size is not a multiple of the grid");
    const int ch = mask.rows() / grid, cw = mask.cols() / grid;
    std::vector<double> cov(static_cast<std::size_t>(grid) * grid, 0.0);
    for (int r = 0; r < mask.rows(); ++r)
        for (int c = 0; c < mask.cols(); ++c)
            if (mask.get(r, c)) cov[static_cast<std::size_t>((r / ch) * grid + c / cw)] += 1.0;
    for (auto& v : cov) v /= static_cast<double>(ch) * cw;
    return cov;
}

/// 3x3-neighbourhood descriptors of mean-pooled, globally centred cell colours.
inline std::vector<Eigen::VectorXd> cell_descriptors(const ImageF& filled, int grid) {
    const int ch = filled.rows() / grid, cw = filled.cols() / grid, C = filled.channels();
    std::vector<Eigen::VectorXd> mean(static_cast<std::size_t>(grid) * grid, Eigen::VectorXd::Zero(C));
    Eigen::VectorXd global = Eigen::VectorXd::Zero(C);
    for (int r = 0; r < grid * ch; ++r)
        for (int c = 0; c < grid * cw; ++c)
            for (int k = 0; k < C; ++k) {
                mean[static_cast<std::size_t>((r / ch) * grid + c / cw)](k) += filled(r, c, k);
                global(k) += filled(r, c, k);
            }
    global /= static_cast<double>(grid) * grid * ch * cw;
    for (auto& m : mean) m = m / (static_cast<double>(ch) * cw) - global;
    std::vector<Eigen::VectorXd> desc(mean.size(), Eigen::VectorXd::Zero(9 * C));
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            auto& d = desc[static_cast<std::size_t>(gy * grid + gx)];
            int k = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx, ++k) {
                    const int ny = std::clamp(gy + dy, 0, grid - 1), nx = std::clamp(gx + dx, 0, grid - 1);
                    d.segment(k * C, C) = mean[static_cast<std::size_t>(ny * grid + nx)];
                }
        }
    return desc;
}

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    const double na = a.norm(), nb = b.norm();
    return (na == 0 || nb == 0) ? 0.0 : a.dot(b) / (na * nb);
}

/// Softmax of lambda-scaled cosine similarity over context cells, per hole cell.
inline AttentionMap attention_from_descriptors(const std::vector<Eigen::VectorXd>& desc, std::vector<double> coverage,
                                               int grid, const CraConfig& cfg) {
    if (coverage.size() != desc.size()) throw PreconditionError("attention: coverage and descriptor counts differ");
    AttentionMap a;
    a.grid = grid;
    a.coverage = std::move(coverage);
    const int cells = static_cast<int>(desc.size());
    for (int i = 0; i < cells; ++i) {
        const double cv = a.coverage[static_cast<std::size_t>(i)];
        if (cv > 0) a.hole_cells.push_back(i);
        if (cv < cfg.context_max_coverage) a.context_cells.push_back(i);
    }
    if (a.context_cells.empty()) {
        log::warn("attention: no context cells, falling back to uniform weights");
        for (int i = 0; i < cells; ++i) a.context_cells.push_back(i);
        a.weights = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(a.hole_cells.size()),
                                              static_cast<Eigen::Index>(a.context_cells.size()),
                                              1.0 / static_cast<double>(a.context_cells.size()));
        return a;
    }
    a.weights.resize(static_cast<Eigen::Index>(a.hole_cells.size()), static_cast<Eigen::Index>(a.context_cells.size()));
    for (std::size_t p = 0; p < a.hole_cells.size(); ++p) {
        const auto& dp = desc[static_cast<std::size_t>(a.hole_cells[p])];
        Eigen::VectorXd s(static_cast<Eigen::Index>(a.context_cells.size()));
        for (std::size_t q = 0; q < a.context_cells.size(); ++q)
            s(static_cast<Eigen::Index>(q)) = cfg.lambda * cosine(dp, desc[static_cast<std::size_t>(a.context_cells[q])]);
        s.array() -= s.maxCoeff();
        s = s.array().exp();
        a.weights.row(static_cast<Eigen::Index>(p)) = s / s.sum();
    }
    return a;
}

/// Attention over the low-resolution filled image. Cell coverage is measured on
/// `mask`, which may be the low-resolution mask or the full-resolution one.
inline AttentionMap compute_attention(const ImageF& filled_low, const BinaryMask& mask, const CraConfig& cfg) {
    cfg.validate();
    if (filled_low.rows() % cfg.grid || filled_low.cols() % cfg.grid)
        throw PreconditionError("attention: image size is not a multiple of the grid");
    for (float v : filled_low.pixels())
        if (!std::isfinite(v)) throw PreconditionError("attention: non-finite input");
    return attention_from_descriptors(cell_descriptors(filled_low, cfg.grid), cell_coverage(mask, cfg.grid), cfg.grid, cfg);
}

// ---------------------------------------------------------------- residuals

/// Signed pointwise difference image - blur.
inline ImageF contextual_residual(const ImageF& image, const ImageF& blur) {
    if (!image.same_shape(blur)) throw PreconditionError("residual: image and blur shapes differ");
    ImageF out(image.rows(), image.cols(), image.channels());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = image.data()[i] - blur.data()[i];
    return out;
}

inline ImageF contextual_residual(const ImageU8& image, const ImageF& blur) {
    return contextual_residual(raster_cast<float>(image), blur);
}

/// Zeroes residual pixels inside the hole, where the input holds no valid content.
inline void mask_out(ImageF& residual, const BinaryMask& mask) {
    for (int r = 0; r < residual.rows(); ++r)
        for (int c = 0; c < residual.cols(); ++c)
            if (mask.get(r, c))
                for (int k = 0; k < residual.channels(); ++k) residual(r, c, k) = 0.0f;
}

/// For each hole cell p, the full-resolution patch sum_q w[p,q] * R[q]. Other
/// cells are zero.
inline ImageF aggregate_residuals(const ImageF& residual, const AttentionMap& attn) {
    const int G = attn.grid;
    if (G < 1 || residual.rows() % G || residual.cols() % G)
        throw PreconditionError("residual " + std::to_string(residual.rows()) + "x" + std::to_string(residual.cols()) +
                                " is not a multiple of grid " + std::to_string(G));
    const int ch = residual.rows() / G, cw = residual.cols() / G, C = residual.channels();
    const Eigen::Index patch = static_cast<Eigen::Index>(ch) * cw * C;
    auto gather = [&](int cell, double* dst) {
        const int r0 = (cell / G) * ch, c0 = (cell % G) * cw;
        for (int r = 0; r < ch; ++r)
            for (int c = 0; c < cw; ++c)
                for (int k = 0; k < C; ++k) *dst++ = residual(r0 + r, c0 + c, k);
    };
    Eigen::MatrixXd ctx(static_cast<Eigen::Index>(attn.context_cells.size()), patch);
    std::vector<double> buf(static_cast<std::size_t>(patch));
    for (std::size_t q = 0; q < attn.context_cells.size(); ++q) {
        gather(attn.context_cells[q], buf.data());
        ctx.row(static_cast<Eigen::Index>(q)) = Eigen::Map<Eigen::RowVectorXd>(buf.data(), patch);
    }
    const Eigen::MatrixXd agg = attn.weights * ctx;
    ImageF out(residual.rows(), residual.cols(), C);
    for (std::size_t p = 0; p < attn.hole_cells.size(); ++p) {
        const int cell = attn.hole_cells[p];
        const int r0 = (cell / G) * ch, c0 = (cell % G) * cw;
        Eigen::Index i = 0;
        for (int r = 0; r < ch; ++r)
            for (int c = 0; c < cw; ++c)
                for (int k = 0; k < C; ++k) out(r0 + r, c0 + c, k) = static_cast<float>(agg(static_cast<Eigen::Index>(p), i++));
    }
    return out;
}

// ---------------------------------------------------------------- compose

/// Outside the mask the input is copied verbatim; inside, coarse + residual clamped to [0, 255].
inline ImageU8 compose(const ImageU8& image, const BinaryMask& mask, const ImageF& up_coarse, const ImageF& agg) {
    if (image.rows() != mask.rows() || image.cols() != mask.cols() || up_coarse.rows() != image.rows() ||
        up_coarse.cols() != image.cols() || !up_coarse.same_shape(agg) || up_coarse.channels() != image.channels())
        throw PreconditionError("compose: raster sizes differ");
    ImageU8 out = image;
    for (int r = 0; r < image.rows(); ++r)
        for (int c = 0; c < image.cols(); ++c) {
            if (!mask.get(r, c)) continue;
            for (int k = 0; k < image.channels(); ++k) {
                const float v = std::clamp(up_coarse(r, c, k) + agg(r, c, k), 0.0f, 255.0f);
                out(r, c, k) = static_cast<std::uint8_t>(std::lround(v));
            }
        }
    return out;
}

/// Peak signal-to-noise ratio over the pixels selected by `mask` (all channels).
inline double psnr_in_mask(const ImageU8& a, const ImageU8& b, const BinaryMask& mask) {
    if (!a.same_shape(b) || a.rows() != mask.rows() || a.cols() != mask.cols())
        throw PreconditionError("psnr: raster sizes differ");
    double se = 0;
    std::size_t n = 0;
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c) {
            if (!mask.get(r, c)) continue;
            for (int k = 0; k < a.channels(); ++k) {
                const double d = static_cast<double>(a(r, c, k)) - b(r, c, k);
                se += d * d;
                ++n;
            }
        }
    if (n == 0) throw PreconditionError("psnr: empty mask");
    const double mse = se / static_cast<double>(n);
    return mse == 0 ? 100.0 : 10.0 * std::log10(255.0 * 255.0 / mse);
}

}  // namespace corestack::inpaint
