#pragma once

#include <cmath>
#include <vector>

#include <opencv2/imgproc.hpp>

#include "corestack/common/error.hpp"
#include "corestack/common/raster.hpp"
#include "corestack/common/rng.hpp"
#include "corestack/texture/math.hpp"

// Feature extractor producing the 7 x 7 x 2048 map the heads consume. No
// pretrained ImageNet weights ship with this build, so the extractor is a fixed
// filter bank (colour, local contrast, Gabor energy, LoG, gradient) pooled on
// the 7 x 7 grid, followed by a seeded 1 x 1 projection to 2048 channels with
// ReLU. The projection is the backbone's last stage: frozen by default,
// trainable when fine-tuning.

namespace corestack::texture {

inline constexpr int kInputSize = 224;
inline constexpr int kGridSize = 7;
inline constexpr int kPositions = kGridSize * kGridSize;
inline constexpr int kFeatureDim = 2048;

namespace detail {

inline constexpr int kGaborScales = 3;
inline constexpr int kGaborOrientations = 4;
inline constexpr double kLogSigmas[] = {1.0, 2.0, 4.0};

/// 224 x 224 single-channel float -> 7 x 7 block means.
inline cv::Mat pool(const cv::Mat& m) {
    cv::Mat out;
    cv::resize(m, out, cv::Size(kGridSize, kGridSize), 0, 0, cv::INTER_AREA);
    return out;
}

inline cv::Mat compress(const cv::Mat& m) {
    cv::Mat out;
    cv::log(1.0 + 10.0 * m, out);
    return out;
}

}  // namespace detail

/// Channels produced by filter_features.
inline constexpr int kFilterChannels = 3 + 1 + 3 * 4 + 3 + 1;

namespace detail {

/// Pooled raw filter-bank responses, kPositions x kFilterChannels (row = grid position, row-major).
inline Mat<float> raw_filter_features(const ImageU8& img) {
    if (img.rows() != kInputSize || img.cols() != kInputSize || img.channels() != 3)
        throw PreconditionError("backbone expects a 224x224 RGB input, got " + std::to_string(img.rows()) + "x" +
                                std::to_string(img.cols()) + "x" + std::to_string(img.channels()));
    cv::Mat rgb(kInputSize, kInputSize, CV_8UC3, const_cast<std::uint8_t*>(img.data()));
    cv::Mat f;
    rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
    std::vector<cv::Mat> ch;
    cv::split(f, ch);
    std::vector<cv::Mat> maps;
    for (const auto& c : ch) maps.push_back(detail::pool(c));
    const cv::Mat gray = (ch[0] + ch[1] + ch[2]) / 3.0;
    {
        const cv::Mat m = detail::pool(gray), m2 = detail::pool(gray.mul(gray));
        cv::Mat var = cv::max(m2 - m.mul(m), 0.0), sd;
        cv::sqrt(var, sd);
        maps.push_back(detail::compress(sd));
    }
    // Gabor energy at sigma 1.5, 3, 6: a fixed small kernel on a Gaussian pyramid.
    {
        constexpr double sigma = 1.5;
        constexpr int k = 11;
        cv::Mat level = gray;
        for (int s = 0; s < detail::kGaborScales; ++s) {
            if (s > 0) cv::pyrDown(level, level);
            for (int o = 0; o < detail::kGaborOrientations; ++o) {
                const double theta = o * CV_PI / detail::kGaborOrientations;
                const cv::Mat even = cv::getGaborKernel({k, k}, sigma, theta, 2.5 * sigma, 1.0, 0.0, CV_32F);
                const cv::Mat odd = cv::getGaborKernel({k, k}, sigma, theta, 2.5 * sigma, 1.0, CV_PI / 2, CV_32F);
                cv::Mat re, ro, mag;
                cv::filter2D(level, re, CV_32F, even, {-1, -1}, 0, cv::BORDER_REFLECT_101);
                cv::filter2D(level, ro, CV_32F, odd, {-1, -1}, 0, cv::BORDER_REFLECT_101);
                cv::magnitude(re, ro, mag);
                maps.push_back(detail::compress(detail::pool(mag) / (sigma * sigma)));
            }
        }
    }
    for (double sigma : detail::kLogSigmas) {
        cv::Mat blur, lap;
        cv::GaussianBlur(gray, blur, {0, 0}, sigma, sigma, cv::BORDER_REFLECT_101);
        cv::Laplacian(blur, lap, CV_32F, 3, sigma * sigma);
        maps.push_back(detail::compress(detail::pool(cv::abs(lap))));
    }
    {
        cv::Mat gx, gy, mag;
        cv::Sobel(gray, gx, CV_32F, 1, 0);
        cv::Sobel(gray, gy, CV_32F, 0, 1);
        cv::magnitude(gx, gy, mag);
        maps.push_back(detail::compress(detail::pool(mag)));
    }
    Mat<float> out(kPositions, kFilterChannels);
    for (int c = 0; c < kFilterChannels; ++c)
        for (int i = 0; i < kGridSize; ++i)
            for (int j = 0; j < kGridSize; ++j) out(i * kGridSize + j, c) = maps[static_cast<std::size_t>(c)].at<float>(i, j);
    return out;
}

/// Seeded procedural textures (oriented stripes, blotches, noise) used to fix the channel statistics.
inline ImageU8 calibration_image(Rng& rng) {
    ImageU8 img(kInputSize, kInputSize, 3);
    const double theta = rng.uniform(0, CV_PI), period = std::exp(rng.uniform(std::log(3.0), std::log(80.0)));
    const double amp = rng.uniform(0, 90), noise = rng.uniform(0, 40), phase = rng.uniform(0, 2 * CV_PI);
    const double kx = 2 * CV_PI * std::cos(theta) / period, ky = 2 * CV_PI * std::sin(theta) / period;
    double base[3];
    for (auto& b : base) b = rng.uniform(30, 225);
    for (int r = 0; r < kInputSize; ++r)
        for (int c = 0; c < kInputSize; ++c) {
            const double v = amp * std::sin(kx * c + ky * r + phase) + rng.normal(0, noise);
            for (int k = 0; k < 3; ++k) img(r, c, k) = static_cast<std::uint8_t>(std::clamp(base[k] + v, 0.0, 255.0));
        }
    return img;
}

struct ChannelStats {
    Eigen::RowVectorXf mean, inv_std;
};

inline const ChannelStats& channel_stats() {
    static const ChannelStats stats = [] {
        constexpr int n = 48;
        Rng rng(0xCA1B);
        Eigen::MatrixXd all(n * kPositions, kFilterChannels);
        for (int i = 0; i < n; ++i) all.middleRows(i * kPositions, kPositions) = raw_filter_features(calibration_image(rng)).cast<double>();
        const Eigen::RowVectorXd mu = all.colwise().mean();
        const Eigen::RowVectorXd sd = ((all.rowwise() - mu).array().square().colwise().mean()).sqrt();
        return ChannelStats{mu.cast<float>(), (1.0 / (sd.array() + 1e-6)).matrix().cast<float>()};
    }();
    return stats;
}

}  // namespace detail

/// Pooled filter-bank responses standardized per channel with fixed calibration
/// statistics, kPositions x kFilterChannels (row = grid position, row-major).
inline Mat<float> filter_features(const ImageU8& img) {
    const auto& st = detail::channel_stats();
    Mat<float> f = detail::raw_filter_features(img);
    f.rowwise() -= st.mean;
    f.array().rowwise() *= st.inv_std.array();
    return f;
}

/// Anisotropic resize of a strip to the backbone input size.
inline ImageU8 prepare_strip(const ImageU8& strip) {
    if (strip.channels() != 3 || strip.rows() < 1 || strip.cols() < 1) throw PreconditionError("strip must be a non-empty RGB image");
    if (strip.rows() == kInputSize && strip.cols() == kInputSize) return strip;
    cv::Mat src(strip.rows(), strip.cols(), CV_8UC3, const_cast<std::uint8_t*>(strip.data())), dst;
    cv::resize(src, dst, cv::Size(kInputSize, kInputSize), 0, 0, cv::INTER_LINEAR);
    ImageU8 out(kInputSize, kInputSize, 3);
    std::copy_n(dst.ptr<std::uint8_t>(), out.size(), out.data());
    return out;
}

/// The 1 x 1 projection stage: kFilterChannels -> kFeatureDim, ReLU.
struct Backbone {
    Mat<float> weight;  // kFeatureDim x kFilterChannels
    Vec<float> bias;    // kFeatureDim

    static Backbone init(std::uint64_t seed) {
        Rng rng(seed);
        Backbone b{Mat<float>(kFeatureDim, kFilterChannels), Vec<float>(kFeatureDim)};
        const double sd = std::sqrt(2.0 / kFilterChannels);
        for (Eigen::Index i = 0; i < b.weight.size(); ++i) b.weight.data()[i] = static_cast<float>(rng.normal(0.0, sd));
        for (Eigen::Index i = 0; i < b.bias.size(); ++i) b.bias(i) = static_cast<float>(rng.normal(0.0, 0.1));
        return b;
    }
};

/// relu(F0 W^T + b); the pre-activation is kept in `pre` when given, for backward.
inline Mat<float> project(const Mat<float>& W, const Vec<float>& b, const Mat<float>& F0, Mat<float>* pre = nullptr) {
    if (F0.cols() != W.cols() || W.rows() != b.size()) throw PreconditionError("backbone projection shape mismatch");
    Mat<float> z = F0 * W.transpose();
    z.rowwise() += b.transpose();
    if (pre) *pre = z;
    return z.cwiseMax(0.0f);
}

/// Gradients of the projection given dL/dF: adds into dW, db.
inline void project_backward(const Mat<float>& F0, const Mat<float>& pre, const Mat<float>& dF, Mat<float>& dW,
                             Vec<float>& db) {
    const Mat<float> dz = dF.cwiseProduct((pre.array() > 0.0f).cast<float>().matrix());
    dW.noalias() += dz.transpose() * F0;
    db += dz.colwise().sum().transpose();
}

/// Full 7x7x2048 feature map (rows = positions) of a 224 x 224 input.
inline Mat<float> backbone_features(const Backbone& bb, const ImageU8& img224) {
    return project(bb.weight, bb.bias, filter_features(img224));
}

}  // namespace corestack::texture
