#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "corestack/common/error.hpp"
#include "corestack/common/raster.hpp"
#include "corestack/common/rng.hpp"

namespace corestack::nn {

/// Dense NCHW float tensor.
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
        : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {
        if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0) throw PreconditionError("negative tensor dimension");
    }

    std::size_t numel() const noexcept { return data.size(); }
    std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
    std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c) * h * w; }
    bool same_shape(const Tensor& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }
    std::string shape_str() const {
        return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
    }

    float& at(int in, int ic, int iy, int ix) noexcept {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
    }
    float at(int in, int ic, int iy, int ix) const noexcept {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
    }
    float* sample(int in) noexcept { return data.data() + static_cast<std::size_t>(in) * sample_size(); }
    const float* sample(int in) const noexcept { return data.data() + static_cast<std::size_t>(in) * sample_size(); }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
    Tensor zeros_like() const { return Tensor(n, c, h, w); }

    Tensor& operator+=(const Tensor& o) {
        require_same(o);
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }
    Tensor& operator*=(float s) {
        for (auto& v : data) v *= s;
        return *this;
    }

    void require_same(const Tensor& o) const {
        if (!same_shape(o)) throw PreconditionError("tensor shape mismatch " + shape_str() + " vs " + o.shape_str());
    }
};

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

/// Concatenates along channels; every input must share n, h, w.
inline Tensor concat_channels(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) return {};
    int c = 0;
    for (const auto* p : parts) {
        if (p->n != parts[0]->n || p->h != parts[0]->h || p->w != parts[0]->w)
            throw PreconditionError("concat_channels: mismatched " + p->shape_str());
        c += p->c;
    }
    Tensor out(parts[0]->n, c, parts[0]->h, parts[0]->w);
    for (int s = 0; s < out.n; ++s) {
        float* dst = out.sample(s);
        for (const auto* p : parts) dst = std::copy_n(p->sample(s), p->sample_size(), dst);
    }
    return out;
}

/// Channels [c0, c0 + count) of every sample.
inline Tensor slice_channels(const Tensor& t, int c0, int count) {
    if (c0 < 0 || count < 0 || c0 + count > t.c) throw PreconditionError("slice_channels out of range");
    Tensor out(t.n, count, t.h, t.w);
    for (int s = 0; s < t.n; ++s)
        std::copy_n(t.sample(s) + static_cast<std::size_t>(c0) * t.plane(), out.sample_size(), out.sample(s));
    return out;
}

/// HWC uint8 image to a 1 x C x H x W tensor scaled to [-1, 1].
inline Tensor from_image(const ImageU8& img) {
    Tensor t(1, img.channels(), img.rows(), img.cols());
    for (int y = 0; y < img.rows(); ++y)
        for (int x = 0; x < img.cols(); ++x)
            for (int ch = 0; ch < img.channels(); ++ch) t.at(0, ch, y, x) = img(y, x, ch) / 127.5f - 1.0f;
    return t;
}

/// Sample `s` of a tensor in [-1, 1] back to HWC floats in [0, 255] (unclamped).
inline ImageF to_image_f(const Tensor& t, int s = 0) {
    ImageF img(t.h, t.w, t.c);
    for (int y = 0; y < t.h; ++y)
        for (int x = 0; x < t.w; ++x)
            for (int ch = 0; ch < t.c; ++ch) img(y, x, ch) = (t.at(s, ch, y, x) + 1.0f) * 127.5f;
    return img;
}

}  // namespace corestack::nn
