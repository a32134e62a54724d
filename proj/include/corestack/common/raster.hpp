#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "corestack/common/error.hpp"

namespace corestack {

/// Interleaved row-major raster (rows x cols x channels).
template <typename T>
class Raster {
public:
    using value_type = T;

    Raster() = default;
    Raster(int rows, int cols, int channels, T fill = T{})
        : rows_(rows), cols_(cols), channels_(channels) {
        if (rows < 0 || cols < 0 || channels < 1) throw PreconditionError("raster: invalid shape");
        data_.assign(static_cast<std::size_t>(rows) * cols * channels, fill);
    }

    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    int channels() const noexcept { return channels_; }
    bool empty() const noexcept { return data_.empty(); }
    std::size_t size() const noexcept { return data_.size(); }

    T& operator()(int r, int c, int ch = 0) noexcept {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_ && ch >= 0 && ch < channels_);
        return data_[(static_cast<std::size_t>(r) * cols_ + c) * channels_ + ch];
    }
    const T& operator()(int r, int c, int ch = 0) const noexcept {
        assert(r >= 0 && r < rows_ && c >= 0 && c < cols_ && ch >= 0 && ch < channels_);
        return data_[(static_cast<std::size_t>(r) * cols_ + c) * channels_ + ch];
    }

    std::span<T> pixels() noexcept { return data_; }
    std::span<const T> pixels() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    std::span<T> row(int r) noexcept {
        return std::span<T>(data_).subspan(static_cast<std::size_t>(r) * cols_ * channels_,
                                           static_cast<std::size_t>(cols_) * channels_);
    }
    std::span<const T> row(int r) const noexcept {
        return std::span<const T>(data_).subspan(static_cast<std::size_t>(r) * cols_ * channels_,
                                                 static_cast<std::size_t>(cols_) * channels_);
    }

    bool same_shape(const Raster& o) const noexcept {
        return rows_ == o.rows_ && cols_ == o.cols_ && channels_ == o.channels_;
    }

    /// Rows [r0, r0 + n) as a new raster.
    Raster crop_rows(int r0, int n) const {
        if (r0 < 0 || n < 0 || r0 + n > rows_) throw PreconditionError("raster: row crop out of range");
        Raster out(n, cols_, channels_);
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r0) * cols_ * channels_, out.size(), out.data_.begin());
        return out;
    }

    Raster crop(int r0, int c0, int nr, int nc) const {
        if (r0 < 0 || c0 < 0 || nr < 0 || nc < 0 || r0 + nr > rows_ || c0 + nc > cols_)
            throw PreconditionError("raster: crop out of range");
        Raster out(nr, nc, channels_);
        for (int r = 0; r < nr; ++r)
            std::copy_n(&(*this)(r0 + r, c0, 0), static_cast<std::size_t>(nc) * channels_, &out(r, 0, 0));
        return out;
    }

    friend bool operator==(const Raster& a, const Raster& b) {
        return a.same_shape(b) && a.data_ == b.data_;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    int channels_ = 1;
    std::vector<T> data_;
};

using ImageU8 = Raster<std::uint8_t>;
using ImageF = Raster<float>;

template <typename To, typename From>
Raster<To> raster_cast(const Raster<From>& in) {
    Raster<To> out(in.rows(), in.cols(), in.channels());
    std::transform(in.pixels().begin(), in.pixels().end(), out.pixels().begin(),
                   [](From v) { return static_cast<To>(v); });
    return out;
}

/// Round-and-clamp conversion to 8 bits.
inline ImageU8 to_u8(const ImageF& in) {
    ImageU8 out(in.rows(), in.cols(), in.channels());
    std::transform(in.pixels().begin(), in.pixels().end(), out.pixels().begin(), [](float v) {
        const float c = std::clamp(v, 0.0f, 255.0f);
        return static_cast<std::uint8_t>(c + 0.5f);
    });
    return out;
}

}  // namespace corestack
