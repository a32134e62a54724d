#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "corestack/common/error.hpp"
#include "corestack/common/raster.hpp"
#include "corestack/data/types.hpp"

// Rasterization follows the pixel-center convention: pixel (x, y) belongs to a
// shape iff the point (x + 0.5, y + 0.5) does.

namespace corestack::detect {

/// H x W raster of {0,1} with a cached pixel count.
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int rows, int cols) : bits_(rows, cols, 1, 0) {}
    /// Any nonzero value counts as set.
    explicit BinaryMask(const Raster<std::uint8_t>& raster) : bits_(raster.rows(), raster.cols(), 1, 0) {
        if (raster.channels() != 1) throw PreconditionError("mask raster must have one channel");
        auto src = raster.pixels();
        auto dst = bits_.pixels();
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i] = src[i] ? 1 : 0;
            area_ += dst[i];
        }
    }

    int rows() const noexcept { return bits_.rows(); }
    int cols() const noexcept { return bits_.cols(); }
    std::size_t area() const noexcept { return area_; }
    bool empty() const noexcept { return area_ == 0; }
    bool get(int r, int c) const noexcept { return bits_(r, c) != 0; }

    void set(int r, int c, bool v = true) noexcept {
        auto& b = bits_(r, c);
        if (static_cast<bool>(b) == v) return;
        b = v ? 1 : 0;
        if (v) ++area_;
        else --area_;
    }

    const Raster<std::uint8_t>& bits() const noexcept { return bits_; }

    /// 0/255 image for export.
    ImageU8 to_image() const {
        ImageU8 out(rows(), cols(), 1);
        std::transform(bits_.pixels().begin(), bits_.pixels().end(), out.pixels().begin(),
                       [](std::uint8_t v) { return static_cast<std::uint8_t>(v ? 255 : 0); });
        return out;
    }

    BinaryMask& operator|=(const BinaryMask& o) {
        require_same_size(o);
        for (int r = 0; r < rows(); ++r)
            for (int c = 0; c < cols(); ++c)
                if (o.get(r, c)) set(r, c);
        return *this;
    }

    void require_same_size(const BinaryMask& o) const {
        if (rows() != o.rows() || cols() != o.cols())
            throw PreconditionError("mask size mismatch: " + std::to_string(rows()) + "x" + std::to_string(cols()) +
                                    " vs " + std::to_string(o.rows()) + "x" + std::to_string(o.cols()));
    }

    friend bool operator==(const BinaryMask& a, const BinaryMask& b) { return a.bits_ == b.bits_; }

private:
    Raster<std::uint8_t> bits_;
    std::size_t area_ = 0;
};

/// Axis-aligned box in continuous pixel coordinates.
struct Box {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    double width() const noexcept { return std::max(0.0, x1 - x0); }
    double height() const noexcept { return std::max(0.0, y1 - y0); }
    double area() const noexcept { return width() * height(); }
    bool valid() const noexcept { return x0 < x1 && y0 < y1; }
    friend bool operator==(const Box&, const Box&) = default;
};

inline BinaryMask circle_to_mask(const data::Circle& c, int rows, int cols) {
    BinaryMask m(rows, cols);
    const int r0 = std::max(0, static_cast<int>(std::floor(c.cy - c.r - 1)));
    const int r1 = std::min(rows - 1, static_cast<int>(std::ceil(c.cy + c.r)));
    const int c0 = std::max(0, static_cast<int>(std::floor(c.cx - c.r - 1)));
    const int c1 = std::min(cols - 1, static_cast<int>(std::ceil(c.cx + c.r)));
    const double rr = c.r * c.r;
    for (int y = r0; y <= r1; ++y)
        for (int x = c0; x <= c1; ++x) {
            const double dx = x + 0.5 - c.cx, dy = y + 0.5 - c.cy;
            if (dx * dx + dy * dy <= rr) m.set(y, x);
        }
    return m;
}

/// Even-odd rule, scanline at each row's pixel-center height.
inline BinaryMask polygon_to_mask(const data::Polygon& p, int rows, int cols) {
    const auto& v = p.vertices;
    if (v.size() < 3) throw PreconditionError("polygon needs at least 3 vertices");
    BinaryMask m(rows, cols);
    std::vector<double> xs;
    for (int y = 0; y < rows; ++y) {
        const double yc = y + 0.5;
        xs.clear();
        for (std::size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
            if ((v[i].y > yc) != (v[j].y > yc))
                xs.push_back(v[i].x + (yc - v[i].y) * (v[j].x - v[i].x) / (v[j].y - v[i].y));
        }
        if (xs.empty()) continue;
        std::sort(xs.begin(), xs.end());
        for (int x = 0; x < cols; ++x) {
            const double xc = x + 0.5;
            // Inside iff an odd number of crossings lie strictly right of the center.
            const auto right = xs.end() - std::upper_bound(xs.begin(), xs.end(), xc);
            if (right % 2 == 1) m.set(y, x);
        }
    }
    return m;
}

inline BinaryMask hole_to_mask(const data::HoleAnnotation& h, int rows, int cols) {
    return h.is_circle() ? circle_to_mask(h.circle(), rows, cols) : polygon_to_mask(h.polygon(), rows, cols);
}

/// Pixel-extent bounding box of the set pixels; nullopt when empty.
inline std::optional<Box> mask_box(const BinaryMask& m) {
    int x0 = m.cols(), y0 = m.rows(), x1 = -1, y1 = -1;
    for (int r = 0; r < m.rows(); ++r)
        for (int c = 0; c < m.cols(); ++c)
            if (m.get(r, c)) {
                x0 = std::min(x0, c);
                x1 = std::max(x1, c);
                y0 = std::min(y0, r);
                y1 = std::max(y1, r);
            }
    if (x1 < 0) return std::nullopt;
    return Box{static_cast<double>(x0), static_cast<double>(y0), x1 + 1.0, y1 + 1.0};
}

inline double iou_box(const Box& a, const Box& b) {
    const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

inline double iou_mask(const BinaryMask& a, const BinaryMask& b) {
    a.require_same_size(b);
    std::size_t inter = 0;
    const auto pa = a.bits().pixels(), pb = b.bits().pixels();
    for (std::size_t i = 0; i < pa.size(); ++i) inter += pa[i] & pb[i];
    const std::size_t uni = a.area() + b.area() - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace corestack::detect
