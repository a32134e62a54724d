#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <vector>

#include "corestack/common/raster.hpp"
#include "corestack/common/rng.hpp"
#include "corestack/detect/geometry.hpp"

// Periodic test textures: oriented sinusoidal stripes plus a fine period-2
// checker that survives only in the full-resolution residual.

namespace corestack::inpaint {

struct PeriodicTextureConfig {
    double period_min = 24, period_max = 48;  // stripe period in pixels
    double stripe_amp = 60;
    double checker_amp = 20;
};

inline ImageU8 periodic_texture(int rows, int cols, Rng& rng, const PeriodicTextureConfig& cfg = {}) {
    const double theta = rng.uniform(0, std::numbers::pi);
    const double period = rng.uniform(cfg.period_min, cfg.period_max);
    const double phase = rng.uniform(0, 2 * std::numbers::pi);
    double base[3], tint[3];
    for (int k = 0; k < 3; ++k) {
        base[k] = rng.uniform(90, 165);
        tint[k] = rng.uniform(0.6, 1.0);
    }
    const double kx = 2 * std::numbers::pi * std::cos(theta) / period, ky = 2 * std::numbers::pi * std::sin(theta) / period;
    ImageU8 out(rows, cols, 3);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const double s = std::sin(kx * c + ky * r + phase);
            const double chk = ((r + c) % 2 ? 1.0 : -1.0) * cfg.checker_amp;
            for (int k = 0; k < 3; ++k)
                out(r, c, k) = static_cast<std::uint8_t>(std::lround(std::clamp(base[k] + tint[k] * cfg.stripe_amp * s + chk, 0.0, 255.0)));
        }
    return out;
}

/// Plug-hole style mask: `count` random circles with radii as a fraction of the shorter side.
inline detect::BinaryMask random_circles_mask(int rows, int cols, int count, double r_min, double r_max, Rng& rng) {
    detect::BinaryMask m(rows, cols);
    const double side = std::min(rows, cols);
    for (int k = 0; k < count; ++k) {
        const double r = rng.uniform(r_min, r_max) * side;
        const data::Circle c{rng.uniform(r, cols - r), rng.uniform(r, rows - r), r};
        m |= detect::circle_to_mask(c, rows, cols);
    }
    return m;
}

/// Copy of `image` with hole pixels painted `fill`.
inline ImageU8 punch_holes(const ImageU8& image, const detect::BinaryMask& mask, std::array<std::uint8_t, 3> fill = {12, 12, 12}) {
    ImageU8 out = image;
    for (int r = 0; r < image.rows(); ++r)
        for (int c = 0; c < image.cols(); ++c)
            if (mask.get(r, c))
                for (int k = 0; k < image.channels(); ++k) out(r, c, k) = fill[static_cast<std::size_t>(k % 3)];
    return out;
}

}  // namespace corestack::inpaint
