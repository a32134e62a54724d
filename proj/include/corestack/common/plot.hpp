#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <opencv2/imgproc.hpp>

#include "corestack/common/image_io.hpp"

// Minimal report charts drawn with OpenCV primitives.

namespace corestack::plot {

struct Series {
    std::string name;
    std::vector<double> values;
};

namespace detail {

inline const cv::Scalar& palette(std::size_t i) {
    static const std::vector<cv::Scalar> colors = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44},
                                                   {40, 39, 214},  {189, 103, 148}, {75, 86, 140}};
    return colors[i % colors.size()];
}

inline std::string fmt(double v, int digits = 2) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline void text(cv::Mat& m, const std::string& s, cv::Point p, double scale = 0.4, cv::Scalar color = {0, 0, 0}) {
    cv::putText(m, s, p, cv::FONT_HERSHEY_SIMPLEX, scale, color, 1, cv::LINE_AA);
}

}  // namespace detail

/// Grouped bar chart; one group per category, one bar per series.
inline ImageU8 bar_chart(const std::string& title, const std::vector<std::string>& categories,
                         const std::vector<Series>& series) {
    const int width = std::max(480, 70 * static_cast<int>(categories.size()) + 120);
    const int height = 360, left = 60, bottom = 50, top = 40;
    cv::Mat m(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
    detail::text(m, title, {left, 22}, 0.55);
    double vmax = 1.0;
    for (const auto& s : series)
        for (double v : s.values) vmax = std::max(vmax, v);
    const int plot_h = height - top - bottom;
    const int plot_w = width - left - 20;
    cv::line(m, {left, height - bottom}, {left + plot_w, height - bottom}, {0, 0, 0});
    cv::line(m, {left, top}, {left, height - bottom}, {0, 0, 0});
    detail::text(m, detail::fmt(vmax, 0), {4, top + 4});
    const double group_w = categories.empty() ? 0.0 : static_cast<double>(plot_w) / categories.size();
    const double bar_w = series.empty() ? 0.0 : group_w * 0.8 / series.size();
    for (std::size_t c = 0; c < categories.size(); ++c) {
        for (std::size_t s = 0; s < series.size(); ++s) {
            const double v = c < series[s].values.size() ? series[s].values[c] : 0.0;
            const int x0 = left + static_cast<int>(c * group_w + group_w * 0.1 + s * bar_w);
            const int h = static_cast<int>(std::round(plot_h * v / vmax));
            cv::rectangle(m, {x0, height - bottom - h}, {x0 + std::max(1, static_cast<int>(bar_w) - 1), height - bottom},
                          detail::palette(s), cv::FILLED);
        }
        detail::text(m, categories[c], {left + static_cast<int>(c * group_w + 4), height - bottom + 16}, 0.35);
    }
    for (std::size_t s = 0; s < series.size(); ++s) {
        const int y = top + 14 * static_cast<int>(s);
        cv::rectangle(m, {width - 110, y - 8}, {width - 100, y}, detail::palette(s), cv::FILLED);
        detail::text(m, series[s].name, {width - 95, y}, 0.35);
    }
    return io::from_mat(m);
}

/// Line chart over x = 1..n for each series.
inline ImageU8 line_chart(const std::string& title, const std::string& x_label, const std::vector<Series>& series) {
    const int width = 560, height = 360, left = 60, bottom = 50, top = 40, right = 20;
    cv::Mat m(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
    detail::text(m, title, {left, 22}, 0.55);
    double vmin = 0.0, vmax = 1e-9;
    std::size_t n = 1;
    bool first = true;
    for (const auto& s : series) {
        n = std::max(n, s.values.size());
        for (double v : s.values) {
            if (!std::isfinite(v)) continue;
            vmin = first ? v : std::min(vmin, v);
            vmax = first ? v : std::max(vmax, v);
            first = false;
        }
    }
    if (vmax - vmin < 1e-9) vmax = vmin + 1.0;
    const int plot_h = height - top - bottom, plot_w = width - left - right;
    cv::line(m, {left, height - bottom}, {left + plot_w, height - bottom}, {0, 0, 0});
    cv::line(m, {left, top}, {left, height - bottom}, {0, 0, 0});
    detail::text(m, detail::fmt(vmax, 3), {4, top + 4});
    detail::text(m, detail::fmt(vmin, 3), {4, height - bottom});
    detail::text(m, x_label, {left + plot_w / 2 - 20, height - 12});
    auto to_px = [&](std::size_t i, double v) {
        const double fx = n > 1 ? static_cast<double>(i) / (n - 1) : 0.5;
        return cv::Point(left + static_cast<int>(fx * plot_w),
                         height - bottom - static_cast<int>((v - vmin) / (vmax - vmin) * plot_h));
    };
    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& vals = series[s].values;
        for (std::size_t i = 0; i + 1 < vals.size(); ++i)
            cv::line(m, to_px(i, vals[i]), to_px(i + 1, vals[i + 1]), detail::palette(s), 2, cv::LINE_AA);
        for (std::size_t i = 0; i < vals.size(); ++i) cv::circle(m, to_px(i, vals[i]), 2, detail::palette(s), cv::FILLED);
        const int y = top + 14 * static_cast<int>(s);
        cv::rectangle(m, {width - 130, y - 8}, {width - 120, y}, detail::palette(s), cv::FILLED);
        detail::text(m, series[s].name, {width - 115, y}, 0.35);
    }
    return io::from_mat(m);
}

/// Row-normalized heatmap of integer counts with the raw counts printed.
inline ImageU8 count_heatmap(const std::string& title, const std::vector<std::string>& labels,
                             const std::vector<std::vector<long long>>& counts) {
    const int n = static_cast<int>(labels.size());
    const int cell = 44, left = 90, top = 50;
    const int width = left + n * cell + 20, height = top + n * cell + 40;
    cv::Mat m(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
    detail::text(m, title, {10, 20}, 0.55);
    detail::text(m, "predicted ->", {left, top - 22}, 0.35);
    for (int r = 0; r < n; ++r) {
        long long row_sum = 0;
        for (int c = 0; c < n; ++c) row_sum += counts[r][c];
        detail::text(m, labels[r], {6, top + r * cell + cell / 2 + 4}, 0.35);
        for (int c = 0; c < n; ++c) {
            const double f = row_sum > 0 ? static_cast<double>(counts[r][c]) / row_sum : 0.0;
            const int shade = static_cast<int>(255 * (1.0 - f));
            const cv::Point p0(left + c * cell, top + r * cell);
            cv::rectangle(m, p0, p0 + cv::Point(cell - 1, cell - 1), cv::Scalar(255, shade, shade), cv::FILLED);
            detail::text(m, std::to_string(counts[r][c]), p0 + cv::Point(4, cell / 2 + 4), 0.35,
                         f > 0.5 ? cv::Scalar(255, 255, 255) : cv::Scalar(0, 0, 0));
        }
    }
    for (int c = 0; c < n; ++c) detail::text(m, labels[c], {left + c * cell + 4, top - 6}, 0.35);
    return io::from_mat(m);
}

}  // namespace corestack::plot
