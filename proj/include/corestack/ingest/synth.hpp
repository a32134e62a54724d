#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/imgproc.hpp>

#include "corestack/common/error.hpp"
#include "corestack/common/image_io.hpp"
#include "corestack/common/rng.hpp"
#include "corestack/data/annotations.hpp"
#include "corestack/data/scheme.hpp"
#include "corestack/data/types.hpp"

namespace corestack::ingest {

/// Inclusive range.
template <class T>
struct Range {
    T lo{};
    T hi{};
    bool valid() const { return lo <= hi; }
};

struct SynthCorpusConfig {
    int n_wells = 6;
    int images_per_well = 4;
    int height = 1000;
    int width = 200;
    data::SchemeName scheme = data::SchemeName::nine_class;
    std::uint64_t texture_seed = 1;
    Range<int> holes_per_image{0, 3};
    Range<double> hole_radius_frac{0.08, 0.15};
    Range<int> interval_height{120, 400};
    /// Relative frequency per scheme class, in scheme order; empty = uniform.
    std::vector<double> class_weights;
    /// Std-dev of per-well, per-class color offsets (intensity levels).
    double well_color_jitter = 18.0;
    /// Std-dev of per-well log-multipliers on grain scale, lamination period, contrast.
    double well_scale_jitter = 0.25;
    std::array<std::uint8_t, 3> sentinel{12, 12, 12};

    void validate() const {
        if (n_wells < 3) throw PreconditionError("n_wells must be >= 3");
        if (images_per_well < 1) throw PreconditionError("images_per_well must be >= 1");
        if (height < 1 || width < 1) throw PreconditionError("image size must be positive");
        if (!holes_per_image.valid() || holes_per_image.lo < 0) throw PreconditionError("bad holes_per_image range");
        if (!hole_radius_frac.valid() || hole_radius_frac.lo <= 0 || hole_radius_frac.hi >= 0.5)
            throw PreconditionError("hole_radius_frac must lie in (0, 0.5)");
        if (!interval_height.valid() || interval_height.lo < 1) throw PreconditionError("bad interval_height range");
        const auto& s = data::ClassScheme::get(scheme);
        if (!class_weights.empty()) {
            if (class_weights.size() != s.size())
                throw PreconditionError("class_weights needs " + std::to_string(s.size()) + " entries");
            double total = 0;
            for (double w : class_weights) {
                if (!(w >= 0)) throw PreconditionError("class weights must be nonnegative");
                total += w;
            }
            if (total <= 0) throw PreconditionError("class weights sum to zero");
        }
        if (well_color_jitter < 0 || well_scale_jitter < 0) throw PreconditionError("jitter must be nonnegative");
    }
};

inline void to_json(nlohmann::json& j, const SynthCorpusConfig& c) {
    j = {{"n_wells", c.n_wells},
         {"images_per_well", c.images_per_well},
         {"height", c.height},
         {"width", c.width},
         {"scheme", data::ClassScheme::get(c.scheme).name_str()},
         {"texture_seed", c.texture_seed},
         {"holes_per_image", {c.holes_per_image.lo, c.holes_per_image.hi}},
         {"hole_radius_frac", {c.hole_radius_frac.lo, c.hole_radius_frac.hi}},
         {"interval_height", {c.interval_height.lo, c.interval_height.hi}},
         {"class_weights", c.class_weights},
         {"well_color_jitter", c.well_color_jitter},
         {"well_scale_jitter", c.well_scale_jitter},
         {"sentinel", c.sentinel}};
}

/// Missing keys keep their defaults.
inline SynthCorpusConfig synth_config_from_json(const nlohmann::json& j) {
    SynthCorpusConfig c;
    try {
        auto range = [&](const char* key, auto& r) {
            if (!j.contains(key)) return;
            const auto& a = j.at(key);
            if (!a.is_array() || a.size() != 2) throw ValidationError(std::string(key) + " must be [lo, hi]");
            a.at(0).get_to(r.lo);
            a.at(1).get_to(r.hi);
        };
        c.n_wells = j.value("n_wells", c.n_wells);
        c.images_per_well = j.value("images_per_well", c.images_per_well);
        c.height = j.value("height", c.height);
        c.width = j.value("width", c.width);
        if (j.contains("scheme")) c.scheme = data::ClassScheme::parse_name(j.at("scheme").get<std::string>());
        c.texture_seed = j.value("texture_seed", c.texture_seed);
        range("holes_per_image", c.holes_per_image);
        range("hole_radius_frac", c.hole_radius_frac);
        range("interval_height", c.interval_height);
        c.class_weights = j.value("class_weights", c.class_weights);
        c.well_color_jitter = j.value("well_color_jitter", c.well_color_jitter);
        c.well_scale_jitter = j.value("well_scale_jitter", c.well_scale_jitter);
        c.sentinel = j.value("sentinel", c.sentinel);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("synth config: ") + e.what());
    }
    c.validate();
    return c;
}

/// Appearance parameters of one lithology.
struct TextureFamily {
    std::array<double, 3> base;  // RGB
    double grain_scale;          // px per noise cell
    double noise_amp;
    double lamination_period;    // px, 0 = none
    double lamination_amp;
    double crack_density;        // dark fractures per 100 rows
};

/// Fixed family per class id. Six-class ids share the nine-class families;
/// the six-class indeterminate class renders like blank background.
inline TextureFamily texture_family(int class_id) {
    switch (class_id) {
        case -1: return {{125, 102, 82}, 22, 40, 0, 0, 3.0};
        case 0:
        case 999: return {{205, 203, 196}, 10, 5, 0, 0, 0};
        case 1: return {{192, 162, 112}, 7, 34, 0, 0, 0};
        case 2: return {{178, 150, 106}, 4, 28, 0, 0, 0};
        case 3: return {{166, 146, 114}, 2, 22, 34, 10, 0};
        case 4: return {{138, 124, 102}, 2, 16, 13, 20, 0};
        case 5: return {{108, 104, 96}, 3, 9, 6, 9, 0};
        case 6: return {{38, 34, 31}, 3, 7, 22, 6, 0};
        case 7: return {{152, 152, 150}, 11, 12, 0, 0, 0.5};
        default: throw ValidationError("no texture family for class " + std::to_string(class_id));
    }
}

/// Per-well perturbation of a texture family.
inline TextureFamily jitter_family(TextureFamily f, Rng& rng, double color_sd, double scale_sd) {
    const double shared = rng.normal(0.0, color_sd);
    for (auto& c : f.base) c += shared + rng.normal(0.0, color_sd * 0.5);
    f.grain_scale = std::max(1.0, f.grain_scale * std::exp(rng.normal(0.0, scale_sd)));
    f.noise_amp *= std::exp(rng.normal(0.0, scale_sd));
    if (f.lamination_period > 0) f.lamination_period = std::max(3.0, f.lamination_period * std::exp(rng.normal(0.0, scale_sd)));
    f.lamination_amp *= std::exp(rng.normal(0.0, scale_sd));
    return f;
}

namespace detail {

/// Smooth zero-mean unit-ish noise: a random grid upsampled to rows x cols.
inline cv::Mat value_noise(int rows, int cols, double cell, Rng& rng) {
    const int gr = std::max(2, static_cast<int>(std::ceil(rows / cell)) + 1);
    const int gc = std::max(2, static_cast<int>(std::ceil(cols / cell)) + 1);
    cv::Mat grid(gr, gc, CV_32F);
    for (int r = 0; r < gr; ++r)
        for (int c = 0; c < gc; ++c) grid.at<float>(r, c) = static_cast<float>(rng.normal());
    cv::Mat out;
    cv::resize(grid, out, cv::Size(cols, rows), 0, 0, cell < 1.5 ? cv::INTER_NEAREST : cv::INTER_LINEAR);
    return out;
}

inline void render_region(cv::Mat& rgb, int y0, int y1, const TextureFamily& f, Rng& rng) {
    const int rows = y1 - y0, cols = rgb.cols;
    const cv::Mat grain = value_noise(rows, cols, f.grain_scale, rng);
    const cv::Mat fine = value_noise(rows, cols, 1.0, rng);
    const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
    const double tilt = rng.uniform(-0.15, 0.15);
    for (int r = 0; r < rows; ++r) {
        auto* px = rgb.ptr<cv::Vec3f>(y0 + r);
        for (int c = 0; c < cols; ++c) {
            double v = f.noise_amp * grain.at<float>(r, c) + 4.0 * fine.at<float>(r, c);
            if (f.lamination_period > 0)
                v += f.lamination_amp * std::sin(2 * std::numbers::pi * (r + tilt * c) / f.lamination_period + phase);
            for (int ch = 0; ch < 3; ++ch) px[c][ch] = static_cast<float>(f.base[ch] + v);
        }
    }
    const int cracks = static_cast<int>(std::floor(f.crack_density * rows / 100.0 + rng.uniform()));
    for (int k = 0; k < cracks; ++k) {
        const cv::Point a(static_cast<int>(rng.uniform(0, cols)), y0 + static_cast<int>(rng.uniform(0, rows)));
        const cv::Point b(static_cast<int>(rng.uniform(0, cols)), y0 + static_cast<int>(rng.uniform(0, rows)));
        cv::line(rgb, a, b, cv::Scalar(30, 26, 22), 2);
    }
}

}  // namespace detail

struct SynthCorpus {
    std::vector<data::CoreImage> images;
    data::AnnotationSet annotations;  // holes, plus the intervals below
    std::vector<data::LithologyInterval> intervals;
};

inline std::string synth_well_id(int w) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "W%02d", w + 1);
    return buf;
}

inline std::string synth_image_id(int w, int k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "W%02d_%03d", w + 1, k + 1);
    return buf;
}

/// Pixels whose centers fall within the circle, as used for hole masks.
inline void fill_circle(ImageU8& img, const data::Circle& c, std::array<std::uint8_t, 3> color) {
    const int r0 = std::max(0, static_cast<int>(std::floor(c.cy - c.r)));
    const int r1 = std::min(img.rows() - 1, static_cast<int>(std::ceil(c.cy + c.r)));
    const int c0 = std::max(0, static_cast<int>(std::floor(c.cx - c.r)));
    const int c1 = std::min(img.cols() - 1, static_cast<int>(std::ceil(c.cx + c.r)));
    for (int y = r0; y <= r1; ++y)
        for (int x = c0; x <= c1; ++x) {
            const double dx = x + 0.5 - c.cx, dy = y + 0.5 - c.cy;
            if (dx * dx + dy * dy <= c.r * c.r)
                for (int ch = 0; ch < img.channels(); ++ch) img(y, x, ch) = color[static_cast<std::size_t>(ch)];
        }
}

/// Circles fully inside the image, non-overlapping where possible.
inline std::vector<data::Circle> place_holes(int height, int width, int count, Range<double> radius_frac, Rng& rng) {
    std::vector<data::Circle> out;
    for (int k = 0; k < count; ++k) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            const double r = std::min(rng.uniform(radius_frac.lo, radius_frac.hi) * width, 0.5 * std::min(height, width) - 1);
            if (r <= 0) break;
            const data::Circle c{rng.uniform(r, width - r), rng.uniform(r, height - r), r};
            const bool clear = std::none_of(out.begin(), out.end(), [&](const data::Circle& o) {
                return std::hypot(o.cx - c.cx, o.cy - c.cy) < o.r + c.r + 2;
            });
            if (clear || attempt == 49) {
                out.push_back(c);
                break;
            }
        }
    }
    return out;
}

/// Renders one image's intervals and holes. `families` is indexed by scheme class order.
inline data::CoreImage render_core(const std::string& image_id, const std::string& well_id, int height, int width,
                                   std::span<const data::LithologyInterval> intervals,
                                   std::span<const data::Circle> holes, const data::ClassScheme& scheme,
                                   std::span<const TextureFamily> families, std::array<std::uint8_t, 3> sentinel,
                                   Rng& rng) {
    cv::Mat canvas(height, width, CV_32FC3, cv::Scalar(0, 0, 0));
    for (const auto& iv : intervals)
        detail::render_region(canvas, iv.y_from, iv.y_to, families[scheme.index_of(iv.class_id)], rng);
    // Cylinder shading across the core width.
    for (int r = 0; r < height; ++r) {
        auto* px = canvas.ptr<cv::Vec3f>(r);
        for (int c = 0; c < width; ++c) {
            const float s = static_cast<float>(0.82 + 0.18 * std::sin(std::numbers::pi * (c + 0.5) / width));
            px[c] *= s;
        }
    }
    data::CoreImage img;
    img.image_id = image_id;
    img.well_id = well_id;
    img.pixels = ImageU8(height, width, 3);
    for (int r = 0; r < height; ++r) {
        const auto* px = canvas.ptr<cv::Vec3f>(r);
        for (int c = 0; c < width; ++c)
            for (int ch = 0; ch < 3; ++ch)
                img.pixels(r, c, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(px[c][ch]), 0L, 255L));
    }
    for (const auto& h : holes) fill_circle(img.pixels, h, sentinel);
    return img;
}

/// Contiguous intervals covering [0, height) with classes drawn by weight.
inline std::vector<data::LithologyInterval> draw_intervals(const std::string& image_id, int height,
                                                           Range<int> interval_height, const data::ClassScheme& scheme,
                                                           std::span<const double> weights, Rng& rng) {
    std::vector<double> cumulative;
    double total = 0;
    for (std::size_t i = 0; i < scheme.size(); ++i) {
        total += weights.empty() ? 1.0 : weights[i];
        cumulative.push_back(total);
    }
    std::vector<data::LithologyInterval> out;
    for (int y = 0; y < height;) {
        const int h = static_cast<int>(rng.range(interval_height.lo, interval_height.hi));
        const double u = rng.uniform() * total;
        const auto idx = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
        const int y_to = std::min(height, y + h);
        out.push_back({image_id, y, y_to, scheme.id_at(std::min(idx, scheme.size() - 1))});
        y = y_to;
    }
    return out;
}

/// Deterministic given cfg (including texture_seed).
inline SynthCorpus synth_corpus(const SynthCorpusConfig& cfg) {
    cfg.validate();
    const auto& scheme = data::ClassScheme::get(cfg.scheme);
    SynthCorpus out;
    for (int w = 0; w < cfg.n_wells; ++w) {
        Rng well_rng(mix64(cfg.texture_seed, 0x5745'4c4cULL + static_cast<std::uint64_t>(w)));
        std::vector<TextureFamily> families;
        for (const auto& c : scheme.classes())
            families.push_back(jitter_family(texture_family(c.id), well_rng, cfg.well_color_jitter, cfg.well_scale_jitter));
        for (int k = 0; k < cfg.images_per_well; ++k) {
            Rng rng(mix64(mix64(cfg.texture_seed, static_cast<std::uint64_t>(w)), static_cast<std::uint64_t>(k) + 1));
            const auto image_id = synth_image_id(w, k);
            const auto well_id = synth_well_id(w);
            auto intervals = draw_intervals(image_id, cfg.height, cfg.interval_height, scheme, cfg.class_weights, rng);
            const int n_holes = static_cast<int>(rng.range(cfg.holes_per_image.lo, cfg.holes_per_image.hi));
            const auto holes = place_holes(cfg.height, cfg.width, n_holes, cfg.hole_radius_frac, rng);
            auto img = render_core(image_id, well_id, cfg.height, cfg.width, intervals, holes, scheme, families,
                                   cfg.sentinel, rng);
            img.depth_from = k;
            img.depth_to = k + 1;
            img.path = image_id + ".png";
            out.annotations.images.push_back({image_id, img.path, well_id, cfg.height, cfg.width});
            for (const auto& h : holes) out.annotations.holes.push_back({image_id, h});
            for (const auto& iv : intervals) {
                out.annotations.intervals.push_back(iv);
                out.intervals.push_back(iv);
            }
            out.images.push_back(std::move(img));
        }
    }
    return out;
}

/// Writes images/<id>.png, annotations.json, intervals.csv and config.json under dir.
inline void write_corpus(const SynthCorpus& corpus, const SynthCorpusConfig& cfg, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "images");
    for (const auto& img : corpus.images) io::write_image(dir / "images" / (img.image_id + ".png"), img.pixels);
    data::write_text_file(dir / "annotations.json", data::save_annotations(corpus.annotations));
    data::write_text_file(dir / "intervals.csv", data::save_intervals_csv(corpus.annotations));
    data::write_text_file(dir / "config.json", nlohmann::json(cfg).dump(2) + "\n");
}

}  // namespace corestack::ingest
