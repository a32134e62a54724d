#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "corestack/common/error.hpp"
#include "corestack/common/raster.hpp"
#include "corestack/data/scheme.hpp"

namespace corestack::data {

/// A meter-core photograph with provenance.
struct CoreImage {
    std::string image_id;
    std::string well_id;
    double depth_from = 0.0;  // meters
    double depth_to = 1.0;
    ImageU8 pixels;           // RGB
    std::string path;

    int height() const noexcept { return pixels.rows(); }
    int width() const noexcept { return pixels.cols(); }

    void validate() const {
        if (!(depth_to > depth_from)) throw ValidationError("image " + image_id + ": depth_to must exceed depth_from");
        if (pixels.rows() < 1 || pixels.cols() < 1) throw ValidationError("image " + image_id + ": empty raster");
        if (pixels.channels() != 3) throw ValidationError("image " + image_id + ": expected RGB");
    }
};

struct Point {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point&, const Point&) = default;
};

struct Circle {
    double cx = 0.0;
    double cy = 0.0;
    double r = 0.0;
    friend bool operator==(const Circle&, const Circle&) = default;
};

struct Polygon {
    std::vector<Point> vertices;
    friend bool operator==(const Polygon&, const Polygon&) = default;
};

struct HoleAnnotation {
    std::string image_id;
    std::variant<Circle, Polygon> geometry;

    bool is_circle() const noexcept { return std::holds_alternative<Circle>(geometry); }
    const Circle& circle() const { return std::get<Circle>(geometry); }
    const Polygon& polygon() const { return std::get<Polygon>(geometry); }

    friend bool operator==(const HoleAnnotation&, const HoleAnnotation&) = default;
};

/// Throws ValidationError naming `where` when the hole is not valid on an H x W image.
inline void validate_hole(const HoleAnnotation& hole, int height, int width, std::string_view where) {
    auto inside = [&](double x, double y) {
        return std::isfinite(x) && std::isfinite(y) && x >= 0.0 && y >= 0.0 && x <= width && y <= height;
    };
    if (hole.is_circle()) {
        const auto& c = hole.circle();
        if (!(c.r >= 0.0) || !std::isfinite(c.r))
            throw ValidationError(std::string(where) + ": circle radius must be >= 0");
        if (!inside(c.cx, c.cy)) throw ValidationError(std::string(where) + ": circle center outside image bounds");
        return;
    }
    const auto& p = hole.polygon();
    if (p.vertices.size() < 3)
        throw ValidationError(std::string(where) + ": polygon needs at least 3 vertices, got " +
                              std::to_string(p.vertices.size()));
    for (const auto& v : p.vertices)
        if (!inside(v.x, v.y)) throw ValidationError(std::string(where) + ": polygon vertex outside image bounds");
}

struct LithologyInterval {
    std::string image_id;
    int y_from = 0;
    int y_to = 0;
    int class_id = 0;

    bool contains(double y) const noexcept { return y >= y_from && y < y_to; }

    friend bool operator==(const LithologyInterval&, const LithologyInterval&) = default;
};

inline void validate_interval(const LithologyInterval& iv, int height, const ClassScheme* scheme,
                              std::string_view where) {
    if (!(iv.y_from >= 0 && iv.y_from < iv.y_to && iv.y_to <= height))
        throw ValidationError(std::string(where) + ": interval [" + std::to_string(iv.y_from) + ", " +
                              std::to_string(iv.y_to) + ") outside 0.." + std::to_string(height));
    if (scheme && !scheme->contains(iv.class_id))
        throw ValidationError(std::string(where) + ": class " + std::to_string(iv.class_id) + " not in scheme " +
                              std::string(scheme->name_str()));
}

enum class Split { train, val, test, unassigned };

inline std::string_view to_string(Split s) noexcept {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::unassigned: return "unassigned";
    }
    return "unassigned";
}

inline Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unassigned") return Split::unassigned;
    throw ValidationError("unknown split '" + std::string(s) + "'");
}

/// Marks a strip that has not been through class assignment yet.
inline constexpr int kUnassignedClass = std::numeric_limits<int>::min();

/// One horizontal strip, stored by reference into its source image.
struct PatchRecord {
    std::string patch_id;
    std::string image_id;
    std::string well_id;
    int y_offset = 0;
    int height = 100;
    int width = 0;
    int class_id = kUnassignedClass;
    Split split = Split::unassigned;

    friend bool operator==(const PatchRecord&, const PatchRecord&) = default;
};

enum class SplitMode { none, strip_random, well_held_out };

inline std::string_view to_string(SplitMode m) noexcept {
    switch (m) {
        case SplitMode::none: return "none";
        case SplitMode::strip_random: return "strip_random";
        case SplitMode::well_held_out: return "well_held_out";
    }
    return "none";
}

inline SplitMode parse_split_mode(std::string_view s) {
    if (s == "none") return SplitMode::none;
    if (s == "strip_random") return SplitMode::strip_random;
    if (s == "well_held_out") return SplitMode::well_held_out;
    throw ValidationError("unknown split mode '" + std::string(s) + "'");
}

struct DatasetManifest {
    SchemeName scheme = SchemeName::nine_class;
    std::vector<PatchRecord> records;
    SplitMode split_mode = SplitMode::none;
    std::uint64_t seed = 0;
    /// Directory holding the source images (`<image_id>.png`); empty when unknown.
    std::string image_root;

    const ClassScheme& class_scheme() const { return ClassScheme::get(scheme); }

    friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

}  // namespace corestack::data
