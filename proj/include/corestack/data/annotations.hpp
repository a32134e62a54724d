#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corestack/common/error.hpp"
#include "corestack/data/types.hpp"

namespace corestack::data {

/// Per-image metadata carried in VIA `file_attributes`.
struct ImageMeta {
    std::string image_id;
    std::string filename;
    std::string well_id;
    int height = 0;
    int width = 0;

    friend bool operator==(const ImageMeta&, const ImageMeta&) = default;
};

/// Hole regions and lithology intervals for a set of images.
struct AnnotationSet {
    std::vector<ImageMeta> images;
    std::vector<HoleAnnotation> holes;
    std::vector<LithologyInterval> intervals;

    const ImageMeta* find_image(std::string_view id) const {
        auto it = std::find_if(images.begin(), images.end(), [&](const ImageMeta& m) { return m.image_id == id; });
        return it == images.end() ? nullptr : &*it;
    }

    std::vector<HoleAnnotation> holes_of(std::string_view id) const {
        std::vector<HoleAnnotation> out;
        std::copy_if(holes.begin(), holes.end(), std::back_inserter(out),
                     [&](const HoleAnnotation& h) { return h.image_id == id; });
        return out;
    }

    std::vector<LithologyInterval> intervals_of(std::string_view id) const {
        std::vector<LithologyInterval> out;
        std::copy_if(intervals.begin(), intervals.end(), std::back_inserter(out),
                     [&](const LithologyInterval& iv) { return iv.image_id == id; });
        return out;
    }

    friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

/// Images ordered by id; holes and intervals grouped by image, relative order kept.
/// This is the order load_annotations produces.
inline AnnotationSet canonicalize(AnnotationSet s) {
    std::stable_sort(s.images.begin(), s.images.end(),
                     [](const ImageMeta& a, const ImageMeta& b) { return a.image_id < b.image_id; });
    std::stable_sort(s.holes.begin(), s.holes.end(),
                     [](const HoleAnnotation& a, const HoleAnnotation& b) { return a.image_id < b.image_id; });
    std::stable_sort(s.intervals.begin(), s.intervals.end(),
                     [](const LithologyInterval& a, const LithologyInterval& b) { return a.image_id < b.image_id; });
    return s;
}

namespace detail {

using nlohmann::json;

inline double number_field(const json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end() || !it->is_number())
        throw ValidationError(where + ": missing numeric field '" + key + "'");
    return it->get<double>();
}

inline int integral_field(const json& obj, const char* key, const std::string& where) {
    const double v = number_field(obj, key, where);
    if (v != std::floor(v) || std::abs(v) > 1e9)
        throw ValidationError(where + ": field '" + std::string(key) + "' must be an integer");
    return static_cast<int>(v);
}

inline int parse_class(const json& attrs, const std::string& where) {
    auto it = attrs.find("class");
    if (it == attrs.end()) throw ValidationError(where + ": interval region lacks region_attributes.class");
    if (it->is_number_integer()) return it->get<int>();
    if (!it->is_string()) throw ValidationError(where + ": class attribute must be a string id");
    const auto& s = it->get_ref<const std::string&>();
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
        throw ValidationError(where + ": class attribute '" + s + "' is not an integer id");
    return v;
}

inline json region_to_json(const HoleAnnotation& h) {
    json shape;
    if (h.is_circle()) {
        const auto& c = h.circle();
        shape = {{"name", "circle"}, {"cx", c.cx}, {"cy", c.cy}, {"r", c.r}};
    } else {
        json xs = json::array(), ys = json::array();
        for (const auto& v : h.polygon().vertices) {
            xs.push_back(v.x);
            ys.push_back(v.y);
        }
        shape = {{"name", "polygon"}, {"all_points_x", xs}, {"all_points_y", ys}};
    }
    return {{"shape_attributes", shape}, {"region_attributes", json::object()}};
}

inline json region_to_json(const LithologyInterval& iv, int width) {
    json shape = {{"name", "rect"}, {"x", 0}, {"y", iv.y_from}, {"width", width}, {"height", iv.y_to - iv.y_from}};
    return {{"shape_attributes", shape}, {"region_attributes", {{"class", std::to_string(iv.class_id)}}}};
}

}  // namespace detail

/// Parses a VIA-compatible annotation document (either the bare image map or a
/// project file with `_via_img_metadata`). Image size comes from
/// `file_attributes.width/height`. When `scheme` is given, interval classes are
/// checked against it.
inline AnnotationSet load_annotations(std::string_view document, const ClassScheme* scheme = nullptr) {
    using nlohmann::json;
    json doc;
    try {
        doc = json::parse(document);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("annotation JSON: ") + e.what(), e.byte);
    }
    if (!doc.is_object()) throw ValidationError("annotation document must be a JSON object");
    const json& entries = doc.contains("_via_img_metadata") ? doc["_via_img_metadata"] : doc;
    if (!entries.is_object()) throw ValidationError("_via_img_metadata must be an object");

    AnnotationSet set;
    for (const auto& [key, entry] : entries.items()) {
        const std::string where_img = "image '" + key + "'";
        if (!entry.is_object()) throw ValidationError(where_img + ": entry must be an object");
        const json attrs = entry.value("file_attributes", json::object());
        ImageMeta meta;
        meta.image_id = attrs.contains("image_id") && attrs["image_id"].is_string()
                            ? attrs["image_id"].get<std::string>()
                            : key;
        meta.filename = entry.value("filename", meta.image_id);
        meta.well_id = attrs.contains("well_id") && attrs["well_id"].is_string() ? attrs["well_id"].get<std::string>()
                                                                                 : std::string{};
        meta.width = detail::integral_field(attrs, "width", where_img + " file_attributes");
        meta.height = detail::integral_field(attrs, "height", where_img + " file_attributes");
        if (meta.width < 1 || meta.height < 1) throw ValidationError(where_img + ": image size must be positive");
        set.images.push_back(meta);

        const json regions = entry.value("regions", json::array());
        if (!regions.is_array()) throw ValidationError(where_img + ": regions must be an array");
        for (std::size_t ri = 0; ri < regions.size(); ++ri) {
            const std::string where = where_img + " region " + std::to_string(ri);
            const json& region = regions[ri];
            if (!region.is_object() || !region.contains("shape_attributes"))
                throw ValidationError(where + ": missing shape_attributes");
            const json& shape = region["shape_attributes"];
            const std::string name = shape.value("name", "");
            if (name == "circle") {
                HoleAnnotation h{meta.image_id, Circle{detail::number_field(shape, "cx", where),
                                                       detail::number_field(shape, "cy", where),
                                                       detail::number_field(shape, "r", where)}};
                validate_hole(h, meta.height, meta.width, where);
                set.holes.push_back(std::move(h));
            } else if (name == "polygon") {
                const auto xs = shape.value("all_points_x", json::array());
                const auto ys = shape.value("all_points_y", json::array());
                if (!xs.is_array() || !ys.is_array() || xs.size() != ys.size())
                    throw ValidationError(where + ": all_points_x/all_points_y must be equal-length arrays");
                Polygon poly;
                for (std::size_t k = 0; k < xs.size(); ++k) {
                    if (!xs[k].is_number() || !ys[k].is_number())
                        throw ValidationError(where + ": polygon coordinates must be numbers");
                    poly.vertices.push_back({xs[k].get<double>(), ys[k].get<double>()});
                }
                HoleAnnotation h{meta.image_id, std::move(poly)};
                validate_hole(h, meta.height, meta.width, where);
                set.holes.push_back(std::move(h));
            } else if (name == "rect") {
                LithologyInterval iv;
                iv.image_id = meta.image_id;
                iv.y_from = detail::integral_field(shape, "y", where);
                iv.y_to = iv.y_from + detail::integral_field(shape, "height", where);
                iv.class_id = detail::parse_class(region.value("region_attributes", json::object()), where);
                validate_interval(iv, meta.height, scheme, where);
                set.intervals.push_back(iv);
            } else {
                throw ValidationError(where + ": unsupported region shape '" + name + "'");
            }
        }
    }
    return set;
}

/// Serializes to the bare VIA image map keyed by image id. Keys and fields are
/// emitted in sorted order, so output is byte-stable.
inline std::string save_annotations(const AnnotationSet& set) {
    using nlohmann::json;
    json doc = json::object();
    for (const auto& meta : set.images) {
        if (doc.contains(meta.image_id)) throw ValidationError("duplicate image id '" + meta.image_id + "'");
        json entry;
        entry["filename"] = meta.filename.empty() ? meta.image_id : meta.filename;
        entry["size"] = -1;
        entry["file_attributes"] = {
            {"image_id", meta.image_id}, {"well_id", meta.well_id}, {"width", meta.width}, {"height", meta.height}};
        entry["regions"] = json::array();
        doc[meta.image_id] = std::move(entry);
    }
    for (const auto& h : set.holes) {
        if (!doc.contains(h.image_id)) throw ValidationError("hole references unknown image '" + h.image_id + "'");
        doc[h.image_id]["regions"].push_back(detail::region_to_json(h));
    }
    for (const auto& iv : set.intervals) {
        const auto* meta = set.find_image(iv.image_id);
        if (!meta) throw ValidationError("interval references unknown image '" + iv.image_id + "'");
        doc[iv.image_id]["regions"].push_back(detail::region_to_json(iv, meta->width));
    }
    return doc.dump(1);
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

// Interval CSV: image_id,well_id,y_from,y_to,class_id

struct IntervalTable {
    std::vector<LithologyInterval> intervals;
    std::map<std::string, std::string> well_of_image;
};

inline std::string save_intervals_csv(const AnnotationSet& set) {
    std::string out = "image_id,well_id,y_from,y_to,class_id\n";
    for (const auto& iv : set.intervals) {
        const auto* meta = set.find_image(iv.image_id);
        const std::string well = meta ? meta->well_id : std::string{};
        if (iv.image_id.find(',') != std::string::npos || well.find(',') != std::string::npos)
            throw ValidationError("ids must not contain commas: " + iv.image_id);
        out += iv.image_id + ',' + well + ',' + std::to_string(iv.y_from) + ',' + std::to_string(iv.y_to) + ',' +
               std::to_string(iv.class_id) + '\n';
    }
    return out;
}

inline IntervalTable load_intervals_csv(std::string_view text, const ClassScheme* scheme = nullptr) {
    IntervalTable table;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    std::size_t offset = 0;
    auto to_int = [&](const std::string& s, const std::string& where) {
        int v = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size()) throw ParseError(where + ": not an integer '" + s + "'", offset);
        return v;
    };
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t line_start = offset;
        offset += line.size() + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line_no == 1 && line.rfind("image_id", 0) == 0) continue;
        std::vector<std::string> cols;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cols.push_back(cell);
        const std::string where = "intervals line " + std::to_string(line_no);
        if (cols.size() != 5) throw ParseError(where + ": expected 5 columns", line_start);
        LithologyInterval iv{cols[0], to_int(cols[2], where), to_int(cols[3], where), to_int(cols[4], where)};
        if (!(iv.y_from >= 0 && iv.y_from < iv.y_to))
            throw ValidationError(where + ": interval must satisfy 0 <= y_from < y_to");
        if (scheme && !scheme->contains(iv.class_id))
            throw ValidationError(where + ": class " + cols[4] + " not in scheme " + std::string(scheme->name_str()));
        auto [it, inserted] = table.well_of_image.emplace(cols[0], cols[1]);
        if (!inserted && it->second != cols[1])
            throw ValidationError(where + ": image '" + cols[0] + "' assigned to two wells");
        table.intervals.push_back(std::move(iv));
    }
    return table;
}

}  // namespace corestack::data
