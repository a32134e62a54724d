#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "corestack/common/error.hpp"
#include "corestack/data/annotations.hpp"
#include "corestack/data/types.hpp"

namespace corestack::ingest {

struct StripCutConfig {
    int strip_height = 100;
    int stride = 20;

    void validate() const {
        if (strip_height < 1 || stride < 1) throw PreconditionError("strip_height and stride must be >= 1");
    }
};

inline std::string patch_id_for(std::string_view image_id, int y_offset) {
    return std::string(image_id) + "@" + std::to_string(y_offset);
}

/// Number of strips a column of `height` rows yields.
inline int strip_count(int height, const StripCutConfig& cfg = {}) {
    cfg.validate();
    if (height < cfg.strip_height) return 0;
    return (height - cfg.strip_height) / cfg.stride + 1;
}

/// Horizontal strips at y = k * stride; class left unassigned.
inline std::vector<data::PatchRecord> cut_strips(std::string_view image_id, std::string_view well_id, int height,
                                                 int width, const StripCutConfig& cfg = {}) {
    const int n = strip_count(height, cfg);
    std::vector<data::PatchRecord> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        data::PatchRecord r;
        r.y_offset = k * cfg.stride;
        r.patch_id = patch_id_for(image_id, r.y_offset);
        r.image_id = std::string(image_id);
        r.well_id = std::string(well_id);
        r.height = cfg.strip_height;
        r.width = width;
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<data::PatchRecord> cut_strips(const data::CoreImage& image, const StripCutConfig& cfg = {}) {
    image.validate();
    return cut_strips(image.image_id, image.well_id, image.height(), image.width(), cfg);
}

/// Labels a strip with the class of the interval containing its vertical
/// center; the scheme's indeterminate class when none does.
inline data::PatchRecord assign_class(data::PatchRecord record, std::span<const data::LithologyInterval> intervals,
                                      const data::ClassScheme& scheme) {
    const double center = record.y_offset + record.height / 2.0;
    const data::LithologyInterval* hit = nullptr;
    for (const auto& iv : intervals) {
        if (iv.image_id != record.image_id)
            throw PreconditionError("interval for image '" + iv.image_id + "' passed for strip of '" + record.image_id + "'");
        if (!iv.contains(center)) continue;
        if (hit)
            throw ValidationError("overlapping intervals cover y=" + std::to_string(center) + " in image '" +
                                  record.image_id + "'");
        hit = &iv;
    }
    if (hit && !scheme.contains(hit->class_id))
        throw ValidationError("interval class " + std::to_string(hit->class_id) + " not in scheme " +
                              std::string(scheme.name_str()));
    record.class_id = hit ? hit->class_id : scheme.indeterminate_id();
    return record;
}

/// Cuts and labels every image; records keep the image order, then y order.
inline data::DatasetManifest build_manifest(std::span<const data::ImageMeta> images,
                                            std::span<const data::LithologyInterval> intervals, data::SchemeName scheme,
                                            const StripCutConfig& cfg = {}) {
    const auto& s = data::ClassScheme::get(scheme);
    std::map<std::string, std::vector<data::LithologyInterval>> by_image;
    for (const auto& iv : intervals) by_image[iv.image_id].push_back(iv);
    for (const auto& [id, ivs] : by_image)
        if (std::none_of(images.begin(), images.end(), [&](const data::ImageMeta& m) { return m.image_id == id; }))
            throw NotFoundError("intervals reference unknown image '" + id + "'");
    data::DatasetManifest m;
    m.scheme = scheme;
    for (const auto& img : images) {
        const auto& ivs = by_image[img.image_id];
        for (const auto& iv : ivs) data::validate_interval(iv, img.height, &s, "image '" + img.image_id + "'");
        for (auto& r : cut_strips(img.image_id, img.well_id, img.height, img.width, cfg))
            m.records.push_back(assign_class(std::move(r), ivs, s));
    }
    return m;
}

}  // namespace corestack::ingest
