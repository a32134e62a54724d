#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "corestack/common/error.hpp"
#include "corestack/data/annotations.hpp"
#include "corestack/data/types.hpp"

namespace corestack::data {

// JSON-Lines manifest: one PatchRecord object per line, no header. Scheme,
// split mode, seed and image root live in a sidecar `<file>.meta.json`.

inline nlohmann::json to_json(const PatchRecord& r) {
    return {{"patch_id", r.patch_id}, {"image_id", r.image_id}, {"well_id", r.well_id},
            {"y_offset", r.y_offset}, {"height", r.height},     {"width", r.width},
            {"class_id", r.class_id}, {"split", std::string(to_string(r.split))}};
}

inline PatchRecord record_from_json(const nlohmann::json& j, const std::string& where) {
    PatchRecord r;
    try {
        r.patch_id = j.at("patch_id").get<std::string>();
        r.image_id = j.at("image_id").get<std::string>();
        r.well_id = j.at("well_id").get<std::string>();
        r.y_offset = j.at("y_offset").get<int>();
        r.height = j.at("height").get<int>();
        r.width = j.at("width").get<int>();
        r.class_id = j.at("class_id").get<int>();
        r.split = parse_split(j.at("split").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(where + ": " + e.what());
    }
    return r;
}

/// Checks ids are unique and classes belong to the scheme.
inline void validate_manifest(const DatasetManifest& m) {
    const auto& scheme = m.class_scheme();
    std::set<std::string_view> ids;
    for (const auto& r : m.records) {
        if (!ids.insert(r.patch_id).second) throw ValidationError("duplicate patch_id '" + r.patch_id + "'");
        if (r.height < 1 || r.width < 1 || r.y_offset < 0)
            throw ValidationError("patch '" + r.patch_id + "': invalid geometry");
        if (r.class_id != kUnassignedClass && !scheme.contains(r.class_id))
            throw ValidationError("patch '" + r.patch_id + "': class " + std::to_string(r.class_id) +
                                  " not in scheme " + std::string(scheme.name_str()));
    }
}

inline std::string manifest_to_jsonl(const DatasetManifest& m) {
    validate_manifest(m);
    std::string out;
    for (const auto& r : m.records) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<PatchRecord> records_from_jsonl(std::string_view text) {
    std::vector<PatchRecord> records;
    std::set<std::string> ids;
    std::size_t offset = 0;
    std::size_t line_no = 0;
    while (offset < text.size()) {
        auto end = text.find('\n', offset);
        if (end == std::string_view::npos) end = text.size();
        const auto line = text.substr(offset, end - offset);
        ++line_no;
        if (!line.empty() && line.find_first_not_of(" \t\r") != std::string_view::npos) {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::parse_error& e) {
                throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what(), offset + e.byte);
            }
            auto rec = record_from_json(j, "manifest line " + std::to_string(line_no));
            if (!ids.insert(rec.patch_id).second) throw ValidationError("duplicate patch_id '" + rec.patch_id + "'");
            records.push_back(std::move(rec));
        }
        offset = end + 1;
    }
    return records;
}

inline std::filesystem::path manifest_meta_path(const std::filesystem::path& path) {
    return path.string() + ".meta.json";
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    write_text_file(path, manifest_to_jsonl(m));
    nlohmann::json meta = {{"scheme", std::string(m.class_scheme().name_str())},
                           {"split_mode", std::string(to_string(m.split_mode))},
                           {"seed", m.seed},
                           {"image_root", m.image_root}};
    write_text_file(manifest_meta_path(path), meta.dump(1));
}

/// Loads a manifest and its sidecar. `scheme` is required when the sidecar is
/// absent; when both exist they must agree.
inline DatasetManifest load_manifest(const std::filesystem::path& path,
                                     std::optional<SchemeName> scheme = std::nullopt) {
    DatasetManifest m;
    const auto meta_path = manifest_meta_path(path);
    if (std::filesystem::exists(meta_path)) {
        nlohmann::json meta;
        const auto text = read_text_file(meta_path);
        try {
            meta = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("manifest sidecar: " + std::string(e.what()), e.byte);
        }
        m.scheme = ClassScheme::parse_name(meta.value("scheme", "nine_class"));
        m.split_mode = parse_split_mode(meta.value("split_mode", "none"));
        m.seed = meta.value("seed", std::uint64_t{0});
        m.image_root = meta.value("image_root", "");
        if (scheme && *scheme != m.scheme)
            require_same_scheme(ClassScheme::get(*scheme), ClassScheme::get(m.scheme));
    } else if (scheme) {
        m.scheme = *scheme;
    } else {
        throw PreconditionError("manifest " + path.string() + " has no sidecar; a scheme must be given");
    }
    m.records = records_from_jsonl(read_text_file(path));
    validate_manifest(m);
    return m;
}

}  // namespace corestack::data
