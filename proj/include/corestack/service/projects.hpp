#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <shared_mutex>
#include <string>

#include <nlohmann/json.hpp>

#include "corestack/common/error.hpp"
#include "corestack/data/annotations.hpp"

namespace corestack::service {

/// Annotation project: image list plus annotations, versioned by revision.
struct AnnotationProject {
    std::string project_id;
    long revision = 0;
    data::AnnotationSet annotations;

    friend bool operator==(const AnnotationProject&, const AnnotationProject&) = default;
};

/// Projects stored as directories under `<root>/<id>/`:
///   project.json     id and revision
///   annotations.json VIA document (images carried in file_attributes)
///   intervals.csv    lithology intervals, for ingest
/// Writes are serialized per project and accepted only at the expected revision.
class ProjectStore {
public:
    explicit ProjectStore(std::filesystem::path root, const data::ClassScheme* scheme = nullptr)
        : root_(std::move(root)), scheme_(scheme) {
        std::filesystem::create_directories(root_);
    }

    const std::filesystem::path& root() const { return root_; }

    static bool valid_id(const std::string& id) {
        static const std::regex re("[A-Za-z0-9_.-]{1,128}");
        return std::regex_match(id, re) && id != "." && id != "..";
    }

    bool exists(const std::string& id) const {
        check_id(id);
        return std::filesystem::exists(dir(id) / "project.json");
    }

    AnnotationProject get(const std::string& id) const {
        check_id(id);
        auto& m = lock_of(id);
        std::shared_lock lock(m);
        return read(id);
    }

    /// Creates an empty project at revision 0. Conflict if it already exists.
    AnnotationProject create(const std::string& id) {
        check_id(id);
        auto& m = lock_of(id);
        std::unique_lock lock(m);
        if (std::filesystem::exists(dir(id) / "project.json")) throw ConflictError("project '" + id + "' already exists", read(id).revision);
        AnnotationProject p{id, 0, {}};
        write(p);
        return p;
    }

    /// Replaces the annotation set if `expected_revision` is current; revision += 1.
    AnnotationProject put_annotations(const std::string& id, long expected_revision, data::AnnotationSet set) {
        check_id(id);
        auto& m = lock_of(id);
        std::unique_lock lock(m);
        auto p = read(id);
        if (p.revision != expected_revision)
            throw ConflictError("project '" + id + "' is at revision " + std::to_string(p.revision) + ", not " +
                                    std::to_string(expected_revision),
                                p.revision);
        data::save_annotations(set);  // rejects dangling references before anything is written
        p.annotations = data::canonicalize(std::move(set));
        ++p.revision;
        write(p);
        return p;
    }

private:
    std::filesystem::path dir(const std::string& id) const { return root_ / id; }

    void check_id(const std::string& id) const {
        if (!valid_id(id)) throw ValidationError("invalid project id '" + id + "'");
    }

    std::shared_mutex& lock_of(const std::string& id) const {
        std::lock_guard g(locks_mutex_);
        auto& slot = locks_[id];
        if (!slot) slot = std::make_unique<std::shared_mutex>();
        return *slot;
    }

    AnnotationProject read(const std::string& id) const {
        const auto d = dir(id);
        if (!std::filesystem::exists(d / "project.json")) throw NotFoundError("unknown project '" + id + "'");
        const auto meta = nlohmann::json::parse(data::read_text_file(d / "project.json"));
        AnnotationProject p;
        p.project_id = meta.at("project_id").get<std::string>();
        p.revision = meta.at("revision").get<long>();
        p.annotations = data::load_annotations(data::read_text_file(d / "annotations.json"), scheme_);
        return p;
    }

    /// Each file goes to a temporary name first, then renamed over the old one;
    /// project.json last, so a crash never advertises a revision that was not stored.
    void write(const AnnotationProject& p) const {
        const auto d = dir(p.project_id);
        std::filesystem::create_directories(d);
        auto put = [&](const std::string& name, const std::string& text) {
            const auto tmp = d / (name + ".tmp");
            data::write_text_file(tmp, text);
            std::filesystem::rename(tmp, d / name);
        };
        put("annotations.json", data::save_annotations(p.annotations));
        put("intervals.csv", data::save_intervals_csv(p.annotations));
        put("project.json", nlohmann::json{{"project_id", p.project_id}, {"revision", p.revision}}.dump(2) + "\n");
    }

    std::filesystem::path root_;
    const data::ClassScheme* scheme_;
    mutable std::mutex locks_mutex_;
    mutable std::map<std::string, std::unique_ptr<std::shared_mutex>> locks_;
};

}  // namespace corestack::service
