#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "corestack/common/error.hpp"

namespace corestack::data {

enum class SchemeName { six_class, nine_class };

struct ClassInfo {
    int id;
    std::string label;
};

/// Ordered class list. Class indices (0..size-1) follow the listed order and are
/// what models emit; ids are what files carry.
class ClassScheme {
public:
    static const ClassScheme& six_class() {
        static const ClassScheme s(SchemeName::six_class,
                                   {{1, "facies 1"},
                                    {2, "facies 2"},
                                    {3, "facies 3"},
                                    {4, "facies 4"},
                                    {5, "facies 5"},
                                    {999, "indeterminate"}},
                                   999);
        return s;
    }

    static const ClassScheme& nine_class() {
        static const ClassScheme s(SchemeName::nine_class,
                                   {{-1, "destructed core"},
                                    {0, "blank background"},
                                    {1, "coarse-grained sandstone"},
                                    {2, "medium-grained sandstone"},
                                    {3, "fine-grained sandstone"},
                                    {4, "shaly sandstone"},
                                    {5, "clay"},
                                    {6, "coal"},
                                    {7, "dense rock"}},
                                   0);
        return s;
    }

    static const ClassScheme& get(SchemeName name) {
        return name == SchemeName::six_class ? six_class() : nine_class();
    }

    static const ClassScheme& by_name(std::string_view name) { return get(parse_name(name)); }

    static SchemeName parse_name(std::string_view name) {
        if (name == "six_class") return SchemeName::six_class;
        if (name == "nine_class") return SchemeName::nine_class;
        throw ValidationError("unknown class scheme '" + std::string(name) + "'");
    }

    SchemeName name() const noexcept { return name_; }
    std::string_view name_str() const noexcept {
        return name_ == SchemeName::six_class ? "six_class" : "nine_class";
    }

    std::span<const ClassInfo> classes() const noexcept { return classes_; }
    std::size_t size() const noexcept { return classes_.size(); }

    bool contains(int id) const noexcept {
        return std::any_of(classes_.begin(), classes_.end(), [id](const ClassInfo& c) { return c.id == id; });
    }

    std::size_t index_of(int id) const {
        for (std::size_t i = 0; i < classes_.size(); ++i)
            if (classes_[i].id == id) return i;
        throw ValidationError("class id " + std::to_string(id) + " is not in scheme " + std::string(name_str()));
    }

    int id_at(std::size_t index) const { return classes_.at(index).id; }

    /// Fallback class for pixels no lithology interval covers.
    int indeterminate_id() const noexcept { return indeterminate_; }

    friend bool operator==(const ClassScheme& a, const ClassScheme& b) noexcept { return a.name_ == b.name_; }

private:
    ClassScheme(SchemeName name, std::vector<ClassInfo> classes, int indeterminate)
        : name_(name), classes_(std::move(classes)), indeterminate_(indeterminate) {}

    SchemeName name_;
    std::vector<ClassInfo> classes_;
    int indeterminate_;
};

/// Schemes are never converted into one another: no mapping between them is defined.
inline void require_same_scheme(const ClassScheme& expected, const ClassScheme& actual) {
    if (!(expected == actual))
        throw ValidationError("scheme mismatch: expected " + std::string(expected.name_str()) + ", got " +
                              std::string(actual.name_str()) + " (cross-scheme conversion is not supported)");
}

}  // namespace corestack::data
