#pragma once

#include <map>
#include <string>
#include <vector>

#include "corestack/common/plot.hpp"
#include "corestack/data/types.hpp"

namespace corestack::ingest {

/// Per-split class counts; every scheme class is present (zero when absent).
struct ClassHistogram {
    data::SchemeName scheme = data::SchemeName::nine_class;
    std::map<data::Split, std::map<int, std::size_t>> counts;

    std::size_t total(data::Split s) const {
        std::size_t t = 0;
        if (auto it = counts.find(s); it != counts.end())
            for (const auto& [id, n] : it->second) t += n;
        return t;
    }

    /// Class counts summed over every split.
    std::map<int, std::size_t> overall() const {
        std::map<int, std::size_t> out;
        for (const auto& [split, m] : counts)
            for (const auto& [id, n] : m) out[id] += n;
        return out;
    }

    friend bool operator==(const ClassHistogram&, const ClassHistogram&) = default;
};

inline ClassHistogram class_histogram(const data::DatasetManifest& manifest) {
    ClassHistogram h;
    h.scheme = manifest.scheme;
    const auto& scheme = manifest.class_scheme();
    for (auto s : {data::Split::train, data::Split::val, data::Split::test, data::Split::unassigned})
        for (const auto& c : scheme.classes()) h.counts[s][c.id] = 0;
    for (const auto& r : manifest.records) {
        if (!scheme.contains(r.class_id))
            throw ValidationError("patch '" + r.patch_id + "' has class " + std::to_string(r.class_id) +
                                  " outside scheme " + std::string(scheme.name_str()));
        ++h.counts[r.split][r.class_id];
    }
    return h;
}

/// Bar chart of the histogram, one series per nonempty split.
inline ImageU8 render_histogram(const ClassHistogram& h, const std::string& title) {
    const auto& scheme = data::ClassScheme::get(h.scheme);
    std::vector<std::string> labels;
    for (const auto& c : scheme.classes()) labels.push_back(std::to_string(c.id));
    std::vector<plot::Series> series;
    for (auto s : {data::Split::train, data::Split::val, data::Split::test, data::Split::unassigned}) {
        if (h.total(s) == 0) continue;
        plot::Series ser{std::string(data::to_string(s)), {}};
        for (const auto& c : scheme.classes()) ser.values.push_back(static_cast<double>(h.counts.at(s).at(c.id)));
        series.push_back(std::move(ser));
    }
    return plot::bar_chart(title, labels, series);
}

/// Strip counts of the original proprietary corpus, kept for side-by-side reports.
namespace reference_counts {
inline const std::map<int, std::size_t> six_class = {{1, 22515}, {2, 17849}, {3, 7477},
                                                     {4, 20889}, {5, 41878}, {999, 5646}};
inline const std::map<int, std::size_t> nine_class = {{-1, 7768}, {0, 2417},  {1, 23867}, {2, 26606}, {3, 32983},
                                                      {4, 25110}, {5, 46263}, {6, 1420},  {7, 770}};
}  // namespace reference_counts

}  // namespace corestack::ingest
