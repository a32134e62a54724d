#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "corestack/common/error.hpp"
#include "corestack/common/rng.hpp"
#include "corestack/data/types.hpp"

namespace corestack::ingest {

struct SplitRatios {
    double train = 0.70;
    double val = 0.15;
    double test = 0.15;

    void validate() const {
        if (train < 0 || val < 0 || test < 0) throw PreconditionError("split ratios must be nonnegative");
        if (std::abs(train + val + test - 1.0) > 1e-9) throw PreconditionError("split ratios must sum to 1");
    }
};

struct SplitCounts {
    std::size_t train = 0, val = 0, test = 0;
};

/// floor(train*N), floor(val*N), remainder to test.
inline SplitCounts split_counts(std::size_t n, const SplitRatios& ratios) {
    // The epsilon absorbs representation error (0.7 * 20 = 13.999...).
    auto floor_of = [n](double f) { return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)); };
    SplitCounts c;
    c.train = floor_of(ratios.train);
    c.val = std::min(floor_of(ratios.val), n - c.train);
    c.test = n - c.train - c.val;
    return c;
}

/// Random partition of the records. Deterministic given the seed.
inline data::DatasetManifest split_strip_random(data::DatasetManifest manifest, const SplitRatios& ratios,
                                                std::uint64_t seed) {
    ratios.validate();
    const std::size_t n = manifest.records.size();
    if (n < 3) throw PreconditionError("split_strip_random needs at least 3 records");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(order));
    const auto counts = split_counts(n, ratios);
    for (std::size_t k = 0; k < n; ++k) {
        auto& r = manifest.records[order[k]];
        r.split = k < counts.train ? data::Split::train
                  : k < counts.train + counts.val ? data::Split::val
                                                  : data::Split::test;
    }
    manifest.split_mode = data::SplitMode::strip_random;
    manifest.seed = seed;
    return manifest;
}

inline std::set<std::string> wells_of(const data::DatasetManifest& m) {
    std::set<std::string> wells;
    for (const auto& r : m.records) wells.insert(r.well_id);
    return wells;
}

/// Assigns each record by its well: test wells, validation wells, the rest train.
inline data::DatasetManifest split_well_held_out(data::DatasetManifest manifest, const std::set<std::string>& test_wells,
                                                 const std::set<std::string>& val_wells) {
    if (test_wells.empty() || val_wells.empty()) throw PreconditionError("test and val well sets must be nonempty");
    for (const auto& w : test_wells)
        if (val_wells.contains(w)) throw PreconditionError("well '" + w + "' is in both test and val sets");
    const auto wells = wells_of(manifest);
    for (const auto* group : {&test_wells, &val_wells})
        for (const auto& w : *group)
            if (!wells.contains(w)) throw NotFoundError("well '" + w + "' has no records in the manifest");
    if (test_wells.size() + val_wells.size() >= wells.size())
        throw PreconditionError("held-out wells leave no wells for training");
    for (auto& r : manifest.records) {
        r.split = test_wells.contains(r.well_id)  ? data::Split::test
                  : val_wells.contains(r.well_id) ? data::Split::val
                                                  : data::Split::train;
    }
    manifest.split_mode = data::SplitMode::well_held_out;
    return manifest;
}

/// Drops `which`-split records of the listed classes at random until each class
/// holds its target share of that split's remaining records (at least one
/// record is kept). Other splits are untouched. Deterministic given the seed.
inline data::DatasetManifest downsample_classes(data::DatasetManifest manifest, const std::map<int, double>& target_share,
                                                data::Split which, std::uint64_t seed) {
    double minority_total = 0;
    for (const auto& [id, share] : target_share) {
        if (!manifest.class_scheme().contains(id))
            throw ValidationError("class " + std::to_string(id) + " is not in scheme " +
                                  std::string(manifest.class_scheme().name_str()));
        if (!(share > 0 && share < 1)) throw PreconditionError("target shares must lie in (0, 1)");
        minority_total += share;
    }
    if (minority_total >= 1) throw PreconditionError("target shares must sum to less than 1");
    std::map<int, std::vector<std::size_t>> members;
    std::size_t majority = 0;
    for (std::size_t i = 0; i < manifest.records.size(); ++i) {
        const auto& r = manifest.records[i];
        if (r.split != which) continue;
        if (target_share.contains(r.class_id))
            members[r.class_id].push_back(i);
        else
            ++majority;
    }
    std::vector<bool> drop(manifest.records.size(), false);
    Rng rng(seed);
    for (const auto& [id, share] : target_share) {
        auto& idx = members[id];
        if (idx.empty()) continue;
        const auto keep = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::llround(share / (1 - minority_total) * static_cast<double>(majority))), 1, idx.size());
        rng.shuffle(std::span<std::size_t>(idx));
        for (std::size_t k = keep; k < idx.size(); ++k) drop[idx[k]] = true;
    }
    std::vector<data::PatchRecord> kept;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
        if (!drop[i]) kept.push_back(std::move(manifest.records[i]));
    manifest.records = std::move(kept);
    return manifest;
}

/// True when no test-split well also appears in train or val.
inline bool held_out_wells_disjoint(const data::DatasetManifest& m) {
    std::set<std::string> seen_train_val;
    for (const auto& r : m.records)
        if (r.split == data::Split::train || r.split == data::Split::val) seen_train_val.insert(r.well_id);
    return std::none_of(m.records.begin(), m.records.end(), [&](const data::PatchRecord& r) {
        return r.split == data::Split::test && seen_train_val.contains(r.well_id);
    });
}

}  // namespace corestack::ingest
