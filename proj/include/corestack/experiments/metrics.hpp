#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corestack/common/error.hpp"
#include "corestack/common/log.hpp"
#include "corestack/data/scheme.hpp"

namespace corestack::experiments {

/// Rows = true class, columns = predicted, both in scheme order.
struct ConfusionMatrix {
    data::SchemeName scheme = data::SchemeName::nine_class;
    std::vector<std::vector<long long>> counts;

    const data::ClassScheme& class_scheme() const { return data::ClassScheme::get(scheme); }
    std::size_t size() const { return counts.size(); }

    long long total() const {
        long long t = 0;
        for (const auto& row : counts)
            for (auto v : row) t += v;
        return t;
    }

    long long support(std::size_t i) const {
        long long t = 0;
        for (auto v : counts.at(i)) t += v;
        return t;
    }

    long long trace() const {
        long long t = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) t += counts[i][i];
        return t;
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix empty_confusion(data::SchemeName scheme) {
    const auto n = data::ClassScheme::get(scheme).size();
    return {scheme, std::vector<std::vector<long long>>(n, std::vector<long long>(n, 0))};
}

/// Tallies (label, prediction) pairs given as class ids.
inline ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels, data::SchemeName scheme) {
    if (predictions.size() != labels.size())
        throw PreconditionError("confusion: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(labels.size()) + " labels");
    auto cm = empty_confusion(scheme);
    const auto& s = cm.class_scheme();
    for (std::size_t k = 0; k < labels.size(); ++k) ++cm.counts[s.index_of(labels[k])][s.index_of(predictions[k])];
    return cm;
}

inline double overall_accuracy(const ConfusionMatrix& cm) {
    const auto total = cm.total();
    if (total == 0) throw ValidationError("accuracy of an empty confusion matrix is undefined");
    return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

/// Recall per class; nullopt where the class has no support.
inline std::vector<std::optional<double>> per_class_recall(const ConfusionMatrix& cm) {
    std::vector<std::optional<double>> out;
    for (std::size_t i = 0; i < cm.size(); ++i) {
        const auto s = cm.support(i);
        out.push_back(s > 0 ? std::optional<double>(static_cast<double>(cm.counts[i][i]) / static_cast<double>(s)) : std::nullopt);
    }
    return out;
}

/// Mean recall over classes with nonzero support; excluded classes are warned about.
inline double class_average_accuracy(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw ValidationError("accuracy of an empty confusion matrix is undefined");
    double sum = 0;
    int n = 0;
    std::vector<int> skipped;
    const auto recall = per_class_recall(cm);
    for (std::size_t i = 0; i < recall.size(); ++i) {
        if (recall[i]) {
            sum += *recall[i];
            ++n;
        } else {
            skipped.push_back(cm.class_scheme().id_at(i));
        }
    }
    if (!skipped.empty()) {
        std::string ids;
        for (int id : skipped) ids += (ids.empty() ? "" : ", ") + std::to_string(id);
        log::warn("class-average accuracy excludes zero-support classes: " + ids);
    }
    return sum / n;
}

inline std::string confusion_csv(const ConfusionMatrix& cm) {
    const auto& s = cm.class_scheme();
    std::ostringstream out;
    out << "true\\pred";
    for (const auto& c : s.classes()) out << ',' << c.id;
    out << '\n';
    for (std::size_t i = 0; i < cm.size(); ++i) {
        out << s.id_at(i);
        for (auto v : cm.counts[i]) out << ',' << v;
        out << '\n';
    }
    return out.str();
}

inline nlohmann::json to_json(const ConfusionMatrix& cm) {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& c : cm.class_scheme().classes()) ids.push_back(c.id);
    return {{"scheme", std::string(cm.class_scheme().name_str())}, {"class_ids", ids}, {"counts", cm.counts}};
}

// ---------------------------------------------------------------- minority classes

struct MinorityThresholds {
    double max_share = 0.02;   // training share below which a class is a minority
    double max_recall = 0.5;   // recall below which it counts as poorly recognised
};

struct MinorityFlag {
    int class_id = 0;
    double share = 0;               // of the training histogram
    std::optional<double> recall;   // nullopt: no evaluation support

    friend bool operator==(const MinorityFlag&, const MinorityFlag&) = default;
};

/// Classes with a small training share and low recall. A class absent from the
/// evaluation set cannot show it is recognised, so it is flagged on share alone.
inline std::vector<MinorityFlag> minority_class_report(const ConfusionMatrix& cm,
                                                       const std::map<int, std::size_t>& train_counts,
                                                       const MinorityThresholds& th = {}) {
    const auto& s = cm.class_scheme();
    std::size_t total = 0;
    for (const auto& [id, n] : train_counts) {
        if (!s.contains(id))
            throw ValidationError("histogram class " + std::to_string(id) + " is not in scheme " + std::string(s.name_str()));
        total += n;
    }
    if (total == 0) throw ValidationError("minority report needs a nonempty training histogram");
    const auto recall = per_class_recall(cm);
    std::vector<MinorityFlag> out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const int id = s.id_at(i);
        const auto it = train_counts.find(id);
        const double share = static_cast<double>(it == train_counts.end() ? 0 : it->second) / static_cast<double>(total);
        if (share < th.max_share && (!recall[i] || *recall[i] < th.max_recall)) out.push_back({id, share, recall[i]});
    }
    return out;
}

inline nlohmann::json to_json(const MinorityFlag& f) {
    return {{"class_id", f.class_id}, {"share", f.share}, {"recall", f.recall ? nlohmann::json(*f.recall) : nlohmann::json()}};
}

}  // namespace corestack::experiments
