#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corestack/common/image_io.hpp"
#include "corestack/common/plot.hpp"
#include "corestack/experiments/metrics.hpp"
#include "corestack/ingest/histogram.hpp"
#include "corestack/ingest/split.hpp"
#include "corestack/ingest/strips.hpp"
#include "corestack/ingest/synth.hpp"
#include "corestack/texture/model.hpp"

namespace corestack::experiments {

enum class ExperimentId { exp1_drp6, exp2_drp9, exp3_dep9_leaky, exp4_dep9_wellsplit };

inline std::string_view to_string(ExperimentId id) noexcept {
    switch (id) {
        case ExperimentId::exp1_drp6: return "exp1_drp6";
        case ExperimentId::exp2_drp9: return "exp2_drp9";
        case ExperimentId::exp3_dep9_leaky: return "exp3_dep9_leaky";
        case ExperimentId::exp4_dep9_wellsplit: return "exp4_dep9_wellsplit";
    }
    return "exp1_drp6";
}

inline ExperimentId parse_experiment(std::string_view s) {
    for (auto id : {ExperimentId::exp1_drp6, ExperimentId::exp2_drp9, ExperimentId::exp3_dep9_leaky,
                    ExperimentId::exp4_dep9_wellsplit})
        if (to_string(id) == s) return id;
    throw ValidationError("unknown experiment '" + std::string(s) + "'");
}

/// Head, scheme and split protocol of each experiment.
struct ExperimentSetup {
    texture::Head head;
    data::SchemeName scheme;
    data::SplitMode split;
};

inline ExperimentSetup setup_of(ExperimentId id) {
    switch (id) {
        case ExperimentId::exp1_drp6: return {texture::Head::drp, data::SchemeName::six_class, data::SplitMode::strip_random};
        case ExperimentId::exp2_drp9: return {texture::Head::drp, data::SchemeName::nine_class, data::SplitMode::strip_random};
        case ExperimentId::exp3_dep9_leaky: return {texture::Head::dep, data::SchemeName::nine_class, data::SplitMode::strip_random};
        case ExperimentId::exp4_dep9_wellsplit:
            return {texture::Head::dep, data::SchemeName::nine_class, data::SplitMode::well_held_out};
    }
    throw ValidationError("unknown experiment");
}

/// Published (overall, class-average) accuracies on the original corpus; shown
/// next to results, never asserted.
struct ReferenceMetrics {
    double overall = 0;
    double class_average = 0;
};

inline ReferenceMetrics reference_of(ExperimentId id) {
    switch (id) {
        case ExperimentId::exp1_drp6: return {0.60, 0.519};
        case ExperimentId::exp2_drp9: return {0.758, 0.822};
        case ExperimentId::exp3_dep9_leaky: return {0.937, 0.942};
        case ExperimentId::exp4_dep9_wellsplit: return {0.508, 0.4617};
    }
    return {};
}

struct ExperimentConfig {
    ingest::SynthCorpusConfig corpus;  // scheme is set by the experiment
    texture::TextureConfig model;      // head and scheme are set by the experiment
    texture::TextureTrainConfig train;
    ingest::SplitRatios ratios;
    /// Well-held-out wells; empty picks the last well for test and the one before for val.
    std::set<std::string> test_wells, val_wells;
    std::uint64_t seed = 1;  // split shuffling
    /// Training-split shares to downsample listed classes to (imbalance studies).
    std::map<int, double> train_class_shares;
};

struct ExperimentReport {
    std::string title;
    data::SplitMode split_mode = data::SplitMode::none;
    std::string head;
    ConfusionMatrix confusion;
    double overall_accuracy = 0;
    double class_average_accuracy = 0;
    std::vector<texture::EpochLog> loss_curve;
    int best_epoch = 0;
    ingest::ClassHistogram histogram;
    std::vector<MinorityFlag> minority;
    std::optional<ReferenceMetrics> reference;
    double seconds = 0;

    nlohmann::json metrics_json() const {
        nlohmann::json j = {{"experiment", title},
                            {"head", head},
                            {"split_mode", std::string(data::to_string(split_mode))},
                            {"overall_accuracy", overall_accuracy},
                            {"class_average_accuracy", class_average_accuracy},
                            {"best_epoch", best_epoch},
                            {"seconds", seconds},
                            {"confusion", to_json(confusion)}};
        j["loss_curve"] = nlohmann::json::array();
        for (const auto& e : loss_curve)
            j["loss_curve"].push_back(
                {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_accuracy", e.val_accuracy}});
        j["minority_classes"] = nlohmann::json::array();
        for (const auto& f : minority) j["minority_classes"].push_back(to_json(f));
        nlohmann::json hist = nlohmann::json::object();
        for (const auto& [split, counts] : histogram.counts) {
            nlohmann::json c = nlohmann::json::object();
            for (const auto& [id, n] : counts) c[std::to_string(id)] = n;
            hist[std::string(data::to_string(split))] = c;
        }
        j["histogram"] = hist;
        if (reference)
            j["reference"] = {{"overall_accuracy", reference->overall},
                              {"class_average_accuracy", reference->class_average},
                              {"note", "original proprietary corpus; not comparable to synthetic results"}};
        return j;
    }
};

/// Confusion matrix of the model over one split of the manifest.
inline ConfusionMatrix evaluate_split(const texture::TextureClassifier& model, const data::DatasetManifest& manifest,
                                      data::Split split, const texture::StripLoader& load) {
    data::require_same_scheme(model.scheme(), manifest.class_scheme());
    std::vector<const data::PatchRecord*> recs;
    std::vector<int> labels;
    for (const auto& r : manifest.records)
        if (r.split == split && r.class_id != data::kUnassignedClass) {
            recs.push_back(&r);
            labels.push_back(r.class_id);
        }
    if (recs.empty()) throw ValidationError("manifest has no labelled " + std::string(data::to_string(split)) + " strips");
    const auto pred = texture::predict_ids(model, texture::strip_features(recs, load));
    return confusion(pred, labels, manifest.scheme);
}

/// Fills metrics from the confusion matrix and training histogram.
inline void finish_report(ExperimentReport& rep, const data::DatasetManifest& manifest) {
    rep.overall_accuracy = overall_accuracy(rep.confusion);
    rep.class_average_accuracy = class_average_accuracy(rep.confusion);
    rep.histogram = ingest::class_histogram(manifest);
    if (rep.histogram.total(data::Split::train) > 0)
        rep.minority = minority_class_report(rep.confusion, rep.histogram.counts.at(data::Split::train));
    else
        log::warn("manifest has no training strips; minority-class report skipped");
}

/// Manifest of a synthetic corpus (images in memory) with the experiment's split applied.
inline data::DatasetManifest split_manifest(const ingest::SynthCorpus& corpus, data::SchemeName scheme,
                                            data::SplitMode mode, const ExperimentConfig& cfg) {
    auto m = ingest::build_manifest(corpus.annotations.images, corpus.intervals, scheme);
    if (mode == data::SplitMode::strip_random) {
        m = ingest::split_strip_random(std::move(m), cfg.ratios, cfg.seed);
        if (!cfg.train_class_shares.empty())
            m = ingest::downsample_classes(std::move(m), cfg.train_class_shares, data::Split::train, cfg.seed);
        return m;
    }
    auto test = cfg.test_wells, val = cfg.val_wells;
    const auto wells = ingest::wells_of(m);
    if (test.empty()) test = {*wells.rbegin()};
    if (val.empty()) val = {*std::next(wells.rbegin())};
    m = ingest::split_well_held_out(std::move(m), test, val);
    if (!ingest::held_out_wells_disjoint(m)) throw Error("well-held-out split evaluates on a training well");
    if (!cfg.train_class_shares.empty())
        m = ingest::downsample_classes(std::move(m), cfg.train_class_shares, data::Split::train, cfg.seed);
    return m;
}

/// Full chain on a synthetic corpus: synthesize, cut, split, train, evaluate on test.
/// When `model_out` is given the trained classifier is saved there.
inline ExperimentReport run_experiment(ExperimentId id, const ExperimentConfig& cfg,
                                       const std::filesystem::path& model_out = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto setup = setup_of(id);
    auto corpus_cfg = cfg.corpus;
    corpus_cfg.scheme = setup.scheme;
    if (!corpus_cfg.class_weights.empty() && corpus_cfg.class_weights.size() != data::ClassScheme::get(setup.scheme).size())
        throw ValidationError("class_weights do not match the experiment's scheme");
    const auto corpus = ingest::synth_corpus(corpus_cfg);
    auto images = std::make_shared<std::map<std::string, ImageU8>>();
    for (const auto& img : corpus.images) (*images)[img.image_id] = img.pixels;
    const auto loader = texture::memory_loader(images);
    const auto manifest = split_manifest(corpus, setup.scheme, setup.split, cfg);

    auto model_cfg = cfg.model;
    model_cfg.head = setup.head;
    model_cfg.scheme = setup.scheme;
    texture::TextureClassifier model(model_cfg);
    const auto tr = texture::train_texture(model, manifest, loader, cfg.train);
    if (!model_out.empty()) model.save(model_out);

    ExperimentReport rep;
    rep.title = std::string(to_string(id));
    rep.split_mode = setup.split;
    rep.head = std::string(texture::to_string(setup.head));
    rep.loss_curve = tr.log;
    rep.best_epoch = tr.best_epoch;
    rep.reference = reference_of(id);
    rep.confusion = evaluate_split(model, manifest, data::Split::test, loader);
    finish_report(rep, manifest);
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

inline ImageU8 render_loss(const std::vector<texture::EpochLog>& log, const std::string& title) {
    plot::Series train{"train", {}}, val{"val", {}};
    for (const auto& e : log) {
        train.values.push_back(e.train_loss);
        val.values.push_back(e.val_loss);
    }
    return plot::line_chart(title, "epoch", {train, val});
}

inline ImageU8 render_confusion(const ConfusionMatrix& cm, const std::string& title) {
    std::vector<std::string> labels;
    for (const auto& c : cm.class_scheme().classes()) labels.push_back(std::to_string(c.id));
    return plot::count_heatmap(title, labels, cm.counts);
}

/// confusion.csv, confusion.png, metrics.json, loss.png, histogram.png
inline void write_report(const ExperimentReport& rep, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto write_text = [&](const std::string& name, const std::string& text) {
        std::ofstream out(dir / name);
        if (!out) throw Error("cannot write " + (dir / name).string());
        out << text;
    };
    write_text("confusion.csv", confusion_csv(rep.confusion));
    write_text("metrics.json", rep.metrics_json().dump(2) + "\n");
    io::write_image(dir / "confusion.png", render_confusion(rep.confusion, rep.title + " confusion"));
    io::write_image(dir / "loss.png", render_loss(rep.loss_curve, rep.title + " loss"));
    io::write_image(dir / "histogram.png", ingest::render_histogram(rep.histogram, rep.title + " class distribution"));
}

inline const std::vector<std::string>& report_files() {
    static const std::vector<std::string> files = {"confusion.csv", "confusion.png", "metrics.json", "loss.png",
                                                   "histogram.png"};
    return files;
}

}  // namespace corestack::experiments
