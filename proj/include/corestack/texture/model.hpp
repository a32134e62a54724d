#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "corestack/common/error.hpp"
#include "corestack/common/image_io.hpp"
#include "corestack/common/log.hpp"
#include "corestack/common/rng.hpp"
#include "corestack/data/types.hpp"
#include "corestack/nn/checkpoint.hpp"
#include "corestack/nn/optim.hpp"
#include "corestack/texture/backbone.hpp"
#include "corestack/texture/math.hpp"

namespace corestack::texture {

inline constexpr const char* kTextureKind = "corestack.texture";

enum class Head { drp, dep };

inline std::string_view to_string(Head h) noexcept { return h == Head::drp ? "drp" : "dep"; }

inline Head parse_head(std::string_view s) {
    if (s == "drp") return Head::drp;
    if (s == "dep") return Head::dep;
    throw ValidationError("unknown texture head '" + std::string(s) + "'");
}

struct TextureConfig {
    Head head = Head::dep;
    data::SchemeName scheme = data::SchemeName::nine_class;
    std::uint64_t seed = 1;
    std::uint64_t backbone_seed = 0x5EED;
    bool fine_tune = false;  // train the backbone projection too
    Rectify drp_rectify = Rectify::per_position;
    int reduce_dim = 128;  // DEP: 1x1 reduction before the encoding layer
    int codewords = 8;
    int encode_dim = 64;  // DEP: projection of the flattened encoding
    int gap_dim = 64;     // DEP: GAP branch width

    void validate() const {
        if (reduce_dim < 1 || codewords < 1 || encode_dim < 1 || gap_dim < 1)
            throw ValidationError("texture head dimensions must be positive");
    }
};

inline void to_json(nlohmann::json& j, const TextureConfig& c) {
    j = {{"head", to_string(c.head)},
         {"scheme", std::string(data::ClassScheme::get(c.scheme).name_str())},
         {"seed", c.seed},
         {"backbone_seed", c.backbone_seed},
         {"fine_tune", c.fine_tune},
         {"drp_rectify", c.drp_rectify == Rectify::per_position ? "per_position" : "after_mean"},
         {"reduce_dim", c.reduce_dim},
         {"codewords", c.codewords},
         {"encode_dim", c.encode_dim},
         {"gap_dim", c.gap_dim}};
}

inline void from_json(const nlohmann::json& j, TextureConfig& c) {
    c.head = parse_head(j.value("head", std::string(to_string(c.head))));
    c.scheme = data::ClassScheme::parse_name(j.value("scheme", std::string("nine_class")));
    c.seed = j.value("seed", c.seed);
    c.backbone_seed = j.value("backbone_seed", c.backbone_seed);
    c.fine_tune = j.value("fine_tune", c.fine_tune);
    const auto r = j.value("drp_rectify", std::string("per_position"));
    if (r != "per_position" && r != "after_mean") throw ValidationError("unknown drp_rectify '" + r + "'");
    c.drp_rectify = r == "per_position" ? Rectify::per_position : Rectify::after_mean;
    c.reduce_dim = j.value("reduce_dim", c.reduce_dim);
    c.codewords = j.value("codewords", c.codewords);
    c.encode_dim = j.value("encode_dim", c.encode_dim);
    c.gap_dim = j.value("gap_dim", c.gap_dim);
    c.validate();
}

/// One training epoch; kept with the model so reports can plot it later.
struct EpochLog {
    int epoch = 0;  // 1-based
    double train_loss = 0;
    double val_loss = 0;
    double val_accuracy = 0;

    friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

inline void to_json(nlohmann::json& j, const EpochLog& e) {
    j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_accuracy", e.val_accuracy}};
}

inline void from_json(const nlohmann::json& j, EpochLog& e) {
    e.epoch = j.at("epoch").get<int>();
    e.train_loss = j.at("train_loss").get<double>();
    e.val_loss = j.at("val_loss").get<double>();
    e.val_accuracy = j.value("val_accuracy", 0.0);
}

/// Everything a backward pass needs from one forward pass.
struct TextureTrace {
    Mat<float> F0, pre, F;
    // DRP
    ResidualPoolCache<float> rp;
    // DEP
    Mat<float> X;
    EncodeCache<float> enc;
    Vec<float> e, a, g, z, zs;
    // both
    Vec<float> h, logits;
};

/// Backbone projection plus a DRP or DEP head and a linear classifier.
///
/// Parameters live in owned Eigen matrices (aligned, so reductions do not depend
/// on allocation addresses); nn::Param mirrors are kept in sync for the
/// optimizer and checkpoints.
class TextureClassifier {
public:
    explicit TextureClassifier(TextureConfig cfg = {}) : cfg_(cfg) {
        cfg_.validate();
        build();
    }

    const TextureConfig& config() const { return cfg_; }
    const data::ClassScheme& scheme() const { return data::ClassScheme::get(cfg_.scheme); }
    int num_classes() const { return static_cast<int>(scheme().size()); }

    std::vector<nn::NamedParam> named_params() {
        std::vector<nn::NamedParam> out;
        for (auto& s : slots_) out.push_back({s.name, &s.param});
        return out;
    }

    std::vector<nn::Param*> trainable_params() {
        std::vector<nn::Param*> out;
        for (auto& s : slots_)
            if (s.param.trainable) out.push_back(&s.param);
        return out;
    }

    /// Logits for pooled filter features (kPositions x kFilterChannels).
    Vec<float> logits(const Mat<float>& F0, TextureTrace* trace = nullptr) const {
        TextureTrace local;
        TextureTrace& t = trace ? *trace : local;
        t.F0 = F0;
        t.F = project(w(kBbW), vec(kBbB), F0, cfg_.fine_tune ? &t.pre : nullptr);
        if (cfg_.head == Head::drp) {
            t.h = residual_pool<float>(t.F, w(i_T_), vec(i_Tb_), &t.rp, cfg_.drp_rectify);
        } else {
            t.X = t.F * w(i_red_).transpose();
            t.X.rowwise() += vec(i_redb_).transpose();
            const Mat<float> E = encode<float>(t.X, w(i_code_), vec(i_s_), &t.enc);
            t.e = Eigen::Map<const Vec<float>>(E.data(), E.size());
            t.a = w(i_encw_) * t.e + vec(i_encb_);
            t.g = global_average_pool<float>(t.F, w(i_gapw_), vec(i_gapb_));
            t.z = bilinear_combine(t.a, t.g);
            t.zs = signed_sqrt(t.z);
            t.h = l2_normalize(t.zs);
        }
        t.logits = w(i_clsw_) * t.h + vec(i_clsb_);
        return t.logits;
    }

    /// Accumulates parameter gradients for dL/dlogits into the internal buffers.
    void backward(const TextureTrace& t, const Vec<float>& dlogits) {
        grad(i_clsw_).noalias() += dlogits * t.h.transpose();
        gvec(i_clsb_) += dlogits;
        const Vec<float> dh = w(i_clsw_).transpose() * dlogits;
        Mat<float> dF;
        if (cfg_.head == Head::drp) {
            auto gr = residual_pool_backward<float>(t.F, w(i_T_), t.rp, dh, cfg_.drp_rectify);
            grad(i_T_) += gr.dT;
            gvec(i_Tb_) += gr.db;
            if (cfg_.fine_tune) dF = std::move(gr.dF);
        } else {
            const Vec<float> dzs = l2_normalize_backward(t.zs, dh);
            const Vec<float> dz = signed_sqrt_backward(t.z, dzs);
            const auto [da, dg] = bilinear_combine_backward(t.a, t.g, dz);
            auto gg = global_average_pool_backward<float>(t.F, w(i_gapw_), dg);
            grad(i_gapw_) += gg.dR;
            gvec(i_gapb_) += gg.db;
            grad(i_encw_).noalias() += da * t.e.transpose();
            gvec(i_encb_) += da;
            const Vec<float> de = w(i_encw_).transpose() * da;
            const Mat<float> dE = Eigen::Map<const Mat<float>>(de.data(), cfg_.codewords, cfg_.reduce_dim);
            const auto ge = encode_backward<float>(t.X, w(i_code_), vec(i_s_), t.enc, dE);
            grad(i_code_) += ge.dC;
            gvec(i_s_) += ge.ds;
            grad(i_red_).noalias() += ge.dX.transpose() * t.F;
            gvec(i_redb_) += ge.dX.colwise().sum().transpose();
            if (cfg_.fine_tune) dF = ge.dX * w(i_red_) + gg.dF;
        }
        if (cfg_.fine_tune) {
            Vec<float> db = gvec(kBbB);
            project_backward(t.F0, t.pre, dF, grad(kBbW), db);
            gvec(kBbB) = db;
        }
    }

    void zero_grad() {
        for (auto& s : slots_) s.g.setZero();
    }

    /// Copies the internal gradients (scaled) into the optimizer mirrors.
    void export_grads(float scale) {
        for (auto& s : slots_) {
            auto& d = s.param.grad.data;
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = s.g.data()[i] * scale;
        }
    }

    /// Pulls parameter values from the mirrors (after an optimizer step or a restore).
    void import_params() {
        for (auto& s : slots_) std::copy(s.param.value.data.begin(), s.param.value.data.end(), s.w.data());
        if (cfg_.head == Head::dep) {
            auto& sm = slots_[static_cast<std::size_t>(i_s_)];
            for (Eigen::Index k = 0; k < sm.w.size(); ++k) sm.w.data()[k] = std::max(sm.w.data()[k], kMinSmoothing);
            std::copy(sm.w.data(), sm.w.data() + sm.w.size(), sm.param.value.data.begin());
        }
    }

    /// Read access to a parameter by checkpoint name (tests, inspection).
    const Mat<float>& parameter(std::string_view name) const {
        for (const auto& s : slots_)
            if (s.name == name) return s.w;
        throw NotFoundError("no texture parameter '" + std::string(name) + "'");
    }

    /// Per-epoch log of the training run that produced these weights.
    const std::vector<EpochLog>& history() const { return history_; }
    void set_history(std::vector<EpochLog> h) { history_ = std::move(h); }

    void save(const std::filesystem::path& path) {
        nlohmann::json c = cfg_;
        c["history"] = history_;
        nn::save_checkpoint(path, kTextureKind, c, named_params());
    }

    static TextureClassifier load(const std::filesystem::path& path) {
        const auto ck = nn::load_checkpoint(path, kTextureKind);
        TextureClassifier m(ck.config().get<TextureConfig>());
        nn::restore_params(ck, m.named_params());
        m.import_params();
        if (ck.config().contains("history")) m.history_ = ck.config().at("history").get<std::vector<EpochLog>>();
        return m;
    }

    static constexpr float kMinSmoothing = 1e-4f;

private:
    struct Slot {
        std::string name;
        nn::Param param;
        Mat<float> w, g;
    };

    static constexpr int kBbW = 0, kBbB = 1;

    const Mat<float>& w(int i) const { return slots_[static_cast<std::size_t>(i)].w; }
    Mat<float>& grad(int i) { return slots_[static_cast<std::size_t>(i)].g; }
    Eigen::Map<const Vec<float>> vec(int i) const {
        const auto& m = w(i);
        return {m.data(), m.size()};
    }
    Eigen::Map<Vec<float>> gvec(int i) {
        auto& m = grad(i);
        return {m.data(), m.size()};
    }

    int add(std::string name, int rows, int cols, bool trainable = true) {
        Slot s{std::move(name), nn::Param(1, 1, rows, cols), Mat<float>::Zero(rows, cols), Mat<float>::Zero(rows, cols)};
        s.param.trainable = trainable;
        slots_.push_back(std::move(s));
        return static_cast<int>(slots_.size()) - 1;
    }

    void fill_normal(int i, Rng& rng, double sd, double mean = 0.0) {
        auto& m = slots_[static_cast<std::size_t>(i)].w;
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<float>(rng.normal(mean, sd));
    }

    void build() {
        slots_.reserve(12);
        const auto bb = Backbone::init(cfg_.backbone_seed);
        add("backbone.weight", kFeatureDim, kFilterChannels, cfg_.fine_tune);
        add("backbone.bias", kFeatureDim, 1, cfg_.fine_tune);
        slots_[kBbW].w = bb.weight;
        slots_[kBbB].w = bb.bias;
        Rng rng(cfg_.seed);
        const int C = num_classes();
        int feat = 0;
        if (cfg_.head == Head::drp) {
            i_T_ = add("drp.transfer", kFeatureDim, kFeatureDim);
            i_Tb_ = add("drp.bias", kFeatureDim, 1);
            fill_normal(i_T_, rng, 0.01);
            slots_[static_cast<std::size_t>(i_T_)].w.diagonal().array() += 1.0f;
            feat = kFeatureDim;
        } else {
            const int D = cfg_.reduce_dim, K = cfg_.codewords;
            i_red_ = add("dep.reduce.weight", D, kFeatureDim);
            i_redb_ = add("dep.reduce.bias", D, 1);
            i_code_ = add("dep.codewords", K, D);
            i_s_ = add("dep.smoothing", K, 1);
            i_encw_ = add("dep.encode_proj.weight", cfg_.encode_dim, K * D);
            i_encb_ = add("dep.encode_proj.bias", cfg_.encode_dim, 1);
            i_gapw_ = add("dep.gap.weight", cfg_.gap_dim, kFeatureDim);
            i_gapb_ = add("dep.gap.bias", cfg_.gap_dim, 1);
            fill_normal(i_red_, rng, 1.0 / std::sqrt(double(kFeatureDim)));
            fill_normal(i_code_, rng, 0.5);
            auto& s = slots_[static_cast<std::size_t>(i_s_)].w;
            for (Eigen::Index k = 0; k < s.size(); ++k) s.data()[k] = static_cast<float>(rng.uniform(0.5, 1.5) / D);
            fill_normal(i_encw_, rng, 1.0 / std::sqrt(double(K * D)));
            fill_normal(i_gapw_, rng, 1.0 / std::sqrt(double(kFeatureDim)));
            feat = cfg_.encode_dim * cfg_.gap_dim;
        }
        i_clsw_ = add("classifier.weight", C, feat);
        i_clsb_ = add("classifier.bias", C, 1);
        fill_normal(i_clsw_, rng, 0.01);
        for (auto& s : slots_) std::copy(s.w.data(), s.w.data() + s.w.size(), s.param.value.data.begin());
    }

    TextureConfig cfg_;
    std::vector<EpochLog> history_;
    std::vector<Slot> slots_;
    int i_T_ = -1, i_Tb_ = -1;
    int i_red_ = -1, i_redb_ = -1, i_code_ = -1, i_s_ = -1, i_encw_ = -1, i_encb_ = -1, i_gapw_ = -1, i_gapb_ = -1;
    int i_clsw_ = -1, i_clsb_ = -1;
};

/// Softmax in double; sums to 1 up to rounding.
inline std::vector<double> softmax(const Vec<float>& logits) {
    const double m = logits.maxCoeff();
    std::vector<double> p(static_cast<std::size_t>(logits.size()));
    double z = 0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) z += (p[static_cast<std::size_t>(i)] = std::exp(logits(i) - m));
    for (auto& v : p) v /= z;
    return p;
}

/// Probability vector over the model's scheme (class-index order) for one strip.
inline std::vector<double> classify(const TextureClassifier& model, const ImageU8& strip,
                                    std::optional<data::SchemeName> requested = std::nullopt) {
    if (requested) data::require_same_scheme(data::ClassScheme::get(*requested), model.scheme());
    return softmax(model.logits(filter_features(prepare_strip(strip))));
}

inline int argmax(const std::vector<double>& p) {
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

// ---------------------------------------------------------------- strip loading

using StripLoader = std::function<ImageU8(const data::PatchRecord&)>;

/// Reads `<root>/<image_id>.png` once per image and crops the strip rows.
inline StripLoader directory_loader(std::filesystem::path root) {
    auto cache = std::make_shared<std::map<std::string, ImageU8>>();
    return [root = std::move(root), cache](const data::PatchRecord& r) {
        auto it = cache->find(r.image_id);
        if (it == cache->end()) it = cache->emplace(r.image_id, io::read_rgb(root / (r.image_id + ".png"))).first;
        return it->second.crop_rows(r.y_offset, r.height);
    };
}

/// Crops strips from images already in memory, keyed by image id.
inline StripLoader memory_loader(std::shared_ptr<const std::map<std::string, ImageU8>> images) {
    return [images = std::move(images)](const data::PatchRecord& r) {
        const auto it = images->find(r.image_id);
        if (it == images->end()) throw NotFoundError("no image '" + r.image_id + "' for patch " + r.patch_id);
        return it->second.crop_rows(r.y_offset, r.height);
    };
}

/// Pooled filter features per record, in record order.
inline std::vector<Mat<float>> strip_features(const std::vector<const data::PatchRecord*>& records, const StripLoader& load) {
    std::vector<Mat<float>> out;
    out.reserve(records.size());
    for (const auto* r : records) out.push_back(filter_features(prepare_strip(load(*r))));
    return out;
}

/// Predicted class ids for the given feature sets.
inline std::vector<int> predict_ids(const TextureClassifier& model, const std::vector<Mat<float>>& feats) {
    std::vector<int> out;
    out.reserve(feats.size());
    for (const auto& f : feats) out.push_back(model.scheme().id_at(static_cast<std::size_t>(argmax(softmax(model.logits(f))))));
    return out;
}

// ---------------------------------------------------------------- training

struct TextureTrainConfig {
    int epochs = 20;
    int batch = 32;
    float lr = 1e-3f;
    float weight_decay = 0.0f;
    std::uint64_t seed = 1;
    std::function<void(const EpochLog&)> on_epoch;
};

struct TextureTrainResult {
    std::vector<EpochLog> log;
    int best_epoch = 0;
    double seconds = 0;
};

namespace detail {

struct SplitData {
    std::vector<Mat<float>> feats;
    std::vector<int> labels;  // class indices
};

inline SplitData split_data(const data::DatasetManifest& m, data::Split which, const StripLoader& load) {
    const auto& scheme = m.class_scheme();
    std::vector<const data::PatchRecord*> recs;
    SplitData d;
    for (const auto& r : m.records) {
        if (r.split != which || r.class_id == data::kUnassignedClass) continue;
        recs.push_back(&r);
        d.labels.push_back(static_cast<int>(scheme.index_of(r.class_id)));
    }
    if (recs.empty())
        throw ValidationError("manifest has no labelled " + std::string(data::to_string(which)) + " strips");
    d.feats = strip_features(recs, load);
    return d;
}

inline double cross_entropy(const std::vector<double>& p, int label) { return -std::log(std::max(p[static_cast<std::size_t>(label)], 1e-300)); }

}  // namespace detail

/// Mean cross-entropy and accuracy over precomputed features.
inline std::pair<double, double> evaluate_loss(const TextureClassifier& model, const std::vector<Mat<float>>& feats,
                                               const std::vector<int>& labels) {
    double loss = 0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        const auto p = softmax(model.logits(feats[i]));
        loss += detail::cross_entropy(p, labels[i]);
        correct += argmax(p) == labels[i];
    }
    const double n = static_cast<double>(std::max<std::size_t>(feats.size(), 1));
    return {loss / n, static_cast<double>(correct) / n};
}

/// Cross-entropy training on the manifest's train split; the model is left at
/// the epoch with the lowest validation loss.
inline TextureTrainResult train_texture(TextureClassifier& model, const data::DatasetManifest& manifest,
                                        const StripLoader& load, const TextureTrainConfig& cfg) {
    if (cfg.epochs < 1 || cfg.batch < 1) throw ValidationError("epochs and batch must be positive");
    data::require_same_scheme(model.scheme(), manifest.class_scheme());
    const auto t0 = std::chrono::steady_clock::now();
    const auto train = detail::split_data(manifest, data::Split::train, load);
    const auto val = detail::split_data(manifest, data::Split::val, load);

    nn::Adam opt(model.trainable_params(), {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(train.feats.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    TextureTrainResult res;
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::vector<float>> best_snap;
    TextureTrace trace;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(std::span<std::size_t>(order));
        double sum = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch));
            model.zero_grad();
            for (std::size_t k = b0; k < b1; ++k) {
                const auto i = order[k];
                const auto p = softmax(model.logits(train.feats[i], &trace));
                sum += detail::cross_entropy(p, train.labels[i]);
                Vec<float> d(static_cast<Eigen::Index>(p.size()));
                for (std::size_t c = 0; c < p.size(); ++c) d(static_cast<Eigen::Index>(c)) = static_cast<float>(p[c]);
                d(train.labels[i]) -= 1.0f;
                model.backward(trace, d);
            }
            model.export_grads(1.0f / static_cast<float>(b1 - b0));
            opt.step();
            model.import_params();
        }
        EpochLog e;
        e.epoch = epoch;
        e.train_loss = sum / static_cast<double>(order.size());
        std::tie(e.val_loss, e.val_accuracy) = evaluate_loss(model, val.feats, val.labels);
        if (!std::isfinite(e.train_loss) || !std::isfinite(e.val_loss))
            throw Error("texture training diverged at epoch " + std::to_string(epoch));
        if (e.val_loss < best) {
            best = e.val_loss;
            res.best_epoch = epoch;
            best_snap = nn::snapshot(model.named_params());
        }
        res.log.push_back(e);
        if (cfg.on_epoch) cfg.on_epoch(e);
    }
    nn::restore_snapshot(best_snap, model.named_params());
    model.import_params();
    model.set_history(res.log);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

/// epoch,train_loss,val_loss
inline void write_loss_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out.precision(17);
    out << "epoch,train_loss,val_loss\n";
    for (const auto& e : log) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << '\n';
}

}  // namespace corestack::texture
