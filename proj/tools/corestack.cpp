// corestack: command-line front end over the toolkit.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "corestack/common/image_io.hpp"
#include "corestack/common/log.hpp"
#include "corestack/data/annotations.hpp"
#include "corestack/data/manifest.hpp"
#include "corestack/detect/model.hpp"
#include "corestack/experiments/runner.hpp"
#include "corestack/ingest/histogram.hpp"
#include "corestack/ingest/split.hpp"
#include "corestack/ingest/strips.hpp"
#include "corestack/ingest/synth.hpp"
#include "corestack/inpaint/generator.hpp"
#include "corestack/service/pipeline.hpp"
#include "corestack/service/server.hpp"
#include "corestack/texture/model.hpp"

namespace fs = std::filesystem;
using namespace corestack;

namespace {

std::set<std::string> split_list(const std::string& s) {
    std::set<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) out.insert(item);
    return out;
}

ingest::SplitRatios parse_ratios(const std::string& s) {
    std::vector<double> v;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) v.push_back(std::stod(item));
    if (v.size() != 3) throw ValidationError("--ratios needs three comma-separated fractions");
    return {v[0], v[1], v[2]};
}

/// Directory of `<image_id>.png` files and the holes annotated on them.
std::vector<detect::DetectSample> detection_samples(const fs::path& annotations, const fs::path& images) {
    const auto set = data::load_annotations(data::read_text_file(annotations));
    std::vector<detect::DetectSample> out;
    for (const auto& meta : set.images) {
        const auto file = images / (meta.image_id + ".png");
        out.push_back({io::read_rgb(file), set.holes_of(meta.image_id)});
    }
    if (out.empty()) throw ValidationError(annotations.string() + " lists no images");
    return out;
}

std::vector<ImageU8> read_image_dir(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && io::is_image_file(e.path())) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw NotFoundError("no images in " + dir.string());
    std::vector<ImageU8> out;
    for (const auto& f : files) out.push_back(io::read_rgb(f));
    return out;
}

detect::BinaryMask read_mask(const fs::path& path, const ImageU8& image) {
    const auto m = io::read_gray(path);
    if (m.rows() != image.rows() || m.cols() != image.cols())
        throw PreconditionError("mask " + path.string() + " does not match the image size");
    return detect::BinaryMask(m);
}

// ---------------------------------------------------------------- commands

struct IngestArgs {
    std::string images, intervals, scheme = "nine_class", out;
};

void run_ingest(const IngestArgs& a) {
    const auto scheme = data::ClassScheme::parse_name(a.scheme);
    const auto table = data::load_intervals_csv(data::read_text_file(a.intervals), &data::ClassScheme::get(scheme));
    std::vector<data::ImageMeta> metas;
    for (const auto& [id, well] : table.well_of_image) {
        const auto file = fs::path(a.images) / (id + ".png");
        if (!fs::exists(file)) throw NotFoundError("intervals reference " + file.string() + ", which does not exist");
        const auto img = io::read_rgb(file);
        metas.push_back({id, file.filename().string(), well, img.rows(), img.cols()});
    }
    auto m = ingest::build_manifest(metas, table.intervals, scheme);
    m.image_root = fs::absolute(a.images).string();
    data::save_manifest(m, a.out);
    std::printf("%zu strips from %zu images -> %s\n", m.records.size(), metas.size(), a.out.c_str());
}

struct SplitArgs {
    std::string manifest, out, mode = "strip_random", ratios = "0.7,0.15,0.15", test_wells, val_wells;
    std::uint64_t seed = 1;
};

void run_split(const SplitArgs& a) {
    auto m = data::load_manifest(a.manifest);
    const auto mode = data::parse_split_mode(a.mode);
    if (mode == data::SplitMode::strip_random) {
        m = ingest::split_strip_random(std::move(m), parse_ratios(a.ratios), a.seed);
    } else if (mode == data::SplitMode::well_held_out) {
        const auto wells = ingest::wells_of(m);
        auto test = split_list(a.test_wells), val = split_list(a.val_wells);
        if (test.empty()) test = {*wells.rbegin()};
        if (val.empty())
            for (auto it = wells.rbegin(); it != wells.rend(); ++it)
                if (!test.contains(*it)) {
                    val = {*it};
                    break;
                }
        m = ingest::split_well_held_out(std::move(m), test, val);
        if (!ingest::held_out_wells_disjoint(m)) throw Error("held-out wells overlap training wells");
    } else {
        throw ValidationError("--mode must be strip_random or well_held_out");
    }
    const auto out = a.out.empty() ? a.manifest : a.out;
    data::save_manifest(m, out);
    const auto h = ingest::class_histogram(m);
    std::printf("train %zu  val %zu  test %zu -> %s\n", h.total(data::Split::train), h.total(data::Split::val),
                h.total(data::Split::test), out.c_str());
}

void run_synth(const std::string& config, const std::string& out) {
    const auto cfg = config.empty() ? ingest::SynthCorpusConfig{}
                                    : ingest::synth_config_from_json(nlohmann::json::parse(data::read_text_file(config)));
    const auto corpus = ingest::synth_corpus(cfg);
    ingest::write_corpus(corpus, cfg, out);
    std::printf("%zu images, %zu holes, %zu intervals -> %s\n", corpus.images.size(), corpus.annotations.holes.size(),
                corpus.intervals.size(), out.c_str());
}

struct TrainDetectArgs {
    std::string annotations, images, out;
    int epochs = 30, width = 32;
    std::uint64_t seed = 1;
};

void run_train_detect(const TrainDetectArgs& a) {
    const fs::path images = a.images.empty() ? fs::path(a.annotations).parent_path() / "images" : fs::path(a.images);
    const auto samples = detection_samples(a.annotations, images);
    detect::DetectorConfig cfg;
    cfg.width = a.width;
    cfg.seed = a.seed;
    detect::Detector model(cfg);
    detect::DetectTrainConfig tc;
    tc.epochs = a.epochs;
    tc.seed = a.seed;
    tc.on_epoch = [](int epoch, double loss) { std::printf("epoch %d loss %.5f\n", epoch, loss); };
    const auto r = train_detector(model, samples, tc);
    model.save(a.out);
    std::printf("final loss %.5f in %.1f s -> %s\n", r.final_loss, r.seconds, a.out.c_str());
}

void run_detect(const std::string& model_path, const std::string& image_path, const std::string& out,
                const std::string& mask_out, const std::string& json_out, double cutoff) {
    auto model = detect::Detector::load(model_path);
    const auto image = io::read_rgb(image_path);
    const auto dets = model.detect(image);
    const auto mask = detect::union_mask(dets, image.rows(), image.cols(), cutoff);
    if (!out.empty()) io::write_image(out, service::overlay(image, mask));
    if (!mask_out.empty()) io::write_image(mask_out, service::mask_image(mask));
    nlohmann::json list = nlohmann::json::array();
    for (const auto& d : dets) list.push_back(service::to_json(d, fs::path(image_path).stem().string()));
    if (!json_out.empty()) data::write_text_file(json_out, list.dump(2) + "\n");
    std::printf("%zu detections\n", dets.size());
}

struct TrainInpaintArgs {
    std::string images, out, init;
    int res = 512, steps = 2000, width = 32, batch = 4, grid = 0;
    std::uint64_t seed = 1;
};

void run_train_inpaint(const TrainInpaintArgs& a) {
    const auto corpus = read_image_dir(a.images);
    inpaint::GeneratorConfig g;
    g.cra.low_res = a.res;
    if (a.grid > 0) g.cra.grid = a.grid;
    else g.cra.grid = std::min(g.cra.grid, a.res / 8);
    g.width = a.width;
    g.seed = a.seed;
    // --init continues from a checkpoint; its architecture wins over --res/--grid/--width.
    inpaint::Generator gen = a.init.empty() ? inpaint::Generator(g) : inpaint::Generator::load(a.init);
    inpaint::InpaintTrainConfig tc;
    tc.steps = a.steps;
    tc.batch = a.batch;
    tc.seed = a.seed;
    tc.on_step = [&](int step, double rec, double adv, double) {
        if (step % 100 == 0 || step == a.steps - 1) std::printf("step %d rec %.4f adv %.4f\n", step, rec, adv);
    };
    const auto r = train_inpaint(gen, corpus, tc);
    gen.save(a.out);
    std::printf("final loss %.5f in %.1f s -> %s\n", r.final_loss, r.seconds, a.out.c_str());
}

void run_inpaint(const std::string& model_path, const std::string& image_path, const std::string& mask_path,
                 const std::string& out) {
    const auto image = io::read_rgb(image_path);
    const auto mask = read_mask(mask_path, image);
    if (mask.empty()) {
        io::write_image(out, image);
    } else {
        auto gen = inpaint::Generator::load(model_path);
        io::write_image(out, inpaint::inpaint(gen, image, mask));
    }
    std::printf("%zu hole pixels filled -> %s\n", mask.area(), out.c_str());
}

struct TrainTextureArgs {
    std::string head = "dep", manifest, scheme, out, loss_log;
    int epochs = 20, batch = 32;
    double lr = 1e-3;
    std::uint64_t seed = 1;
    bool fine_tune = false;
};

void run_train_texture(const TrainTextureArgs& a) {
    std::optional<data::SchemeName> scheme;
    if (!a.scheme.empty()) scheme = data::ClassScheme::parse_name(a.scheme);
    const auto m = data::load_manifest(a.manifest, scheme);
    if (m.image_root.empty()) throw PreconditionError("manifest has no image_root; re-run ingest");
    texture::TextureConfig cfg;
    cfg.head = texture::parse_head(a.head);
    cfg.scheme = m.scheme;
    cfg.seed = a.seed;
    cfg.fine_tune = a.fine_tune;
    texture::TextureClassifier model(cfg);
    texture::TextureTrainConfig tc;
    tc.epochs = a.epochs;
    tc.batch = a.batch;
    tc.lr = a.lr;
    tc.seed = a.seed;
    tc.on_epoch = [](const texture::EpochLog& e) {
        std::printf("epoch %d train %.4f val %.4f acc %.3f\n", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
    };
    const auto r = train_texture(model, m, texture::directory_loader(m.image_root), tc);
    model.save(a.out);
    if (!a.loss_log.empty()) texture::write_loss_log(a.loss_log, r.log);
    std::printf("best epoch %d in %.1f s -> %s\n", r.best_epoch, r.seconds, a.out.c_str());
}

void run_eval(const std::string& model_path, const std::string& manifest, const std::string& split, const std::string& report) {
    const auto model = texture::TextureClassifier::load(model_path);
    const auto m = data::load_manifest(manifest);
    experiments::ExperimentReport rep;
    rep.title = fs::path(model_path).stem().string();
    rep.split_mode = m.split_mode;
    rep.head = std::string(texture::to_string(model.config().head));
    rep.loss_curve = model.history();
    double best = std::numeric_limits<double>::infinity();
    for (const auto& e : rep.loss_curve)
        if (e.val_loss < best) {
            best = e.val_loss;
            rep.best_epoch = e.epoch;
        }
    rep.confusion = experiments::evaluate_split(model, m, data::parse_split(split), texture::directory_loader(m.image_root));
    experiments::finish_report(rep, m);
    experiments::write_report(rep, report);
    std::printf("overall %.4f  class-average %.4f  (%lld strips) -> %s\n", rep.overall_accuracy, rep.class_average_accuracy,
                rep.confusion.total(), report.c_str());
}

service::Service* g_service = nullptr;

void run_serve(const std::string& config) {
    const auto cfg = service::load_service_config(config);
    service::Service svc(cfg);
    g_service = &svc;
    std::signal(SIGINT, [](int) {
        if (g_service) g_service->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_service) g_service->stop();
    });
    const int port = svc.bind();
    std::printf("serving on %s:%d\n", cfg.host.c_str(), port);
    std::fflush(stdout);
    svc.listen_after_bind();
    g_service = nullptr;
}

struct PipelineArgs {
    std::string config, detect_model, inpaint_model, classify_model, image, report;
    double cutoff = 0.5;
};

void run_pipeline_cmd(const PipelineArgs& a) {
    service::ServiceConfig cfg;
    if (!a.config.empty()) cfg = service::load_service_config(a.config);
    if (!a.detect_model.empty()) cfg.detect_ckpt = a.detect_model;
    if (!a.inpaint_model.empty()) cfg.inpaint_ckpt = a.inpaint_model;
    if (!a.classify_model.empty()) {
        cfg.classify_ckpt = a.classify_model;
        cfg.scheme = std::string(texture::TextureClassifier::load(a.classify_model).scheme().name_str());
    }
    auto models = service::LoadedModels::from_config(cfg);
    if (!models.detector || !models.generator || !models.classifier)
        throw PreconditionError("pipeline needs detection, inpainting and classification models");
    const auto image = io::read_rgb(a.image);
    const auto result = service::run_pipeline({&*models.detector, &*models.generator, &*models.classifier}, image,
                                              fs::path(a.image).stem().string(), {}, a.cutoff);
    service::write_pipeline_report(result, image, a.report);
    std::printf("%zu detections, %zu hole pixels, %zu strips -> %s\n", result.detections.size(), result.mask.area(),
                result.strips.size(), a.report.c_str());
}

struct ExperimentArgs {
    std::string id, report, corpus_config, model_out;
    int epochs = 20;
    std::uint64_t seed = 1;
};

void run_experiment_cmd(const ExperimentArgs& a) {
    experiments::ExperimentConfig cfg;
    if (!a.corpus_config.empty())
        cfg.corpus = ingest::synth_config_from_json(nlohmann::json::parse(data::read_text_file(a.corpus_config)));
    cfg.train.epochs = a.epochs;
    cfg.train.seed = a.seed;
    cfg.seed = a.seed;
    cfg.model.seed = a.seed;
    cfg.train.on_epoch = [](const texture::EpochLog& e) {
        std::printf("epoch %d train %.4f val %.4f acc %.3f\n", e.epoch, e.train_loss, e.val_loss, e.val_accuracy);
        std::fflush(stdout);
    };
    const auto rep = experiments::run_experiment(experiments::parse_experiment(a.id), cfg, a.model_out);
    experiments::write_report(rep, a.report);
    std::printf("%s: overall %.4f  class-average %.4f  (reference %.3f / %.3f, original corpus) -> %s\n", rep.title.c_str(),
                rep.overall_accuracy, rep.class_average_accuracy, rep.reference->overall, rep.reference->class_average,
                a.report.c_str());
    for (const auto& f : rep.minority)
        std::printf("  minority class %d: share %.4f, recall %s\n", f.class_id, f.share,
                    f.recall ? std::to_string(*f.recall).c_str() : "n/a");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"corestack: drill-core image toolkit"};
    app.require_subcommand(1);

    IngestArgs ingest_a;
    auto* ingest_c = app.add_subcommand("ingest", "Cut labelled strips from images and an interval CSV");
    ingest_c->add_option("--images", ingest_a.images, "Directory of <image_id>.png")->required();
    ingest_c->add_option("--intervals", ingest_a.intervals, "Interval CSV")->required();
    ingest_c->add_option("--scheme", ingest_a.scheme, "six_class or nine_class");
    ingest_c->add_option("--out", ingest_a.out, "Output manifest (.jsonl)")->required();

    SplitArgs split_a;
    auto* split_c = app.add_subcommand("split", "Assign train/val/test splits");
    split_c->add_option("--manifest", split_a.manifest)->required();
    split_c->add_option("--out", split_a.out, "Output manifest (default: overwrite input)");
    split_c->add_option("--mode", split_a.mode)->check(CLI::IsMember({"strip_random", "well_held_out"}));
    split_c->add_option("--ratios", split_a.ratios, "train,val,test fractions");
    split_c->add_option("--seed", split_a.seed);
    split_c->add_option("--test-wells", split_a.test_wells, "Comma-separated well ids");
    split_c->add_option("--val-wells", split_a.val_wells, "Comma-separated well ids");

    std::string synth_config, synth_out;
    auto* synth_c = app.add_subcommand("synth", "Write a synthetic core-image corpus");
    synth_c->add_option("--config", synth_config, "Corpus config JSON (defaults when omitted)");
    synth_c->add_option("--out", synth_out)->required();

    TrainDetectArgs td;
    auto* td_c = app.add_subcommand("train-detect", "Train the hole detector");
    td_c->add_option("--annotations", td.annotations, "VIA annotations with hole regions")->required();
    td_c->add_option("--images", td.images, "Image directory (default: images/ next to the annotations)");
    td_c->add_option("--epochs", td.epochs);
    td_c->add_option("--width", td.width);
    td_c->add_option("--seed", td.seed);
    td_c->add_option("--out", td.out)->required();

    std::string det_model, det_image, det_out, det_mask, det_json;
    double det_cutoff = 0.5;
    auto* det_c = app.add_subcommand("detect", "Detect plug holes in one image");
    det_c->add_option("--model", det_model)->required();
    det_c->add_option("--image", det_image)->required();
    det_c->add_option("--out", det_out, "Overlay PNG");
    det_c->add_option("--mask-out", det_mask, "Union mask PNG (255 = hole)");
    det_c->add_option("--json", det_json, "Detections as JSON");
    det_c->add_option("--cutoff", det_cutoff, "Score cutoff for the union mask")->check(CLI::Range(0.0, 1.0));

    TrainInpaintArgs ti;
    auto* ti_c = app.add_subcommand("train-inpaint", "Train the inpainting generator");
    ti_c->add_option("--images", ti.images, "Directory of clean images")->required();
    ti_c->add_option("--res", ti.res, "Generator resolution");
    ti_c->add_option("--grid", ti.grid, "Attention cells per side (must divide --res)");
    ti_c->add_option("--width", ti.width);
    ti_c->add_option("--batch", ti.batch);
    ti_c->add_option("--steps", ti.steps);
    ti_c->add_option("--seed", ti.seed);
    ti_c->add_option("--init", ti.init, "Checkpoint to fine-tune instead of training from scratch");
    ti_c->add_option("--out", ti.out)->required();

    std::string inp_model, inp_image, inp_mask, inp_out;
    auto* inp_c = app.add_subcommand("inpaint", "Fill masked holes in one image");
    inp_c->add_option("--model", inp_model)->required();
    inp_c->add_option("--image", inp_image)->required();
    inp_c->add_option("--mask", inp_mask, "Single-channel PNG, 255 = hole")->required();
    inp_c->add_option("--out", inp_out)->required();

    TrainTextureArgs tt;
    auto* tt_c = app.add_subcommand("train-texture", "Train a DRP or DEP facies classifier");
    tt_c->add_option("--head", tt.head)->check(CLI::IsMember({"drp", "dep"}));
    tt_c->add_option("--manifest", tt.manifest)->required();
    tt_c->add_option("--scheme", tt.scheme);
    tt_c->add_option("--epochs", tt.epochs);
    tt_c->add_option("--batch", tt.batch);
    tt_c->add_option("--lr", tt.lr);
    tt_c->add_option("--seed", tt.seed);
    tt_c->add_flag("--fine-tune", tt.fine_tune, "Also train the backbone projection");
    tt_c->add_option("--out", tt.out)->required();
    tt_c->add_option("--loss-log", tt.loss_log, "CSV: epoch,train_loss,val_loss");

    std::string ev_model, ev_manifest, ev_split = "test", ev_report;
    auto* ev_c = app.add_subcommand("eval", "Evaluate a classifier and write a report directory");
    ev_c->add_option("--model", ev_model)->required();
    ev_c->add_option("--manifest", ev_manifest)->required();
    ev_c->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val", "test"}));
    ev_c->add_option("--report", ev_report)->required();

    std::string serve_config;
    auto* serve_c = app.add_subcommand("serve", "Run the HTTP service");
    serve_c->add_option("--config", serve_config)->required();

    PipelineArgs pa;
    auto* pipe_c = app.add_subcommand("pipeline", "Detect, inpaint and classify one core image");
    pipe_c->add_option("--config", pa.config, "Service config naming the checkpoints");
    pipe_c->add_option("--detect-model", pa.detect_model);
    pipe_c->add_option("--inpaint-model", pa.inpaint_model);
    pipe_c->add_option("--classify-model", pa.classify_model);
    pipe_c->add_option("--image", pa.image)->required();
    pipe_c->add_option("--report", pa.report)->required();
    pipe_c->add_option("--cutoff", pa.cutoff, "Detections scoring below are dropped")->check(CLI::Range(0.0, 1.0));

    ExperimentArgs ea;
    auto* exp_c = app.add_subcommand("experiment", "Run one of the four classification experiments on synthetic data");
    exp_c->add_option("--id", ea.id)->required()->check(
        CLI::IsMember({"exp1_drp6", "exp2_drp9", "exp3_dep9_leaky", "exp4_dep9_wellsplit"}));
    exp_c->add_option("--corpus-config", ea.corpus_config);
    exp_c->add_option("--epochs", ea.epochs);
    exp_c->add_option("--seed", ea.seed);
    exp_c->add_option("--model-out", ea.model_out);
    exp_c->add_option("--report", ea.report)->required();

    CLI11_PARSE(app, argc, argv);

    log::set_sink([](log::Level level, std::string_view msg) {
        std::fprintf(stderr, "[%s] %.*s\n", level == log::Level::warning ? "warn" : "info", static_cast<int>(msg.size()),
                     msg.data());
    });

    try {
        if (*ingest_c) run_ingest(ingest_a);
        else if (*split_c) run_split(split_a);
        else if (*synth_c) run_synth(synth_config, synth_out);
        else if (*td_c) run_train_detect(td);
        else if (*det_c) run_detect(det_model, det_image, det_out, det_mask, det_json, det_cutoff);
        else if (*ti_c) run_train_inpaint(ti);
        else if (*inp_c) run_inpaint(inp_model, inp_image, inp_mask, inp_out);
        else if (*tt_c) run_train_texture(tt);
        else if (*ev_c) run_eval(ev_model, ev_manifest, ev_split, ev_report);
        else if (*serve_c) run_serve(serve_config);
        else if (*pipe_c) run_pipeline_cmd(pa);
        else if (*exp_c) run_experiment_cmd(ea);
    } catch (const service::StageError& e) {
        std::fprintf(stderr, "error in %s stage: %s\n", e.stage().c_str(), e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
