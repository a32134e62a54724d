#pragma once

#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corestack/common/image_io.hpp"
#include "corestack/data/annotations.hpp"
#include "corestack/detect/evaluate.hpp"
#include "corestack/detect/model.hpp"
#include "corestack/ingest/strips.hpp"
#include "corestack/inpaint/generator.hpp"
#include "corestack/texture/model.hpp"

namespace corestack::service {

using nlohmann::json;

/// 0/255 single-channel rendering of a mask.
inline ImageU8 mask_image(const detect::BinaryMask& mask) {
    ImageU8 out(mask.rows(), mask.cols(), 1);
    for (int r = 0; r < mask.rows(); ++r)
        for (int c = 0; c < mask.cols(); ++c) out(r, c, 0) = mask.get(r, c) ? 255 : 0;
    return out;
}

/// Input with masked pixels blended toward `tint`; other pixels untouched.
inline ImageU8 overlay(const ImageU8& image, const detect::BinaryMask& mask, std::array<std::uint8_t, 3> tint = {230, 40, 40},
                       double alpha = 0.45) {
    ImageU8 out = image;
    for (int r = 0; r < mask.rows(); ++r)
        for (int c = 0; c < mask.cols(); ++c)
            if (mask.get(r, c))
                for (int k = 0; k < 3; ++k)
                    out(r, c, k) = static_cast<std::uint8_t>(std::lround((1 - alpha) * image(r, c, k) + alpha * tint[static_cast<std::size_t>(k)]));
    return out;
}

/// Box, score and the VIA region the detection corresponds to.
inline json to_json(const detect::Detection& d, const std::string& image_id) {
    json j = {{"score", d.score}, {"box", {{"x0", d.box.x0}, {"y0", d.box.y0}, {"x1", d.box.x1}, {"y1", d.box.y1}}}};
    if (d.circle) j["region"] = data::detail::region_to_json(data::HoleAnnotation{image_id, *d.circle});
    return j;
}

struct StripPrediction {
    int y_offset = 0;
    int class_id = 0;
    std::vector<double> probabilities;  // scheme order
};

struct PipelineResult {
    std::string image_id;
    data::SchemeName scheme = data::SchemeName::nine_class;
    std::vector<detect::Detection> detections;
    detect::BinaryMask mask;
    ImageU8 inpainted;
    std::vector<StripPrediction> strips;  // ascending y_offset

    /// Class per strip, top to bottom.
    std::vector<int> facies_log() const {
        std::vector<int> out;
        for (const auto& s : strips) out.push_back(s.class_id);
        return out;
    }
};

struct PipelineModels {
    detect::Detector* detector = nullptr;
    inpaint::Generator* generator = nullptr;
    const texture::TextureClassifier* classifier = nullptr;
};

/// A failure tagged with the pipeline stage it came from.
class StageError : public Error {
public:
    StageError(std::string stage, const std::exception& e, std::exception_ptr cause)
        : Error(stage + ": " + e.what()), stage_(std::move(stage)), cause_(std::move(cause)) {}
    const std::string& stage() const noexcept { return stage_; }
    const std::exception_ptr& cause() const noexcept { return cause_; }

private:
    std::string stage_;
    std::exception_ptr cause_;
};

template <typename F>
auto run_stage(const char* stage, F&& f) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e, std::current_exception());
    }
}

/// Detect holes, fill the union mask, cut strips from the filled image and classify each.
/// Only detections scoring at least `cutoff` are kept; they make up the mask.
/// A hole-free image skips the generator, so the filled image is the input itself.
inline PipelineResult run_pipeline(const PipelineModels& models, const ImageU8& image, std::string image_id = "image",
                                   const ingest::StripCutConfig& strips = {}, double cutoff = 0.5) {
    if (!models.detector || !models.generator || !models.classifier) throw StateError("pipeline needs all three models");
    PipelineResult out;
    out.image_id = std::move(image_id);
    out.scheme = models.classifier->config().scheme;
    out.detections = run_stage("detect", [&] {
        auto dets = models.detector->detect(image);
        std::erase_if(dets, [&](const detect::Detection& d) { return d.score < cutoff; });
        return dets;
    });
    out.mask = detect::union_mask(out.detections, image.rows(), image.cols(), cutoff);
    out.inpainted = run_stage("inpaint", [&] {
        return out.mask.empty() ? image : inpaint::inpaint(*models.generator, image, out.mask);
    });
    run_stage("classify", [&] {
        for (const auto& rec : ingest::cut_strips(out.image_id, "", out.inpainted.rows(), out.inpainted.cols(), strips)) {
            StripPrediction p;
            p.y_offset = rec.y_offset;
            p.probabilities = texture::classify(*models.classifier, out.inpainted.crop_rows(rec.y_offset, rec.height));
            p.class_id = data::ClassScheme::get(out.scheme).id_at(static_cast<std::size_t>(texture::argmax(p.probabilities)));
            out.strips.push_back(std::move(p));
        }
        return 0;
    });
    return out;
}

/// Everything but the pixels; images are delivered separately.
inline json to_json(const PipelineResult& r) {
    json dets = json::array();
    for (const auto& d : r.detections) dets.push_back(to_json(d, r.image_id));
    json strips = json::array();
    for (const auto& s : r.strips)
        strips.push_back({{"y_offset", s.y_offset}, {"class_id", s.class_id}, {"probabilities", s.probabilities}});
    return {{"image_id", r.image_id},
            {"scheme", std::string(data::ClassScheme::get(r.scheme).name_str())},
            {"height", r.inpainted.rows()},
            {"width", r.inpainted.cols()},
            {"hole_pixels", r.mask.area()},
            {"detections", dets},
            {"strips", strips},
            {"facies_log", r.facies_log()}};
}

inline std::string facies_log_csv(const PipelineResult& r) {
    const auto& s = data::ClassScheme::get(r.scheme);
    std::ostringstream out;
    out << "y_offset,class_id,label,probability\n";
    for (const auto& p : r.strips) {
        const auto i = s.index_of(p.class_id);
        out << p.y_offset << ',' << p.class_id << ',' << s.classes()[i].label << ',' << p.probabilities[i] << '\n';
    }
    return out.str();
}

/// pipeline.json, mask.png, overlay.png, inpainted.png, facies_log.csv
inline void write_pipeline_report(const PipelineResult& r, const ImageU8& input, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    data::write_text_file(dir / "pipeline.json", to_json(r).dump(2) + "\n");
    data::write_text_file(dir / "facies_log.csv", facies_log_csv(r));
    io::write_image(dir / "mask.png", mask_image(r.mask));
    io::write_image(dir / "overlay.png", overlay(input, r.mask));
    io::write_image(dir / "inpainted.png", r.inpainted);
}

inline const std::vector<std::string>& pipeline_report_files() {
    static const std::vector<std::string> files = {"pipeline.json", "facies_log.csv", "mask.png", "overlay.png",
                                                   "inpainted.png"};
    return files;
}

}  // namespace corestack::service
