#pragma once

#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "corestack/common/image_io.hpp"
#include "corestack/common/log.hpp"
#include "corestack/data/annotations.hpp"
#include "corestack/service/pipeline.hpp"
#include "corestack/service/projects.hpp"

namespace corestack::service {

// ---------------------------------------------------------------- base64

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

inline std::string base64_encode(std::string_view s) {
    return base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

/// Accepts plain base64 or a `data:...;base64,` URL. Throws ValidationError on malformed input.
inline std::string base64_decode(std::string_view in) {
    if (in.starts_with("data:")) {
        const auto comma = in.find(',');
        if (comma == std::string_view::npos) throw ValidationError("malformed data URL");
        in.remove_prefix(comma + 1);
    }
    std::string s;
    s.reserve(in.size());
    for (char c : in)
        if (!std::isspace(static_cast<unsigned char>(c))) s.push_back(c);
    if (s.size() % 4) throw ValidationError("base64 length is not a multiple of 4");
    std::string out(s.size() / 4 * 3, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()), reinterpret_cast<const unsigned char*>(s.data()),
                                  static_cast<int>(s.size()));
    if (n < 0) throw ValidationError("invalid base64 payload");
    std::size_t pad = 0;
    if (!s.empty() && s.back() == '=') ++pad;
    if (s.size() > 1 && s[s.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

// ---------------------------------------------------------------- config

struct ServiceConfig {
    std::string detect_ckpt, inpaint_ckpt, classify_ckpt;
    std::string scheme = "nine_class";
    std::string data_dir = "data";
    std::string host = "127.0.0.1";
    int port = 8080;
};

inline void from_json(const nlohmann::json& j, ServiceConfig& c) {
    c.detect_ckpt = j.value("detect_ckpt", c.detect_ckpt);
    c.inpaint_ckpt = j.value("inpaint_ckpt", c.inpaint_ckpt);
    c.classify_ckpt = j.value("classify_ckpt", c.classify_ckpt);
    c.scheme = j.value("scheme", c.scheme);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    data::ClassScheme::parse_name(c.scheme);
    if (c.port < 0 || c.port > 65535) throw ValidationError("port out of range");
}

inline ServiceConfig load_service_config(const std::filesystem::path& path) {
    try {
        return nlohmann::json::parse(data::read_text_file(path)).get<ServiceConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("service config " + path.string() + ": " + e.what());
    }
}

/// Models loaded once at startup. An empty checkpoint path leaves that model
/// absent (its endpoints answer 503); a bad path is a startup error.
struct LoadedModels {
    std::optional<detect::Detector> detector;
    std::optional<inpaint::Generator> generator;
    std::optional<texture::TextureClassifier> classifier;

    static LoadedModels from_config(const ServiceConfig& cfg) {
        LoadedModels m;
        if (!cfg.detect_ckpt.empty()) m.detector = detect::Detector::load(cfg.detect_ckpt);
        if (!cfg.inpaint_ckpt.empty()) m.generator = inpaint::Generator::load(cfg.inpaint_ckpt);
        if (!cfg.classify_ckpt.empty()) {
            m.classifier = texture::TextureClassifier::load(cfg.classify_ckpt);
            data::require_same_scheme(data::ClassScheme::by_name(cfg.scheme), m.classifier->scheme());
        }
        return m;
    }
};

// ---------------------------------------------------------------- request helpers

namespace detail {

class BadRequest : public Error {
public:
    using Error::Error;
};

/// Uploaded fields from multipart form data, a JSON body (base64 images) or a raw image body.
class Payload {
public:
    explicit Payload(const httplib::Request& req) : req_(req) {
        if (!req.is_multipart_form_data() && req.get_header_value("Content-Type").starts_with("application/json")) {
            try {
                json_ = nlohmann::json::parse(req.body);
            } catch (const nlohmann::json::exception& e) {
                throw BadRequest(std::string("malformed JSON body: ") + e.what());
            }
            if (!json_->is_object()) throw BadRequest("JSON body must be an object");
        }
    }

    std::optional<std::string> bytes(const std::string& name, bool raw_body_fallback = false) const {
        if (req_.is_multipart_form_data()) {
            if (req_.has_file(name)) return req_.get_file_value(name).content;
            return std::nullopt;
        }
        if (json_) {
            const auto it = json_->find(name);
            if (it == json_->end()) return std::nullopt;
            if (!it->is_string()) throw BadRequest("field '" + name + "' must be a base64 string");
            return base64_decode(it->get<std::string>());
        }
        if (raw_body_fallback && !req_.body.empty()) return req_.body;
        return std::nullopt;
    }

    std::optional<std::string> text(const std::string& name) const {
        if (req_.has_param(name)) return req_.get_param_value(name);
        if (req_.is_multipart_form_data() && req_.has_file(name)) return req_.get_file_value(name).content;
        if (json_) {
            const auto it = json_->find(name);
            if (it != json_->end() && it->is_string()) return it->get<std::string>();
        }
        return std::nullopt;
    }

    ImageU8 rgb(const std::string& name, bool raw_body_fallback = false) const {
        const auto b = bytes(name, raw_body_fallback);
        if (!b) throw BadRequest("missing image field '" + name + "'");
        auto img = io::decode_rgb(std::span(reinterpret_cast<const std::uint8_t*>(b->data()), b->size()));
        if (!img) throw BadRequest("field '" + name + "' is not a PNG/JPEG image");
        return std::move(*img);
    }

    ImageU8 gray(const std::string& name) const {
        const auto b = bytes(name);
        if (!b) throw BadRequest("missing image field '" + name + "'");
        auto img = io::decode_gray(std::span(reinterpret_cast<const std::uint8_t*>(b->data()), b->size()));
        if (!img) throw BadRequest("field '" + name + "' is not a PNG/JPEG image");
        return std::move(*img);
    }

private:
    const httplib::Request& req_;
    std::optional<nlohmann::json> json_;
};

inline std::string png_string(const ImageU8& img) {
    const auto bytes = io::encode_png(img);
    return {bytes.begin(), bytes.end()};
}

/// Revision from `If-Match` (quotes and weak prefix allowed) or `?expected_revision=`.
inline std::optional<long> expected_revision(const httplib::Request& req, const nlohmann::json* body = nullptr) {
    std::string v;
    if (req.has_header("If-Match")) {
        v = req.get_header_value("If-Match");
        if (v.starts_with("W/")) v.erase(0, 2);
        if (v.size() >= 2 && v.front() == '"' && v.back() == '"') v = v.substr(1, v.size() - 2);
    } else if (req.has_param("expected_revision")) {
        v = req.get_param_value("expected_revision");
    } else if (body && body->contains("expected_revision")) {
        if (!body->at("expected_revision").is_number_integer()) throw BadRequest("expected_revision must be an integer");
        return body->at("expected_revision").get<long>();
    } else {
        return std::nullopt;
    }
    long out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) throw BadRequest("expected revision '" + v + "' is not an integer");
    return out;
}

inline void set_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

inline void set_revision(httplib::Response& res, long revision) {
    res.set_header("ETag", "\"" + std::to_string(revision) + "\"");
}

/// Maps toolkit errors onto HTTP statuses with a JSON body.
inline void respond_error(httplib::Response& res, std::exception_ptr ep, const std::string& stage = {}) {
    nlohmann::json body;
    if (!stage.empty()) body["stage"] = stage;
    try {
        std::rethrow_exception(ep);
    } catch (const StageError& e) {
        respond_error(res, e.cause(), e.stage());
        return;
    } catch (const ConflictError& e) {
        body["error"] = e.what();
        body["current_revision"] = e.current_revision();
        set_revision(res, e.current_revision());
        set_json(res, body, 409);
        return;
    } catch (const NotFoundError& e) {
        body["error"] = e.what();
        set_json(res, body, 404);
        return;
    } catch (const StateError& e) {
        body["error"] = e.what();
        set_json(res, body, 503);
        return;
    } catch (const BadRequest& e) {
        body["error"] = e.what();
    } catch (const ValidationError& e) {
        body["error"] = e.what();
    } catch (const PreconditionError& e) {
        body["error"] = e.what();
    } catch (const ParseError& e) {
        body["error"] = e.what();
    } catch (const std::exception& e) {
        body["error"] = e.what();
        set_json(res, body, 500);
        return;
    } catch (...) {
        body["error"] = "unknown error";
        set_json(res, body, 500);
        return;
    }
    set_json(res, body, 400);
}

}  // namespace detail

// ---------------------------------------------------------------- service

/// HTTP front end over the loaded models and the project store.
///
///   GET  /health, /scheme
///   POST /detect, /inpaint, /classify, /pipeline
///   GET  /projects/{id}              PUT /projects/{id}
///   GET  /projects/{id}/annotations  PUT /projects/{id}/annotations
///
/// Inference on each model is serialized; reads of projects run concurrently.
class Service {
public:
    Service(ServiceConfig cfg, LoadedModels models)
        : cfg_(std::move(cfg)),
          scheme_(&data::ClassScheme::by_name(cfg_.scheme)),
          models_(std::move(models)),
          store_(std::filesystem::path(cfg_.data_dir) / "projects", scheme_) {
        routes();
    }

    explicit Service(const ServiceConfig& cfg) : Service(cfg, LoadedModels::from_config(cfg)) {}

    httplib::Server& http() { return http_; }
    const ServiceConfig& config() const { return cfg_; }
    ProjectStore& store() { return store_; }

    /// Binds to `cfg.port` (0 picks a free port); returns the bound port.
    int bind() {
        const int port = cfg_.port == 0 ? http_.bind_to_any_port(cfg_.host) : (http_.bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1);
        if (port < 0) throw Error("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
        return port;
    }

    /// Blocks serving requests until stop().
    bool listen_after_bind() { return http_.listen_after_bind(); }
    void stop() { http_.stop(); }
    void wait_until_ready() { http_.wait_until_ready(); }

private:
    void routes() {
        using httplib::Request;
        using httplib::Response;
        http_.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                   {"Access-Control-Allow-Headers", "Content-Type, If-Match"},
                                   {"Access-Control-Allow-Methods", "GET, PUT, POST, OPTIONS"},
                                   {"Access-Control-Expose-Headers", "ETag"}});
        http_.Options(R"(.*)", [](const Request&, Response& res) { res.status = 204; });
        http_.set_exception_handler([](const Request&, Response& res, std::exception_ptr ep) { detail::respond_error(res, ep); });
        http_.set_payload_max_length(256u << 20);

        http_.Get("/health", [this](const Request&, Response& res) {
            detail::set_json(res, {{"detect", models_.detector.has_value()},
                                   {"inpaint", models_.generator.has_value()},
                                   {"classify", models_.classifier.has_value()},
                                   {"scheme", std::string(scheme_->name_str())}});
        });
        http_.Get("/scheme", [this](const Request&, Response& res) { detail::set_json(res, scheme_json()); });
        http_.Post("/detect", [this](const Request& req, Response& res) { handle_detect(req, res); });
        http_.Post("/inpaint", [this](const Request& req, Response& res) { handle_inpaint(req, res); });
        http_.Post("/classify", [this](const Request& req, Response& res) { handle_classify(req, res); });
        http_.Post("/pipeline", [this](const Request& req, Response& res) { handle_pipeline(req, res); });

        const std::string id = R"(/projects/([A-Za-z0-9_.\-]+))";
        http_.Get(id, [this](const Request& req, Response& res) {
            const auto p = store_.get(req.matches[1]);
            detail::set_revision(res, p.revision);
            detail::set_json(res, project_json(p));
        });
        http_.Put(id, [this](const Request& req, Response& res) { handle_put_project(req, res); });
        http_.Get(id + "/annotations", [this](const Request& req, Response& res) {
            const auto p = store_.get(req.matches[1]);
            detail::set_revision(res, p.revision);
            res.set_content(data::save_annotations(p.annotations), "application/json");
        });
        http_.Put(id + "/annotations", [this](const Request& req, Response& res) {
            const auto rev = detail::expected_revision(req);
            if (!rev) throw detail::BadRequest("PUT needs an expected revision (If-Match or ?expected_revision=)");
            auto set = data::load_annotations(req.body, scheme_);
            const auto p = store_.put_annotations(req.matches[1], *rev, std::move(set));
            detail::set_revision(res, p.revision);
            detail::set_json(res, {{"project_id", p.project_id}, {"revision", p.revision}});
        });
    }

    nlohmann::json scheme_json() const {
        nlohmann::json classes = nlohmann::json::array();
        for (const auto& c : scheme_->classes()) classes.push_back({{"id", c.id}, {"label", c.label}});
        return {{"name", std::string(scheme_->name_str())}, {"classes", classes}};
    }

    static nlohmann::json project_json(const AnnotationProject& p) {
        nlohmann::json images = nlohmann::json::array();
        for (const auto& m : p.annotations.images)
            images.push_back({{"image_id", m.image_id}, {"filename", m.filename}, {"well_id", m.well_id},
                              {"width", m.width}, {"height", m.height}});
        return {{"project_id", p.project_id},
                {"revision", p.revision},
                {"images", images},
                {"annotations", nlohmann::json::parse(data::save_annotations(p.annotations))}};
    }

    /// Creates the project when absent; otherwise a revisioned replacement of
    /// its annotations carried as {"annotations": <VIA document>}.
    void handle_put_project(const httplib::Request& req, httplib::Response& res) {
        const std::string id = req.matches[1];
        nlohmann::json body = nlohmann::json::object();
        if (!req.body.empty()) {
            try {
                body = nlohmann::json::parse(req.body);
            } catch (const nlohmann::json::exception& e) {
                throw detail::BadRequest(std::string("malformed JSON body: ") + e.what());
            }
        }
        const auto rev = detail::expected_revision(req, &body);
        if (!store_.exists(id)) {
            if (rev && *rev != 0) throw NotFoundError("unknown project '" + id + "'");
            auto p = store_.create(id);
            if (body.contains("annotations"))
                p = store_.put_annotations(id, 0, data::load_annotations(body.at("annotations").dump(), scheme_));
            detail::set_revision(res, p.revision);
            detail::set_json(res, project_json(p), 201);
            return;
        }
        if (!rev) throw detail::BadRequest("PUT on an existing project needs an expected revision");
        if (!body.contains("annotations")) throw detail::BadRequest("body needs an 'annotations' document");
        const auto p = store_.put_annotations(id, *rev, data::load_annotations(body.at("annotations").dump(), scheme_));
        detail::set_revision(res, p.revision);
        detail::set_json(res, project_json(p));
    }

    detect::Detector& detector() {
        if (!models_.detector) throw StateError("detection model not loaded");
        return *models_.detector;
    }
    inpaint::Generator& generator() {
        if (!models_.generator) throw StateError("inpainting model not loaded");
        return *models_.generator;
    }
    const texture::TextureClassifier& classifier() const {
        if (!models_.classifier) throw StateError("classification model not loaded");
        return *models_.classifier;
    }

    void handle_detect(const httplib::Request& req, httplib::Response& res) {
        const detail::Payload in(req);
        const auto image = in.rgb("image", true);
        const std::string image_id = in.text("image_id").value_or("image");
        auto& det = detector();
        std::vector<detect::Detection> dets;
        {
            std::lock_guard lock(detect_mutex_);
            dets = det.detect(image);
        }
        const auto mask = detect::union_mask(dets, image.rows(), image.cols());
        nlohmann::json list = nlohmann::json::array();
        for (const auto& d : dets) list.push_back(to_json(d, image_id));
        detail::set_json(res, {{"image_id", image_id},
                               {"detections", list},
                               {"overlay_png", base64_encode(detail::png_string(overlay(image, mask)))},
                               {"mask_png", base64_encode(detail::png_string(mask_image(mask)))}});
    }

    void handle_inpaint(const httplib::Request& req, httplib::Response& res) {
        const detail::Payload in(req);
        const auto image = in.rgb("image");
        const auto mask_raw = in.gray("mask");
        if (mask_raw.rows() != image.rows() || mask_raw.cols() != image.cols())
            throw detail::BadRequest("mask " + std::to_string(mask_raw.rows()) + "x" + std::to_string(mask_raw.cols()) +
                                     " does not match image " + std::to_string(image.rows()) + "x" +
                                     std::to_string(image.cols()));
        const detect::BinaryMask mask(mask_raw);
        ImageU8 out;
        if (mask.empty()) {
            out = image;
        } else {
            auto& gen = generator();
            std::lock_guard lock(inpaint_mutex_);
            out = inpaint::inpaint(gen, image, mask);
        }
        res.set_content(detail::png_string(out), "image/png");
    }

    void handle_classify(const httplib::Request& req, httplib::Response& res) {
        const detail::Payload in(req);
        std::optional<data::SchemeName> requested;
        if (const auto s = in.text("scheme")) {
            try {
                requested = data::ClassScheme::parse_name(*s);
            } catch (const Error&) {
                throw detail::BadRequest("unknown scheme '" + *s + "'");
            }
        }
        const auto strip = in.rgb("strip", true);
        const auto& model = classifier();
        if (requested && *requested != model.config().scheme)
            throw detail::BadRequest("scheme " + std::string(data::ClassScheme::get(*requested).name_str()) +
                                     " is not deployed (serving " + std::string(model.scheme().name_str()) + ")");
        const auto p = texture::classify(model, strip);
        nlohmann::json ids = nlohmann::json::array();
        for (const auto& c : model.scheme().classes()) ids.push_back(c.id);
        detail::set_json(res, {{"scheme", std::string(model.scheme().name_str())},
                               {"class_ids", ids},
                               {"probabilities", p},
                               {"class_id", model.scheme().id_at(static_cast<std::size_t>(texture::argmax(p)))}});
    }

    void handle_pipeline(const httplib::Request& req, httplib::Response& res) {
        const detail::Payload in(req);
        const auto image = in.rgb("image", true);
        const std::string image_id = in.text("image_id").value_or("image");
        PipelineModels m{&detector(), &generator(), &classifier()};
        PipelineResult r;
        {
            std::scoped_lock lock(detect_mutex_, inpaint_mutex_);
            r = run_pipeline(m, image, image_id);
        }
        auto j = to_json(r);
        j["mask_png"] = base64_encode(detail::png_string(mask_image(r.mask)));
        j["inpainted_png"] = base64_encode(detail::png_string(r.inpainted));
        detail::set_json(res, j);
    }

    ServiceConfig cfg_;
    const data::ClassScheme* scheme_;
    LoadedModels models_;
    ProjectStore store_;
    httplib::Server http_;
    std::mutex detect_mutex_, inpaint_mutex_;
};

}  // namespace corestack::service
