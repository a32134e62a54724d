#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "corestack/common/error.hpp"
#include "corestack/nn/layers.hpp"

// Single-file model archive:
//   8-byte magic, u64 header length, JSON header, raw little-endian float32 tensors
// The header lists tensors (name, shape) in storage order, plus the model kind,
// its construction config and the class-scheme version.

namespace corestack::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'C', 'S', 'T', 'K', 'C', 'K', 'P', '1'};
inline constexpr int kSchemeVersion = 1;

struct Checkpoint {
    nlohmann::json header;
    std::vector<std::pair<std::string, Tensor>> tensors;

    std::string kind() const { return header.value("kind", ""); }
    const nlohmann::json& config() const { return header.at("config"); }

    const Tensor* find(std::string_view name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

inline void save_checkpoint(const std::filesystem::path& path, const std::string& kind, const nlohmann::json& config,
                            const std::vector<NamedParam>& params) {
    nlohmann::json header = {{"kind", kind}, {"config", config}, {"scheme_version", kSchemeVersion}};
    header["tensors"] = nlohmann::json::array();
    for (const auto& np : params) {
        const auto& t = np.param->value;
        header["tensors"].push_back({{"name", np.name}, {"shape", {t.n, t.c, t.h, t.w}}});
    }
    const std::string text = header.dump();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& np : params) {
        const auto& d = np.param->value.data;
        out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
    }
    if (!out) throw Error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view expected_kind = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("cannot open checkpoint " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw ValidationError(path.string() + " is not a corestack checkpoint");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > (1u << 26)) throw ValidationError("corrupt checkpoint header in " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    Checkpoint ck;
    try {
        ck.header = nlohmann::json::parse(text);
        if (ck.header.value("scheme_version", 0) != kSchemeVersion)
            throw ValidationError("checkpoint scheme version " + ck.header.value("scheme_version", nlohmann::json()).dump() +
                                  " is not supported");
        for (const auto& t : ck.header.at("tensors")) {
            const auto shape = t.at("shape").get<std::vector<int>>();
            if (shape.size() != 4) throw ValidationError("checkpoint tensor shape must have 4 dims");
            Tensor tensor(shape[0], shape[1], shape[2], shape[3]);
            in.read(reinterpret_cast<char*>(tensor.data.data()), static_cast<std::streamsize>(tensor.numel() * sizeof(float)));
            if (!in) throw ValidationError("checkpoint " + path.string() + " is truncated");
            ck.tensors.emplace_back(t.at("name").get<std::string>(), std::move(tensor));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("bad checkpoint header in " + path.string() + ": " + e.what());
    }
    if (!expected_kind.empty() && ck.kind() != expected_kind)
        throw ValidationError("checkpoint " + path.string() + " holds a '" + ck.kind() + "' model, expected '" +
                              std::string(expected_kind) + "'");
    return ck;
}

/// Copies stored tensors into the named parameters; every parameter must be present with its shape.
inline void restore_params(const Checkpoint& ck, const std::vector<NamedParam>& params) {
    for (const auto& np : params) {
        const Tensor* t = ck.find(np.name);
        if (!t) throw ValidationError("checkpoint lacks tensor '" + np.name + "'");
        if (!t->same_shape(np.param->value))
            throw ValidationError("tensor '" + np.name + "' has shape " + t->shape_str() + ", model expects " +
                                  np.param->value.shape_str());
        np.param->value.data = t->data;
    }
}

/// In-memory copy of parameter values, e.g. for keeping the best epoch.
inline std::vector<std::vector<float>> snapshot(const std::vector<NamedParam>& params) {
    std::vector<std::vector<float>> out;
    for (const auto& np : params) out.push_back(np.param->value.data);
    return out;
}

inline void restore_snapshot(const std::vector<std::vector<float>>& snap, const std::vector<NamedParam>& params) {
    if (snap.size() != params.size()) throw PreconditionError("snapshot does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) params[i].param->value.data = snap[i];
}

}  // namespace corestack::nn
