#pragma once

#include <cstdint>
#include <cctype>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "corestack/common/error.hpp"
#include "corestack/common/raster.hpp"

namespace corestack::io {

/// RGB (3 channels) or single-channel raster <-> cv::Mat (BGR order for color).
inline cv::Mat to_mat(const ImageU8& img) {
    if (img.channels() == 1) {
        cv::Mat m(img.rows(), img.cols(), CV_8UC1);
        std::copy(img.pixels().begin(), img.pixels().end(), m.ptr<std::uint8_t>());
        return m;
    }
    if (img.channels() != 3) throw PreconditionError("image: only 1 or 3 channels supported");
    cv::Mat rgb(img.rows(), img.cols(), CV_8UC3);
    std::copy(img.pixels().begin(), img.pixels().end(), rgb.ptr<std::uint8_t>());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

inline ImageU8 from_mat(const cv::Mat& m) {
    cv::Mat src = m;
    if (src.depth() != CV_8U) throw PreconditionError("image: expected 8-bit data");
    if (src.channels() == 4) cv::cvtColor(src, src, cv::COLOR_BGRA2BGR);
    if (src.channels() == 3) {
        cv::Mat rgb;
        cv::cvtColor(src, rgb, cv::COLOR_BGR2RGB);
        ImageU8 out(rgb.rows, rgb.cols, 3);
        for (int r = 0; r < rgb.rows; ++r)
            std::copy_n(rgb.ptr<std::uint8_t>(r), static_cast<std::size_t>(rgb.cols) * 3, &out(r, 0, 0));
        return out;
    }
    if (src.channels() != 1) throw PreconditionError("image: unsupported channel count");
    ImageU8 out(src.rows, src.cols, 1);
    for (int r = 0; r < src.rows; ++r) std::copy_n(src.ptr<std::uint8_t>(r), src.cols, &out(r, 0, 0));
    return out;
}

/// Decodes PNG/JPEG bytes to RGB. Empty optional if the payload is not an image.
inline std::optional<ImageU8> decode_rgb(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) return std::nullopt;
    std::vector<std::uint8_t> buf(bytes.begin(), bytes.end());
    cv::Mat m;
    try {
        m = cv::imdecode(buf, cv::IMREAD_COLOR);
    } catch (const cv::Exception&) {
        return std::nullopt;
    }
    if (m.empty()) return std::nullopt;
    return from_mat(m);
}

inline std::optional<ImageU8> decode_gray(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) return std::nullopt;
    std::vector<std::uint8_t> buf(bytes.begin(), bytes.end());
    cv::Mat m;
    try {
        m = cv::imdecode(buf, cv::IMREAD_GRAYSCALE);
    } catch (const cv::Exception&) {
        return std::nullopt;
    }
    if (m.empty()) return std::nullopt;
    return from_mat(m);
}

inline std::vector<std::uint8_t> encode_png(const ImageU8& img) {
    std::vector<std::uint8_t> out;
    if (!cv::imencode(".png", to_mat(img), out)) throw Error("png encode failed");
    return out;
}

inline ImageU8 read_rgb(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (m.empty()) throw NotFoundError("cannot read image " + path.string());
    return from_mat(m);
}

inline ImageU8 read_gray(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw NotFoundError("cannot read image " + path.string());
    return from_mat(m);
}

/// Writes PNG or JPEG depending on the extension.
inline void write_image(const std::filesystem::path& path, const ImageU8& img) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), to_mat(img))) throw Error("cannot write image " + path.string());
}

inline bool is_image_file(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace corestack::io
