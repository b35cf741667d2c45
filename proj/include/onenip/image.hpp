#pragma once

// RGB images and binary masks, channel-last, with PNG I/O through libpng.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "onenip/errors.hpp"

namespace onenip {

struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;  // [H, W, 3], each in [0, 1]

    Image() = default;
    Image(std::size_t h, std::size_t w, float fill = 0.f) : height(h), width(w), values(h * w * 3, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t ch) { return values[(y * width + x) * 3 + ch]; }
    float at(std::size_t y, std::size_t x, std::size_t ch) const { return values[(y * width + x) * 3 + ch]; }
    bool operator==(const Image&) const = default;
};

struct Mask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values;  // 0 or 1

    Mask() = default;
    Mask(std::size_t h, std::size_t w) : height(h), width(w), values(h * w, 0) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
    std::size_t count() const {
        return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
    }
    bool operator==(const Mask&) const = default;
};

// Ground truth of a normal image: every pixel zero.
inline Mask normal_mask(std::size_t height, std::size_t width) { return Mask(height, width); }

// Bilinear (align-corners=false) resize of an RGB image.
inline Image resize_image(const Image& img, std::size_t out_h, std::size_t out_w) {
    if (img.height == out_h && img.width == out_w) return img;
    Image out(out_h, out_w);
    auto src = [](std::size_t o, std::size_t in, std::size_t n) {
        const double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(n) - 0.5;
        return s < 0 ? 0.0 : s;
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        const double sy = src(y, img.height, out_h);
        const std::size_t y0 = std::min(static_cast<std::size_t>(sy), img.height - 1);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const float fy = static_cast<float>(sy - static_cast<double>(y0));
        for (std::size_t x = 0; x < out_w; ++x) {
            const double sx = src(x, img.width, out_w);
            const std::size_t x0 = std::min(static_cast<std::size_t>(sx), img.width - 1);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const float fx = static_cast<float>(sx - static_cast<double>(x0));
            for (std::size_t c = 0; c < 3; ++c)
                out.at(y, x, c) = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
                                  fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
        }
    }
    return out;
}

// Nearest-neighbour resize keeps masks binary.
inline Mask resize_mask(const Mask& m, std::size_t out_h, std::size_t out_w) {
    if (m.height == out_h && m.width == out_w) return m;
    Mask out(out_h, out_w);
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x)
            out.at(y, x) = m.at(std::min(y * m.height / out_h, m.height - 1), std::min(x * m.width / out_w, m.width - 1));
    return out;
}

namespace detail {

inline std::vector<std::uint8_t> read_png_raw(const std::filesystem::path& path, std::uint32_t format, std::size_t& h,
                                              std::size_t& w) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.string().c_str()))
        throw DatasetError("cannot read PNG " + path.string() + ": " + image.message);
    image.format = format;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw DatasetError("cannot decode PNG " + path.string() + ": " + image.message);
    }
    h = image.height;
    w = image.width;
    return buffer;
}

inline void write_png_raw(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes, std::size_t h,
                          std::size_t w, std::uint32_t format) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(w);
    image.height = static_cast<png_uint_32>(h);
    image.format = format;
    if (!png_image_write_to_file(&image, path.string().c_str(), 0, bytes.data(), 0, nullptr))
        throw std::runtime_error("cannot write PNG " + path.string() + ": " + image.message);
}

inline std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
}

}  // namespace detail

inline Image load_png(const std::filesystem::path& path) {
    std::size_t h = 0, w = 0;
    auto raw = detail::read_png_raw(path, PNG_FORMAT_RGB, h, w);
    Image img(h, w);
    for (std::size_t i = 0; i < raw.size(); ++i) img.values[i] = static_cast<float>(raw[i]) / 255.f;
    return img;
}

inline void save_png(const std::filesystem::path& path, const Image& img) {
    std::vector<std::uint8_t> raw(img.values.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = detail::to_byte(img.values[i]);
    detail::write_png_raw(path, raw, img.height, img.width, PNG_FORMAT_RGB);
}

// Any gray level above mid-scale counts as anomalous.
inline Mask load_mask_png(const std::filesystem::path& path) {
    std::size_t h = 0, w = 0;
    auto raw = detail::read_png_raw(path, PNG_FORMAT_GRAY, h, w);
    Mask m(h, w);
    for (std::size_t i = 0; i < raw.size(); ++i) m.values[i] = raw[i] > 127 ? 1 : 0;
    return m;
}

inline void save_mask_png(const std::filesystem::path& path, const Mask& m) {
    std::vector<std::uint8_t> raw(m.values.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = m.values[i] ? 255 : 0;
    detail::write_png_raw(path, raw, m.height, m.width, PNG_FORMAT_GRAY);
}

// Jet-style colour map of a scalar field, normalized by [lo, hi].
inline void save_heatmap_png(const std::filesystem::path& path, const std::vector<float>& values, std::size_t h,
                             std::size_t w, float lo, float hi) {
    std::vector<std::uint8_t> raw(h * w * 3);
    const float span = hi > lo ? hi - lo : 1.f;
    for (std::size_t i = 0; i < h * w; ++i) {
        const float t = std::clamp((values[i] - lo) / span, 0.f, 1.f);
        const float r = std::clamp(1.5f - std::abs(4.f * t - 3.f), 0.f, 1.f);
        const float g = std::clamp(1.5f - std::abs(4.f * t - 2.f), 0.f, 1.f);
        const float b = std::clamp(1.5f - std::abs(4.f * t - 1.f), 0.f, 1.f);
        raw[i * 3] = detail::to_byte(r);
        raw[i * 3 + 1] = detail::to_byte(g);
        raw[i * 3 + 2] = detail::to_byte(b);
    }
    detail::write_png_raw(path, raw, h, w, PNG_FORMAT_RGB);
}

}  // namespace onenip
