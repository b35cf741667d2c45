#pragma once

// Pseudo-anomaly synthesis: CutPaste-style rectangle transplant and
// Perlin-masked texture blending. Every sample keeps the source image bitwise
// intact wherever its mask is zero.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "onenip/errors.hpp"
#include "onenip/image.hpp"

namespace onenip {

using Rng = std::mt19937_64;

enum class SynthesisMethod { cutpaste, perlin_blend };

inline const char* to_string(SynthesisMethod m) { return m == SynthesisMethod::cutpaste ? "cutpaste" : "perlin-blend"; }

struct AnomalySample {
    Image image;
    Mask mask;
    std::size_t source_index = 0;
    SynthesisMethod method = SynthesisMethod::cutpaste;
};

struct SynthesisParams {
    double area_lo = 0.02, area_hi = 0.15;     // patch area as a fraction of the image
    double aspect_lo = 0.3, aspect_hi = 3.3;   // patch height / width
    int perlin_octaves = 4;
    double perlin_threshold = 0.5;
    double opacity_lo = 0.2, opacity_hi = 1.0;  // blend factor drawn from (lo, hi]
    double method_probability = 0.5;            // chance of cutpaste

    void validate() const {
        if (!(area_lo > 0 && area_lo <= area_hi && area_hi < 1))
            throw ConfigError("synthesis area fraction must satisfy 0 < lo <= hi < 1");
        if (!(aspect_lo > 0 && aspect_lo <= aspect_hi)) throw ConfigError("synthesis aspect ratio range is invalid");
        if (perlin_octaves < 1) throw ConfigError("perlin_octaves must be >= 1");
        if (!(opacity_lo > 0 && opacity_lo <= opacity_hi && opacity_hi <= 1))
            throw ConfigError("blend opacity must satisfy 0 < lo <= hi <= 1");
        if (!(method_probability >= 0 && method_probability <= 1))
            throw ConfigError("method_probability must lie in [0, 1]");
    }
};

struct Rect {
    std::size_t y = 0, x = 0, h = 0, w = 0;
};

// Copies the src rectangle of `image` onto dst (same size). The mask marks dst.
inline AnomalySample cutpaste_at(const Image& image, const Rect& src, Rect dst) {
    if (src.h == 0 || src.w == 0 || src.y + src.h > image.height || src.x + src.w > image.width)
        throw ConfigError("cutpaste source rectangle outside the image");
    dst.h = src.h;
    dst.w = src.w;
    if (dst.y + dst.h > image.height || dst.x + dst.w > image.width)
        throw ConfigError("cutpaste destination rectangle outside the image");
    AnomalySample s{image, Mask(image.height, image.width), 0, SynthesisMethod::cutpaste};
    for (std::size_t y = 0; y < dst.h; ++y)
        for (std::size_t x = 0; x < dst.w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) s.image.at(dst.y + y, dst.x + x, c) = image.at(src.y + y, src.x + x, c);
            s.mask.at(dst.y + y, dst.x + x) = 1;
        }
    return s;
}

inline AnomalySample cutpaste(const Image& image, Rng& rng, const SynthesisParams& params) {
    params.validate();
    const double area_total = static_cast<double>(image.height * image.width);
    std::uniform_real_distribution<double> area(params.area_lo, params.area_hi);
    std::uniform_real_distribution<double> log_aspect(std::log(params.aspect_lo), std::log(params.aspect_hi));
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double a = area(rng) * area_total;
        const double r = std::exp(log_aspect(rng));
        const auto ph = static_cast<std::size_t>(std::lround(std::sqrt(a * r)));
        const auto pw = static_cast<std::size_t>(std::lround(std::sqrt(a / r)));
        const double realized = static_cast<double>(ph * pw) / area_total;
        if (ph == 0 || pw == 0 || ph > image.height || pw > image.width) continue;
        if (realized < params.area_lo || realized > params.area_hi) continue;
        std::uniform_int_distribution<std::size_t> ys(0, image.height - ph), xs(0, image.width - pw);
        Rect src{ys(rng), xs(rng), ph, pw};
        Rect dst{ys(rng), xs(rng), ph, pw};
        return cutpaste_at(image, src, dst);
    }
    throw ConfigError("cutpaste: no patch fits the image after 100 resamples");
}

namespace detail {

inline double perlin_fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

// One octave with `cells` lattice cells per axis, scaled to [-1, 1].
inline void perlin_octave(std::vector<double>& out, std::size_t h, std::size_t w, std::size_t cells, double amplitude,
                          Rng& rng) {
    std::uniform_real_distribution<double> angle(0.0, 2 * std::numbers::pi);
    const std::size_t lat = cells + 1;
    std::vector<std::array<double, 2>> grad(lat * lat);
    for (auto& g : grad) {
        const double a = angle(rng);
        g = {std::cos(a), std::sin(a)};
    }
    for (std::size_t y = 0; y < h; ++y) {
        const double py = static_cast<double>(y) * static_cast<double>(cells) / static_cast<double>(h);
        const auto cy = std::min(static_cast<std::size_t>(py), cells - 1);
        const double fy = py - static_cast<double>(cy);
        for (std::size_t x = 0; x < w; ++x) {
            const double px = static_cast<double>(x) * static_cast<double>(cells) / static_cast<double>(w);
            const auto cx = std::min(static_cast<std::size_t>(px), cells - 1);
            const double fx = px - static_cast<double>(cx);
            auto dot = [&](std::size_t gy, std::size_t gx, double dy, double dx) {
                const auto& g = grad[gy * lat + gx];
                return g[0] * dy + g[1] * dx;
            };
            const double n00 = dot(cy, cx, fy, fx);
            const double n01 = dot(cy, cx + 1, fy, fx - 1);
            const double n10 = dot(cy + 1, cx, fy - 1, fx);
            const double n11 = dot(cy + 1, cx + 1, fy - 1, fx - 1);
            const double u = perlin_fade(fx), v = perlin_fade(fy);
            const double top = n00 + u * (n01 - n00);
            const double bottom = n10 + u * (n11 - n10);
            out[y * w + x] += amplitude * std::sqrt(2.0) * (top + v * (bottom - top));
        }
    }
}

}  // namespace detail

// Fractal gradient-lattice noise, persistence 0.5, octave sum clamped to [-1, 1].
// The base lattice has 2 or 4 cells per axis; each octave doubles it.
inline std::vector<float> perlin_field(std::size_t h, std::size_t w, int octaves, Rng& rng) {
    if (h < 8 || w < 8) throw DimensionError("perlin_field needs h, w >= 8");
    if (octaves < 1) throw ConfigError("perlin_field needs at least one octave");
    std::vector<double> acc(h * w, 0.0);
    std::size_t cells = std::uniform_int_distribution<int>(0, 1)(rng) ? 4 : 2;
    double amplitude = 1.0;
    for (int o = 0; o < octaves; ++o) {
        detail::perlin_octave(acc, h, w, cells, amplitude, rng);
        amplitude *= 0.5;
        cells *= 2;
    }
    std::vector<float> out(h * w);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(std::clamp(acc[i], -1.0, 1.0));
    return out;
}

inline Mask threshold_mask(const std::vector<float>& field, std::size_t h, std::size_t w, double threshold) {
    Mask m(h, w);
    for (std::size_t i = 0; i < field.size(); ++i) m.values[i] = field[i] > threshold ? 1 : 0;
    return m;
}

// Tiles (or crops) a texture to the requested size.
inline Image fit_texture(const Image& texture, std::size_t h, std::size_t w) {
    if (texture.height == h && texture.width == w) return texture;
    if (texture.height == 0 || texture.width == 0) throw DimensionError("empty texture image");
    Image out(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = texture.at(y % texture.height, x % texture.width, c);
    return out;
}

// Blends `texture` into `image` inside a thresholded Perlin mask with a
// uniformly drawn opacity beta in (opacity_lo, opacity_hi].
inline AnomalySample perlin_blend(const Image& image, const Image& texture, Rng& rng, const SynthesisParams& params) {
    params.validate();
    const Image tex = fit_texture(texture, image.height, image.width);
    for (int attempt = 0; attempt < 100; ++attempt) {
        auto field = perlin_field(image.height, image.width, params.perlin_octaves, rng);
        Mask mask = threshold_mask(field, image.height, image.width, params.perlin_threshold);
        if (mask.count() == 0) continue;
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        const auto beta = static_cast<float>(params.opacity_hi - u * (params.opacity_hi - params.opacity_lo));
        AnomalySample s{image, std::move(mask), 0, SynthesisMethod::perlin_blend};
        for (std::size_t p = 0; p < image.height * image.width; ++p) {
            if (!s.mask.values[p]) continue;
            for (std::size_t c = 0; c < 3; ++c) {
                const float a = image.values[p * 3 + c];
                s.image.values[p * 3 + c] = a + beta * (tex.values[p * 3 + c] - a);
            }
        }
        return s;
    }
    throw ConfigError("perlin_blend: mask stayed empty after 100 resamples (threshold too high?)");
}

// Random non-identity permutation of the RGB channels.
inline Image channel_shuffled(const Image& image, Rng& rng) {
    static constexpr std::array<std::array<int, 3>, 5> perms{
        {{0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
    const auto& p = perms[std::uniform_int_distribution<std::size_t>(0, perms.size() - 1)(rng)];
    Image out = image;
    for (std::size_t i = 0; i < image.height * image.width; ++i)
        for (std::size_t c = 0; c < 3; ++c) out.values[i * 3 + c] = image.values[i * 3 + static_cast<std::size_t>(p[c])];
    return out;
}

// Supplies the blend texture; only called when the Perlin branch is taken.
using TextureSource = std::function<Image(Rng&)>;

inline AnomalySample synthesize(const Image& image, std::size_t source_index, Rng& rng, const SynthesisParams& params,
                                const TextureSource& texture = {}) {
    params.validate();
    const bool use_cutpaste = std::bernoulli_distribution(params.method_probability)(rng);
    AnomalySample s;
    if (use_cutpaste) {
        s = cutpaste(image, rng, params);
    } else {
        const Image tex = texture ? texture(rng) : channel_shuffled(image, rng);
        s = perlin_blend(image, tex, rng, params);
    }
    s.source_index = source_index;
    return s;
}

// Uniform over the images of a uniformly drawn class other than `class_id`.
// Empty when no other class has images, so synthesize falls back to the
// channel-shuffled copy.
inline TextureSource other_class_texture(const std::vector<std::vector<Image>>& images, std::size_t class_id) {
    std::vector<std::size_t> others;
    for (std::size_t k = 0; k < images.size(); ++k)
        if (k != class_id && !images[k].empty()) others.push_back(k);
    if (others.empty()) return {};
    return [&images, others](Rng& rng) -> Image {
        const auto& imgs = images[others[std::uniform_int_distribution<std::size_t>(0, others.size() - 1)(rng)]];
        return imgs[std::uniform_int_distribution<std::size_t>(0, imgs.size() - 1)(rng)];
    };
}

}  // namespace onenip
