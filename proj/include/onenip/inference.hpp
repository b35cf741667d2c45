#pragma once

// Test-time pipeline: per-class prompt pool, cosine prompt selection,
// reconstruction-error / refiner fusion and split evaluation.

#include <atomic>
#include <cmath>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "onenip/config.hpp"
#include "onenip/dataset.hpp"
#include "onenip/features.hpp"
#include "onenip/metrics.hpp"
#include "onenip/model.hpp"

namespace onenip {

// Turns dataset files into feature maps: images through the frozen backbone
// (after resizing to image_size) or ONIP feature files as stored.
class FeatureExtractor {
public:
    explicit FeatureExtractor(const RunConfig& cfg) : image_size_(cfg.image_size), spec_(cfg.backbone) {
        if (spec_.kind == BackboneKind::builtin_mini_cnn) backbone_.emplace(spec_);
    }

    bool uses_images() const { return backbone_.has_value(); }
    std::size_t image_size() const { return image_size_; }
    std::string file_extension() const { return uses_images() ? ".png" : ".onip"; }

    Image load_image(const fs::path& path) const {
        Image img = load_png(path);
        if (img.height != image_size_ || img.width != image_size_) img = resize_image(img, image_size_, image_size_);
        return img;
    }

    std::vector<FeatureMap> from_images(std::span<const Image> images) const {
        if (!backbone_) throw ConfigError("feature-file backbone cannot extract features from images");
        return backbone_->extract_batch(images);
    }
    FeatureMap from_image(const Image& image) const { return from_images(std::span<const Image>(&image, 1))[0]; }

    FeatureMap from_file(const fs::path& path) const {
        if (uses_images()) return from_image(load_image(path));
        FeatureMap fm = load_feature_file(path);
        if (fm.h() != spec_.fusion_h || fm.w() != spec_.fusion_w || fm.c() != spec_.channels())
            throw DatasetError("feature file " + path.string() + " has shape " + shape_str(fm.values.shape()) +
                               ", config expects [" + std::to_string(spec_.fusion_h) + "x" + std::to_string(spec_.fusion_w) +
                               "x" + std::to_string(spec_.channels()) + "]");
        return fm;
    }

    std::uint64_t checksum() const { return backbone_ ? backbone_->checksum() : 0; }

private:
    std::size_t image_size_;
    BackboneSpec spec_;
    std::optional<MiniCnnBackbone> backbone_;
};

// ---- prompt pool -------------------------------------------------------------

struct PoolEntry {
    std::size_t class_id = 0;
    std::string class_name;
    std::size_t image_id = 0;  // index into the class's training list
    FeatureMap prompt;
    std::vector<double> pooled;
};

struct PromptPool {
    std::vector<PoolEntry> entries;
};

inline double vector_norm(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline PoolEntry make_pool_entry(std::size_t class_id, std::string name, std::size_t image_id, FeatureMap prompt) {
    PoolEntry e{class_id, std::move(name), image_id, std::move(prompt), {}};
    e.pooled = pool_feature(e.prompt);
    if (!(vector_norm(e.pooled) > 0)) throw DatasetError("prompt of class " + e.class_name + " pools to a zero vector");
    return e;
}

// One uniformly drawn normal training image per class.
inline PromptPool build_prompt_pool(const DatasetIndex& index, const FeatureExtractor& extractor, std::uint64_t seed) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    PromptPool pool;
    for (std::size_t k = 0; k < index.classes.size(); ++k) {
        const ClassEntry& c = index.classes[k];
        if (c.train.empty()) throw DatasetError("class " + c.name + " has no training images for the prompt pool");
        const std::size_t id = std::uniform_int_distribution<std::size_t>(0, c.train.size() - 1)(rng);
        pool.entries.push_back(make_pool_entry(k, c.name, id, extractor.from_file(c.train[id])));
    }
    return pool;
}

struct PromptSelection {
    std::size_t entry = 0;
    double cosine = 0;
    bool fallback = false;  // the test feature pooled to a zero vector
};

// Highest cosine similarity between pooled vectors; the earliest entry wins ties.
inline PromptSelection select_prompt(const FeatureMap& test, const PromptPool& pool) {
    if (pool.entries.empty()) throw DatasetError("prompt pool is empty");
    const std::vector<double> q = pool_feature(test);
    const double qn = vector_norm(q);
    if (!(qn > 0)) return {0, 0.0, true};
    PromptSelection best{0, -2.0, false};
    for (std::size_t k = 0; k < pool.entries.size(); ++k) {
        const auto& p = pool.entries[k].pooled;
        if (p.size() != q.size()) throw DimensionError("prompt pool channel count differs from the test feature");
        double dot = 0;
        for (std::size_t i = 0; i < q.size(); ++i) dot += q[i] * p[i];
        const double cos = dot / (qn * vector_norm(p));
        if (cos > best.cosine) best = {k, cos, false};
    }
    return best;
}

// ---- scoring -------------------------------------------------------------------

struct ScoreMap {
    std::size_t height = 0, width = 0;  // image resolution
    std::size_t grid_h = 0, grid_w = 0;
    std::vector<float> s;               // fused map, H x W
    std::vector<float> s_rec;           // channel-wise L2 error, h x w
    std::vector<float> s_rec_resized;   // H x W
    std::vector<float> m_hat;           // refiner map, H x W (empty when the refiner is off)
    double alpha = 0.5;
    double image_score = 0;
    PromptSelection selection;
};

// Separable Gaussian blur with edge clamping, truncated at 4 sigma.
inline std::vector<float> gaussian_smooth(const std::vector<float>& map, std::size_t h, std::size_t w, double sigma) {
    if (sigma <= 0) return map;
    const int radius = static_cast<int>(std::ceil(4 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0;
    for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= total;
    auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1)); };
    std::vector<float> tmp(map.size()), out(map.size());
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double s = 0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * map[y * w + clampi(static_cast<long>(x) + i, w)];
            tmp[y * w + x] = static_cast<float>(s);
        }
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            double s = 0;
            for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp[clampi(static_cast<long>(y) + i, h) * w + x];
            out[y * w + x] = static_cast<float>(s);
        }
    return out;
}

// S = (1 - alpha) * resize(S_rec) + alpha * M_hat; image score = max(S).
// With the refiner disabled S is the resized S_rec alone.
inline ScoreMap fuse_scores(const Tensor& features, const Tensor& reconstruction, const Tensor* refined, std::size_t height,
                            std::size_t width, double alpha, double smoothing_sigma = 0) {
    if (alpha < 0 || alpha > 1) throw ConfigError("alpha must lie in [0, 1]");
    detail::require_same_shape(features, reconstruction, "score");
    NoGradGuard no_grad;
    ScoreMap out;
    out.height = height;
    out.width = width;
    out.grid_h = features.dim(0);
    out.grid_w = features.dim(1);
    out.alpha = alpha;
    const std::size_t c = features.dim(2), cells = out.grid_h * out.grid_w;
    out.s_rec.resize(cells);
    for (std::size_t t = 0; t < cells; ++t) {
        double s = 0;
        for (std::size_t k = 0; k < c; ++k) {
            const double d = static_cast<double>(features.data()[t * c + k]) - reconstruction.data()[t * c + k];
            s += d * d;
        }
        out.s_rec[t] = static_cast<float>(std::sqrt(s));
    }
    Tensor grid({out.grid_h, out.grid_w, 1}, std::vector<Scalar>(out.s_rec.begin(), out.s_rec.end()));
    Tensor up = bilinear_resize(grid, height, width);
    out.s_rec_resized.assign(up.data().begin(), up.data().end());
    out.s.resize(height * width);
    if (refined) {
        if (refined->numel() != height * width) throw DimensionError("refined map size differs from the image size");
        out.m_hat.assign(refined->data().begin(), refined->data().end());
        const auto a = static_cast<float>(alpha);
        for (std::size_t p = 0; p < out.s.size(); ++p) out.s[p] = (1 - a) * out.s_rec_resized[p] + a * out.m_hat[p];
    } else {
        out.s = out.s_rec_resized;
    }
    out.s = gaussian_smooth(out.s, height, width, smoothing_sigma);
    out.image_score = *std::max_element(out.s.begin(), out.s.end());
    return out;
}

// Evaluation-mode scorer with prompt encodings cached per pool entry.
// Never builds the restoration stream.
class Scorer {
public:
    Scorer(OneNipModel& model, const PromptPool& pool, double alpha, double smoothing_sigma = 0)
        : model_(model), pool_(pool), alpha_(alpha), sigma_(smoothing_sigma) {
        model_.set_training(false);
        NoGradGuard no_grad;
        for (const auto& e : pool_.entries) encoded_.push_back(model_.encode(e.prompt.values));
    }

    ScoreMap score(const FeatureMap& test, std::size_t height, std::size_t width) {
        NoGradGuard no_grad;
        PromptSelection sel = select_prompt(test, pool_);
        if (sel.fallback) std::cerr << "warning: test feature pools to a zero vector, using the first prompt\n";
        Tensor x_e = model_.encode(test.values);
        Tensor rec = model_.reconstruct_encoded(x_e, model_.config().decoder_variant == DecoderVariant::lqd ? x_e
                                                                                                         : encoded_[sel.entry]);
        std::optional<Tensor> refined;
        if (model_.config().refiner_enabled) {
            Tensor e = abs(sub(test.values, rec));
            Shape s = e.shape();
            s.insert(s.begin(), 1);
            refined = model_.refine(reshape(e, s), height, width).map;
        }
        ScoreMap out = fuse_scores(test.values, rec, refined ? &*refined : nullptr, height, width, alpha_, sigma_);
        out.selection = sel;
        return out;
    }

private:
    OneNipModel& model_;
    const PromptPool& pool_;
    double alpha_, sigma_;
    std::vector<Tensor> encoded_;
};

// Scores every test item of the split, `threads` images at a time (0 = one
// per hardware thread). Output order follows the dataset index.
inline std::vector<ScoredImage> score_split(const DatasetIndex& index, const FeatureExtractor& extractor, Scorer& scorer,
                                            std::size_t threads = 0) {
    std::vector<std::pair<const ClassEntry*, const TestItem*>> items;
    for (const ClassEntry& c : index.classes)
        for (const TestItem& item : c.test) items.emplace_back(&c, &item);
    if (items.empty()) throw DatasetError("dataset has no test images");
    const std::size_t size = extractor.image_size();
    std::vector<ScoredImage> out(items.size());
    auto score_one = [&](std::size_t k) {
        const auto& [c, item] = items[k];
        ScoredImage& s = out[k];
        s.class_name = c->name;
        s.anomalous = item->anomalous();
        if (item->anomalous() && !item->mask)
            throw DatasetError("anomalous test image " + item->image.string() + " has no mask");
        ScoreMap sm = scorer.score(extractor.from_file(item->image), size, size);
        s.image_score = sm.image_score;
        s.pixel_scores = std::move(sm.s);
        s.height = s.width = size;
        if (item->mask) {
            Mask m = load_mask_png(*item->mask);
            if (m.height != size || m.width != size) m = resize_mask(m, size, size);
            s.mask = std::move(m);
        }
    };
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, items.size());
    if (threads == 1) {
        for (std::size_t k = 0; k < items.size(); ++k) score_one(k);
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(threads);
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t k = next++; k < items.size(); k = next++) score_one(k);
                } catch (...) {
                    errors[t] = std::current_exception();
                    next = items.size();
                }
            });
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

}  // namespace onenip
