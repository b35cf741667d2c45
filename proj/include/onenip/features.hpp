#pragma once

// Offline feature maps: the frozen built-in backbone, ONIP feature files and
// global pooling for prompt selection.

#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "onenip/container.hpp"
#include "onenip/image.hpp"
#include "onenip/ops.hpp"

namespace onenip {

// h x w x c feature grid, stored as a [h, w, c] tensor.
struct FeatureMap {
    Tensor values;

    FeatureMap() = default;
    explicit FeatureMap(Tensor t) : values(std::move(t)) {
        if (values.rank() != 3) throw DimensionError("feature map must be [h, w, c], got " + shape_str(values.shape()));
    }

    std::size_t h() const { return values.dim(0); }
    std::size_t w() const { return values.dim(1); }
    std::size_t c() const { return values.dim(2); }
    std::size_t tokens() const { return h() * w(); }
};

enum class BackboneKind { builtin_mini_cnn, feature_file };

struct BackboneSpec {
    BackboneKind kind = BackboneKind::builtin_mini_cnn;
    std::vector<std::size_t> stage_channels{8, 16, 32, 64};
    std::size_t fusion_h = 8;
    std::size_t fusion_w = 8;
    std::uint64_t seed = 0;

    std::size_t channels() const { return std::accumulate(stage_channels.begin(), stage_channels.end(), std::size_t{0}); }
};

// Four-stage frozen CNN: [3x3 conv -> batch_norm(eval) -> relu -> 2x2 avg pool]
// per stage. Weights are drawn once from a seeded He-normal distribution.
class MiniCnnBackbone {
public:
    explicit MiniCnnBackbone(BackboneSpec spec) : spec_(std::move(spec)) {
        if (spec_.kind != BackboneKind::builtin_mini_cnn)
            throw ConfigError("MiniCnnBackbone needs kind builtin-mini-cnn");
        if (spec_.stage_channels.empty()) throw ConfigError("backbone needs at least one stage");
        std::mt19937_64 rng(spec_.seed);
        std::size_t cin = 3;
        for (std::size_t cout : spec_.stage_channels) {
            Stage s;
            std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / (9.0 * static_cast<double>(cin))));
            s.weight = Tensor({3, 3, cin, cout});
            for (Scalar& v : s.weight.mutable_data()) v = static_cast<Scalar>(normal(rng));
            s.bias = Tensor({cout}, Scalar{0});
            s.gamma = Tensor({cout}, Scalar{1});
            s.beta = Tensor({cout}, Scalar{0});
            s.stats = BatchNormStats(cout);
            stages_.push_back(std::move(s));
            cin = cout;
        }
    }

    const BackboneSpec& spec() const { return spec_; }
    std::size_t downsample() const { return std::size_t{1} << stages_.size(); }

    // Images in one batch must share a size.
    std::vector<FeatureMap> extract_batch(std::span<const Image> images) const {
        if (images.empty()) return {};
        const std::size_t h = images[0].height, w = images[0].width, f = downsample();
        if (h == 0 || w == 0 || h % f || w % f)
            throw DimensionError("image size " + std::to_string(h) + "x" + std::to_string(w) +
                                 " is not divisible by " + std::to_string(f));
        NoGradGuard no_grad;
        std::vector<Scalar> pixels;
        pixels.reserve(images.size() * h * w * 3);
        for (const Image& img : images) {
            if (img.height != h || img.width != w) throw DimensionError("mixed image sizes in one backbone batch");
            pixels.insert(pixels.end(), img.values.begin(), img.values.end());
        }
        const std::size_t n = images.size();
        Tensor x({n, h, w, 3}, std::move(pixels));
        std::vector<Tensor> fused;
        for (const Stage& s : stages_) {
            BatchNormStats stats = s.stats;
            x = avg_pool_2x2(relu(batch_norm(conv2d_3x3(x, s.weight, s.bias), s.gamma, s.beta, stats,
                                             BatchNormMode::evaluation)));
            fused.push_back(bilinear_resize(x, spec_.fusion_h, spec_.fusion_w));
        }
        Tensor all = concat_last(fused);
        std::vector<FeatureMap> out;
        for (std::size_t b = 0; b < n; ++b) out.emplace_back(select(all, b));
        return out;
    }

    FeatureMap extract(const Image& image) const { return extract_batch(std::span<const Image>(&image, 1))[0]; }

    std::uint64_t checksum() const {
        std::uint64_t h = fnv1a(nullptr, 0);
        for (const Stage& s : stages_)
            for (const Tensor* t : {&s.weight, &s.bias, &s.gamma, &s.beta, &s.stats.running_mean, &s.stats.running_var})
                h = fnv1a(t->data().data(), t->numel() * sizeof(Scalar), h);
        return h;
    }

private:
    struct Stage {
        Tensor weight, bias, gamma, beta;
        BatchNormStats stats;
    };

    BackboneSpec spec_;
    std::vector<Stage> stages_;
};

inline FeatureMap extract_features(const Image& image, const BackboneSpec& spec) {
    return MiniCnnBackbone(spec).extract(image);
}

inline void save_feature_file(const FeatureMap& fm, const std::filesystem::path& path) {
    GridPayload g;
    g.h = static_cast<std::uint32_t>(fm.h());
    g.w = static_cast<std::uint32_t>(fm.w());
    g.c = static_cast<std::uint32_t>(fm.c());
    g.values.assign(fm.values.data().begin(), fm.values.data().end());
    write_grid_file(path, g);
}

inline FeatureMap load_feature_file(const std::filesystem::path& path) {
    GridPayload g = read_grid_file(path);
    std::vector<Scalar> v(g.values.begin(), g.values.end());
    return FeatureMap(Tensor({g.h, g.w, g.c}, std::move(v)));
}

// Global average over the h x w grid, one value per channel.
inline std::vector<double> pool_feature(const FeatureMap& fm) {
    std::vector<double> pooled(fm.c(), 0.0);
    const auto data = fm.values.data();
    for (std::size_t t = 0; t < fm.tokens(); ++t)
        for (std::size_t c = 0; c < fm.c(); ++c) pooled[c] += data[t * fm.c() + c];
    for (double& v : pooled) v /= static_cast<double>(fm.tokens());
    return pooled;
}

}  // namespace onenip
