#pragma once

// Prompt-guided reconstruction network.
//
//   features --(+pos)--> self-attention encoder --> decoder --> F_hat
//   |features - F_hat| --> refiner --> anomaly probability map
//
// The same encoder/decoder parameters serve the target and the prompt stream,
// and the reconstruction and restoration passes.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "onenip/container.hpp"
#include "onenip/features.hpp"
#include "onenip/ops.hpp"

namespace onenip {

enum class DecoderVariant { lqd, unidirectional, bidirectional };
enum class FinalQuery { prompt, target };

inline const char* to_string(DecoderVariant v) {
    switch (v) {
        case DecoderVariant::lqd: return "lqd";
        case DecoderVariant::unidirectional: return "unidirectional";
        case DecoderVariant::bidirectional: return "bidirectional";
    }
    return "?";
}

struct ModelConfig {
    std::size_t num_encoder_layers = 4;
    std::size_t num_decoder_layers = 4;
    std::size_t num_heads = 8;
    std::size_t model_dim = 272;  // equals the feature channel count
    std::size_t mlp_hidden = 0;   // 0 selects 4 * model_dim
    double dropout = 0.1;
    DecoderVariant decoder_variant = DecoderVariant::bidirectional;
    bool nma_enabled = true;
    std::size_t nma_radius = 1;
    bool refiner_enabled = true;
    std::size_t refiner_blocks = 2;
    std::size_t refiner_channels = 128;
    FinalQuery final_query = FinalQuery::prompt;
    std::size_t grid_h = 14;  // feature grid the positional embeddings cover
    std::size_t grid_w = 14;

    std::size_t hidden() const { return mlp_hidden ? mlp_hidden : 4 * model_dim; }

    void validate() const {
        if (model_dim == 0 || num_heads == 0 || model_dim % num_heads)
            throw ConfigError("model_dim must be a positive multiple of num_heads");
        if (refiner_blocks < 1) throw ConfigError("refiner_blocks must be >= 1");
        if (num_encoder_layers < 1 || num_decoder_layers < 1) throw ConfigError("encoder and decoder need >= 1 layer");
        if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must lie in [0, 1)");
        if (grid_h == 0 || grid_w == 0) throw ConfigError("feature grid must be non-empty");
        if (refiner_channels == 0) throw ConfigError("refiner_channels must be >= 1");
    }
};

// Token j is hidden from token i when it lies within Chebyshev distance
// `radius` on the h x w grid. Radius 0 hides only the diagonal.
inline BoolMask nma_mask(std::size_t h, std::size_t w, std::size_t radius) {
    const std::size_t n = h * w;
    BoolMask mask{{n, n}, std::vector<unsigned char>(n * n, 0)};
    for (std::size_t i = 0; i < n; ++i) {
        const auto yi = static_cast<std::ptrdiff_t>(i / w), xi = static_cast<std::ptrdiff_t>(i % w);
        std::size_t hidden = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const auto yj = static_cast<std::ptrdiff_t>(j / w), xj = static_cast<std::ptrdiff_t>(j % w);
            const auto d = static_cast<std::size_t>(std::max(std::abs(yi - yj), std::abs(xi - xj)));
            if (d <= radius) {
                mask.data[i * n + j] = 1;
                ++hidden;
            }
        }
        if (hidden == n)
            throw ConfigError("neighbor mask radius " + std::to_string(radius) + " hides every token from token " +
                              std::to_string(i) + " on a " + std::to_string(h) + "x" + std::to_string(w) + " grid");
    }
    return mask;
}

// Training flag plus the dropout random stream.
struct ForwardContext {
    bool training = false;
    std::mt19937_64* rng = nullptr;
};

struct RefinerOutput {
    Tensor logits;  // [N, 2^blocks * h, 2^blocks * w, 1]
    Tensor map;     // [N, H, W], sigmoid probabilities resized to the image
};

struct ForwardResult {
    Tensor reconstruction;  // F_hat, [h, w, c]
    Tensor error;           // |F - F_hat|
    Tensor anomaly_map;     // M_hat, [H, W]; undefined when the refiner is off
};

class OneNipModel {
public:
    OneNipModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
        config_.validate();
        std::mt19937_64 rng(seed);
        const std::size_t c = config_.model_dim, tokens = config_.grid_h * config_.grid_w;
        in_w_ = add_param("input_proj.w", {c, c}, Init::xavier, rng);
        in_b_ = add_param("input_proj.b", {c}, Init::zeros, rng);
        pos_embed_ = add_param("pos_embed", {tokens, c}, Init::zeros, rng);
        fill_sincos(pos_embed_, config_.grid_h, config_.grid_w);
        for (std::size_t i = 0; i < config_.num_encoder_layers; ++i)
            encoder_.push_back(make_block("encoder." + std::to_string(i), true, rng));
        if (config_.decoder_variant == DecoderVariant::bidirectional) {
            for (std::size_t i = 0; i < config_.num_decoder_layers; ++i) {
                const std::string p = "decoder." + std::to_string(i);
                bidir_layers_.push_back({make_block(p + ".prompt_to_target", true, rng),
                                         make_block(p + ".target_to_prompt", true, rng)});
            }
            final_block_ = make_block("final_cross", true, rng);
        } else {
            for (std::size_t i = 0; i < config_.num_decoder_layers; ++i) {
                const std::string p = "decoder." + std::to_string(i);
                QueryLayer layer{make_block(p + ".query_to_encoder", false, rng),
                                 make_block(p + ".query_to_target", true, rng), {}};
                if (config_.decoder_variant == DecoderVariant::lqd)
                    layer.learned_query = add_param(p + ".learned_query", {tokens, c}, Init::normal, rng, 1.0);
                query_layers_.push_back(std::move(layer));
            }
        }
        out_w_ = add_param("output_proj.w", {c, c}, Init::xavier, rng);
        out_b_ = add_param("output_proj.b", {c}, Init::zeros, rng);
        if (config_.refiner_enabled) {
            std::size_t cin = c;
            const std::size_t rc = config_.refiner_channels;
            for (std::size_t i = 0; i < config_.refiner_blocks; ++i) {
                const std::string p = "refiner." + std::to_string(i);
                RefinerBlock b;
                b.conv_w = add_param(p + ".conv.w", {3, 3, cin, rc}, Init::kaiming, rng);
                b.conv_b = add_param(p + ".conv.b", {rc}, Init::zeros, rng);
                b.bn_g = add_param(p + ".bn.g", {rc}, Init::ones, rng);
                b.bn_b = add_param(p + ".bn.b", {rc}, Init::zeros, rng);
                b.stats = BatchNormStats(rc);
                b.deconv_w = add_param(p + ".deconv.w", {rc, 2, 2, rc}, Init::kaiming, rng);
                b.deconv_b = add_param(p + ".deconv.b", {rc}, Init::zeros, rng);
                refiner_.push_back(std::move(b));
                cin = rc;
            }
            head_w_ = add_param("refiner.head.w", {rc, 1}, Init::xavier, rng);
            head_b_ = add_param("refiner.head.b", {1}, Init::zeros, rng);
        }
        if (config_.nma_enabled) nma_ = nma_mask(config_.grid_h, config_.grid_w, config_.nma_radius);
    }

    const ModelConfig& config() const { return config_; }

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }
    void set_dropout_rng(std::mt19937_64* rng) { dropout_rng_ = rng; }

    // ---- encoder -------------------------------------------------------

    // [h, w, c] features -> [h*w, c] tokens with positional embeddings and
    // (optionally neighbor-masked) self-attention.
    Tensor encode(const Tensor& features) const {
        check_features(features);
        Tensor x = add(linear(reshape(features, {config_.grid_h * config_.grid_w, config_.model_dim}), in_w_, in_b_), pos_embed_);
        const BoolMask* mask = config_.nma_enabled ? &*nma_ : nullptr;
        for (const Block& b : encoder_) x = block_forward(b, x, x, mask);
        return x;
    }

    // ---- decoders --------------------------------------------------------

    // Learnable per-layer queries. `query_override`, when given, replaces the
    // learned query of every layer.
    Tensor decode_lqd(const Tensor& x_e, const Tensor* query_override = nullptr) const {
        if (query_layers_.empty()) throw ConfigError("decode_lqd needs a model built with the lqd/unidirectional decoder");
        Tensor x_d = x_e;
        for (const QueryLayer& layer : query_layers_) {
            const Tensor& q = query_override ? *query_override : layer.learned_query;
            if (!q.defined()) throw ConfigError("decode_lqd: model has no learned queries (unidirectional variant)");
            x_d = query_layer_forward(layer, q, x_e, x_d);
        }
        return x_d;
    }

    // The static prompt encoding takes the place of the learned query in every layer.
    Tensor decode_unidirectional(const Tensor& x_e, const Tensor& p_e) const {
        if (query_layers_.empty())
            throw ConfigError("decode_unidirectional needs a model built with the lqd/unidirectional decoder");
        detail::require_same_shape(x_e, p_e, "decode_unidirectional");
        Tensor x_d = x_e;
        for (const QueryLayer& layer : query_layers_) x_d = query_layer_forward(layer, p_e, x_e, x_d);
        return x_d;
    }

    // Per layer the prompt is updated first (prompt queries the target), then the
    // target queries the updated prompt. Returns (x_d^L, p_d^L).
    std::pair<Tensor, Tensor> decode_bidirectional(const Tensor& x_e, const Tensor& p_e,
                                                   bool target_first = false) const {
        if (bidir_layers_.empty()) throw ConfigError("decode_bidirectional needs the bidirectional decoder");
        detail::require_same_shape(x_e, p_e, "decode_bidirectional");
        Tensor x = x_e, p = p_e;
        for (const BidirLayer& layer : bidir_layers_) {
            if (target_first) {
                x = block_forward(layer.target_to_prompt, x, p, nullptr);
                p = block_forward(layer.prompt_to_target, p, x, nullptr);
            } else {
                p = block_forward(layer.prompt_to_target, p, x, nullptr);
                x = block_forward(layer.target_to_prompt, x, p, nullptr);
            }
        }
        return {x, p};
    }

    // One more cross-attention block on the decoder outputs; its output is the
    // reconstruction. The query side follows config.final_query.
    Tensor final_cross_attention(const Tensor& p_d, const Tensor& x_d) const {
        if (!final_block_) throw ConfigError("final_cross_attention needs the bidirectional decoder");
        detail::require_same_shape(p_d, x_d, "final_cross_attention");
        const bool prompt_query = config_.final_query == FinalQuery::prompt;
        Tensor y = block_forward(*final_block_, prompt_query ? p_d : x_d, prompt_query ? x_d : p_d, nullptr);
        return to_grid(linear(y, out_w_, out_b_));
    }

    // Encoded target and prompt tokens -> F_hat [h, w, c].
    Tensor reconstruct_encoded(const Tensor& x_e, const Tensor& p_e) const {
        switch (config_.decoder_variant) {
            case DecoderVariant::lqd: return to_grid(linear(decode_lqd(x_e), out_w_, out_b_));
            case DecoderVariant::unidirectional:
                return to_grid(linear(decode_unidirectional(x_e, p_e), out_w_, out_b_));
            case DecoderVariant::bidirectional: {
                auto [x, p] = decode_bidirectional(x_e, p_e);
                return final_cross_attention(p, x);
            }
        }
        throw ConfigError("unknown decoder variant");
    }

    Tensor reconstruct(const Tensor& target, const Tensor& prompt) const {
        // The learnable-query decoder never reads the prompt.
        if (config_.decoder_variant == DecoderVariant::lqd) {
            Tensor x_e = encode(target);
            return reconstruct_encoded(x_e, x_e);
        }
        return reconstruct_encoded(encode(target), encode(prompt));
    }

    // ---- refiner ---------------------------------------------------------

    // error: [N, h, w, c] -> per-pixel anomaly probability at out_h x out_w.
    RefinerOutput refine(const Tensor& error, std::size_t out_h, std::size_t out_w) {
        if (!config_.refiner_enabled) throw ConfigError("refiner is disabled in this model");
        detail::require_rank(error, 4, "refine");
        if (error.dim(3) != config_.model_dim)
            throw DimensionError("refine: error channels " + std::to_string(error.dim(3)) + " vs model_dim " +
                                 std::to_string(config_.model_dim));
        const auto mode = training_ ? BatchNormMode::training : BatchNormMode::evaluation;
        Tensor x = error;
        for (RefinerBlock& b : refiner_)
            x = deconv2d_2x2_stride2(relu(batch_norm(conv2d_3x3(x, b.conv_w, b.conv_b), b.bn_g, b.bn_b, b.stats, mode)),
                                     b.deconv_w, b.deconv_b);
        RefinerOutput out;
        out.logits = conv2d_1x1(x, head_w_, head_b_);
        Tensor resized = bilinear_resize(sigmoid(out.logits), out_h, out_w);
        out.map = reshape(resized, {error.dim(0), out_h, out_w});
        return out;
    }

    // Single image pair: reconstruction, its absolute error and (if enabled) the refined map.
    ForwardResult forward(const FeatureMap& target, const FeatureMap& prompt, std::size_t image_h, std::size_t image_w) {
        ForwardResult r;
        r.reconstruction = reconstruct(target.values, prompt.values);
        r.error = abs(sub(target.values, r.reconstruction));
        if (config_.refiner_enabled) {
            RefinerOutput ref = refine(reshape(r.error, prepend_one(r.error.shape())), image_h, image_w);
            r.anomaly_map = select(ref.map, 0);
        }
        return r;
    }

    // ---- parameters --------------------------------------------------------

    const std::vector<std::pair<std::string, Tensor>>& named_parameters() const { return params_; }
    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& [name, t] : params_) out.push_back(t);
        return out;
    }
    // Non-trainable state (batch-norm running statistics).
    std::vector<std::pair<std::string, Tensor>> named_buffers() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t i = 0; i < refiner_.size(); ++i) {
            const std::string p = "refiner." + std::to_string(i) + ".bn.";
            out.emplace_back(p + "running_mean", refiner_[i].stats.running_mean);
            out.emplace_back(p + "running_var", refiner_[i].stats.running_var);
        }
        return out;
    }
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    std::uint64_t checksum() const {
        std::uint64_t h = fnv1a(nullptr, 0);
        for (const auto& [name, t] : params_) h = fnv1a(t.data().data(), t.numel() * sizeof(Scalar), h);
        for (const auto& [name, t] : named_buffers()) h = fnv1a(t.data().data(), t.numel() * sizeof(Scalar), h);
        return h;
    }

private:
    enum class Init { zeros, ones, normal, xavier, kaiming };

    struct Block {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b;
        bool has_mlp = false;
        Tensor w1, b1, w2, b2, ln2_g, ln2_b;
    };
    struct QueryLayer {
        Block query_to_encoder;  // q' = attn(query = q_i, kv = x_e)
        Block query_to_target;   // x_{i+1} = attn(query = q', kv = x_i)
        Tensor learned_query;    // lqd only
    };
    struct BidirLayer {
        Block prompt_to_target;
        Block target_to_prompt;
    };
    struct RefinerBlock {
        Tensor conv_w, conv_b, bn_g, bn_b, deconv_w, deconv_b;
        BatchNormStats stats;
    };

    Tensor add_param(const std::string& name, Shape shape, Init init, std::mt19937_64& rng, double scale = 1.0) {
        Tensor t(shape, Scalar{0}, true);
        auto data = t.mutable_data();
        switch (init) {
            case Init::zeros: break;
            case Init::ones: std::fill(data.begin(), data.end(), Scalar{1}); break;
            case Init::normal: {
                std::normal_distribution<double> d(0.0, scale);
                for (auto& v : data) v = static_cast<Scalar>(d(rng));
                break;
            }
            case Init::xavier:
            case Init::kaiming: {
                // fan_in is the product of all but the last axis; fan_out the last axis
                // (times the spatial taps for kernels).
                const std::size_t fan_out_axis = shape.back();
                const std::size_t fan_in = t.numel() / fan_out_axis;
                double bound;
                if (init == Init::xavier) {
                    bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out_axis));
                } else {
                    bound = std::sqrt(6.0 / static_cast<double>(fan_in));
                }
                std::uniform_real_distribution<double> d(-bound, bound);
                for (auto& v : data) v = static_cast<Scalar>(d(rng));
                break;
            }
        }
        params_.emplace_back(name, t);
        return t;
    }

    // 2-D sine-cosine table: channel quarters hold sin/cos of the row and
    // sin/cos of the column at geometric frequencies.
    static void fill_sincos(Tensor& t, std::size_t h, std::size_t w) {
        const std::size_t c = t.dim(1), quarter = c / 4;
        auto d = t.mutable_data();
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t k = 0; k < quarter; ++k) {
                    const double f = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(quarter));
                    Scalar* row = &d[(y * w + x) * c];
                    row[k] = static_cast<Scalar>(std::sin(static_cast<double>(y) * f));
                    row[quarter + k] = static_cast<Scalar>(std::cos(static_cast<double>(y) * f));
                    row[2 * quarter + k] = static_cast<Scalar>(std::sin(static_cast<double>(x) * f));
                    row[3 * quarter + k] = static_cast<Scalar>(std::cos(static_cast<double>(x) * f));
                }
    }

    Block make_block(const std::string& prefix, bool with_mlp, std::mt19937_64& rng) {
        const std::size_t c = config_.model_dim, hid = config_.hidden();
        Block b;
        b.wq = add_param(prefix + ".wq", {c, c}, Init::xavier, rng);
        b.bq = add_param(prefix + ".bq", {c}, Init::zeros, rng);
        b.wk = add_param(prefix + ".wk", {c, c}, Init::xavier, rng);
        b.bk = add_param(prefix + ".bk", {c}, Init::zeros, rng);
        b.wv = add_param(prefix + ".wv", {c, c}, Init::xavier, rng);
        b.bv = add_param(prefix + ".bv", {c}, Init::zeros, rng);
        b.wo = add_param(prefix + ".wo", {c, c}, Init::xavier, rng);
        b.bo = add_param(prefix + ".bo", {c}, Init::zeros, rng);
        b.ln1_g = add_param(prefix + ".ln1.g", {c}, Init::ones, rng);
        b.ln1_b = add_param(prefix + ".ln1.b", {c}, Init::zeros, rng);
        b.has_mlp = with_mlp;
        if (with_mlp) {
            b.w1 = add_param(prefix + ".mlp.w1", {c, hid}, Init::xavier, rng);
            b.b1 = add_param(prefix + ".mlp.b1", {hid}, Init::zeros, rng);
            b.w2 = add_param(prefix + ".mlp.w2", {hid, c}, Init::xavier, rng);
            b.b2 = add_param(prefix + ".mlp.b2", {c}, Init::zeros, rng);
            b.ln2_g = add_param(prefix + ".ln2.g", {c}, Init::ones, rng);
            b.ln2_b = add_param(prefix + ".ln2.b", {c}, Init::zeros, rng);
        }
        return b;
    }

    Tensor maybe_dropout(const Tensor& x) const {
        if (!training_ || config_.dropout <= 0 || !dropout_rng_) return x;
        return dropout(x, static_cast<Scalar>(config_.dropout), *dropout_rng_);
    }

    // Post-norm block: y = LN(query + attn(query, kv)); then LN(y + MLP(y)).
    Tensor block_forward(const Block& b, const Tensor& query, const Tensor& kv, const BoolMask* mask) const {
        Tensor q = linear(query, b.wq, b.bq);
        Tensor k = linear(kv, b.wk, b.bk);
        Tensor v = linear(kv, b.wv, b.bv);
        Tensor attn = linear(attention(q, k, v, config_.num_heads, mask), b.wo, b.bo);
        Tensor y = layer_norm(add(query, maybe_dropout(attn)), b.ln1_g, b.ln1_b);
        if (!b.has_mlp) return y;
        Tensor hidden = maybe_dropout(relu(linear(y, b.w1, b.b1)));
        Tensor mlp = linear(hidden, b.w2, b.b2);
        return layer_norm(add(y, maybe_dropout(mlp)), b.ln2_g, b.ln2_b);
    }

    Tensor query_layer_forward(const QueryLayer& layer, const Tensor& query, const Tensor& x_e, const Tensor& x_d) const {
        detail::require_same_shape(query, x_e, "decoder query");
        Tensor q_prime = block_forward(layer.query_to_encoder, query, x_e, nullptr);
        return block_forward(layer.query_to_target, q_prime, x_d, nullptr);
    }

    void check_features(const Tensor& features) const {
        if (features.rank() != 3 || features.dim(0) != config_.grid_h || features.dim(1) != config_.grid_w ||
            features.dim(2) != config_.model_dim)
            throw DimensionError("encode: features " + shape_str(features.shape()) + " but model expects [" +
                                 std::to_string(config_.grid_h) + "x" + std::to_string(config_.grid_w) + "x" +
                                 std::to_string(config_.model_dim) + "]");
    }

    Tensor to_grid(const Tensor& tokens) const {
        return reshape(tokens, {config_.grid_h, config_.grid_w, config_.model_dim});
    }

    static Shape prepend_one(Shape s) {
        s.insert(s.begin(), 1);
        return s;
    }

    ModelConfig config_;
    bool training_ = false;
    std::mt19937_64* dropout_rng_ = nullptr;
    std::vector<std::pair<std::string, Tensor>> params_;
    Tensor in_w_, in_b_;
    Tensor pos_embed_;
    std::vector<Block> encoder_;
    std::vector<QueryLayer> query_layers_;
    std::vector<BidirLayer> bidir_layers_;
    std::optional<Block> final_block_;
    Tensor out_w_, out_b_;
    std::vector<RefinerBlock> refiner_;
    Tensor head_w_, head_b_;
    std::optional<BoolMask> nma_;
};

}  // namespace onenip
