#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "onenip/model.hpp"

using namespace onenip;
using onenip::testing::random_tensor;

namespace {

ModelConfig small_config(DecoderVariant variant = DecoderVariant::bidirectional) {
    ModelConfig cfg;
    cfg.num_encoder_layers = 2;
    cfg.num_decoder_layers = 2;
    cfg.num_heads = 2;
    cfg.model_dim = 8;
    cfg.dropout = 0;
    cfg.decoder_variant = variant;
    cfg.grid_h = cfg.grid_w = 4;
    cfg.refiner_channels = 4;
    return cfg;
}

Tensor random_features(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return random_tensor({cfg.grid_h, cfg.grid_w, cfg.model_dim}, rng, -1, 1, false);
}

Tensor random_tokens(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return random_tensor({cfg.grid_h * cfg.grid_w, cfg.model_dim}, rng, -1, 1, false);
}

std::map<std::string, Tensor> by_name(const OneNipModel& m) {
    std::map<std::string, Tensor> out;
    for (const auto& [name, t] : m.named_parameters()) out[name] = t;
    return out;
}

// ---- double-precision loop reference of one post-norm block ----------------

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
    Mat m(rows, std::vector<double>(cols));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) m[r][c] = t.data()[r * cols + c];
    return m;
}

Mat ref_linear(const Mat& x, const Tensor& w, const Tensor& b) {
    const std::size_t in = w.dim(0), out = w.dim(1);
    Mat y(x.size(), std::vector<double>(out));
    for (std::size_t r = 0; r < x.size(); ++r)
        for (std::size_t o = 0; o < out; ++o) {
            double s = b.data()[o];
            for (std::size_t i = 0; i < in; ++i) s += x[r][i] * w.data()[i * out + o];
            y[r][o] = s;
        }
    return y;
}

Mat ref_attention(const Mat& q, const Mat& k, const Mat& v) {
    const std::size_t c = q[0].size();
    Mat out(q.size(), std::vector<double>(c, 0.0));
    for (std::size_t i = 0; i < q.size(); ++i) {
        std::vector<double> s(k.size());
        double mx = -1e300;
        for (std::size_t j = 0; j < k.size(); ++j) {
            s[j] = 0;
            for (std::size_t d = 0; d < c; ++d) s[j] += q[i][d] * k[j][d];
            s[j] /= std::sqrt(static_cast<double>(c));
            mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (double& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < k.size(); ++j)
            for (std::size_t d = 0; d < c; ++d) out[i][d] += s[j] / z * v[j][d];
    }
    return out;
}

Mat ref_layer_norm(const Mat& x, const Tensor& g, const Tensor& b) {
    Mat y = x;
    for (auto& row : y) {
        const double mu = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
        double var = 0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(row.size());
        for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mu) / std::sqrt(var + 1e-5) * g.data()[c] + b.data()[c];
    }
    return y;
}

Mat ref_add(Mat a, const Mat& b) {
    for (std::size_t r = 0; r < a.size(); ++r)
        for (std::size_t c = 0; c < a[r].size(); ++c) a[r][c] += b[r][c];
    return a;
}

Mat ref_block(std::map<std::string, Tensor>& p, const std::string& pre, const Mat& query, const Mat& kv, bool mlp) {
    Mat a = ref_attention(ref_linear(query, p[pre + ".wq"], p[pre + ".bq"]), ref_linear(kv, p[pre + ".wk"], p[pre + ".bk"]),
                          ref_linear(kv, p[pre + ".wv"], p[pre + ".bv"]));
    Mat y = ref_layer_norm(ref_add(query, ref_linear(a, p[pre + ".wo"], p[pre + ".bo"])), p[pre + ".ln1.g"],
                           p[pre + ".ln1.b"]);
    if (!mlp) return y;
    Mat h = ref_linear(y, p[pre + ".mlp.w1"], p[pre + ".mlp.b1"]);
    for (auto& row : h)
        for (double& v : row) v = std::max(v, 0.0);
    return ref_layer_norm(ref_add(y, ref_linear(h, p[pre + ".mlp.w2"], p[pre + ".mlp.b2"])), p[pre + ".ln2.g"],
                          p[pre + ".ln2.b"]);
}

}  // namespace

// ---- neighbor mask ------------------------------------------------------------

TEST(NmaMask, RadiusZeroIsTheDiagonal) {
    BoolMask m = nma_mask(3, 4, 0);
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t j = 0; j < 12; ++j) EXPECT_EQ(m.data[i * 12 + j], i == j ? 1 : 0);
}

TEST(NmaMask, FullyCoveredRowIsAConfigurationError) { EXPECT_THROW(nma_mask(3, 3, 1), ConfigError); }

TEST(NmaMask, CornerOfFourByFourMasksFour) {
    BoolMask m = nma_mask(4, 4, 1);
    auto row_count = [&](std::size_t i) { return std::accumulate(m.data.begin() + i * 16, m.data.begin() + (i + 1) * 16, 0); };
    EXPECT_EQ(row_count(0), 4);
    EXPECT_EQ(row_count(15), 4);
    EXPECT_EQ(row_count(5), 9);
    EXPECT_EQ(row_count(1), 6);
}

// ---- configuration --------------------------------------------------------------

TEST(ModelConfig, RejectsInvalidSettings) {
    ModelConfig cfg = small_config();
    cfg.num_heads = 3;
    EXPECT_THROW(OneNipModel(cfg, 0), ConfigError);
    cfg = small_config();
    cfg.refiner_blocks = 0;
    EXPECT_THROW(OneNipModel(cfg, 0), ConfigError);
    cfg = small_config();
    cfg.grid_h = cfg.grid_w = 3;
    EXPECT_THROW(OneNipModel(cfg, 0), ConfigError);  // radius 1 hides the whole 3x3 grid
}

// ---- encoder ------------------------------------------------------------------

TEST(Encoder, OutputIsTokensByChannels) {
    OneNipModel m(small_config(), 1);
    Tensor x = m.encode(random_features(m.config(), 2));
    EXPECT_EQ(x.shape(), (Shape{16, 8}));
}

TEST(Encoder, ChannelMismatchIsADimensionError) {
    OneNipModel m(small_config(), 1);
    std::mt19937_64 rng(3);
    EXPECT_THROW(m.encode(random_tensor({4, 4, 6}, rng, -1, 1, false)), DimensionError);
}

TEST(Encoder, RadiusZeroGivesZeroSelfWeight) {
    ModelConfig cfg = small_config();
    cfg.nma_radius = 0;
    OneNipModel m(cfg, 4);
    AttentionTrace trace;
    {
        AttentionTraceScope scope(trace);
        m.encode(random_features(cfg, 5));
    }
    ASSERT_EQ(trace.records.size(), cfg.num_encoder_layers);
    for (const auto& r : trace.records)
        for (std::size_t h = 0; h < r.heads; ++h)
            for (std::size_t i = 0; i < r.queries; ++i) EXPECT_EQ(r.weights[(h * r.queries + i) * r.keys + i], 0.0f);
}

TEST(Encoder, PermutationCovariantOnlyWithoutPositionalEmbeddings) {
    ModelConfig cfg = small_config();
    cfg.nma_enabled = false;
    OneNipModel m(cfg, 6);
    Tensor f = random_features(cfg, 7);
    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(8));
    Tensor shuffled({4, 4, 8});
    for (std::size_t t = 0; t < 16; ++t)
        for (std::size_t c = 0; c < 8; ++c) shuffled.mutable_data()[t * 8 + c] = f.data()[perm[t] * 8 + c];

    auto max_perm_gap = [&]() {
        Tensor a = m.encode(f), b = m.encode(shuffled);
        double gap = 0;
        for (std::size_t t = 0; t < 16; ++t)
            for (std::size_t c = 0; c < 8; ++c)
                gap = std::max(gap, std::abs(static_cast<double>(b.data()[t * 8 + c] - a.data()[perm[t] * 8 + c])));
        return gap;
    };
    EXPECT_GT(max_perm_gap(), 1e-3);
    auto pos = by_name(m)["pos_embed"];
    for (auto& v : pos.mutable_data()) v = 0;
    EXPECT_LT(max_perm_gap(), 1e-5);
}

// ---- decoders -------------------------------------------------------------------

TEST(Decoder, LqdEqualsUnidirectionalWhenQueriesArePrompt) {
    ModelConfig cfg = small_config(DecoderVariant::lqd);
    cfg.num_decoder_layers = 3;
    OneNipModel m(cfg, 9);
    Tensor x_e = m.encode(random_features(cfg, 10));
    Tensor p_e = m.encode(random_features(cfg, 11));
    Tensor a = m.decode_lqd(x_e, &p_e);
    Tensor b = m.decode_unidirectional(x_e, p_e);
    ASSERT_EQ(a.shape(), b.shape());
    EXPECT_EQ(a.values(), b.values());
    EXPECT_NE(m.decode_lqd(x_e).values(), b.values());
}

TEST(Decoder, LqdSingleHeadMatchesLoopReference) {
    ModelConfig cfg;
    cfg.num_encoder_layers = 1;
    cfg.num_decoder_layers = 1;
    cfg.num_heads = 1;
    cfg.model_dim = 2;
    cfg.mlp_hidden = 3;
    cfg.dropout = 0;
    cfg.decoder_variant = DecoderVariant::lqd;
    cfg.nma_enabled = false;
    cfg.refiner_enabled = false;
    cfg.grid_h = 1;
    cfg.grid_w = 3;
    OneNipModel m(cfg, 12);
    auto params = by_name(m);
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& [name, t] : params)
        for (auto& v : t.mutable_data()) v = static_cast<Scalar>(u(rng));
    Tensor x_e = random_tokens(cfg, 14);
    Tensor out = m.decode_lqd(x_e);

    const Mat xe = to_mat(x_e, 3, 2);
    Mat q_prime = ref_block(params, "decoder.0.query_to_encoder", to_mat(params["decoder.0.learned_query"], 3, 2), xe, false);
    Mat expected = ref_block(params, "decoder.0.query_to_target", q_prime, xe, true);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out.data()[t * 2 + c], expected[t][c], 1e-5);
}

TEST(Decoder, ZeroQueriesWithFrozenValuesStayFinite) {
    OneNipModel m(small_config(DecoderVariant::lqd), 15);
    for (auto& [name, t] : m.named_parameters())
        if (name.find("learned_query") != std::string::npos || name.find(".wv") != std::string::npos)
            for (auto& v : Tensor(t).mutable_data()) v = 0;
    Tensor out = m.decode_lqd(m.encode(random_features(m.config(), 16)));
    for (Scalar v : out.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Decoder, UnidirectionalWithIdentityProjectionsAttendsBySimilarity) {
    ModelConfig cfg = small_config(DecoderVariant::unidirectional);
    cfg.num_heads = 1;
    OneNipModel m(cfg, 17);
    auto params = by_name(m);
    for (const char* w : {"decoder.0.query_to_encoder.wq", "decoder.0.query_to_encoder.wk"}) {
        auto d = params[w].mutable_data();
        std::fill(d.begin(), d.end(), Scalar{0});
        for (std::size_t i = 0; i < 8; ++i) d[i * 8 + i] = 1;
    }
    Tensor x_e = random_tokens(cfg, 18);
    AttentionTrace trace;
    {
        AttentionTraceScope scope(trace);
        m.decode_unidirectional(x_e, x_e);
    }
    const auto& w = trace.records.at(0).weights;
    for (std::size_t i = 0; i < 16; ++i) {
        std::vector<double> s(16);
        double z = 0;
        for (std::size_t j = 0; j < 16; ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < 8; ++c) dot += x_e.data()[i * 8 + c] * x_e.data()[j * 8 + c];
            z += (s[j] = std::exp(dot / std::sqrt(8.0)));
        }
        for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(w[i * 16 + j], s[j] / z, 1e-6);
    }
}

TEST(Decoder, UnidirectionalRejectsShapeMismatch) {
    ModelConfig cfg = small_config(DecoderVariant::unidirectional);
    OneNipModel m(cfg, 19);
    std::mt19937_64 rng(20);
    EXPECT_THROW(m.decode_unidirectional(random_tokens(cfg, 1), random_tensor({15, 8}, rng)), DimensionError);
}

TEST(Decoder, BidirectionalShapesAndPromptFirstOrder) {
    OneNipModel m(small_config(), 21);
    Tensor x_e = m.encode(random_features(m.config(), 22));
    Tensor p_e = m.encode(random_features(m.config(), 23));
    auto [x, p] = m.decode_bidirectional(x_e, p_e);
    EXPECT_EQ(x.shape(), (Shape{16, 8}));
    EXPECT_EQ(p.shape(), (Shape{16, 8}));
    auto [x_swapped, p_swapped] = m.decode_bidirectional(x_e, p_e, true);
    EXPECT_NE(x.values(), x_swapped.values());
    double checksum = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) checksum += x.data()[i] * static_cast<double>(i % 7 + 1);
    EXPECT_NEAR(checksum, -10.053676, 1e-4);
}

TEST(Decoder, EveryAttentionRowIsStochasticAndMaskedEntriesVanish) {
    OneNipModel m(small_config(), 24);
    AttentionTrace trace;
    {
        AttentionTraceScope scope(trace);
        m.reconstruct(random_features(m.config(), 25), random_features(m.config(), 26));
    }
    // 2 encoder layers per stream, 2 per decoder layer, one final block
    ASSERT_EQ(trace.records.size(), 2u * 2 + 2 * 2 + 1);
    const BoolMask nma = nma_mask(4, 4, 1);
    for (std::size_t k = 0; k < trace.records.size(); ++k) {
        const auto& r = trace.records[k];
        const bool masked = k < 4;
        for (std::size_t h = 0; h < r.heads; ++h)
            for (std::size_t i = 0; i < r.queries; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < r.keys; ++j) {
                    const Scalar w = r.weights[(h * r.queries + i) * r.keys + j];
                    s += w;
                    if (masked && nma.data[i * r.keys + j]) {
                        EXPECT_EQ(w, 0.0f);
                    }
                }
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
    }
}

TEST(FinalCrossAttention, ShapeAndDeterminism) {
    OneNipModel m(small_config(), 27);
    Tensor p = random_tokens(m.config(), 28), x = random_tokens(m.config(), 29);
    Tensor a = m.final_cross_attention(p, x), b = m.final_cross_attention(p, x);
    EXPECT_EQ(a.shape(), (Shape{4, 4, 8}));
    EXPECT_EQ(a.values(), b.values());
}

TEST(FinalCrossAttention, QuerySideSwitchChangesOutput) {
    ModelConfig cfg = small_config();
    OneNipModel prompt_query(cfg, 30);
    cfg.final_query = FinalQuery::target;
    OneNipModel target_query(cfg, 30);
    Tensor p = random_tokens(cfg, 31), x = random_tokens(cfg, 32);
    EXPECT_NE(prompt_query.final_cross_attention(p, x).values(), target_query.final_cross_attention(p, x).values());
}

// ---- refiner --------------------------------------------------------------------

TEST(Refiner, FourteenGridTwoBlocksGivesFiftySix) {
    ModelConfig cfg;
    cfg.model_dim = 272;
    cfg.num_encoder_layers = cfg.num_decoder_layers = 1;
    cfg.refiner_channels = 16;
    OneNipModel m(cfg, 33);
    std::mt19937_64 rng(34);
    RefinerOutput out = m.refine(random_tensor({1, 14, 14, 272}, rng, 0, 1, false), 224, 224);
    EXPECT_EQ(out.logits.shape(), (Shape{1, 56, 56, 1}));
    EXPECT_EQ(out.map.shape(), (Shape{1, 224, 224}));
    for (Scalar v : out.map.values()) {
        EXPECT_GT(v, 0.0f);
        EXPECT_LT(v, 1.0f);
    }
}

TEST(Refiner, UpscaleIsTwoToTheBlocks) {
    for (std::size_t blocks : {1u, 3u}) {
        ModelConfig cfg = small_config();
        cfg.refiner_blocks = blocks;
        OneNipModel m(cfg, 35);
        std::mt19937_64 rng(36);
        RefinerOutput out = m.refine(random_tensor({2, 4, 4, 8}, rng, 0, 1, false), 16, 16);
        EXPECT_EQ(out.logits.dim(1), 4u << blocks);
        EXPECT_EQ(out.logits.dim(2), 4u << blocks);
    }
}

TEST(Refiner, DisabledRefinerRefusesToRun) {
    ModelConfig cfg = small_config();
    cfg.refiner_enabled = false;
    OneNipModel m(cfg, 37);
    std::mt19937_64 rng(38);
    EXPECT_THROW(m.refine(random_tensor({1, 4, 4, 8}, rng), 16, 16), ConfigError);
}

// ---- full forward --------------------------------------------------------------

TEST(Forward, ShapesDeterminismAndNonNegativeError) {
    for (auto variant : {DecoderVariant::lqd, DecoderVariant::unidirectional, DecoderVariant::bidirectional}) {
        OneNipModel m(small_config(variant), 39);
        FeatureMap t(random_features(m.config(), 40)), p(random_features(m.config(), 41));
        ForwardResult a = m.forward(t, p, 16, 16), b = m.forward(t, p, 16, 16);
        EXPECT_EQ(a.reconstruction.shape(), (Shape{4, 4, 8}));
        EXPECT_EQ(a.anomaly_map.shape(), (Shape{16, 16}));
        EXPECT_EQ(a.reconstruction.values(), b.reconstruction.values());
        EXPECT_EQ(a.anomaly_map.values(), b.anomaly_map.values());
        for (Scalar v : a.error.values()) EXPECT_GE(v, 0.0f);
    }
}

TEST(Forward, ReconstructionAndRestorationTouchTheSameParameters) {
    OneNipModel m(small_config(), 42);
    const std::uint64_t before = m.checksum();
    Tensor normal = random_features(m.config(), 43), anomalous = random_features(m.config(), 44),
           prompt = random_features(m.config(), 45);
    auto touched = [&](const Tensor& target) {
        for (Tensor p : m.parameters()) p.zero_grad();
        mean(square(sub(normal, m.reconstruct(target, prompt)))).backward();
        std::vector<std::string> names;
        for (const auto& [name, t] : m.named_parameters())
            if (t.has_grad()) names.push_back(name);
        return names;
    };
    auto rec = touched(normal), res = touched(anomalous);
    EXPECT_EQ(rec, res);
    EXPECT_FALSE(rec.empty());
    EXPECT_EQ(m.checksum(), before);
}

TEST(Forward, DropoutOnlyActsInTraining) {
    ModelConfig cfg = small_config();
    cfg.dropout = 0.1;
    OneNipModel m(cfg, 46);
    std::mt19937_64 rng(47);
    m.set_dropout_rng(&rng);
    Tensor t = random_features(cfg, 48), p = random_features(cfg, 49);
    Tensor eval_a = m.reconstruct(t, p), eval_b = m.reconstruct(t, p);
    EXPECT_EQ(eval_a.values(), eval_b.values());
    m.set_training(true);
    EXPECT_NE(m.reconstruct(t, p).values(), eval_a.values());
}
