#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "onenip/features.hpp"
#include "test_util.hpp"

using namespace onenip;
using onenip::testing::random_image;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "onenip_test_features";
    std::filesystem::create_directories(dir);
    return dir / name;
}

BackboneSpec desk_spec() { return BackboneSpec{}; }

}  // namespace

TEST(ExtractFeatures, PaperShapedSpecGives14x14x272) {
    BackboneSpec spec;
    spec.stage_channels = {24, 32, 56, 160};
    spec.fusion_h = spec.fusion_w = 14;
    FeatureMap fm = extract_features(random_image(224, 224, 1), spec);
    EXPECT_EQ(fm.values.shape(), (Shape{14, 14, 272}));
}

TEST(ExtractFeatures, DeskConfigGives8x8x120) {
    FeatureMap fm = extract_features(random_image(64, 64, 2), desk_spec());
    EXPECT_EQ(fm.values.shape(), (Shape{8, 8, 120}));
    EXPECT_EQ(desk_spec().channels(), 120u);
}

TEST(ExtractFeatures, FusionSizeIndependentOfResolution) {
    MiniCnnBackbone backbone(desk_spec());
    for (std::size_t size : {32, 48, 64, 96}) {
        FeatureMap fm = backbone.extract(random_image(size, size, size));
        EXPECT_EQ(fm.h(), 8u);
        EXPECT_EQ(fm.w(), 8u);
        EXPECT_EQ(fm.c(), 120u);
        for (Scalar v : fm.values.data()) EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(ExtractFeatures, DeterministicAcrossCallsAndInstances) {
    const Image img = random_image(32, 32, 3);
    FeatureMap a = extract_features(img, desk_spec());
    FeatureMap b = extract_features(img, desk_spec());
    ASSERT_EQ(a.values.numel(), b.values.numel());
    EXPECT_TRUE(std::equal(a.values.data().begin(), a.values.data().end(), b.values.data().begin()));
}

TEST(ExtractFeatures, BatchMatchesSingleImages) {
    MiniCnnBackbone backbone(desk_spec());
    std::vector<Image> imgs{random_image(32, 32, 4), random_image(32, 32, 5)};
    auto batch = backbone.extract_batch(imgs);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        FeatureMap single = backbone.extract(imgs[i]);
        EXPECT_TRUE(std::equal(single.values.data().begin(), single.values.data().end(),
                               batch[i].values.data().begin()));
    }
}

TEST(ExtractFeatures, IndivisibleSizeIsADimensionError) {
    EXPECT_THROW(extract_features(random_image(40, 40, 6), desk_spec()), DimensionError);
}

TEST(ExtractFeatures, BackboneStaysFrozen) {
    MiniCnnBackbone backbone(desk_spec());
    const auto before = backbone.checksum();
    for (int i = 0; i < 3; ++i) backbone.extract(random_image(32, 32, 10 + i));
    EXPECT_EQ(backbone.checksum(), before);
    EXPECT_EQ(MiniCnnBackbone(desk_spec()).checksum(), before);
}

TEST(FeatureFile, RoundTripIsBitwise) {
    FeatureMap fm = extract_features(random_image(32, 32, 7), desk_spec());
    const auto path = temp_path("roundtrip.onip");
    save_feature_file(fm, path);
    FeatureMap back = load_feature_file(path);
    EXPECT_EQ(back.values.shape(), fm.values.shape());
    EXPECT_TRUE(std::equal(fm.values.data().begin(), fm.values.data().end(), back.values.data().begin()));
    EXPECT_EQ(std::filesystem::file_size(path), 20u + 4u * fm.values.numel());
}

TEST(FeatureFile, TruncatedFileIsRejectedWithOffset) {
    FeatureMap fm = extract_features(random_image(32, 32, 8), desk_spec());
    const auto path = temp_path("truncated.onip");
    save_feature_file(fm, path);
    std::filesystem::resize_file(path, 20 + 4 * 10 + 2);
    try {
        load_feature_file(path);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 20u);
    }
    std::filesystem::resize_file(path, 10);
    EXPECT_THROW(load_feature_file(path), FormatError);
}

TEST(FeatureFile, BadMagicAndVersionAreRejected) {
    auto bytes = encode_grid(GridPayload{1, 1, 1, {1.f}});
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_grid(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[4] = 7;
    try {
        decode_grid(bad_version);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 4u);
    }
}

TEST(FeatureFile, ExporterFixtureLoadsWithDeclaredShape) {
    FeatureMap fm = load_feature_file(std::filesystem::path(ONENIP_FIXTURE_DIR) / "exporter_2x3x4.onip");
    EXPECT_EQ(fm.values.shape(), (Shape{2, 3, 4}));
    for (std::size_t i = 0; i < fm.values.numel(); ++i) EXPECT_EQ(fm.values.at(i), Scalar(0.5 * i - 3.0));
    // Cosine of the pooled vector with itself is 1.
    auto p = pool_feature(fm);
    double dot = 0;
    for (double v : p) dot += v * v;
    EXPECT_NEAR(dot / (std::sqrt(dot) * std::sqrt(dot)), 1.0, 1e-12);
}

TEST(PoolFeature, ConstantMap) {
    FeatureMap fm(Tensor({3, 2, 4}, Scalar{1.5}));
    for (double v : pool_feature(fm)) EXPECT_DOUBLE_EQ(v, 1.5);
}

TEST(PoolFeature, TwoByTwoArithmetic) {
    FeatureMap fm(Tensor({2, 2, 1}, std::vector<Scalar>{1, 2, 3, 4}));
    auto p = pool_feature(fm);
    ASSERT_EQ(p.size(), 1u);
    EXPECT_DOUBLE_EQ(p[0], 2.5);
}

TEST(PoolFeature, InvariantUnderSpatialShuffles) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<float> u(-2, 2);
    const std::size_t h = 4, w = 5, c = 3;
    std::vector<Scalar> v(h * w * c);
    for (auto& x : v) x = u(rng);
    auto base = pool_feature(FeatureMap(Tensor({h, w, c}, v)));
    std::vector<std::size_t> perm(h * w);
    std::iota(perm.begin(), perm.end(), 0);
    for (int trial = 0; trial < 50; ++trial) {
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<Scalar> shuffled(v.size());
        for (std::size_t t = 0; t < h * w; ++t)
            std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(perm[t] * c), c,
                        shuffled.begin() + static_cast<std::ptrdiff_t>(t * c));
        auto p = pool_feature(FeatureMap(Tensor({h, w, c}, shuffled)));
        for (std::size_t k = 0; k < c; ++k) EXPECT_NEAR(p[k], base[k], 1e-9);
    }
}
