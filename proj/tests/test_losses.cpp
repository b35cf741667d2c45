#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "onenip/losses.hpp"

using namespace onenip;
using onenip::testing::random_tensor;

namespace {

double loop_mse(const Tensor& a, const Tensor& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a.data()[i]) - b.data()[i];
        s += d * d;
    }
    return s / static_cast<double>(a.numel());
}

Tensor binary_mask(Shape shape, std::uint64_t seed, double density = 0.3) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution on(density);
    std::vector<Scalar> v(shape_numel(shape));
    for (auto& x : v) x = on(rng) ? 1 : 0;
    return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST(RecLoss, IdenticalFeaturesGiveZero) {
    std::mt19937_64 rng(1);
    Tensor f = random_tensor({3, 3, 5}, rng);
    EXPECT_EQ(rec_loss(f, f).item(), 0.0f);
}

TEST(RecLoss, UnitOffsetGivesOne) {
    EXPECT_NEAR(rec_loss(Tensor({2, 3, 4}, Scalar{0}), Tensor({2, 3, 4}, Scalar{1})).item(), 1.0, 1e-6);
}

TEST(RecLoss, MatchesLoopOracle) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = random_tensor({4, 5, 6}, rng), b = random_tensor({4, 5, 6}, rng);
        EXPECT_NEAR(rec_loss(a, b).item(), loop_mse(a, b), 1e-6);
        EXPECT_NEAR(res_loss(a, b).item(), loop_mse(a, b), 1e-6);
    }
}

TEST(RecLoss, ShapeMismatchThrows) {
    EXPECT_THROW(rec_loss(Tensor({2, 2, 3}), Tensor({2, 3, 2})), DimensionError);
}

TEST(ResLoss, SelfPasteEqualsRecBitwise) {
    std::mt19937_64 rng(3);
    Tensor normal = random_tensor({4, 4, 8}, rng), recon = random_tensor({4, 4, 8}, rng);
    // self-paste leaves the image, and so every downstream value, unchanged
    Tensor restored = Tensor(recon.shape(), recon.values());
    EXPECT_EQ(res_loss(normal, restored).item(), rec_loss(normal, recon).item());
}

TEST(ResLoss, PerfectRestorationIsZero) {
    std::mt19937_64 rng(4);
    Tensor n = random_tensor({2, 2, 3}, rng);
    EXPECT_EQ(res_loss(n, n).item(), 0.0f);
}

TEST(DiceLoss, PerfectOverlapTendsToZero) {
    Tensor m = binary_mask({16, 16}, 5);
    const double l = dice_loss(m, m, 1e-9).item();
    EXPECT_NEAR(l, 0.0, 1e-6);
    EXPECT_NEAR(dice_loss(m, m).item(), 0.0, 1e-6);
}

TEST(DiceLoss, NoOverlapIsNearOne) {
    Tensor m = binary_mask({32, 32}, 6);
    Tensor p({32, 32}, Scalar(1e-6));
    EXPECT_GT(dice_loss(p, m).item(), 0.99);
}

TEST(DiceLoss, EmptyMaskEmptyPredictionIsZero) {
    EXPECT_EQ(dice_loss(Tensor({8, 8}, Scalar{0}), Tensor({8, 8}, Scalar{0})).item(), 0.0f);
}

TEST(DiceLoss, RangeAndMonotoneInOverlap) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor p = random_tensor({8, 8}, rng, 0.001, 0.999, false);
        Tensor m = binary_mask({8, 8}, 100 + trial);
        const double l = dice_loss(p, m).item();
        EXPECT_GE(l, 0.0);
        EXPECT_LT(l, 1.0);
    }
    // swap a predicted value from a background pixel onto a foreground pixel:
    // sum(p^2) and sum(m^2) stay fixed, the overlap grows
    Tensor m({1, 4}, std::vector<Scalar>{1, 0, 1, 0});
    Tensor low({1, 4}, std::vector<Scalar>{0.2f, 0.7f, 0.5f, 0.1f});
    Tensor high({1, 4}, std::vector<Scalar>{0.7f, 0.2f, 0.5f, 0.1f});
    EXPECT_LT(dice_loss(high, m).item(), dice_loss(low, m).item());
}

TEST(DiceLoss, BatchMeanOfPerSampleLosses) {
    std::mt19937_64 rng(8);
    Tensor p = random_tensor({3, 6, 6}, rng, 0, 1, false);
    Tensor m = binary_mask({3, 6, 6}, 9);
    double expected = 0;
    for (std::size_t b = 0; b < 3; ++b) expected += dice_loss(select(p, b), select(m, b)).item() / 3.0;
    EXPECT_NEAR(mean_dice_loss(p, m).item(), expected, 1e-6);
}

TEST(DiceLoss, MatchesLoopOracleAndFiniteDifferences) {
    std::mt19937_64 rng(10);
    Tensor p = random_tensor({2, 5, 5}, rng, 0.05, 0.95);
    Tensor m = binary_mask({2, 5, 5}, 11);
    double expected = 0;
    for (std::size_t b = 0; b < 2; ++b) {
        double inter = 0, pp = 0, mm = 0;
        for (std::size_t i = 0; i < 25; ++i) {
            const double pv = p.data()[b * 25 + i], mv = m.data()[b * 25 + i];
            inter += pv * mv;
            pp += pv * pv;
            mm += mv * mv;
        }
        expected += (1 - (2 * inter + 1) / (pp + mm + 1)) / 2;
    }
    EXPECT_NEAR(mean_dice_loss(p, m).item(), expected, 1e-6);
    auto r = onenip::testing::grad_check([&](const std::vector<Tensor>& in) { return mean_dice_loss(in[0], m); }, {p});
    EXPECT_LT(r.max_relative_error, onenip::testing::kOpTolerance);
}

TEST(DiceLoss, RejectsNonBinaryMaskAndShapeMismatch) {
    EXPECT_THROW(dice_loss(Tensor({2, 2}, Scalar{0.5}), Tensor({2, 2}, Scalar{0.5})), DimensionError);
    EXPECT_THROW(dice_loss(Tensor({2, 2}), Tensor({2, 3})), DimensionError);
}

TEST(TotalLoss, WeightedSum) {
    Tensor one(Shape{}, Scalar{1});
    EXPECT_NEAR(total_loss(one, one, one, 0.5).item(), 2.5, 1e-6);
}

TEST(TotalLoss, NonPositiveWeightRejected) {
    Tensor one(Shape{}, Scalar{1});
    EXPECT_THROW(total_loss(one, one, one, 0.0), ConfigError);
    EXPECT_THROW(total_loss(one, one, one, -1.0), ConfigError);
}

TEST(TotalLoss, ComponentGradientsAreOneOneLambda) {
    Tensor a(Shape{}, Scalar{0.3}, true), b(Shape{}, Scalar{0.7}, true), c(Shape{}, Scalar{0.2}, true);
    total_loss(a, b, c, 0.5).backward();
    EXPECT_NEAR(a.grad()[0], 1.0, 1e-6);
    EXPECT_NEAR(b.grad()[0], 1.0, 1e-6);
    EXPECT_NEAR(c.grad()[0], 0.5, 1e-6);
}

TEST(LossReport, TotalIsConsistent) {
    std::mt19937_64 rng(12);
    Tensor f = random_tensor({2, 2, 4}, rng), g = random_tensor({2, 2, 4}, rng), h = random_tensor({2, 2, 4}, rng);
    Tensor rec = rec_loss(f, g), res = res_loss(f, h);
    Tensor seg = dice_loss(Tensor({4, 4}, Scalar{0.5}), binary_mask({4, 4}, 13));
    LossReport r = make_report(rec, res, seg, total_loss(rec, res, seg, 0.5), 0.5);
    EXPECT_NEAR(r.total, r.l_rec + r.l_res + r.lambda * r.l_seg, 1e-6);
    EXPECT_GE(r.l_rec, 0);
    EXPECT_GE(r.l_res, 0);
    EXPECT_GE(r.l_seg, 0);
    EXPECT_LE(r.l_seg, 1);
}
