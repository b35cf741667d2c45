#include <gtest/gtest.h>

#include <map>

#include "onenip/dataset.hpp"
#include "test_util.hpp"

using namespace onenip;
using onenip::testing::random_image;
using onenip::testing::scratch_dir;

namespace {

void write_class(const fs::path& root, const std::string& name, std::size_t train, bool with_mask = true) {
    fs::create_directories(root / name / "train" / "good");
    fs::create_directories(root / name / "test" / "good");
    fs::create_directories(root / name / "test" / "scratch");
    fs::create_directories(root / name / "ground_truth" / "scratch");
    for (std::size_t i = 0; i < train; ++i)
        save_png(root / name / "train" / "good" / (std::to_string(i) + ".png"), random_image(32, 32, i));
    save_png(root / name / "test" / "good" / "000.png", random_image(32, 32, 100));
    save_png(root / name / "test" / "scratch" / "000.png", random_image(32, 32, 101));
    if (with_mask) save_mask_png(root / name / "ground_truth" / "scratch" / "000_mask.png", Mask(32, 32));
}

DatasetIndex index_with(std::vector<std::size_t> train_sizes) {
    DatasetIndex idx;
    for (std::size_t k = 0; k < train_sizes.size(); ++k) {
        ClassEntry c;
        c.name = "c" + std::to_string(k);
        for (std::size_t i = 0; i < train_sizes[k]; ++i) c.train.push_back(std::to_string(i) + ".png");
        idx.classes.push_back(c);
    }
    return idx;
}

}  // namespace

TEST(LoadDataset, MvtecLayout) {
    const fs::path root = scratch_dir("dataset_layout");
    write_class(root, "bottle", 3);
    write_class(root, "zipper", 2);
    DatasetIndex idx = load_dataset(root);
    ASSERT_EQ(idx.classes.size(), 2u);
    EXPECT_EQ(idx.classes[0].name, "bottle");
    EXPECT_EQ(idx.classes[1].name, "zipper");
    EXPECT_EQ(idx.train_count(), 5u);
    EXPECT_EQ(idx.test_count(), 4u);
    const ClassEntry& c = idx.classes[0];
    std::size_t anomalous = 0;
    for (const TestItem& t : c.test) {
        if (!t.anomalous()) {
            EXPECT_FALSE(t.mask);
            continue;
        }
        ++anomalous;
        ASSERT_TRUE(t.mask);
        EXPECT_EQ(t.mask->filename(), "000_mask.png");
        EXPECT_EQ(t.defect, "scratch");
    }
    EXPECT_EQ(anomalous, 1u);
}

TEST(LoadDataset, MissingMaskIsDatasetError) {
    const fs::path root = scratch_dir("dataset_nomask");
    write_class(root, "bottle", 2, false);
    EXPECT_THROW(load_dataset(root), DatasetError);
}

TEST(LoadDataset, ClassWithoutTrainingImages) {
    const fs::path root = scratch_dir("dataset_notrain");
    write_class(root, "bottle", 0);
    EXPECT_THROW(load_dataset(root), DatasetError);
}

TEST(LoadDatasets, MergesRootsAndQualifiesClashingNames) {
    const fs::path base = scratch_dir("dataset_merge");
    write_class(base / "alpha", "bottle", 2);
    write_class(base / "alpha", "cable", 1);
    write_class(base / "beta", "bottle", 3);
    DatasetIndex idx = load_datasets((base / "alpha").string() + "," + (base / "beta").string() + "/");
    ASSERT_EQ(idx.classes.size(), 3u);
    EXPECT_EQ(idx.classes[0].name, "alpha/bottle");
    EXPECT_EQ(idx.classes[1].name, "cable");
    EXPECT_EQ(idx.classes[2].name, "beta/bottle");
    EXPECT_EQ(idx.train_count(), 6u);

    EXPECT_EQ(load_datasets((base / "beta").string()).classes[0].name, "bottle");
    EXPECT_THROW(load_datasets(","), DatasetError);
    EXPECT_THROW(load_datasets((base / "alpha").string() + ",/nonexistent/onenip"), DatasetError);
}

TEST(LoadDataset, MissingRoot) { EXPECT_THROW(load_dataset("/nonexistent/onenip/root"), DatasetError); }

TEST(SamplePrompt, FixedModeReturnsDesignatedId) {
    DatasetIndex idx = index_with({7});
    idx.classes[0].fixed_prompt = 4;
    Rng rng(1);
    for (std::size_t t = 0; t < 7; ++t) EXPECT_EQ(sample_prompt(idx, 0, t, PromptMode::fixed, rng), 4u);
}

TEST(SamplePrompt, RandomModeIsUniform) {
    const std::size_t n = 8, draws = 10000;
    DatasetIndex idx = index_with({n});
    Rng rng(2);
    std::vector<double> counts(n, 0);
    for (std::size_t i = 0; i < draws; ++i) ++counts[sample_prompt(idx, 0, 3, PromptMode::random, rng)];
    double chi2 = 0;
    const double expected = static_cast<double>(draws) / n;
    for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // 7 degrees of freedom, p = 0.001 critical value
    EXPECT_LT(chi2, 24.32);
    EXPECT_GT(counts[3], 0);  // the target itself is a valid prompt
}

TEST(SamplePrompt, ExcludeSelfNeverReturnsTargetAndStaysUniform) {
    const std::size_t n = 5, draws = 10000;
    DatasetIndex idx = index_with({n});
    Rng rng(3);
    std::vector<double> counts(n, 0);
    for (std::size_t i = 0; i < draws; ++i) ++counts[sample_prompt(idx, 0, 2, PromptMode::random, rng, true)];
    EXPECT_EQ(counts[2], 0);
    double chi2 = 0;
    const double expected = static_cast<double>(draws) / (n - 1);
    for (std::size_t k = 0; k < n; ++k)
        if (k != 2) chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
    EXPECT_LT(chi2, 16.27);  // 3 dof, p = 0.001
}

TEST(SamplePrompt, SingleImageClass) {
    DatasetIndex idx = index_with({1});
    Rng rng(4);
    for (int i = 0; i < 20; ++i) EXPECT_EQ(sample_prompt(idx, 0, 0, PromptMode::random, rng), 0u);
    EXPECT_THROW(sample_prompt(idx, 0, 0, PromptMode::random, rng, true), DatasetError);
}

TEST(SamplePrompt, EmptyOrUnknownClass) {
    DatasetIndex idx = index_with({0, 3});
    Rng rng(5);
    EXPECT_THROW(sample_prompt(idx, 0, 0, PromptMode::random, rng), DatasetError);
    EXPECT_THROW(sample_prompt(idx, 2, 0, PromptMode::random, rng), DatasetError);
}

TEST(ToyCorpus, LayoutCountsAndMasks) {
    const fs::path root = scratch_dir("toy_layout");
    ToyCorpusSpec spec;
    spec.train_per_class = 4;
    spec.test_good_per_class = 2;
    spec.test_anomalous_per_class = 6;
    DatasetIndex idx = make_toy_corpus(root, spec);
    ASSERT_EQ(idx.classes.size(), 3u);
    for (const ClassEntry& c : idx.classes) {
        EXPECT_EQ(c.train.size(), 4u);
        EXPECT_EQ(c.test.size(), 8u);
        std::size_t anomalous = 0;
        for (const TestItem& t : c.test) {
            EXPECT_EQ(load_png(t.image).height, 32u);
            if (!t.anomalous()) continue;
            ++anomalous;
            EXPECT_TRUE(t.defect == "cutpaste" || t.defect == "perlin-blend");
            EXPECT_GT(load_mask_png(*t.mask).count(), 0u);
        }
        EXPECT_EQ(anomalous, 6u);
    }
}

TEST(ToyCorpus, SameSeedSameBytes) {
    ToyCorpusSpec spec;
    spec.train_per_class = 2;
    spec.test_good_per_class = 1;
    spec.test_anomalous_per_class = 2;
    spec.seed = 9;
    const fs::path a = scratch_dir("toy_a"), b = scratch_dir("toy_b");
    DatasetIndex ia = make_toy_corpus(a, spec), ib = make_toy_corpus(b, spec);
    for (std::size_t k = 0; k < ia.classes.size(); ++k)
        for (std::size_t i = 0; i < ia.classes[k].test.size(); ++i)
            EXPECT_EQ(load_png(ia.classes[k].test[i].image).values, load_png(ib.classes[k].test[i].image).values);
}

TEST(ToyCorpus, ClassesDiffer) {
    Rng rng(6);
    const Image a = toy_image("blobs", 32, rng), b = toy_image("grid", 32, rng), c = toy_image("stripes", 32, rng);
    EXPECT_NE(a.values, b.values);
    EXPECT_NE(b.values, c.values);
    EXPECT_THROW(toy_image("plaid", 32, rng), ConfigError);
}
