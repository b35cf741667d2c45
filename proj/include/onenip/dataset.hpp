#pragma once

// MVTec-style dataset layout:
//   <root>/<class>/train/good/*.png
//   <root>/<class>/test/<defect or good>/*.png
//   <root>/<class>/ground_truth/<defect>/<stem>_mask.png
// plus a procedural toy corpus in the same layout.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "onenip/errors.hpp"
#include "onenip/image.hpp"
#include "onenip/synthesis.hpp"

namespace onenip {

namespace fs = std::filesystem;

struct TestItem {
    fs::path image;
    std::string defect;  // "good" for normal images
    std::optional<fs::path> mask;

    bool anomalous() const { return defect != "good"; }
};

struct ClassEntry {
    std::string name;
    std::vector<fs::path> train;
    std::vector<TestItem> test;
    std::size_t fixed_prompt = 0;  // index into train, used in fixed prompt mode
};

struct DatasetIndex {
    fs::path root;
    std::vector<ClassEntry> classes;

    std::size_t train_count() const {
        std::size_t n = 0;
        for (const auto& c : classes) n += c.train.size();
        return n;
    }
    std::size_t test_count() const {
        std::size_t n = 0;
        for (const auto& c : classes) n += c.test.size();
        return n;
    }
};

namespace detail {

inline std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& extension) {
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == extension) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<fs::path> sorted_dirs(const fs::path& dir) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace detail

// `extension` selects the sample files: ".png" images, or ".onip" feature files.
inline DatasetIndex load_dataset(const fs::path& root, const std::string& extension = ".png") {
    if (!fs::is_directory(root)) throw DatasetError("dataset root " + root.string() + " is not a directory");
    DatasetIndex index;
    index.root = root;
    for (const fs::path& class_dir : detail::sorted_dirs(root)) {
        ClassEntry c;
        c.name = class_dir.filename().string();
        c.train = detail::sorted_files(class_dir / "train" / "good", extension);
        if (c.train.empty()) throw DatasetError("class " + c.name + " has no training images under train/good");
        const fs::path test_dir = class_dir / "test";
        if (fs::is_directory(test_dir)) {
            for (const fs::path& defect_dir : detail::sorted_dirs(test_dir)) {
                const std::string defect = defect_dir.filename().string();
                for (const fs::path& img : detail::sorted_files(defect_dir, extension)) {
                    TestItem item{img, defect, std::nullopt};
                    if (item.anomalous()) {
                        fs::path m = class_dir / "ground_truth" / defect / (img.stem().string() + "_mask.png");
                        if (!fs::exists(m)) throw DatasetError("missing mask " + m.string());
                        item.mask = m;
                    }
                    c.test.push_back(std::move(item));
                }
            }
        }
        index.classes.push_back(std::move(c));
    }
    if (index.classes.empty()) throw DatasetError("dataset root " + root.string() + " contains no class directories");
    return index;
}

// Comma-separated roots merged into one index (mixed-dataset training).
// A class name seen twice is qualified as "<root dir name>/<class>".
inline DatasetIndex load_datasets(const std::string& roots, const std::string& extension = ".png") {
    std::vector<fs::path> paths;
    std::size_t at = 0;
    while (at <= roots.size()) {
        const std::size_t comma = std::min(roots.find(',', at), roots.size());
        if (comma > at) paths.emplace_back(roots.substr(at, comma - at));
        at = comma + 1;
    }
    if (paths.empty()) throw DatasetError("no dataset root given");
    if (paths.size() == 1) return load_dataset(paths[0], extension);
    DatasetIndex merged;
    merged.root = paths[0];
    std::vector<DatasetIndex> parts;
    std::map<std::string, int> seen;
    for (const auto& p : paths) {
        parts.push_back(load_dataset(p, extension));
        for (const auto& c : parts.back().classes) ++seen[c.name];
    }
    for (std::size_t i = 0; i < parts.size(); ++i)
        for (ClassEntry& c : parts[i].classes) {
            if (seen[c.name] > 1) {
                const fs::path& p = paths[i].filename().empty() ? paths[i].parent_path() : paths[i];
                c.name = p.filename().string() + "/" + c.name;
            }
            merged.classes.push_back(std::move(c));
        }
    return merged;
}

enum class PromptMode { random, fixed };

// Random mode draws uniformly among all training images of the class (the
// target itself included unless exclude_self); fixed mode returns the
// class's designated prompt.
inline std::size_t sample_prompt(const DatasetIndex& index, std::size_t class_id, std::size_t target_id, PromptMode mode,
                                 Rng& rng, bool exclude_self = false) {
    if (class_id >= index.classes.size()) throw DatasetError("class id " + std::to_string(class_id) + " out of range");
    const ClassEntry& c = index.classes[class_id];
    const std::size_t n = c.train.size();
    if (n == 0) throw DatasetError("class " + c.name + " has no training images");
    if (mode == PromptMode::fixed) {
        if (c.fixed_prompt >= n) throw DatasetError("fixed prompt id out of range for class " + c.name);
        return c.fixed_prompt;
    }
    if (!exclude_self) return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    if (n < 2) throw DatasetError("class " + c.name + " needs >= 2 training images to exclude the target as prompt");
    std::size_t k = std::uniform_int_distribution<std::size_t>(0, n - 2)(rng);
    return k >= target_id ? k + 1 : k;
}

// ---- toy corpus ------------------------------------------------------------

struct ToyCorpusSpec {
    std::size_t size = 32;
    std::size_t train_per_class = 10;
    std::size_t test_good_per_class = 6;
    std::size_t test_anomalous_per_class = 10;
    std::uint64_t seed = 0;
};

inline const std::vector<std::string>& toy_class_names() {
    static const std::vector<std::string> names{"blobs", "grid", "stripes"};
    return names;
}

namespace detail {

inline void add_noise(Image& img, Rng& rng, double sigma) {
    std::normal_distribution<double> n(0.0, sigma);
    for (float& v : img.values) v = static_cast<float>(std::clamp(v + n(rng), 0.0, 1.0));
}

// Soft bright discs on a jittered 8-pixel lattice over a dark background.
inline Image toy_blobs(std::size_t s, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Image img(s, s);
    const double r = 1.6 + 0.2 * u(rng);
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            const double dy = static_cast<double>(y % 8) - 3.5, dx = static_cast<double>(x % 8) - 3.5;
            const double w = std::exp(-(dy * dy + dx * dx) / (2 * r * r));
            const float bg[3] = {0.15f, 0.18f, 0.30f}, fg[3] = {0.95f, 0.80f, 0.25f};
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(bg[c] + w * (fg[c] - bg[c]));
        }
    add_noise(img, rng, 0.02);
    return img;
}

// Light lines every 8 pixels.
inline Image toy_grid(std::size_t s, Rng& rng) {
    Image img(s, s);
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            const bool line = y % 8 < 2 || x % 8 < 2;
            const float rgb[3] = {line ? 0.85f : 0.35f, line ? 0.85f : 0.25f, line ? 0.80f : 0.20f};
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
        }
    add_noise(img, rng, 0.03);
    return img;
}

// Diagonal sinusoidal stripes of period 8 with a small phase jitter.
inline Image toy_stripes(std::size_t s, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double phase = 0.3 * u(rng);
    Image img(s, s);
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            const double t = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * static_cast<double>(x + y) / 8.0 + phase);
            img.at(y, x, 0) = static_cast<float>(0.2 + 0.3 * t);
            img.at(y, x, 1) = static_cast<float>(0.5 + 0.4 * t);
            img.at(y, x, 2) = static_cast<float>(0.3 + 0.1 * t);
        }
    add_noise(img, rng, 0.02);
    return img;
}

}  // namespace detail

inline Image toy_image(const std::string& class_name, std::size_t size, Rng& rng) {
    if (class_name == "blobs") return detail::toy_blobs(size, rng);
    if (class_name == "grid") return detail::toy_grid(size, rng);
    if (class_name == "stripes") return detail::toy_stripes(size, rng);
    throw ConfigError("unknown toy class " + class_name);
}

// Writes the corpus and returns its index. Test anomalies come from the
// synthesis module driven by a stream disjoint from any training seed, with
// blend textures taken from the other classes' training images.
inline DatasetIndex make_toy_corpus(const fs::path& root, const ToyCorpusSpec& spec) {
    if (spec.size < 32 || spec.size % 16) throw ConfigError("toy image size must be a multiple of 16, >= 32");
    if (spec.train_per_class < 2) throw ConfigError("toy corpus needs >= 2 training images per class");
    const auto& names = toy_class_names();
    std::vector<std::vector<Image>> train(names.size());
    std::vector<Rng> rngs;
    char name[32];
    for (std::size_t k = 0; k < names.size(); ++k) {
        const fs::path dir = root / names[k];
        fs::create_directories(dir / "train" / "good");
        fs::create_directories(dir / "test" / "good");
        Rng& rng = rngs.emplace_back(spec.seed * 1000003ull + k);
        for (std::size_t i = 0; i < spec.train_per_class; ++i) {
            std::snprintf(name, sizeof name, "%03zu.png", i);
            train[k].push_back(toy_image(names[k], spec.size, rng));
            save_png(dir / "train" / "good" / name, train[k].back());
        }
        for (std::size_t i = 0; i < spec.test_good_per_class; ++i) {
            std::snprintf(name, sizeof name, "%03zu.png", i);
            save_png(dir / "test" / "good" / name, toy_image(names[k], spec.size, rng));
        }
    }
    for (std::size_t k = 0; k < names.size(); ++k) {
        const fs::path dir = root / names[k];
        Rng defect_rng(0x5eed0000ull ^ (spec.seed * 7919ull + k));
        const TextureSource texture = other_class_texture(train, k);
        SynthesisParams params;
        for (std::size_t i = 0; i < spec.test_anomalous_per_class; ++i) {
            const Image base = toy_image(names[k], spec.size, rngs[k]);
            AnomalySample s = synthesize(base, i, defect_rng, params, texture);
            const std::string defect = to_string(s.method);
            fs::create_directories(dir / "test" / defect);
            fs::create_directories(dir / "ground_truth" / defect);
            std::snprintf(name, sizeof name, "%03zu", i);
            save_png(dir / "test" / defect / (std::string(name) + ".png"), s.image);
            save_mask_png(dir / "ground_truth" / defect / (std::string(name) + "_mask.png"), s.mask);
        }
    }
    return load_dataset(root);
}

}  // namespace onenip
