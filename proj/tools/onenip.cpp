// onenip command line: make-toy, synth, train, eval, score, export-plots.
// Exit codes: 1 config error, 2 dataset/format error, 3 numeric failure, 4 anything else.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "onenip/plot.hpp"
#include "onenip/trainer.hpp"

using namespace onenip;
using nlohmann::json;

namespace {

json metric_json(const MetricSet& m) { return {{"i_roc", m.i_roc}, {"i_pr", m.i_pr}, {"p_roc", m.p_roc}, {"p_pr", m.p_pr}}; }

void write_plot(const fs::path& stem, const std::vector<Series>& series, const PlotSpec& spec) {
    std::ofstream(fs::path(stem).replace_extension(".svg")) << svg_plot(series, spec);
    save_png(fs::path(stem).replace_extension(".png"), png_plot(series, spec));
}

// Keeps at most `limit` points, always including the last one.
Series thin(std::string name, const std::vector<CurvePoint>& pts, std::size_t limit = 1500) {
    Series s{std::move(name), {}, {}};
    const std::size_t stride = pts.size() / limit + 1;
    for (std::size_t i = 0; i < pts.size(); ++i)
        if (i % stride == 0 || i + 1 == pts.size()) {
            s.x.push_back(pts[i].x);
            s.y.push_back(pts[i].y);
        }
    return s;
}

void write_curve_plots(const fs::path& dir, const std::vector<ScoredImage>& results) {
    fs::create_directories(dir);
    std::map<std::string, std::pair<EvalRecord, EvalRecord>> records;
    for (const auto& r : results)
        for (const std::string& key : {r.class_name, std::string("pooled")}) {
            auto& [img, pix] = records[key];
            img.add(r.image_score, r.anomalous);
            for (std::size_t p = 0; p < r.pixel_scores.size(); ++p) pix.add(r.pixel_scores[p], r.mask && r.mask->values[p]);
        }
    std::vector<Series> i_roc, i_pr, p_roc, p_pr;
    for (const auto& [name, rec] : records) {
        i_roc.push_back(thin(name, roc_curve(rec.first)));
        i_pr.push_back(thin(name, pr_curve(rec.first)));
        p_roc.push_back(thin(name, roc_curve(rec.second)));
        p_pr.push_back(thin(name, pr_curve(rec.second)));
    }
    write_plot(dir / "image_roc", i_roc, {"Image-level ROC", "false positive rate", "true positive rate", true});
    write_plot(dir / "image_pr", i_pr, {"Image-level PR", "recall", "precision", true});
    write_plot(dir / "pixel_roc", p_roc, {"Pixel-level ROC", "false positive rate", "true positive rate", true});
    write_plot(dir / "pixel_pr", p_pr, {"Pixel-level PR", "recall", "precision", true});
}

struct Csv {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    std::vector<double> column(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return {};
        const auto k = static_cast<std::size_t>(it - header.begin());
        std::vector<double> out;
        for (const auto& r : rows) out.push_back(r.at(k));
        return out;
    }
};

Csv read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError("cannot open " + path.string());
    Csv csv;
    std::string line, cell;
    if (!std::getline(in, line)) throw DatasetError(path.string() + " is empty");
    std::istringstream hs(line);
    while (std::getline(hs, cell, ',')) csv.header.push_back(detail::trim(cell));
    std::size_t n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (detail::trim(line).empty()) continue;
        std::istringstream ls(line);
        std::vector<double> row;
        while (std::getline(ls, cell, ',')) {
            try {
                row.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw DatasetError(path.string() + ":" + std::to_string(n) + ": non-numeric cell '" + cell + "'");
            }
        }
        if (row.size() != csv.header.size())
            throw DatasetError(path.string() + ":" + std::to_string(n) + ": expected " + std::to_string(csv.header.size()) +
                               " columns");
        csv.rows.push_back(std::move(row));
    }
    return csv;
}

RunConfig checked(RunConfig cfg) {
    cfg.validate();
    return cfg;
}

// ---- commands ------------------------------------------------------------------

int cmd_make_toy(const fs::path& out, const ToyCorpusSpec& spec) {
    DatasetIndex index = make_toy_corpus(out, spec);
    json j{{"root", out.string()}, {"train", index.train_count()}, {"test", index.test_count()}};
    for (const auto& c : index.classes) j["classes"].push_back(c.name);
    std::cout << j.dump() << "\n";
    return 0;
}

int cmd_synth(const std::string& data, const fs::path& out, std::uint64_t seed, std::size_t count,
              const std::optional<fs::path>& config) {
    RunConfig cfg = config ? load_config(*config) : RunConfig{};
    cfg.synthesis.validate();
    DatasetIndex index = load_datasets(data);
    std::vector<std::vector<Image>> images(index.classes.size());
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t k = 0; k < index.classes.size(); ++k)
        for (std::size_t i = 0; i < index.classes[k].train.size(); ++i) {
            images[k].push_back(load_png(index.classes[k].train[i]));
            all.emplace_back(k, i);
        }
    fs::create_directories(out);
    Rng rng(seed);
    char name[32];
    for (std::size_t n = 0; n < count; ++n) {
        const auto [k, i] = all[std::uniform_int_distribution<std::size_t>(0, all.size() - 1)(rng)];
        AnomalySample s = synthesize(images[k][i], i, rng, cfg.synthesis, other_class_texture(images, k));
        std::snprintf(name, sizeof name, "%04zu", n);
        save_png(out / (std::string(name) + ".png"), s.image);
        save_mask_png(out / (std::string(name) + "_mask.png"), s.mask);
        std::cout << json{{"image", (out / (std::string(name) + ".png")).string()},
                          {"mask", (out / (std::string(name) + "_mask.png")).string()},
                          {"class", index.classes[k].name},
                          {"source", index.classes[k].train[i].string()},
                          {"method", to_string(s.method)}}
                         .dump()
                  << "\n";
    }
    return 0;
}

int cmd_train(const fs::path& config, const fs::path& out, const std::optional<std::string>& data,
              const std::optional<std::uint64_t>& seed, bool resume, bool quiet) {
    RunConfig cfg = load_config(config);
    if (data) cfg.data_root = *data;
    if (seed) cfg.train.seed = *seed;
    if (cfg.data_root.empty()) throw ConfigError("data_root is not set (config key or --data)");
    cfg = checked(cfg);
    DatasetIndex index = load_datasets(cfg.data_root, FeatureExtractor(cfg).file_extension());
    Trainer trainer(cfg, std::move(index));
    const fs::path ckpt = out / "checkpoint.onip";
    if (resume && fs::exists(ckpt)) trainer.restore(TensorArchive::load(ckpt));
    fs::create_directories(out);
    std::ofstream(out / "config.cfg") << serialize_config(cfg);
    fit(trainer, out, FitOptions{!quiet});
    std::cout << json{{"checkpoint", ckpt.string()}, {"epochs", trainer.epoch()}, {"steps", trainer.step()}}.dump() << "\n";
    return 0;
}

int cmd_eval(const fs::path& checkpoint, const std::optional<std::string>& data, const std::optional<double>& alpha,
             const std::optional<fs::path>& plots, std::size_t threads) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    RunConfig& cfg = ck.config;
    if (data) cfg.data_root = *data;
    if (alpha) cfg.alpha = *alpha;
    if (!(cfg.alpha >= 0 && cfg.alpha <= 1)) throw ConfigError("alpha must lie in [0, 1]");
    if (cfg.data_root.empty()) throw ConfigError("no dataset: pass --data");
    FeatureExtractor extractor(cfg);
    DatasetIndex index = load_datasets(cfg.data_root, extractor.file_extension());
    Scorer scorer(*ck.model, ck.pool, cfg.alpha, cfg.smoothing_sigma);
    std::vector<ScoredImage> results = score_split(index, extractor, scorer, threads);
    EvaluationReport report = evaluate(results);
    json j;
    j["dataset"] = cfg.data_root;
    j["checkpoint"] = checkpoint.string();
    j["epoch"] = ck.epoch;
    j["alpha"] = cfg.alpha;
    j["images"] = results.size();
    j["per_class"] = json::object();
    for (const auto& [name, m] : report.per_class) j["per_class"][name] = metric_json(m);
    j["mean"] = metric_json(report.mean);
    j["pooled"] = metric_json(report.pooled);
    if (plots) write_curve_plots(*plots, results);
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_score(const fs::path& checkpoint, const std::vector<fs::path>& inputs, const fs::path& out,
              const std::optional<double>& alpha) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    RunConfig& cfg = ck.config;
    if (alpha) cfg.alpha = *alpha;
    if (!(cfg.alpha >= 0 && cfg.alpha <= 1)) throw ConfigError("alpha must lie in [0, 1]");
    FeatureExtractor extractor(cfg);
    Scorer scorer(*ck.model, ck.pool, cfg.alpha, cfg.smoothing_sigma);
    fs::create_directories(out);
    const std::size_t size = extractor.image_size();
    std::map<std::string, int> used;
    for (const fs::path& input : inputs) {
        if (!fs::exists(input)) throw DatasetError("no such image " + input.string());
        ScoreMap sm = scorer.score(extractor.from_file(input), size, size);
        std::string stem = input.stem().string();
        if (const int n = used[stem]++; n > 0) stem += "_" + std::to_string(n);
        const auto [lo, hi] = std::minmax_element(sm.s.begin(), sm.s.end());
        save_heatmap_png(out / (stem + "_heatmap.png"), sm.s, size, size, *lo, *hi);
        save_feature_file(FeatureMap(Tensor({size, size, 1}, std::vector<Scalar>(sm.s.begin(), sm.s.end()))),
                          out / (stem + "_score.onip"));
        std::cout << json{{"path", input.string()},
                          {"class_selected", ck.pool.entries[sm.selection.entry].class_name},
                          {"image_score", sm.image_score}}
                         .dump()
                  << "\n";
    }
    return 0;
}

int cmd_export_plots(const fs::path& log_path, const fs::path& out) {
    const Csv log = read_csv(log_path);
    const auto step = log.column("step");
    if (step.empty()) throw DatasetError(log_path.string() + " has no step column");
    fs::create_directories(out);
    std::vector<Series> losses;
    for (const char* name : {"l_rec", "l_res", "l_seg", "total"}) {
        auto y = log.column(name);
        if (!y.empty() && std::any_of(y.begin(), y.end(), [](double v) { return v != 0; })) losses.push_back({name, step, y});
    }
    PlotSpec loss_spec{"Training losses", "step", "loss (log10)"};
    loss_spec.log_y = true;
    write_plot(out / "loss", losses, loss_spec);
    if (auto lr = log.column("lr"); !lr.empty()) write_plot(out / "lr", {{"lr", step, lr}}, {"Learning rate", "step", "lr"});
    json j{{"loss", (out / "loss.svg").string()}};
    const fs::path metrics_path = log_path.parent_path() / "metrics.csv";
    if (fs::exists(metrics_path)) {
        const Csv m = read_csv(metrics_path);
        const auto epoch = m.column("epoch");
        std::vector<Series> series;
        for (const char* name : {"i_roc", "i_pr", "p_roc", "p_pr"})
            if (auto y = m.column(name); !y.empty()) series.push_back({name, epoch, y});
        if (!epoch.empty()) {
            write_plot(out / "metrics", series, {"Evaluation metrics", "epoch", "score"});
            j["metrics"] = (out / "metrics.svg").string();
        }
    }
    std::cout << j.dump() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"OneNIP unified anomaly detection"};
    app.require_subcommand(1);

    ToyCorpusSpec toy;
    fs::path toy_out;
    auto* make_toy = app.add_subcommand("make-toy", "write the procedural toy corpus");
    make_toy->add_option("--out", toy_out, "output dataset root")->required();
    make_toy->add_option("--seed", toy.seed, "corpus seed");
    make_toy->add_option("--size", toy.size, "image side in pixels");
    make_toy->add_option("--train", toy.train_per_class, "training images per class");
    make_toy->add_option("--good", toy.test_good_per_class, "normal test images per class");
    make_toy->add_option("--anomalous", toy.test_anomalous_per_class, "anomalous test images per class");

    std::string data;
    fs::path out, synth_config;
    std::uint64_t seed = 0;
    std::size_t count = 0;
    auto* synth = app.add_subcommand("synth", "write synthesized anomaly image/mask pairs");
    synth->add_option("--data", data, "dataset root(s), comma separated")->required();
    synth->add_option("--out", out, "output directory")->required();
    synth->add_option("--seed", seed, "random seed");
    synth->add_option("--count", count, "number of pairs")->required();
    auto* synth_cfg_opt = synth->add_option("--config", synth_config, "config file for synthesis parameters");

    fs::path config;
    std::optional<std::string> data_override;
    std::optional<std::uint64_t> seed_override;
    bool resume = false, quiet = false;
    auto* train = app.add_subcommand("train", "train a model on every class jointly");
    train->add_option("--config", config, "run config (key=value)")->required();
    train->add_option("--out", out, "output directory")->required();
    train->add_option("--data", data_override, "override data_root");
    train->add_option("--seed", seed_override, "override seed");
    train->add_flag("--resume", resume, "continue from <out>/checkpoint.onip");
    train->add_flag("--quiet", quiet, "no per-epoch progress on stderr");

    fs::path checkpoint, plots;
    std::optional<double> alpha;
    std::size_t threads = 0;
    auto* eval = app.add_subcommand("eval", "score a test split and print the metric report as JSON");
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    eval->add_option("--data", data_override, "dataset root(s); defaults to the training data_root");
    eval->add_option("--alpha", alpha, "fusion weight of the refined map");
    auto* plots_opt = eval->add_option("--plots", plots, "directory for ROC/PR curve plots");
    eval->add_option("--threads", threads, "scoring threads, 0 = all cores");

    std::vector<fs::path> images;
    fs::path score_out = "scores";
    auto* score = app.add_subcommand("score", "score single images");
    score->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    score->add_option("--image", images, "image (or feature file) to score; repeatable")->required();
    score->add_option("--out", score_out, "directory for heat maps and raw score maps");
    score->add_option("--alpha", alpha, "fusion weight of the refined map");

    fs::path log;
    auto* export_plots = app.add_subcommand("export-plots", "plot a training log (and metrics.csv next to it)");
    export_plots->add_option("--log", log, "train_log.csv")->required();
    export_plots->add_option("--out", out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (*make_toy) return cmd_make_toy(toy_out, toy);
        if (*synth)
            return cmd_synth(data, out, seed, count, *synth_cfg_opt ? std::optional<fs::path>(synth_config) : std::nullopt);
        if (*train) return cmd_train(config, out, data_override, seed_override, resume, quiet);
        if (*eval)
            return cmd_eval(checkpoint, data_override, alpha, *plots_opt ? std::optional<fs::path>(plots) : std::nullopt,
                            threads);
        if (*score) return cmd_score(checkpoint, images, score_out, alpha);
        if (*export_plots) return cmd_export_plots(log, out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DatasetError& e) {
        std::cerr << "dataset error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 2;
    } catch (const UndefinedMetricError& e) {
        std::cerr << "dataset error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 4;
}
