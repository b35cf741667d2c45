#pragma once

// Joint training on all classes: per normal image one reconstruction pass
// (target + prompt) and one restoration pass (synthesized anomaly + the same
// prompt) through the shared model, Dice on both refined maps, AdamW.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "onenip/config.hpp"
#include "onenip/inference.hpp"
#include "onenip/losses.hpp"
#include "onenip/optim.hpp"

namespace onenip {

inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
    return epoch < cfg.lr_drop_epoch ? cfg.lr : cfg.lr * cfg.lr_drop_factor;
}

struct TrainSample {
    std::size_t class_id = 0, image_id = 0;
};

inline std::string rng_state(const Rng& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline void set_rng_state(Rng& rng, const std::string& state) {
    std::istringstream is(state);
    is >> rng;
    if (!is) throw FormatError("checkpoint holds a malformed random state", 0);
}

inline std::string format_log_row(std::size_t step, std::size_t epoch, const LossReport& r, double lr) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g", step, epoch, r.l_rec, r.l_res, r.l_seg, r.total, lr);
    return buf;
}

inline constexpr const char* kLogHeader = "step,epoch,l_rec,l_res,l_seg,total,lr";

class Trainer {
public:
    Trainer(RunConfig cfg, DatasetIndex index)
        : cfg_(std::move(cfg)),
          index_(std::move(index)),
          extractor_(cfg_),
          model_(cfg_.model, cfg_.train.seed * 2654435761ull + 17),
          optimizer_(model_.parameters(), AdamWOptions{0.9, 0.999, 1e-8, cfg_.train.weight_decay}),
          rng_(cfg_.train.seed) {
        cfg_.validate();
        if (cfg_.train.prompt_mode == PromptMode::random && cfg_.train.prompt_exclude_self)
            for (const auto& c : index_.classes)
                if (c.train.size() < 2)
                    throw DatasetError("class " + c.name + " needs >= 2 training images when the prompt excludes the target");
        model_.set_dropout_rng(&rng_);
        for (const auto& c : index_.classes) {
            std::vector<Image> imgs;
            std::vector<FeatureMap> feats;
            if (extractor_.uses_images()) {
                for (const auto& p : c.train) imgs.push_back(extractor_.load_image(p));
                feats = extractor_.from_images(imgs);
            } else {
                for (const auto& p : c.train) feats.push_back(extractor_.from_file(p));
            }
            images_.push_back(std::move(imgs));
            features_.push_back(std::move(feats));
        }
    }

    const RunConfig& config() const { return cfg_; }
    const DatasetIndex& index() const { return index_; }
    OneNipModel& model() { return model_; }
    const FeatureExtractor& extractor() const { return extractor_; }
    AdamW& optimizer() { return optimizer_; }
    Rng& rng() { return rng_; }
    std::size_t epoch() const { return epoch_; }
    std::size_t step() const { return step_; }
    const FeatureMap& train_feature(std::size_t class_id, std::size_t image_id) const {
        return features_.at(class_id).at(image_id);
    }

    // Replaces the anomaly synthesis of the restoration stream.
    using Synthesizer = std::function<AnomalySample(const Image&, std::size_t, Rng&)>;
    void set_synthesizer(Synthesizer f) { synthesizer_ = std::move(f); }

    // Directory that receives the offending batch when a loss turns non-finite.
    void set_dump_dir(fs::path dir) { dump_dir_ = std::move(dir); }

    LossReport train_step(const std::vector<TrainSample>& batch) {
        if (batch.empty()) throw DimensionError("empty training batch");
        model_.set_training(true);
        const bool refiner = cfg_.model.refiner_enabled;
        const bool anomalous_pass = cfg_.train.restoration || refiner;
        const bool use_prompt = cfg_.model.decoder_variant != DecoderVariant::lqd;
        const std::size_t size = cfg_.image_size;

        std::vector<std::size_t> prompts;
        std::vector<AnomalySample> anomalies;
        for (const TrainSample& s : batch) {
            prompts.push_back(sample_prompt(index_, s.class_id, s.image_id, cfg_.train.prompt_mode, rng_,
                                            cfg_.train.prompt_exclude_self));
            if (!anomalous_pass) continue;
            const Image& image = images_[s.class_id][s.image_id];
            anomalies.push_back(synthesizer_ ? synthesizer_(image, s.image_id, rng_)
                                             : synthesize(image, s.image_id, rng_, cfg_.synthesis, other_class_texture(images_, s.class_id)));
        }
        std::vector<FeatureMap> anomalous_features;
        if (anomalous_pass) {
            std::vector<Image> imgs;
            for (const auto& a : anomalies) imgs.push_back(a.image);
            anomalous_features = extractor_.from_images(imgs);
        }

        std::optional<Tensor> total_slot;
        LossReport report;
        try {
            std::vector<Tensor> rec_terms, res_terms, errors;
            std::vector<Scalar> masks;
            for (std::size_t b = 0; b < batch.size(); ++b) {
                const Tensor& normal = features_[batch[b].class_id][batch[b].image_id].values;
                Tensor x_n = model_.encode(normal);
                Tensor p_e = use_prompt ? model_.encode(features_[batch[b].class_id][prompts[b]].values) : x_n;
                Tensor rec = model_.reconstruct_encoded(x_n, use_prompt ? p_e : x_n);
                rec_terms.push_back(rec_loss(normal, rec));
                if (!anomalous_pass) continue;
                const Tensor& anomalous = anomalous_features[b].values;
                Tensor x_a = model_.encode(anomalous);
                Tensor res = model_.reconstruct_encoded(x_a, use_prompt ? p_e : x_a);
                if (cfg_.train.restoration) res_terms.push_back(res_loss(normal, res));
                if (refiner) {
                    Tensor e_n = abs(sub(normal, rec)), e_a = abs(sub(anomalous, res));
                    errors.push_back(cfg_.train.detach_error ? e_n.detach() : e_n);
                    errors.push_back(cfg_.train.detach_error ? e_a.detach() : e_a);
                    masks.insert(masks.end(), size * size, Scalar{0});
                    for (auto v : anomalies[b].mask.values) masks.push_back(v ? Scalar{1} : Scalar{0});
                }
            }
            Tensor l_rec = mean(stack(rec_terms));
            Tensor zero(Shape{}, Scalar{0});
            Tensor l_res = cfg_.train.restoration ? mean(stack(res_terms)) : zero;
            Tensor l_seg = zero;
            if (refiner) {
                Tensor maps = model_.refine(stack(errors), size, size).map;
                l_seg = mean_dice_loss(maps, Tensor({errors.size(), size, size}, std::move(masks)));
            }
            total_slot = refiner ? total_loss(l_rec, l_res, l_seg, cfg_.train.lambda) : add(l_rec, l_res);
            report = make_report(l_rec, l_res, l_seg, *total_slot, cfg_.train.lambda);
        } catch (const NumericError&) {
            dump_batch(batch, anomalies, report);
            throw;
        }
        Tensor& total = *total_slot;
        if (!std::isfinite(report.total)) {
            dump_batch(batch, anomalies, report);
            throw NumericError("non-finite loss at step " + std::to_string(step_) + " (l_rec=" + std::to_string(report.l_rec) +
                               " l_res=" + std::to_string(report.l_res) + " l_seg=" + std::to_string(report.l_seg) + ")");
        }
        optimizer_.zero_grad();
        total.backward();
        std::vector<Tensor> params = model_.parameters();
        if (cfg_.train.grad_clip > 0) clip_grad_norm(params, cfg_.train.grad_clip);
        optimizer_.step(lr_at(epoch_, cfg_.train));
        total.drop_graph();
        ++step_;
        return report;
    }

    // One pass over every training image in shuffled order.
    std::vector<LossReport> train_epoch() {
        std::vector<TrainSample> order;
        for (std::size_t k = 0; k < features_.size(); ++k)
            for (std::size_t i = 0; i < features_[k].size(); ++i) order.push_back({k, i});
        std::shuffle(order.begin(), order.end(), rng_);
        std::vector<LossReport> reports;
        for (std::size_t at = 0; at < order.size(); at += cfg_.train.batch_size) {
            std::vector<TrainSample> batch(order.begin() + static_cast<std::ptrdiff_t>(at),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), at + cfg_.train.batch_size)));
            reports.push_back(train_step(batch));
        }
        ++epoch_;
        return reports;
    }

    PromptPool build_pool() const { return build_prompt_pool(index_, extractor_, cfg_.train.seed); }

    MetricSet evaluate_now(std::map<std::string, MetricSet>* per_class = nullptr) {
        PromptPool pool = build_pool();
        Scorer scorer(model_, pool, cfg_.alpha, cfg_.smoothing_sigma);
        EvaluationReport r = evaluate(score_split(index_, extractor_, scorer));
        if (per_class) *per_class = r.per_class;
        return r.mean;
    }

    // ---- checkpoints -------------------------------------------------------------

    TensorArchive checkpoint(const PromptPool& pool) const {
        TensorArchive a;
        auto put = [&](const std::string& name, const Shape& shape, std::span<const Scalar> values) {
            std::vector<std::uint32_t> dims(shape.begin(), shape.end());
            a.put_tensor(name, std::move(dims), std::vector<float>(values.begin(), values.end()));
        };
        const auto& names = model_.named_parameters();
        for (const auto& [name, t] : names) put("param/" + name, t.shape(), t.data());
        for (const auto& [name, t] : model_.named_buffers()) put("buffer/" + name, t.shape(), t.data());
        const AdamWState& st = optimizer_.state();
        for (std::size_t k = 0; k < st.first_moment.size(); ++k) {
            put("adam/m/" + names[k].first, names[k].second.shape(), st.first_moment[k]);
            put("adam/v/" + names[k].first, names[k].second.shape(), st.second_moment[k]);
        }
        nlohmann::json meta;
        meta["format"] = "onenip-checkpoint";
        meta["epoch"] = epoch_;
        meta["step"] = step_;
        meta["adam_step"] = st.step;
        meta["rng"] = rng_state(rng_);
        meta["config"] = serialize_config(cfg_);
        meta["backbone_checksum"] = extractor_.checksum();
        nlohmann::json entries = nlohmann::json::array();
        for (std::size_t k = 0; k < pool.entries.size(); ++k) {
            const PoolEntry& e = pool.entries[k];
            entries.push_back({{"class_id", e.class_id}, {"class_name", e.class_name}, {"image_id", e.image_id}});
            put("pool/" + std::to_string(k), e.prompt.values.shape(), e.prompt.values.data());
        }
        meta["pool"] = entries;
        a.put_blob("meta", meta.dump());
        return a;
    }

    void save_checkpoint(const fs::path& path) const { checkpoint(build_pool()).save(path); }

    // Restores parameters, buffers, optimizer moments, counters and the random stream.
    void restore(const TensorArchive& a) {
        const nlohmann::json meta = checkpoint_meta(a);
        restore_model(model_, a);
        const auto& names = model_.named_parameters();
        AdamWState& st = optimizer_.state();
        st = AdamWState{};
        st.step = meta.at("adam_step").get<std::int64_t>();
        if (a.contains("adam/m/" + names.front().first)) {
            for (const auto& [name, t] : names) {
                st.first_moment.push_back(archive_values(a, "adam/m/" + name, t.numel()));
                st.second_moment.push_back(archive_values(a, "adam/v/" + name, t.numel()));
            }
        }
        epoch_ = meta.at("epoch").get<std::size_t>();
        step_ = meta.at("step").get<std::size_t>();
        set_rng_state(rng_, meta.at("rng").get<std::string>());
    }

    static nlohmann::json checkpoint_meta(const TensorArchive& a) {
        if (!a.contains("meta")) throw FormatError("checkpoint has no meta entry", 0);
        nlohmann::json meta;
        try {
            meta = nlohmann::json::parse(a.get("meta").blob);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("checkpoint meta is not valid JSON: ") + e.what(), 0);
        }
        if (meta.value("format", "") != "onenip-checkpoint") throw FormatError("not an onenip checkpoint", 0);
        return meta;
    }

    static std::vector<Scalar> archive_values(const TensorArchive& a, const std::string& name, std::size_t numel) {
        const auto& e = a.get(name);
        if (e.is_blob || e.values.size() != numel)
            throw FormatError("checkpoint entry '" + name + "' has " + std::to_string(e.values.size()) + " values, expected " +
                              std::to_string(numel),
                              0);
        return {e.values.begin(), e.values.end()};
    }

    static void restore_model(OneNipModel& model, const TensorArchive& a) {
        auto load_into = [&](const std::string& key, Tensor t) {
            auto v = archive_values(a, key, t.numel());
            std::copy(v.begin(), v.end(), t.mutable_data().begin());
        };
        for (const auto& [name, t] : model.named_parameters()) load_into("param/" + name, t);
        for (const auto& [name, t] : model.named_buffers()) load_into("buffer/" + name, t);
    }

private:
    void dump_batch(const std::vector<TrainSample>& batch, const std::vector<AnomalySample>& anomalies,
                    const LossReport& r) const {
        if (dump_dir_.empty()) return;
        const fs::path dir = dump_dir_ / ("nonfinite_step" + std::to_string(step_));
        fs::create_directories(dir);
        nlohmann::json j;
        j["step"] = step_;
        j["epoch"] = epoch_;
        j["losses"] = {{"l_rec", r.l_rec}, {"l_res", r.l_res}, {"l_seg", r.l_seg}, {"total", r.total}};
        for (std::size_t b = 0; b < batch.size(); ++b) {
            j["samples"].push_back({{"class", index_.classes[batch[b].class_id].name},
                                    {"image", index_.classes[batch[b].class_id].train[batch[b].image_id].string()}});
            if (b < anomalies.size()) {
                save_png(dir / ("anomalous_" + std::to_string(b) + ".png"), anomalies[b].image);
                save_mask_png(dir / ("mask_" + std::to_string(b) + ".png"), anomalies[b].mask);
            }
        }
        std::ofstream(dir / "batch.json") << j.dump(2) << "\n";
    }

    RunConfig cfg_;
    DatasetIndex index_;
    FeatureExtractor extractor_;
    OneNipModel model_;
    AdamW optimizer_;
    Rng rng_;
    std::size_t epoch_ = 0, step_ = 0;
    std::vector<std::vector<Image>> images_;
    std::vector<std::vector<FeatureMap>> features_;
    fs::path dump_dir_;
    Synthesizer synthesizer_;
};

// A checkpoint opened for scoring: config, model weights and the prompt pool.
struct LoadedCheckpoint {
    RunConfig config;
    std::unique_ptr<OneNipModel> model;
    PromptPool pool;
    std::size_t epoch = 0;
};

inline LoadedCheckpoint load_checkpoint(const fs::path& path) {
    const TensorArchive a = TensorArchive::load(path);
    const nlohmann::json meta = Trainer::checkpoint_meta(a);
    LoadedCheckpoint out;
    out.config = parse_config_text(meta.at("config").get<std::string>());
    out.model = std::make_unique<OneNipModel>(out.config.model, 0);
    Trainer::restore_model(*out.model, a);
    out.epoch = meta.at("epoch").get<std::size_t>();
    const auto& entries = meta.at("pool");
    for (std::size_t k = 0; k < entries.size(); ++k) {
        const auto& e = a.get("pool/" + std::to_string(k));
        Shape shape(e.dims.begin(), e.dims.end());
        Tensor t(shape, std::vector<Scalar>(e.values.begin(), e.values.end()));
        out.pool.entries.push_back(make_pool_entry(entries[k].at("class_id").get<std::size_t>(),
                                                   entries[k].at("class_name").get<std::string>(),
                                                   entries[k].at("image_id").get<std::size_t>(), FeatureMap(t)));
    }
    return out;
}

// Runs the configured number of epochs, appending to `<out>/train_log.csv`
// (and `<out>/metrics.csv` every eval_interval epochs), then writes
// `<out>/checkpoint.onip`.
struct FitOptions {
    bool verbose = true;
};

inline void fit(Trainer& trainer, const fs::path& out_dir, const FitOptions& opt = {}) {
    fs::create_directories(out_dir);
    trainer.set_dump_dir(out_dir);
    const auto& cfg = trainer.config();
    const bool fresh = trainer.epoch() == 0;
    std::ofstream log(out_dir / "train_log.csv", fresh ? std::ios::trunc : std::ios::app);
    if (fresh) log << kLogHeader << "\n";
    std::ofstream metrics;
    if (cfg.train.eval_interval > 0) {
        metrics.open(out_dir / "metrics.csv", fresh ? std::ios::trunc : std::ios::app);
        if (fresh) metrics << "epoch,i_roc,i_pr,p_roc,p_pr\n";
    }
    for (std::size_t e = trainer.epoch(); e < cfg.train.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at(e, cfg.train);
        const std::size_t first_step = trainer.step();
        const auto reports = trainer.train_epoch();
        double mean_total = 0;
        for (std::size_t k = 0; k < reports.size(); ++k) {
            log << format_log_row(first_step + k, e, reports[k], lr) << "\n";
            mean_total += reports[k].total / static_cast<double>(reports.size());
        }
        log.flush();
        if (cfg.train.eval_interval > 0 && (e + 1) % cfg.train.eval_interval == 0) {
            MetricSet m = trainer.evaluate_now();
            char buf[160];
            std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f", e + 1, m.i_roc, m.i_pr, m.p_roc, m.p_pr);
            metrics << buf << "\n";
            metrics.flush();
        }
        if (opt.verbose) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::fprintf(stderr, "epoch %zu/%zu  loss %.5f  lr %.2g  %.1fs\n", e + 1, cfg.train.epochs, mean_total, lr, secs);
        }
    }
    trainer.save_checkpoint(out_dir / "checkpoint.onip");
}

}  // namespace onenip
