#pragma once

// Flat key=value run configuration, one entry per line, '#' starts a comment.
// Every key has a default except the dataset root.

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "onenip/dataset.hpp"
#include "onenip/features.hpp"
#include "onenip/model.hpp"
#include "onenip/synthesis.hpp"

namespace onenip {

struct TrainConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    std::size_t lr_drop_epoch = 80;
    double lr_drop_factor = 0.1;
    double weight_decay = 1e-4;
    double lambda = 0.5;
    PromptMode prompt_mode = PromptMode::random;
    bool prompt_exclude_self = false;
    bool restoration = true;
    bool detach_error = true;  // the refiner sees E as a constant; L_seg trains the refiner only
    double grad_clip = 1.0;
    std::size_t eval_interval = 0;  // epochs between metric evaluations, 0 = only at the end
    std::uint64_t seed = 0;
};

struct RunConfig {
    std::string data_root;
    std::size_t image_size = 32;
    BackboneSpec backbone;
    ModelConfig model = desk_model();
    TrainConfig train;
    SynthesisParams synthesis;
    double alpha = 0.5;
    double smoothing_sigma = 0;  // Gaussian smoothing of the final score map, 0 = off

    static ModelConfig desk_model() {
        ModelConfig m;
        m.num_encoder_layers = 2;
        m.num_decoder_layers = 2;
        m.num_heads = 8;
        m.model_dim = 120;
        m.refiner_channels = 32;
        m.grid_h = m.grid_w = 8;
        return m;
    }

    // Derived fields follow the backbone.
    void sync() {
        model.model_dim = backbone.channels();
        model.grid_h = backbone.fusion_h;
        model.grid_w = backbone.fusion_w;
    }

    void validate() const {
        model.validate();
        synthesis.validate();
        if (image_size < 16 || image_size % 16) throw ConfigError("image_size must be a positive multiple of 16");
        if (train.batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (train.epochs > 0 && train.lr_drop_epoch >= train.epochs)
            throw ConfigError("lr_drop_epoch (" + std::to_string(train.lr_drop_epoch) + ") must be < epochs (" +
                              std::to_string(train.epochs) + ")");
        if (!(train.lr > 0)) throw ConfigError("lr must be > 0");
        if (!(train.lambda > 0)) throw ConfigError("lambda must be > 0");
        if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must lie in [0, 1]");
        if (smoothing_sigma < 0) throw ConfigError("smoothing_sigma must be >= 0");
        if (backbone.kind == BackboneKind::feature_file && (train.restoration || model.refiner_enabled))
            throw ConfigError("feature-file backbones support reconstruction only: set restoration=false and refiner=false");
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
    T v{};
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError("bad value '" + text + "' for key " + key);
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "on") return true;
    if (text == "false" || text == "0" || text == "off") return false;
    throw ConfigError("bad boolean '" + text + "' for key " + key);
}

template <class Map>
auto parse_enum(const std::string& key, const std::string& text, const Map& options) {
    auto it = options.find(text);
    if (it == options.end()) throw ConfigError("bad value '" + text + "' for key " + key);
    return it->second;
}

inline std::string join(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

// Binds every key to a field; the same table drives parsing and serialization.
class ConfigSchema {
public:
    using Setter = std::function<void(RunConfig&, const std::string&)>;
    using Getter = std::function<std::string(const RunConfig&)>;

    static const ConfigSchema& instance() {
        static const ConfigSchema schema;
        return schema;
    }

    void set(RunConfig& cfg, const std::string& key, const std::string& value) const {
        auto it = entries_.find(key);
        if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second.first(cfg, value);
    }

    std::string serialize(const RunConfig& cfg) const {
        std::string out;
        for (const auto& key : order_) out += key + "=" + entries_.at(key).second(cfg) + "\n";
        return out;
    }

    const std::vector<std::string>& keys() const { return order_; }

private:
    ConfigSchema() {
        using namespace detail;
        add("data_root", [](RunConfig& c, const std::string& v) { c.data_root = v; },
            [](const RunConfig& c) { return c.data_root; });
        add_size("image_size", [](RunConfig& c) -> std::size_t& { return c.image_size; });
        add("backbone",
            [](RunConfig& c, const std::string& v) {
                c.backbone.kind = parse_enum("backbone", v,
                                             std::map<std::string, BackboneKind>{{"builtin-mini-cnn", BackboneKind::builtin_mini_cnn},
                                                                                 {"feature-file", BackboneKind::feature_file}});
            },
            [](const RunConfig& c) {
                return std::string(c.backbone.kind == BackboneKind::builtin_mini_cnn ? "builtin-mini-cnn" : "feature-file");
            });
        add("stage_channels",
            [](RunConfig& c, const std::string& v) {
                c.backbone.stage_channels.clear();
                std::stringstream ss(v);
                std::string item;
                while (std::getline(ss, item, ','))
                    c.backbone.stage_channels.push_back(parse_number<std::size_t>("stage_channels", trim(item)));
                if (c.backbone.stage_channels.empty()) throw ConfigError("stage_channels is empty");
            },
            [](const RunConfig& c) { return join(c.backbone.stage_channels); });
        add("fusion_size",
            [](RunConfig& c, const std::string& v) {
                c.backbone.fusion_h = c.backbone.fusion_w = parse_number<std::size_t>("fusion_size", v);
            },
            [](const RunConfig& c) { return std::to_string(c.backbone.fusion_h); });
        add("backbone_seed", [](RunConfig& c, const std::string& v) { c.backbone.seed = parse_number<std::uint64_t>("backbone_seed", v); },
            [](const RunConfig& c) { return std::to_string(c.backbone.seed); });

        add_size("encoder_layers", [](RunConfig& c) -> std::size_t& { return c.model.num_encoder_layers; });
        add_size("decoder_layers", [](RunConfig& c) -> std::size_t& { return c.model.num_decoder_layers; });
        add_size("heads", [](RunConfig& c) -> std::size_t& { return c.model.num_heads; });
        add_size("mlp_hidden", [](RunConfig& c) -> std::size_t& { return c.model.mlp_hidden; });
        add_double("dropout", [](RunConfig& c) -> double& { return c.model.dropout; });
        add("decoder",
            [](RunConfig& c, const std::string& v) {
                c.model.decoder_variant = parse_enum("decoder", v,
                                                     std::map<std::string, DecoderVariant>{{"lqd", DecoderVariant::lqd},
                                                                                           {"unidirectional", DecoderVariant::unidirectional},
                                                                                           {"bidirectional", DecoderVariant::bidirectional}});
            },
            [](const RunConfig& c) { return std::string(to_string(c.model.decoder_variant)); });
        add_bool("nma", [](RunConfig& c) -> bool& { return c.model.nma_enabled; });
        add_size("nma_radius", [](RunConfig& c) -> std::size_t& { return c.model.nma_radius; });
        add_bool("refiner", [](RunConfig& c) -> bool& { return c.model.refiner_enabled; });
        add_size("refiner_blocks", [](RunConfig& c) -> std::size_t& { return c.model.refiner_blocks; });
        add_size("refiner_channels", [](RunConfig& c) -> std::size_t& { return c.model.refiner_channels; });
        add("final_query",
            [](RunConfig& c, const std::string& v) {
                c.model.final_query = parse_enum("final_query", v,
                                                 std::map<std::string, FinalQuery>{{"prompt", FinalQuery::prompt},
                                                                                   {"target", FinalQuery::target}});
            },
            [](const RunConfig& c) { return std::string(c.model.final_query == FinalQuery::prompt ? "prompt" : "target"); });

        add_size("epochs", [](RunConfig& c) -> std::size_t& { return c.train.epochs; });
        add_size("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
        add_double("lr", [](RunConfig& c) -> double& { return c.train.lr; });
        add_size("lr_drop_epoch", [](RunConfig& c) -> std::size_t& { return c.train.lr_drop_epoch; });
        add_double("lr_drop_factor", [](RunConfig& c) -> double& { return c.train.lr_drop_factor; });
        add_double("weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
        add_double("lambda", [](RunConfig& c) -> double& { return c.train.lambda; });
        add("prompt_mode",
            [](RunConfig& c, const std::string& v) {
                c.train.prompt_mode = parse_enum("prompt_mode", v,
                                                 std::map<std::string, PromptMode>{{"random", PromptMode::random},
                                                                                   {"fixed", PromptMode::fixed}});
            },
            [](const RunConfig& c) { return std::string(c.train.prompt_mode == PromptMode::random ? "random" : "fixed"); });
        add_bool("prompt_exclude_self", [](RunConfig& c) -> bool& { return c.train.prompt_exclude_self; });
        add_bool("restoration", [](RunConfig& c) -> bool& { return c.train.restoration; });
        add_bool("detach_error", [](RunConfig& c) -> bool& { return c.train.detach_error; });
        add_double("grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });
        add_size("eval_interval", [](RunConfig& c) -> std::size_t& { return c.train.eval_interval; });
        add("seed", [](RunConfig& c, const std::string& v) { c.train.seed = parse_number<std::uint64_t>("seed", v); },
            [](const RunConfig& c) { return std::to_string(c.train.seed); });

        add_double("area_lo", [](RunConfig& c) -> double& { return c.synthesis.area_lo; });
        add_double("area_hi", [](RunConfig& c) -> double& { return c.synthesis.area_hi; });
        add_double("aspect_lo", [](RunConfig& c) -> double& { return c.synthesis.aspect_lo; });
        add_double("aspect_hi", [](RunConfig& c) -> double& { return c.synthesis.aspect_hi; });
        add("perlin_octaves",
            [](RunConfig& c, const std::string& v) { c.synthesis.perlin_octaves = parse_number<int>("perlin_octaves", v); },
            [](const RunConfig& c) { return std::to_string(c.synthesis.perlin_octaves); });
        add_double("perlin_threshold", [](RunConfig& c) -> double& { return c.synthesis.perlin_threshold; });
        add_double("opacity_lo", [](RunConfig& c) -> double& { return c.synthesis.opacity_lo; });
        add_double("opacity_hi", [](RunConfig& c) -> double& { return c.synthesis.opacity_hi; });
        add_double("cutpaste_probability", [](RunConfig& c) -> double& { return c.synthesis.method_probability; });

        add_double("alpha", [](RunConfig& c) -> double& { return c.alpha; });
        add_double("smoothing_sigma", [](RunConfig& c) -> double& { return c.smoothing_sigma; });
    }

    void add(const std::string& key, Setter set, Getter get) {
        entries_[key] = {std::move(set), std::move(get)};
        order_.push_back(key);
    }
    void add_size(const std::string& key, std::size_t& (*field)(RunConfig&)) {
        add(key, [key, field](RunConfig& c, const std::string& v) { field(c) = detail::parse_number<std::size_t>(key, v); },
            [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); });
    }
    void add_double(const std::string& key, double& (*field)(RunConfig&)) {
        add(key, [key, field](RunConfig& c, const std::string& v) { field(c) = detail::parse_number<double>(key, v); },
            [field](const RunConfig& c) { return detail::fmt(field(const_cast<RunConfig&>(c))); });
    }
    void add_bool(const std::string& key, bool& (*field)(RunConfig&)) {
        add(key, [key, field](RunConfig& c, const std::string& v) { field(c) = detail::parse_bool(key, v); },
            [field](const RunConfig& c) { return std::string(field(const_cast<RunConfig&>(c)) ? "true" : "false"); });
    }

    std::map<std::string, std::pair<Setter, Getter>> entries_;
    std::vector<std::string> order_;
};

// Applies key=value lines on top of `base`.
inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
        ConfigSchema::instance().set(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    base.sync();
    base.validate();
    return base;
}

inline RunConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

inline std::string serialize_config(const RunConfig& cfg) { return ConfigSchema::instance().serialize(cfg); }

}  // namespace onenip
