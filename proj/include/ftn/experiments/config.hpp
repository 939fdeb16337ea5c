#pragma once

// Experiment configuration: a JSON document merged over per-experiment
// defaults. Unknown keys are rejected so typos fail loudly; the resolved
// document is written next to every run's results.

#include "ftn/error.hpp"
#include "ftn/network.hpp"
#include "ftn/optim.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace ftn::exp {

using nlohmann::json;

inline constexpr const char* kDataRootEnv = "FTN_DATA_ROOT";

inline const std::vector<std::string>& experiment_kinds() {
    static const std::vector<std::string> kinds{"approx", "classify", "analyze_locations", "analyze_response"};
    return kinds;
}

/// Defaults for one experiment kind. Every accepted key appears here.
inline json default_config(const std::string& kind) {
    json c;
    c["experiment"] = kind;
    c["seed"] = 1;
    c["output_dir"] = "runs/" + kind;
    if (kind == "approx") {
        c["approx"] = {
            {"target", "max"},
            {"lengths", {4, 9, 16}},
            {"modulation", "relu"},
            {"train_regimes", {"T1", "T2", "T3"}},
            {"batch_size", 128},
            {"batches_per_epoch", 10000},
            {"validation_batches", 3000},
            {"test_batches", 10000},
            {"max_epochs", 50},
            {"restarts", 1},
        };
        c["optimizer"] = {{"lr", 0.1},
                          {"momentum", 0.9},
                          {"clip_norm", 1.0},
                          {"schedule", {{"kind", "plateau"}, {"patience", 1}, {"factor", 0.1}, {"min_lr", 1e-6}}}};
    } else if (kind == "classify") {
        c["classify"] = {
            {"dataset", "cifar10"},
            {"data_root", ""},
            {"train_subset", 5000},
            {"test_subset", 1000},
            {"iterations", 15000},
            {"batch_size", 100},
            {"eval_every", 1000},
            {"zca_lambda", 0.1},
            {"augment", true},
            {"shuffle_labels", false},
            {"whitening_cache", ""},
        };
        c["network"] = {{"preset", "conv_n"}, {"width", 8}, {"pool", "lstm"}, {"sharing", "per_layer"}, {"spec", nullptr}};
        c["optimizer"] = {{"lr", 0.01},
                          {"momentum", 0.9},
                          {"clip_norm", 10.0},
                          {"schedule", {{"kind", "step"}, {"milestones", {6000, 11000}}, {"factor", 0.1}}}};
    } else if (kind == "analyze_locations") {
        c["analysis"] = {
            {"checkpoint", ""},
            {"layer", -1},
            {"n_patches", 5000},
            {"images", "cifar"},
            {"dataset", "cifar10"},
            {"data_root", ""},
            {"train_subset", 5000},
            {"whitening_cache", ""},
            {"zca_lambda", 0.1},
        };
    } else if (kind == "analyze_response") {
        c["analysis"] = {
            {"checkpoint", ""},
            {"params", nullptr},
            {"modulation", "relu"},
            {"region_size", 2},
            {"n", 1000},
            {"fixed_max", 1.5},
        };
    } else {
        throw ConfigError("unknown experiment kind '" + kind + "'");
    }
    return c;
}

namespace detail {

/// Keys whose value may be any JSON (not checked against defaults).
inline bool free_form(const std::string& path) {
    return path == "network.spec" || path == "analysis.params" || path == "optimizer.schedule";
}

inline void merge_strict(json& base, const json& patch, const std::string& prefix) {
    if (!patch.is_object()) throw ConfigError("config: '" + (prefix.empty() ? "<root>" : prefix) + "' must be an object");
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + path + "'");
        auto& dst = base[it.key()];
        if (dst.is_object() && !free_form(path)) {
            merge_strict(dst, it.value(), path);
        } else {
            dst = it.value();
        }
    }
}

inline json parse_scalar(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
        return text; // bare strings need no quotes on the command line
    }
}

} // namespace detail

/// Applies a `dotted.key=value` override; the value is parsed as JSON when
/// possible, otherwise taken as a string.
inline void apply_override(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    const std::string path = assignment.substr(0, eq);
    json* node = &cfg;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(key)) throw ConfigError("override: unknown key '" + path + "'");
        node = &(*node)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    *node = detail::parse_scalar(assignment.substr(eq + 1));
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError(path.string() + ": cannot open config");
    try {
        return json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

/// Resolves defaults <- document <- overrides for `kind`. A document naming
/// a different experiment is rejected.
inline json resolve_config(const std::string& kind, const json& document, const std::vector<std::string>& overrides) {
    json cfg = default_config(kind);
    if (!document.is_null()) {
        if (document.contains("experiment") && document["experiment"] != kind) {
            throw ConfigError("config: document is for experiment '" + document["experiment"].dump() + "', not '" +
                              kind + "'");
        }
        detail::merge_strict(cfg, document, "");
    }
    for (const auto& o : overrides) apply_override(cfg, o);
    return cfg;
}

/// Typed read with the dotted path in the error message.
template <typename V>
V get(const json& cfg, const std::string& path) {
    const json* node = &cfg;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object() || !node->contains(key)) throw ConfigError("config: missing key '" + path + "'");
        node = &(*node)[key];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    try {
        return node->get<V>();
    } catch (const json::exception&) {
        throw ConfigError("config: '" + path + "' has the wrong type (" + node->dump() + ")");
    }
}

inline LrSchedule schedule_from_json(const json& s) {
    const auto kind = s.value("kind", std::string("constant"));
    try {
        if (kind == "step") {
            return StepSchedule{s.at("milestones").get<std::vector<std::int64_t>>(), s.value("factor", 0.1)};
        }
        if (kind == "plateau") {
            return PlateauSchedule{s.value("patience", 1), s.value("factor", 0.1), s.value("min_lr", 1e-6)};
        }
        if (kind == "constant") return ConstantSchedule{};
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: optimizer.schedule: ") + e.what());
    }
    throw ConfigError("config: unknown schedule kind '" + kind + "'");
}

inline std::optional<double> clip_from_json(const json& cfg) {
    const auto& c = cfg.at("optimizer").at("clip_norm");
    if (c.is_null()) return std::nullopt;
    const double v = get<double>(cfg, "optimizer.clip_norm");
    if (!(v > 0)) throw ConfigError("config: optimizer.clip_norm must be positive or null");
    return v;
}

/// Network for a classify run: an inline spec, or a preset.
inline NetworkSpec network_from_config(const json& cfg, std::size_t classes) {
    const auto& n = cfg.at("network");
    if (!n.at("spec").is_null()) return network_spec_from_json(n.at("spec"));
    const auto preset = get<std::string>(cfg, "network.preset");
    const auto pool = parse_pool_kind(get<std::string>(cfg, "network.pool"));
    const auto sharing = parse_pool_sharing(get<std::string>(cfg, "network.sharing"));
    if (preset == "conv_n") return conv_n_preset(get<std::size_t>(cfg, "network.width"), pool, sharing, classes);
    if (preset == "vgg16") return vgg16_preset(get<double>(cfg, "network.width"), pool, sharing, classes);
    throw ConfigError("config: unknown network preset '" + preset + "'");
}

/// Dataset root: the environment variable wins over the config value.
inline std::filesystem::path data_root(const std::string& configured) {
    if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
    if (configured.empty()) {
        throw IoError(std::string("dataset root not set (config data_root or ") + kDataRootEnv + ")");
    }
    return configured;
}

} // namespace ftn::exp
