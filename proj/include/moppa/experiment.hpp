// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration files. The format is JSON (comments allowed) with
// four sections:
//
//   {
//     "model":   {"width": 8, "height": 8, "channels": 96, "heads": 4, "depth": 4, "seed": 0},
//     "adapter": {"kind": "both", "rank": 0, "w": 0.1, "eta": 0.001},
//     "train":   {"iterations": 5000, "lr": 0.002, "metric_every": 100,
//                 "seeds": [1, 2, 3, 4, 5], "weight_decay": 0.0, "warmup": 0},
//     "output":  {"directory": "out", "formats": ["csv"]}
//   }
//
// Every key is optional and defaults to the values above; unknown keys are errors.

#pragma once

#include "moppa/training.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace moppa {

struct ExperimentConfig {
    ModelConfig model;
    std::string adapter_kind = "both";  // moppa, lora or both
    Index lora_rank = 0;
    double w = 0.1;
    long iterations = 5000;
    double lr = 0.002;
    long metric_every = 100;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    double weight_decay = 0.0;
    long warmup = 0;
    std::string output_directory = "out";
    std::vector<std::string> formats{"csv"};

    std::vector<AdapterKind> adapter_kinds() const {
        if (adapter_kind == "moppa") return {AdapterKind::moppa};
        if (adapter_kind == "lora") return {AdapterKind::lora};
        return {AdapterKind::moppa, AdapterKind::lora};
    }

    /// Training settings for one run of `kind` with trial seed `seed`.
    TrainConfig train_config(AdapterKind kind, std::uint64_t seed) const {
        TrainConfig t;
        t.model = model;
        t.model.adapter = kind;
        t.model.lora_rank = lora_rank;
        t.w = w;
        t.iterations = iterations;
        t.lr = lr;
        t.weight_decay = weight_decay;
        t.metric_every = metric_every;
        t.warmup = warmup;
        t.seed = seed;
        return t;
    }

    void validate() const {
        if (model.width < 1 || model.height < 1) {
            throw ConfigError("model.width and model.height must be >= 1 (got " + std::to_string(model.width) + "x" +
                              std::to_string(model.height) + ")");
        }
        if (model.channels < 1) throw ConfigError("model.channels must be >= 1");
        if (model.heads < 1) throw ConfigError("model.heads must be >= 1");
        if (model.channels % model.heads != 0) {
            throw ConfigError("model.heads (" + std::to_string(model.heads) + ") must divide model.channels (" +
                              std::to_string(model.channels) + ")");
        }
        if (model.depth < 1) throw ConfigError("model.depth must be >= 1");
        if (adapter_kind != "moppa" && adapter_kind != "lora" && adapter_kind != "both") {
            throw ConfigError("adapter.kind must be one of moppa, lora, both (got '" + adapter_kind + "')");
        }
        if (lora_rank < 0 || lora_rank >= model.channels) {
            throw ConfigError("adapter.rank must be 0 (match budget) or in [1, channels - 1]");
        }
        if (!(w >= 0.0)) throw ConfigError("adapter.w must be >= 0 (got " + std::to_string(w) + ")");
        if (!(model.eta > 0.0)) throw ConfigError("adapter.eta must be > 0");
        if (iterations < 1) throw ConfigError("train.iterations must be >= 1");
        if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
        if (metric_every < 1) throw ConfigError("train.metric_every must be >= 1");
        if (seeds.empty()) throw ConfigError("train.seeds must list at least one seed");
        if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay must be >= 0");
        if (warmup < 0) throw ConfigError("train.warmup must be >= 0");
        if (output_directory.empty()) throw ConfigError("output.directory must not be empty");
        for (const auto& f : formats)
            if (f != "csv") throw ConfigError("output.formats: unsupported format '" + f + "' (only csv)");
    }
};

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& section, const std::string& name, const std::set<std::string>& allowed) {
    if (!section.is_object()) throw ConfigError("section '" + name + "' must be an object");
    for (const auto& [key, _] : section.items()) {
        if (!allowed.contains(key)) throw ConfigError("unknown key '" + name + "." + key + "'");
    }
}

template <class T>
void read(const json& section, const std::string& section_name, const char* key, T& out) {
    if (!section.contains(key)) return;
    const json& v = section.at(key);
    try {
        if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError("");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.get<long long>() < 0) throw ConfigError("");
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError("");
        }
        out = v.get<T>();
    } catch (const std::exception&) {
        throw ConfigError("'" + section_name + "." + key + "' has the wrong type: " + v.dump());
    }
}

}  // namespace detail

/// Parses configuration text. Syntax errors carry the line and column.
inline ExperimentConfig parse_experiment_config(const std::string& text, const std::string& origin = "<config>") {
    using detail::json;
    json root;
    try {
        root = json::parse(text, nullptr, true, true);
    } catch (const json::parse_error& e) {
        std::string what = e.what();
        const auto pos = what.find("parse error");
        throw ConfigError(origin + ": " + (pos == std::string::npos ? what : what.substr(pos)));
    }
    detail::reject_unknown(root, "<root>", {"model", "adapter", "train", "output"});

    ExperimentConfig c;
    if (root.contains("model")) {
        const json& m = root["model"];
        detail::reject_unknown(m, "model", {"width", "height", "channels", "heads", "depth", "seed"});
        detail::read(m, "model", "width", c.model.width);
        detail::read(m, "model", "height", c.model.height);
        detail::read(m, "model", "channels", c.model.channels);
        detail::read(m, "model", "heads", c.model.heads);
        detail::read(m, "model", "depth", c.model.depth);
        detail::read(m, "model", "seed", c.model.seed);
    }
    if (root.contains("adapter")) {
        const json& a = root["adapter"];
        detail::reject_unknown(a, "adapter", {"kind", "rank", "w", "eta"});
        detail::read(a, "adapter", "kind", c.adapter_kind);
        detail::read(a, "adapter", "rank", c.lora_rank);
        detail::read(a, "adapter", "w", c.w);
        detail::read(a, "adapter", "eta", c.model.eta);
    }
    if (root.contains("train")) {
        const json& t = root["train"];
        detail::reject_unknown(t, "train", {"iterations", "lr", "metric_every", "seeds", "weight_decay", "warmup"});
        detail::read(t, "train", "iterations", c.iterations);
        detail::read(t, "train", "lr", c.lr);
        detail::read(t, "train", "metric_every", c.metric_every);
        detail::read(t, "train", "weight_decay", c.weight_decay);
        detail::read(t, "train", "warmup", c.warmup);
        if (t.contains("seeds")) {
            const json& s = t["seeds"];
            if (!s.is_array()) throw ConfigError("'train.seeds' must be an array of non-negative integers");
            c.seeds.clear();
            for (const json& v : s) {
                if (!v.is_number_integer() || v.get<long long>() < 0) {
                    throw ConfigError("'train.seeds' must contain non-negative integers, got " + v.dump());
                }
                c.seeds.push_back(v.get<std::uint64_t>());
            }
        }
    }
    if (root.contains("output")) {
        const json& o = root["output"];
        detail::reject_unknown(o, "output", {"directory", "formats"});
        detail::read(o, "output", "directory", c.output_directory);
        detail::read(o, "output", "formats", c.formats);
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_experiment_config(ss.str(), path);
}

}  // namespace moppa
