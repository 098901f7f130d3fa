#pragma once

// Nested JSON run configuration shared by all CLI subcommands. Unknown keys
// are rejected so typos fail loudly; every field has a documented default.

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "spvit/errors.hpp"
#include "spvit/model.hpp"
#include "spvit/pipeline.hpp"
#include "spvit/search.hpp"

namespace spvit {

struct DataConfig {
    std::string source = "synthetic";  // "synthetic" | "raw"
    std::size_t n_train = 1024;
    std::size_t n_val = 512;
    std::string image_dir;
    std::size_t true_stamps = 12;
    std::size_t distractor_stamps = 5;
};

struct FinetuneRunConfig {
    std::string checkpoint;          // input model; empty means fresh dense init
    std::string descriptor;          // descriptor JSON; empty keeps the model dense
    std::string teacher_checkpoint;  // optional distillation teacher
    std::size_t epochs = 13;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    double weight_decay = 0.01;
    double lambda_dist = 1.0;
};

struct RunConfig {
    ModelConfig model;
    DataConfig data;
    SearchConfig search;
    std::string search_init_checkpoint;
    FinetuneRunConfig finetune;
    std::string eval_checkpoint;
    std::string report_checkpoint;
    std::uint64_t seed = 42;
    std::string out_dir = "out";

    SyntheticTask task() const {
        SyntheticTask t;
        t.n_classes = model.n_classes;
        t.image_size = model.image_size;
        t.channels = model.channels;
        t.n_train = data.n_train;
        t.n_val = data.n_val;
        t.seed = derive_seed(seed, "data");
        t.true_stamps = data.true_stamps;
        t.distractor_stamps = data.distractor_stamps;
        return t;
    }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                           const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (allowed.count(key) == 0) throw ConfigError("unknown key '" + where + "." + key + "'");
    }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& dst) {
    if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(
        j, {"model", "data", "search", "finetune", "eval", "report", "seed", "out_dir"}, "config");
    RunConfig c;
    if (j.contains("model")) {
        const nlohmann::json& m = j.at("model");
        detail::reject_unknown(m,
                               {"image_size", "patch_size", "channels", "n_blocks", "embed_dim", "n_heads",
                                "kernel_sizes", "mlp_ratio", "n_classes", "class_token", "pre_norm",
                                "theta_init"},
                               "model");
        detail::maybe(m, "image_size", c.model.image_size);
        detail::maybe(m, "patch_size", c.model.patch_size);
        detail::maybe(m, "channels", c.model.channels);
        detail::maybe(m, "n_blocks", c.model.n_blocks);
        detail::maybe(m, "embed_dim", c.model.c_in);
        detail::maybe(m, "n_heads", c.model.n_h);
        detail::maybe(m, "kernel_sizes", c.model.kernels);
        detail::maybe(m, "mlp_ratio", c.model.mlp_ratio);
        detail::maybe(m, "n_classes", c.model.n_classes);
        detail::maybe(m, "class_token", c.model.class_token);
        detail::maybe(m, "pre_norm", c.model.pre_norm);
        detail::maybe(m, "theta_init", c.model.theta_init);
    }
    if (j.contains("data")) {
        const nlohmann::json& d = j.at("data");
        detail::reject_unknown(
            d, {"source", "n_train", "n_val", "image_dir", "true_stamps", "distractor_stamps"}, "data");
        detail::maybe(d, "source", c.data.source);
        detail::maybe(d, "n_train", c.data.n_train);
        detail::maybe(d, "n_val", c.data.n_val);
        detail::maybe(d, "image_dir", c.data.image_dir);
        detail::maybe(d, "true_stamps", c.data.true_stamps);
        detail::maybe(d, "distractor_stamps", c.data.distractor_stamps);
        if (c.data.source != "synthetic" && c.data.source != "raw") {
            throw ConfigError("data.source must be 'synthetic' or 'raw'");
        }
    }
    if (j.contains("search")) {
        const nlohmann::json& s = j.at("search");
        detail::reject_unknown(s,
                               {"lambda_comp", "flops_target_fraction", "flops_target", "lr_gates",
                                "lr_weights", "weight_decay", "theta_init", "epochs", "batch_size",
                                "init_checkpoint"},
                               "search");
        detail::maybe(s, "lambda_comp", c.search.lambda_comp);
        detail::maybe(s, "flops_target_fraction", c.search.flops_target_fraction);
        detail::maybe(s, "flops_target", c.search.flops_target_abs);
        detail::maybe(s, "lr_gates", c.search.lr_gates);
        detail::maybe(s, "lr_weights", c.search.lr_weights);
        detail::maybe(s, "weight_decay", c.search.weight_decay);
        detail::maybe(s, "theta_init", c.search.theta_init);
        detail::maybe(s, "epochs", c.search.epochs);
        detail::maybe(s, "batch_size", c.search.batch_size);
        detail::maybe(s, "init_checkpoint", c.search_init_checkpoint);
        if (c.search.lambda_comp < 0.0) throw ConfigError("search.lambda_comp must be >= 0");
    }
    if (j.contains("finetune")) {
        const nlohmann::json& f = j.at("finetune");
        detail::reject_unknown(f,
                               {"checkpoint", "descriptor", "teacher_checkpoint", "epochs", "batch_size",
                                "lr", "weight_decay", "lambda_dist"},
                               "finetune");
        detail::maybe(f, "checkpoint", c.finetune.checkpoint);
        detail::maybe(f, "descriptor", c.finetune.descriptor);
        detail::maybe(f, "teacher_checkpoint", c.finetune.teacher_checkpoint);
        detail::maybe(f, "epochs", c.finetune.epochs);
        detail::maybe(f, "batch_size", c.finetune.batch_size);
        detail::maybe(f, "lr", c.finetune.lr);
        detail::maybe(f, "weight_decay", c.finetune.weight_decay);
        detail::maybe(f, "lambda_dist", c.finetune.lambda_dist);
        if (c.finetune.lambda_dist < 0.0) throw ConfigError("finetune.lambda_dist must be >= 0");
    }
    if (j.contains("eval")) {
        detail::reject_unknown(j.at("eval"), {"checkpoint"}, "eval");
        detail::maybe(j.at("eval"), "checkpoint", c.eval_checkpoint);
    }
    if (j.contains("report")) {
        detail::reject_unknown(j.at("report"), {"checkpoint"}, "report");
        detail::maybe(j.at("report"), "checkpoint", c.report_checkpoint);
    }
    detail::maybe(j, "seed", c.seed);
    detail::maybe(j, "out_dir", c.out_dir);
    c.model.validate();
    c.search.theta_init = c.model.theta_init;
    return c;
}

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    try {
        nlohmann::json j;
        f >> j;
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
}

// Applies one `--set dotted.key=value` override onto the raw JSON document.
// The value parses as JSON when possible, otherwise as a string.
inline void apply_override(nlohmann::json& j, const std::string& kv) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;
    }
    nlohmann::json* cur = &j;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("bad --set key '" + key + "'");
        if (dot == std::string::npos) {
            (*cur)[part] = value;
            break;
        }
        cur = &(*cur)[part];
        start = dot + 1;
    }
}

// FNV-1a over the canonical dump; identifies a configuration in descriptors
// and checkpoints.
inline std::string config_hash(const nlohmann::json& j) {
    const std::string s = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace spvit
