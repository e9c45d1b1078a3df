// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duallora/adapters.hpp"
#include "duallora/dst/synthetic.hpp"
#include "duallora/dst/trainer.hpp"
#include "duallora/errors.hpp"
#include "duallora/model_config.hpp"

namespace duallora::dst {

inline void to_json(nlohmann::json& j, const SyntheticOptions& o) {
    j = {{"seed", o.seed},
         {"dialogues_per_domain", o.dialogues_per_domain},
         {"second_domain_rate", o.second_domain_rate},
         {"max_turns", o.max_turns}};
}

inline void from_json(const nlohmann::json& j, SyntheticOptions& o) {
    SyntheticOptions d;
    o.seed = j.value("seed", d.seed);
    o.dialogues_per_domain = j.value("dialogues_per_domain", d.dialogues_per_domain);
    o.second_domain_rate = j.value("second_domain_rate", d.second_domain_rate);
    o.max_turns = j.value("max_turns", d.max_turns);
}

inline void to_json(nlohmann::json& j, const TrainOptions& o) {
    j = {{"steps", o.steps},   {"batch_size", o.batch_size}, {"lr", o.lr},
         {"weight_decay", o.weight_decay}, {"seed", o.seed}, {"warmup", o.warmup}};
}

inline void from_json(const nlohmann::json& j, TrainOptions& o) {
    const TrainOptions d = o;
    o.steps = j.value("steps", d.steps);
    o.batch_size = j.value("batch_size", d.batch_size);
    o.lr = j.value("lr", d.lr);
    o.weight_decay = j.value("weight_decay", d.weight_decay);
    o.seed = j.value("seed", d.seed);
    o.warmup = j.value("warmup", d.warmup);
}

}  // namespace duallora::dst

namespace duallora::cli {

/// Every knob of every subcommand. Resolved once, then written verbatim as
/// resolved_config.json next to the outputs; feeding that file back through
/// --config reproduces the run.
struct RunConfig {
    std::string command;
    std::string out = "runs/default";

    /// Corpus file; the seeded synthetic corpus when empty.
    std::string corpus;
    dst::SyntheticOptions synthetic;
    std::string held_out = "train";

    ModelConfig model;
    std::uint64_t base_seed = 1;
    /// Base checkpoint; pretrained in process on the training split when empty.
    std::string base;
    dst::TrainOptions pretrain{2000, 8, 1e-3, 0.0, 1, 0.05};

    DualLoraConfig lora = [] {
        DualLoraConfig c;
        c.init_std = 0.125;
        return c;
    }();
    dst::TrainOptions train{3000, 8, 3e-3, 0.0, 0, -1.0};

    /// Adapter or merged checkpoint consumed by eval, merge and attn-dump.
    std::string adapters;
    std::string eval_split = "test";
    /// Domain scored by eval; the held-out domain when empty.
    std::string eval_domain;
    std::size_t max_new_tokens = 4;
    bool merged_eval = false;
    bool normalize = true;

    /// merge: "domain-slot" whose prompt is folded into the biases.
    std::string prompt_slot;

    /// attn-dump: dialogue id (first test dialogue when empty), turn (last
    /// when negative) and slot key (first held-out slot when empty).
    std::string dialogue;
    long turn = -1;
    std::string slot;

    /// sweep
    std::string axis;
    std::vector<std::string> values;

    void validate() const {
        model.validate();
        lora.validate(model.d_model, model.d_model);
        if (train.batch_size == 0 || pretrain.batch_size == 0) {
            throw ConfigError("batch_size must be positive");
        }
        if (!(train.lr > 0.0) || !(pretrain.lr > 0.0) || !std::isfinite(train.lr) || !std::isfinite(pretrain.lr)) {
            throw ConfigError("learning rates must be positive and finite");
        }
        if (eval_split != "test" && eval_split != "train") {
            throw ConfigError("eval_split must be test or train, got '" + eval_split + "'");
        }
    }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"command", c.command},
         {"out", c.out},
         {"corpus", c.corpus},
         {"synthetic", c.synthetic},
         {"held_out", c.held_out},
         {"model", c.model},
         {"base_seed", c.base_seed},
         {"base", c.base},
         {"pretrain", c.pretrain},
         {"lora", c.lora},
         {"train", c.train},
         {"adapters", c.adapters},
         {"eval_split", c.eval_split},
         {"eval_domain", c.eval_domain},
         {"max_new_tokens", c.max_new_tokens},
         {"merged_eval", c.merged_eval},
         {"normalize", c.normalize},
         {"prompt_slot", c.prompt_slot},
         {"dialogue", c.dialogue},
         {"turn", c.turn},
         {"slot", c.slot},
         {"axis", c.axis},
         {"values", c.values}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    static const std::vector<std::string> known{
        "command", "out",    "corpus",         "synthetic",      "held_out",    "model",     "base_seed",
        "base",    "pretrain", "lora",         "train",          "adapters",    "eval_split", "eval_domain", "max_new_tokens",
        "merged_eval", "normalize", "prompt_slot", "dialogue",   "turn",        "slot",      "axis",
        "values"};
    if (!j.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
    c.command = j.value("command", c.command);
    c.out = j.value("out", c.out);
    c.corpus = j.value("corpus", c.corpus);
    if (j.contains("synthetic")) c.synthetic = j["synthetic"].get<dst::SyntheticOptions>();
    c.held_out = j.value("held_out", c.held_out);
    if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
    c.base_seed = j.value("base_seed", c.base_seed);
    c.base = j.value("base", c.base);
    if (j.contains("pretrain")) dst::from_json(j["pretrain"], c.pretrain);
    if (j.contains("lora")) {
        auto merged = nlohmann::json(c.lora);
        merged.update(j["lora"]);
        c.lora = merged.get<DualLoraConfig>();
    }
    if (j.contains("train")) dst::from_json(j["train"], c.train);
    c.adapters = j.value("adapters", c.adapters);
    c.eval_split = j.value("eval_split", c.eval_split);
    c.eval_domain = j.value("eval_domain", c.eval_domain);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.merged_eval = j.value("merged_eval", c.merged_eval);
    c.normalize = j.value("normalize", c.normalize);
    c.prompt_slot = j.value("prompt_slot", c.prompt_slot);
    c.dialogue = j.value("dialogue", c.dialogue);
    c.turn = j.value("turn", c.turn);
    c.slot = j.value("slot", c.slot);
    c.axis = j.value("axis", c.axis);
    c.values = j.value("values", c.values);
}

/// Reads a config file; JSON type errors surface as ConfigError.
inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open config '" + path.string() + "'");
    }
    try {
        return nlohmann::json::parse(in).get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
}

/// Output directory, rebased under $DUALLORA_OUTPUT_ROOT when that is set and
/// `out` is relative.
inline std::filesystem::path output_dir(const RunConfig& c) {
    std::filesystem::path out(c.out);
    if (const char* root = std::getenv("DUALLORA_OUTPUT_ROOT"); root != nullptr && *root && out.is_relative()) {
        out = std::filesystem::path(root) / out;
    }
    return out;
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw ConfigError("cannot write '" + path.string() + "'");
    }
    out << j.dump(2) << "\n";
}

}  // namespace duallora::cli
