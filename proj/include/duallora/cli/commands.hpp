// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duallora/adapters.hpp"
#include "duallora/checkpoint.hpp"
#include "duallora/cli/run_config.hpp"
#include "duallora/dst/corpus.hpp"
#include "duallora/dst/split.hpp"
#include "duallora/dst/synthetic.hpp"
#include "duallora/dst/trainer.hpp"
#include "duallora/errors.hpp"
#include "duallora/seq2seq.hpp"

namespace duallora::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

/// Runs `body` and maps library errors onto the stable exit codes.
inline int run_guarded(const std::function<void()>& body, std::ostream& err = std::cerr) {
    try {
        body();
        return kExitOk;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const LoadError& e) {
        err << "load error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DimensionError& e) {
        err << "shape error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const MergeStateError& e) {
        err << "merge error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ContractError& e) {
        err << "invalid request: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IndexError& e) {
        err << "index error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
}

inline nlohmann::json tokenizer_to_json(const Tokenizer& tok) {
    return {{"vocab_size", tok.vocab_size()}, {"words", tok.words()}};
}

inline Tokenizer tokenizer_from_json(const nlohmann::json& j) {
    return Tokenizer(j.at("words").get<std::vector<std::string>>(), j.at("vocab_size").get<std::size_t>());
}

/// Shortest decimal that reads back to the same double.
inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Corpus, split, tokenizer and base archive shared by every command.
struct Workspace {
    dst::Corpus corpus;
    dst::ZeroShotSplit split;
    Tokenizer tokenizer;
    TensorArchive base;
    nlohmann::json pretrain_report;  // null when the base was loaded
};

inline dst::Corpus resolve_corpus(const RunConfig& c) {
    return c.corpus.empty() ? dst::generate_synthetic_corpus(c.synthetic) : dst::load_corpus(c.corpus);
}

/// Pretrains a base model on the training split and returns its archive
/// (tokenizer embedded in the header).
inline TensorArchive pretrain_archive(const RunConfig& c, const dst::ZeroShotSplit& split, const Tokenizer& tok,
                                      nlohmann::json* report_out = nullptr) {
    Seq2SeqModel base(c.model, c.base_seed);
    const auto report = dst::pretrain_base(base, split.train, tok, c.pretrain);
    auto archive = base.to_archive();
    archive.header["tokenizer"] = tokenizer_to_json(tok);
    archive.header["pretrain"] = c.pretrain;
    if (report_out != nullptr) {
        *report_out = report.to_json();
    }
    return archive;
}

/// Loads `c.base`, or pretrains one and saves it as <out>/base.ckpt.
inline Workspace prepare(const RunConfig& c, const std::filesystem::path& out) {
    Workspace ws;
    ws.corpus = resolve_corpus(c);
    ws.split = dst::make_split(ws.corpus, c.held_out);
    for (const auto& w : ws.split.warnings) {
        std::cerr << "warning: " << w << "\n";
    }
    if (!c.base.empty()) {
        ws.base = load_archive(c.base);
        if (ws.base.header.value("kind", "") != "base") {
            throw LoadError("'" + c.base + "' is not a base checkpoint");
        }
        ws.tokenizer = ws.base.header.contains("tokenizer")
                           ? tokenizer_from_json(ws.base.header["tokenizer"])
                           : dst::build_tokenizer(ws.corpus, ws.base.header["model_config"].get<ModelConfig>().vocab_size);
        return ws;
    }
    ws.tokenizer = dst::build_tokenizer(ws.corpus, c.model.vocab_size);
    ws.base = pretrain_archive(c, ws.split, ws.tokenizer, &ws.pretrain_report);
    save_archive(ws.base, out / "base.ckpt");
    return ws;
}

/// A model with optional adapters. Heap-allocated so the registry's pointers
/// stay valid when the bundle moves.
struct ModelBundle {
    std::unique_ptr<Seq2SeqModel> model;
    std::optional<AdapterRegistry> adapters;
    /// Slot key whose prompt is folded into a merged checkpoint.
    std::string merged_slot;
};

inline bool has_adapter_sites(const ModelBundle& b) { return b.adapters && !b.adapters->sites().empty(); }

/// Fresh adapters per `lora`, or none when both branches are disabled.
inline ModelBundle fresh_bundle(const TensorArchive& base, const DualLoraConfig& lora) {
    ModelBundle b;
    b.model = std::make_unique<Seq2SeqModel>(Seq2SeqModel::from_archive(base));
    b.model->set_base_trainable(false);
    if (lora.use_context || lora.use_prompt) {
        b.adapters = attach_adapters(*b.model, lora);
    }
    return b;
}

/// Base alone, base plus an adapter checkpoint, or a merged checkpoint.
inline ModelBundle load_bundle(const TensorArchive& base, const std::string& adapter_path) {
    if (adapter_path.empty()) {
        return fresh_bundle(base, [] {
            DualLoraConfig none;
            none.use_context = false;
            none.use_prompt = false;
            return none;
        }());
    }
    const auto archive = load_archive(adapter_path);
    const std::string kind = archive.header.value("kind", "");
    if (kind == "merged") {
        ModelBundle b;
        b.model = std::make_unique<Seq2SeqModel>(Seq2SeqModel::from_archive(archive));
        b.model->set_base_trainable(false);
        const auto& marker = archive.header["merged"];
        if (marker.contains("prompt_slot") && marker["prompt_slot"].is_string()) {
            b.merged_slot = marker["prompt_slot"].get<std::string>();
        }
        return b;
    }
    if (kind != "adapters") {
        throw LoadError("'" + adapter_path + "' is neither an adapter nor a merged checkpoint");
    }
    if (archive.header["model_config"] != base.header["model_config"]) {
        throw LoadError("adapter checkpoint was built for a different model shape");
    }
    auto b = fresh_bundle(base, archive.header["lora_config"].get<DualLoraConfig>());
    if (b.adapters) {
        b.adapters->load(archive);
    }
    return b;
}

inline void write_resolved(const RunConfig& c, const std::filesystem::path& out) {
    write_json(c, out / "resolved_config.json");
}

inline dst::EvalReport evaluate_bundle(const Workspace& ws, ModelBundle& b, const RunConfig& c) {
    dst::EvalOptions options;
    options.max_new_tokens = c.max_new_tokens;
    options.merged = c.merged_eval && has_adapter_sites(b);
    options.metric.normalize = c.normalize;
    if (b.adapters) {
        options.prompt_input = b.adapters->config().prompt_input;
    }
    std::string domain = c.eval_domain.empty() ? c.held_out : c.eval_domain;
    if (!b.merged_slot.empty()) {
        domain = dst::domain_of_key(b.merged_slot);
        options.only_slot = b.merged_slot;
    }
    const auto& dialogues = c.eval_split == "train" ? ws.split.train : ws.split.test;
    AdapterRegistry* registry = b.adapters ? &*b.adapters : nullptr;
    return dst::evaluate(dialogues, ws.corpus, domain, *b.model, registry, ws.tokenizer, options);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline nlohmann::json cmd_gen_corpus(const RunConfig& c) {
    const auto out = output_dir(c);
    const auto corpus = dst::generate_synthetic_corpus(c.synthetic);
    dst::save_corpus(corpus, out / "corpus.json");
    write_resolved(c, out);
    return {{"corpus", (out / "corpus.json").string()}, {"dialogues", corpus.dialogues.size()}};
}

inline nlohmann::json cmd_pretrain(RunConfig c) {
    c.base.clear();
    c.validate();
    const auto out = output_dir(c);
    const auto ws = prepare(c, out);
    write_json(ws.pretrain_report, out / "pretrain_report.json");
    write_resolved(c, out);
    return {{"base", (out / "base.ckpt").string()}, {"loss_last", ws.pretrain_report["loss_curve"].back()}};
}

/// Trains fresh adapters, saves them and evaluates the result.
inline nlohmann::json cmd_train(const RunConfig& c) {
    c.validate();
    const auto out = output_dir(c);
    const auto ws = prepare(c, out);
    auto b = fresh_bundle(ws.base, c.lora);
    dst::TrainReport report;
    if (has_adapter_sites(b)) {
        report = dst::train_zero_shot(ws.split, ws.corpus, *b.model, *b.adapters, ws.tokenizer, c.train);
        save_archive(b.adapters->to_archive(b.model->config()), out / "adapters.ckpt");
    } else {
        report.total = b.model->base_parameter_count();
    }
    write_json(report.to_json(), out / "train_report.json");
    auto metrics = evaluate_bundle(ws, b, c).to_json();
    write_json(metrics, out / "metrics.json");
    write_resolved(c, out);
    return metrics;
}

inline nlohmann::json cmd_eval(const RunConfig& c) {
    c.validate();
    const auto out = output_dir(c);
    const auto ws = prepare(c, out);
    auto b = load_bundle(ws.base, c.adapters);
    auto report = evaluate_bundle(ws, b, c);
    auto metrics = report.to_json();
    write_json(metrics, out / "metrics.json");
    write_resolved(c, out);
    return metrics;
}

/// Folds the context adapters into W and, for one slot, the prompt term into
/// b. The result holds no adapter tensors.
inline TensorArchive merge_checkpoint(const TensorArchive& base, const TensorArchive& adapters,
                                      const dst::Corpus& corpus, const Tokenizer& tok, const std::string& prompt_slot) {
    if (adapters.header.value("kind", "") != "adapters") {
        throw LoadError("merge needs an adapter checkpoint");
    }
    if (adapters.header["model_config"] != base.header["model_config"]) {
        throw LoadError("adapter checkpoint was built for a different model shape");
    }
    const auto lora = adapters.header["lora_config"].get<DualLoraConfig>();
    auto b = fresh_bundle(base, lora);
    if (!b.adapters) {
        throw ConfigError("adapter checkpoint has no adapters to merge");
    }
    b.adapters->load(adapters);
    const bool has_prompt = b.model->needs_prompt_summary();
    if (has_prompt && prompt_slot.empty()) {
        throw ConfigError("prompt adapters present: --prompt-slot is required");
    }
    if (!has_prompt && !prompt_slot.empty()) {
        throw ConfigError("--prompt-slot given but the checkpoint has no prompt adapters");
    }
    b.adapters->merge_context_all();
    nlohmann::json marker = {{"context", lora.use_context},
                             {"prompt_fingerprint", nullptr},
                             {"prompt_text", nullptr},
                             {"prompt_slot", nullptr}};
    if (has_prompt) {
        const auto* slot = corpus.find_slot(prompt_slot);
        if (slot == nullptr) {
            throw ConfigError("unknown slot '" + prompt_slot + "'");
        }
        const Tensor summary = b.model->prompt_summary(dst::build_slot_prompt(*slot, lora.prompt_input, tok));
        b.adapters->merge_prompt_all(summary);
        char hex[17];
        std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(prompt_fingerprint(summary)));
        marker["prompt_fingerprint"] = hex;
        marker["prompt_text"] = dst::slot_prompt_text(*slot, lora.prompt_input);
        marker["prompt_slot"] = prompt_slot;
    }
    auto archive = b.model->to_archive();
    archive.header["kind"] = "merged";
    archive.header["lora_config"] = lora;
    archive.header["merged"] = marker;
    if (base.header.contains("tokenizer")) {
        archive.header["tokenizer"] = base.header["tokenizer"];
    }
    return archive;
}

inline nlohmann::json cmd_merge(const RunConfig& c) {
    c.validate();
    if (c.base.empty() || c.adapters.empty()) {
        throw ConfigError("merge needs --base and --adapters");
    }
    const auto out = output_dir(c);
    const auto ws = prepare(c, out);
    const auto merged = merge_checkpoint(ws.base, load_archive(c.adapters), ws.corpus, ws.tokenizer, c.prompt_slot);
    save_archive(merged, out / "merged.ckpt");
    write_resolved(c, out);
    return {{"merged", (out / "merged.ckpt").string()}, {"marker", merged.header["merged"]}};
}

struct AttentionDump {
    std::vector<AttentionTrace> traces;
    EncoderInput input;
    std::vector<std::string> tokens;
    std::vector<double> layer_mass;  // mean over heads
};

inline AttentionDump capture_attention(const Workspace& ws, const ModelBundle& b, const RunConfig& c) {
    const auto& dialogues = c.eval_split == "train" ? ws.split.train : ws.split.test;
    if (dialogues.empty()) {
        throw ConfigError("no dialogues in the " + c.eval_split + " partition");
    }
    const dst::Dialogue* dialogue = &dialogues.front();
    if (!c.dialogue.empty()) {
        dialogue = nullptr;
        for (const auto& d : dialogues) {
            if (d.id == c.dialogue) {
                dialogue = &d;
            }
        }
        if (dialogue == nullptr) {
            throw ConfigError("no dialogue '" + c.dialogue + "' in the " + c.eval_split + " partition");
        }
    }
    const std::size_t turn = c.turn < 0 ? dialogue->turns.size() - 1 : static_cast<std::size_t>(c.turn);
    if (turn >= dialogue->turns.size()) {
        throw ConfigError("turn " + std::to_string(turn) + " out of range for '" + dialogue->id + "'");
    }
    const std::string key = !c.slot.empty()           ? c.slot
                            : !b.merged_slot.empty() ? b.merged_slot
                                                     : ws.corpus.slots_of(c.held_out).front()->key();
    const auto* slot = ws.corpus.find_slot(key);
    if (slot == nullptr) {
        throw ConfigError("unknown slot '" + key + "'");
    }
    const auto mode = b.adapters ? b.adapters->config().prompt_input : PromptInput::slot_prompt;
    AttentionDump dump;
    dump.input = dst::slot_input(*dialogue, turn, *slot, mode, ws.tokenizer, b.model->config());
    NoGradGuard no_grad;
    dump.traces = b.model->encode(dump.input, true).traces;
    for (int id : dump.input.ids) {
        const std::vector<int> one{id};
        dump.tokens.push_back(ws.tokenizer.decode(one));
    }
    const auto layers = b.model->config().n_encoder_layers;
    dump.layer_mass.assign(layers, 0.0);
    const double heads = static_cast<double>(b.model->config().n_heads);
    for (const auto& t : dump.traces) {
        dump.layer_mass[t.layer] += prompt_attention_mass(t) / heads;
    }
    return dump;
}

/// Writes attn_layer<L>_head<H>.csv (rows = query positions, columns = key
/// positions), attention_mass.csv and attention_meta.json.
inline nlohmann::json write_attention_dump(const AttentionDump& dump, const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    for (const auto& t : dump.traces) {
        std::ofstream f(out / ("attn_layer" + std::to_string(t.layer) + "_head" + std::to_string(t.head) + ".csv"));
        f << "query";
        for (std::size_t j = 0; j < t.weights.cols(); ++j) {
            f << ",k" << j;
        }
        f << "\n";
        for (std::size_t i = 0; i < t.weights.rows(); ++i) {
            f << i;
            for (std::size_t j = 0; j < t.weights.cols(); ++j) {
                f << "," << fmt(t.weights.at(i, j));
            }
            f << "\n";
        }
    }
    std::ofstream mass(out / "attention_mass.csv");
    mass << "layer,head,prompt_attention_mass\n";
    for (const auto& t : dump.traces) {
        mass << t.layer << "," << t.head << "," << fmt(prompt_attention_mass(t)) << "\n";
    }
    for (std::size_t l = 0; l < dump.layer_mass.size(); ++l) {
        mass << l << ",mean," << fmt(dump.layer_mass[l]) << "\n";
    }
    nlohmann::json meta = {{"context_length", dump.input.context_length},
                           {"boundary", dump.traces.empty() ? 0 : dump.traces.front().boundary},
                           {"prompt_begin", dump.input.prompt_begin},
                           {"prompt_end", dump.input.prompt_end},
                           {"tokens", dump.tokens},
                           {"layer_mass", dump.layer_mass},
                           {"first_layer_mass", dump.layer_mass.front()},
                           {"last_layer_mass", dump.layer_mass.back()}};
    write_json(meta, out / "attention_meta.json");
    return meta;
}

inline nlohmann::json cmd_attn_dump(const RunConfig& c) {
    c.validate();
    const auto out = output_dir(c);
    const auto ws = prepare(c, out);
    const auto b = load_bundle(ws.base, c.adapters);
    auto meta = write_attention_dump(capture_attention(ws, b, c), out);
    write_resolved(c, out);
    return meta;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& sweep_axes() {
    static const std::vector<std::string> axes{"rank",        "placement",      "fusion",
                                               "combination", "n_prompt_loras", "prompt_input"};
    return axes;
}

/// Sets one ablation axis of `lora`. Throws ConfigError on a bad axis or value.
inline void apply_axis(DualLoraConfig& lora, const std::string& axis, const std::string& value) {
    auto count = [&] {
        std::size_t used = 0;
        unsigned long n = 0;
        try {
            n = std::stoul(value, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != value.size() || value.empty()) {
            throw ConfigError("sweep value '" + value + "' is not a count");
        }
        return static_cast<std::size_t>(n);
    };
    if (axis == "rank") {
        lora.rank = count();
    } else if (axis == "placement") {
        lora.targets = parse_enum<TargetProjections>(value);
    } else if (axis == "fusion") {
        lora.fusion = parse_enum<FusionKind>(value);
    } else if (axis == "combination") {
        lora.combination = parse_enum<Combination>(value);
    } else if (axis == "n_prompt_loras") {
        lora.n_prompt_loras = count();
    } else if (axis == "prompt_input") {
        lora.prompt_input = parse_enum<PromptInput>(value);
    } else {
        throw ConfigError("unknown sweep axis '" + axis + "' (rank|placement|fusion|combination|n_prompt_loras|prompt_input)");
    }
}

struct SweepRow {
    std::string value;
    std::string status = "ok";
    double jga = 0.0;
    double aga = 0.0;
    std::size_t trainable = 0;
    std::size_t total = 0;
    std::size_t fusion_params = 0;
};

inline std::size_t fusion_parameter_count(const AdapterRegistry& registry) {
    std::size_t n = 0;
    for (const auto& site : registry.sites()) {
        n += site.projection->fusion.parameter_count();
    }
    return n;
}

/// One train + eval per value on a shared base, seeds held fixed. A failing
/// run is recorded and the sweep continues.
/// Rejects an unknown axis or an unparsable value before any run starts.
inline void check_sweep(const RunConfig& c) {
    if (std::find(sweep_axes().begin(), sweep_axes().end(), c.axis) == sweep_axes().end()) {
        throw ConfigError("unknown sweep axis '" + c.axis + "'");
    }
    if (c.values.empty()) {
        throw ConfigError("sweep needs at least one value");
    }
    for (const auto& v : c.values) {
        DualLoraConfig probe = c.lora;
        apply_axis(probe, c.axis, v);
    }
}

inline std::vector<SweepRow> run_sweep(const Workspace& ws, const RunConfig& c, const std::filesystem::path& out) {
    check_sweep(c);
    std::vector<SweepRow> rows;
    for (const auto& v : c.values) {
        SweepRow row;
        row.value = v;
        RunConfig rc = c;
        apply_axis(rc.lora, c.axis, v);
        const auto dir = out / (c.axis + "_" + v);
        try {
            rc.validate();
            auto b = fresh_bundle(ws.base, rc.lora);
            if (has_adapter_sites(b)) {
                const auto report = dst::train_zero_shot(ws.split, ws.corpus, *b.model, *b.adapters, ws.tokenizer, rc.train);
                write_json(report.to_json(), dir / "train_report.json");
                row.fusion_params = fusion_parameter_count(*b.adapters);
            }
            const auto eval = evaluate_bundle(ws, b, rc);
            write_json(eval.to_json(), dir / "metrics.json");
            row.jga = eval.jga;
            row.aga = eval.aga;
            row.trainable = eval.trainable;
            row.total = eval.total;
        } catch (const std::exception& e) {
            row.status = std::string("error: ") + e.what();
        }
        rc.out = dir.string();
        write_resolved(rc, dir);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string sweep_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
    std::ostringstream s;
    s << "axis,value,status,jga,aga,trainable,total,fusion_params\n";
    for (const auto& r : rows) {
        std::string status = r.status;
        std::replace(status.begin(), status.end(), ',', ';');
        std::replace(status.begin(), status.end(), '\n', ' ');
        s << axis << "," << r.value << "," << status << "," << fmt(r.jga) << "," << fmt(r.aga) << "," << r.trainable
          << "," << r.total << "," << r.fusion_params << "\n";
    }
    return s.str();
}

inline nlohmann::json cmd_sweep(const RunConfig& c) {
    c.validate();
    check_sweep(c);
    const auto out = output_dir(c);
    const auto ws = prepare(c, out);
    const auto rows = run_sweep(ws, c, out);
    std::filesystem::create_directories(out);
    std::ofstream(out / "sweep.csv") << sweep_csv(c.axis, rows);
    write_resolved(c, out);
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
        j.push_back({{"value", r.value}, {"status", r.status}, {"jga", r.jga}, {"aga", r.aga},
                     {"trainable", r.trainable}, {"total", r.total}, {"fusion_params", r.fusion_params}});
    }
    return j;
}

}  // namespace duallora::cli
