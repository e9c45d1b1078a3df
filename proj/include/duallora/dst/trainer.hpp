// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "duallora/adapters.hpp"
#include "duallora/dst/corpus.hpp"
#include "duallora/dst/metrics.hpp"
#include "duallora/dst/split.hpp"
#include "duallora/dst/state.hpp"
#include "duallora/errors.hpp"
#include "duallora/optim.hpp"
#include "duallora/rng.hpp"
#include "duallora/seq2seq.hpp"
#include "duallora/tokenizer.hpp"

namespace duallora::dst {

/// One (turn, slot) generation problem.
struct DstExample {
    EncoderInput input;
    std::vector<int> target;
    std::string slot_key;
    std::string dialogue_id;
    std::size_t turn = 0;
};

/// Task prompt of base pretraining.
inline constexpr std::string_view kStatePrompt = "translate dialogue to belief state";

/// Vocabulary over every utterance, prompt and schema value of the corpus.
inline Tokenizer build_tokenizer(const Corpus& corpus, std::size_t vocab_size) {
    std::vector<std::string> texts{std::string(kNone), std::string(kStatePrompt), ";"};
    for (const auto& s : corpus.schema) {
        texts.push_back(slot_prompt_text(s, PromptInput::slot_prompt));
        if (s.values) {
            for (const auto& v : *s.values) {
                texts.push_back(v);
            }
        }
    }
    for (const auto& d : corpus.dialogues) {
        for (const auto& t : d.turns) {
            texts.push_back(t.system);
            texts.push_back(t.user);
            for (const auto& [key, value] : t.state) {
                texts.push_back(value);
            }
        }
    }
    return Tokenizer::build(texts, vocab_size);
}

/// Token ids of turns 0..upto, each the preceding system utterance followed by
/// the user utterance.
inline std::vector<std::vector<int>> context_turns(const Dialogue& dialogue, std::size_t upto,
                                                   const Tokenizer& tokenizer) {
    std::vector<std::vector<int>> turns;
    for (std::size_t t = 0; t <= upto && t < dialogue.turns.size(); ++t) {
        auto ids = tokenizer.encode(dialogue.turns[t].system);
        const auto user = tokenizer.encode(dialogue.turns[t].user);
        ids.insert(ids.end(), user.begin(), user.end());
        turns.push_back(std::move(ids));
    }
    return turns;
}

inline EncoderInput slot_input(const Dialogue& dialogue, std::size_t turn, const SlotSchema& slot,
                               PromptInput mode, const Tokenizer& tokenizer, const ModelConfig& config) {
    const auto prompt = build_slot_prompt(slot, PromptInput::slot_prompt, tokenizer);
    auto input = assemble_encoder_input(context_turns(dialogue, turn, tokenizer), prompt, config);
    if (mode != PromptInput::slot_prompt) {
        input.adapter_prompt = build_slot_prompt(slot, mode, tokenizer);
    }
    return input;
}

/// Every (turn, slot) pair over the slots of the domains each dialogue
/// touches, restricted to `domains` when that is non-empty.
inline std::vector<DstExample> build_examples(const std::vector<Dialogue>& dialogues, const Corpus& corpus,
                                              const Tokenizer& tokenizer, const ModelConfig& config,
                                              PromptInput mode, const std::vector<std::string>& domains = {}) {
    std::vector<DstExample> out;
    for (const auto& d : dialogues) {
        std::vector<const SlotSchema*> slots;
        for (const auto& s : corpus.schema) {
            const bool allowed = domains.empty() || std::find(domains.begin(), domains.end(), s.domain) != domains.end();
            if (allowed && d.touches(s.domain)) {
                slots.push_back(&s);
            }
        }
        for (std::size_t t = 0; t < d.turns.size(); ++t) {
            for (const auto* slot : slots) {
                DstExample ex;
                ex.input = slot_input(d, t, *slot, mode, tokenizer, config);
                ex.target = tokenizer.encode(linearize_slot(d.turns[t].state, slot->key()));
                ex.slot_key = slot->key();
                ex.dialogue_id = d.id;
                ex.turn = t;
                out.push_back(std::move(ex));
            }
        }
    }
    return out;
}

/// Domains other than the held-out one.
inline std::vector<std::string> visible_domains(const Corpus& corpus, const std::string& held_out) {
    std::vector<std::string> out;
    for (const auto& d : corpus.domains()) {
        if (d != held_out) {
            out.push_back(d);
        }
    }
    return out;
}

/// Whole state as plain words without domains: "departure cambridge ; leaveat
/// 08:15", or "none" when empty.
inline std::string state_text(const DialogueState& state) {
    std::string out;
    for (const auto& [key, value] : state) {
        if (!out.empty()) {
            out += " ; ";
        }
        out += key.substr(key.find('-') + 1) + " " + value;
    }
    return out.empty() ? std::string(kNone) : out;
}

/// Base pretraining examples: generate the full cumulative state of each turn
/// under one fixed task prompt.
inline std::vector<DstExample> build_state_examples(const std::vector<Dialogue>& dialogues,
                                                    const Tokenizer& tokenizer, const ModelConfig& config) {
    std::vector<DstExample> out;
    const auto prompt = tokenizer.encode(kStatePrompt);
    for (const auto& d : dialogues) {
        for (std::size_t t = 0; t < d.turns.size(); ++t) {
            DstExample ex;
            ex.input = assemble_encoder_input(context_turns(d, t, tokenizer), prompt, config);
            ex.target = tokenizer.encode(state_text(d.turns[t].state));
            ex.slot_key = "state";
            ex.dialogue_id = d.id;
            ex.turn = t;
            out.push_back(std::move(ex));
        }
    }
    return out;
}

struct TrainOptions {
    std::size_t steps = 300;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    /// Linear warmup over this fraction of steps, then linear decay to zero.
    /// A negative value keeps the rate constant.
    double warmup = 0.05;

    double lr_at(std::size_t step) const {
        if (warmup < 0.0 || steps == 0) {
            return lr;
        }
        const double t = static_cast<double>(step);
        const double n = static_cast<double>(steps);
        const double w = std::max(1.0, warmup * n);
        return t < w ? lr * (t + 1.0) / w : lr * std::max(0.0, (n - t) / (n - w));
    }
};

struct TrainReport {
    std::vector<double> loss_curve;  // mean batch loss per optimizer step
    std::size_t steps = 0;
    std::size_t examples_seen = 0;
    std::size_t trainable = 0;
    std::size_t total = 0;
    double seconds = 0.0;

    nlohmann::json to_json() const {
        return {{"loss_curve", loss_curve},
                {"steps", steps},
                {"examples_seen", examples_seen},
                {"params", {{"trainable", trainable}, {"total", total}}},
                {"seconds", seconds}};
    }
};

/// AdamW over `params` with gradient accumulation across each batch. Examples
/// are visited in seeded reshuffled epochs.
inline TrainReport train_examples(const Seq2SeqModel& model, const std::vector<Tensor>& params,
                                  const std::vector<DstExample>& examples, const TrainOptions& options) {
    const auto started = std::chrono::steady_clock::now();
    TrainReport report;
    if (options.batch_size == 0) {
        throw ConfigError("batch_size must be positive");
    }
    if (options.steps > 0 && examples.empty()) {
        throw ConfigError("no training examples");
    }
    AdamW optimizer(params, AdamWOptions{options.lr, 0.9, 0.999, 1e-8, options.weight_decay});
    Rng rng(options.seed);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    for (std::size_t step = 0; step < options.steps; ++step) {
        optimizer.zero_grad();
        optimizer.set_lr(options.lr_at(step));
        double batch_loss = 0.0;
        for (std::size_t b = 0; b < options.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(std::span<std::size_t>(order));
                cursor = 0;
            }
            const auto& ex = examples[order[cursor++]];
            Tensor loss = model.sequence_loss(model.encode(ex.input), ex.target);
            if (!std::isfinite(loss.item())) {
                throw NumericalError("loss diverged at step " + std::to_string(step) + " on " + ex.dialogue_id +
                                     " turn " + std::to_string(ex.turn) + " slot " + ex.slot_key + ": " +
                                     std::to_string(loss.item()));
            }
            batch_loss += loss.item();
            backward(scale(loss, 1.0 / static_cast<double>(options.batch_size)));
        }
        optimizer.step();
        report.loss_curve.push_back(batch_loss / static_cast<double>(options.batch_size));
        report.examples_seen += options.batch_size;
        ++report.steps;
    }
    for (const auto& p : params) {
        if (!all_finite(p)) {
            throw NumericalError("non-finite parameter after training");
        }
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

/// Trains every base parameter on whole-state generation over `dialogues`,
/// then freezes the model.
inline TrainReport pretrain_base(Seq2SeqModel& model, const std::vector<Dialogue>& dialogues,
                                 const Tokenizer& tokenizer, const TrainOptions& options) {
    model.set_base_trainable(true);
    std::vector<Tensor> params;
    for (auto& [name, t] : model.named_base_parameters()) {
        params.push_back(t);
    }
    const auto examples = build_state_examples(dialogues, tokenizer, model.config());
    auto report = train_examples(model, params, examples, options);
    model.set_base_trainable(false);
    report.trainable = model.base_parameter_count();
    report.total = model.base_parameter_count();
    return report;
}

/// Trains the attached adapters on the training dialogues of a split.
inline TrainReport train_zero_shot(const ZeroShotSplit& split, const Corpus& corpus, const Seq2SeqModel& model,
                                   const AdapterRegistry& adapters, const Tokenizer& tokenizer,
                                   const TrainOptions& options) {
    const auto examples =
        build_examples(split.train, corpus, tokenizer, model.config(), adapters.config().prompt_input,
                       visible_domains(corpus, split.held_out));
    auto report = train_examples(model, adapters.parameters(), examples, options);
    report.trainable = adapters.trainable_count();
    report.total = adapters.total_count();
    return report;
}

struct EvalOptions {
    std::size_t max_new_tokens = 4;
    /// Folds adapters into weights and biases, one slot prompt at a time.
    bool merged = false;
    PromptInput prompt_input = PromptInput::slot_prompt;
    MetricOptions metric;
    /// Restricts evaluation to one "domain-slot" key when set.
    std::string only_slot;
};

struct EvalReport {
    std::string domain;
    double jga = 0.0;
    double aga = 0.0;
    std::map<std::string, double> per_slot;
    std::size_t trainable = 0;
    std::size_t total = 0;
    std::size_t turns = 0;
    std::vector<DialogueState> predictions;
    std::vector<DialogueState> golds;

    nlohmann::json to_json() const {
        return {{"domain", domain},
                {"jga", jga},
                {"aga", aga},
                {"per_slot", per_slot},
                {"params", {{"trainable", trainable}, {"total", total}}},
                {"turns", turns}};
    }
};

/// Per-slot greedy generation over every turn of `dialogues`, scored against
/// gold states restricted to `domain`. `adapters` may be null.
inline EvalReport evaluate(const std::vector<Dialogue>& dialogues, const Corpus& corpus, const std::string& domain,
                           const Seq2SeqModel& model, AdapterRegistry* adapters, const Tokenizer& tokenizer,
                           const EvalOptions& options = {}) {
    auto slots = corpus.slots_of(domain);
    if (slots.empty()) {
        throw ConfigError("unknown domain '" + domain + "'");
    }
    if (!options.only_slot.empty()) {
        std::erase_if(slots, [&](const SlotSchema* s) { return s->key() != options.only_slot; });
        if (slots.empty()) {
            throw ConfigError("slot '" + options.only_slot + "' is not in domain '" + domain + "'");
        }
    }
    if (options.merged && adapters == nullptr) {
        throw ContractError("merged evaluation needs adapters");
    }
    EvalReport report;
    report.domain = domain;
    for (const auto& d : dialogues) {
        for (const auto& t : d.turns) {
            auto gold = restrict_to_domain(t.state, domain);
            if (!options.only_slot.empty()) {
                std::erase_if(gold, [&](const auto& kv) { return kv.first != options.only_slot; });
            }
            report.golds.push_back(std::move(gold));
        }
    }
    report.predictions.assign(report.golds.size(), DialogueState{});
    if (options.merged) {
        adapters->merge_context_all();
    }
    NoGradGuard no_grad;
    for (const auto* slot : slots) {
        const bool merge_prompt_now = options.merged && model.needs_prompt_summary();
        if (merge_prompt_now) {
            adapters->merge_prompt_all(model.prompt_summary(build_slot_prompt(*slot, options.prompt_input, tokenizer)));
        }
        std::size_t row = 0;
        for (const auto& d : dialogues) {
            for (std::size_t t = 0; t < d.turns.size(); ++t, ++row) {
                const auto input = slot_input(d, t, *slot, options.prompt_input, tokenizer, model.config());
                const auto ids = model.greedy_decode(model.encode(input), options.max_new_tokens);
                if (auto value = parse_value(tokenizer.decode(ids))) {
                    report.predictions[row][slot->key()] = *value;
                }
            }
        }
        if (merge_prompt_now) {
            adapters->unmerge_prompt_all();
        }
    }
    if (options.merged) {
        adapters->unmerge_context_all();
    }
    std::vector<std::string> keys;
    for (const auto* slot : slots) {
        keys.push_back(slot->key());
    }
    report.turns = report.golds.size();
    report.jga = jga(report.predictions, report.golds, options.metric);
    report.aga = aga(report.predictions, report.golds, options.metric);
    report.per_slot = slot_accuracy(report.predictions, report.golds, keys, options.metric);
    report.total = model.base_parameter_count();
    if (adapters != nullptr) {
        report.trainable = adapters->trainable_count();
        report.total = adapters->total_count();
    }
    return report;
}

}  // namespace duallora::dst
