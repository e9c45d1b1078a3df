// SPDX-License-Identifier: Apache-2.0
// duallora: corpus generation, pretraining, adapter training, evaluation,
// merging, attention dumps and ablation sweeps.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "duallora/cli/commands.hpp"

namespace {

using duallora::cli::RunConfig;

/// Flag values; unset flags leave the config file (or defaults) alone.
struct Overrides {
    std::string config;
    std::optional<std::string> out, corpus, held_out, base, adapters, prompt_slot, dialogue, slot, axis;
    std::optional<std::string> targets, fusion, combination, prompt_input, eval_split, eval_domain;
    std::optional<std::uint64_t> seed, corpus_seed;
    std::optional<std::size_t> rank, n_prompt_loras, steps, pretrain_steps, batch_size, dialogues_per_domain;
    std::optional<double> lr, init_std;
    std::optional<long> turn;
    std::vector<std::string> values;
    bool no_context = false, no_prompt = false, merged_eval = false;
};

void add_flags(CLI::App* sub, Overrides& o) {
    sub->add_option("--config", o.config, "JSON run config; flags override its fields");
    sub->add_option("--out", o.out, "output directory (rebased under $DUALLORA_OUTPUT_ROOT when relative)");
    sub->add_option("--seed", o.seed, "adapter init and data-order seed");
    sub->add_option("--corpus", o.corpus, "corpus JSON (synthetic corpus when omitted)");
    sub->add_option("--corpus-seed", o.corpus_seed, "synthetic corpus seed");
    sub->add_option("--dialogues-per-domain", o.dialogues_per_domain, "synthetic dialogues per primary domain");
    sub->add_option("--held-out", o.held_out, "zero-shot target domain");
    sub->add_option("--base", o.base, "base checkpoint (pretrained in process when omitted)");
    sub->add_option("--adapters", o.adapters, "adapter or merged checkpoint");
    sub->add_option("--rank", o.rank, "LoRA rank");
    sub->add_option("--targets", o.targets, "qv | qkv | qkvo");
    sub->add_option("--fusion", o.fusion, "mean_add | cross_attention | gate_attention");
    sub->add_option("--combination", o.combination, "horizontal | vertical");
    sub->add_option("--n-prompt-loras", o.n_prompt_loras, "number of prompt LoRA pairs");
    sub->add_option("--prompt-input", o.prompt_input, "slot_prompt | slot_embedding");
    sub->add_option("--init-std", o.init_std, "stddev of the Gaussian A init");
    sub->add_flag("--no-context", o.no_context, "disable the context adapter");
    sub->add_flag("--no-prompt", o.no_prompt, "disable the prompt adapter");
    sub->add_option("--steps", o.steps, "adapter training steps");
    sub->add_option("--pretrain-steps", o.pretrain_steps, "base pretraining steps");
    sub->add_option("--batch-size", o.batch_size, "examples per optimizer step");
    sub->add_option("--lr", o.lr, "adapter learning rate");
    sub->add_option("--eval-split", o.eval_split, "test | train");
    sub->add_option("--eval-domain", o.eval_domain, "domain to score (held-out domain by default)");
    sub->add_flag("--merged-eval", o.merged_eval, "fold adapters into weights during eval");
    sub->add_option("--prompt-slot", o.prompt_slot, "merge: domain-slot whose prompt is folded into the biases");
    sub->add_option("--dialogue", o.dialogue, "attn-dump: dialogue id");
    sub->add_option("--turn", o.turn, "attn-dump: turn index (last when omitted)");
    sub->add_option("--slot", o.slot, "attn-dump: domain-slot");
    sub->add_option("--axis", o.axis, "sweep: rank | placement | fusion | combination | n_prompt_loras | prompt_input");
    sub->add_option("--values", o.values, "sweep: values along the axis")->delimiter(',');
}

RunConfig resolve(const std::string& command, const Overrides& o) {
    RunConfig c = o.config.empty() ? RunConfig{} : duallora::cli::load_run_config(o.config);
    c.command = command;
    auto set = [](auto& field, const auto& value) {
        if (value) field = *value;
    };
    set(c.out, o.out);
    set(c.corpus, o.corpus);
    set(c.synthetic.seed, o.corpus_seed);
    set(c.synthetic.dialogues_per_domain, o.dialogues_per_domain);
    set(c.held_out, o.held_out);
    set(c.base, o.base);
    set(c.adapters, o.adapters);
    set(c.lora.rank, o.rank);
    if (o.targets) c.lora.targets = duallora::parse_enum<duallora::TargetProjections>(*o.targets);
    if (o.fusion) c.lora.fusion = duallora::parse_enum<duallora::FusionKind>(*o.fusion);
    if (o.combination) c.lora.combination = duallora::parse_enum<duallora::Combination>(*o.combination);
    if (o.prompt_input) c.lora.prompt_input = duallora::parse_enum<duallora::PromptInput>(*o.prompt_input);
    set(c.lora.n_prompt_loras, o.n_prompt_loras);
    set(c.lora.init_std, o.init_std);
    if (o.seed) {
        c.lora.seed = *o.seed;
        c.train.seed = *o.seed;
    }
    if (o.no_context) c.lora.use_context = false;
    if (o.no_prompt) c.lora.use_prompt = false;
    set(c.train.steps, o.steps);
    set(c.pretrain.steps, o.pretrain_steps);
    set(c.train.batch_size, o.batch_size);
    set(c.train.lr, o.lr);
    set(c.eval_split, o.eval_split);
    set(c.eval_domain, o.eval_domain);
    if (o.merged_eval) c.merged_eval = true;
    set(c.prompt_slot, o.prompt_slot);
    set(c.dialogue, o.dialogue);
    set(c.turn, o.turn);
    set(c.slot, o.slot);
    set(c.axis, o.axis);
    if (!o.values.empty()) c.values = o.values;
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    namespace cli = duallora::cli;
    CLI::App app{"DualLoRA: context and prompt low-rank adapters for zero-shot dialogue state tracking"};
    app.require_subcommand(1);

    struct Command {
        const char* name;
        const char* help;
        nlohmann::json (*run)(const RunConfig&);
    };
    static const Command commands[] = {
        {"gen-corpus", "write the seeded synthetic corpus", &cli::cmd_gen_corpus},
        {"pretrain", "pretrain a base model on the training split", [](const RunConfig& c) { return cli::cmd_pretrain(c); }},
        {"train", "train adapters and evaluate them on the held-out domain", &cli::cmd_train},
        {"eval", "evaluate a base, adapter or merged checkpoint", &cli::cmd_eval},
        {"merge", "fold adapters (and one slot prompt) into the base weights", &cli::cmd_merge},
        {"attn-dump", "write encoder attention maps and prompt attention mass", &cli::cmd_attn_dump},
        {"sweep", "train and evaluate one run per value of an ablation axis", &cli::cmd_sweep},
    };
    std::vector<Overrides> overrides(std::size(commands));
    std::vector<CLI::App*> subs;
    for (std::size_t i = 0; i < std::size(commands); ++i) {
        auto* sub = app.add_subcommand(commands[i].name, commands[i].help);
        add_flags(sub, overrides[i]);
        subs.push_back(sub);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? cli::kExitOk : cli::kExitConfig;
    }

    for (std::size_t i = 0; i < subs.size(); ++i) {
        if (!subs[i]->parsed()) {
            continue;
        }
        return cli::run_guarded([&] {
            const auto config = resolve(commands[i].name, overrides[i]);
            std::cout << commands[i].run(config).dump(2) << "\n";
        });
    }
    return cli::kExitConfig;
}
