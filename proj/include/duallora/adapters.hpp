// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "duallora/checkpoint.hpp"
#include "duallora/errors.hpp"
#include "duallora/lora.hpp"
#include "duallora/seq2seq.hpp"

namespace duallora {

inline void to_json(nlohmann::json& j, const DualLoraConfig& c) {
    j = nlohmann::json{{"rank", c.rank},
                       {"target_projections", to_string(c.targets)},
                       {"fusion", to_string(c.fusion)},
                       {"combination", to_string(c.combination)},
                       {"n_prompt_loras", c.n_prompt_loras},
                       {"init_std", c.init_std},
                       {"seed", c.seed},
                       {"prompt_input", to_string(c.prompt_input)},
                       {"scaling", c.scaling},
                       {"use_context", c.use_context},
                       {"use_prompt", c.use_prompt},
                       {"prompt_scope", to_string(c.prompt_scope)}};
}

inline void from_json(const nlohmann::json& j, DualLoraConfig& c) {
    DualLoraConfig d;
    c.rank = j.value("rank", d.rank);
    c.targets = parse_enum<TargetProjections>(j.value("target_projections", to_string(d.targets)));
    c.fusion = parse_enum<FusionKind>(j.value("fusion", to_string(d.fusion)));
    c.combination = parse_enum<Combination>(j.value("combination", to_string(d.combination)));
    c.n_prompt_loras = j.value("n_prompt_loras", d.n_prompt_loras);
    c.init_std = j.value("init_std", d.init_std);
    c.seed = j.value("seed", d.seed);
    c.prompt_input = parse_enum<PromptInput>(j.value("prompt_input", to_string(d.prompt_input)));
    c.scaling = j.value("scaling", d.scaling);
    c.use_context = j.value("use_context", d.use_context);
    c.use_prompt = j.value("use_prompt", d.use_prompt);
    c.prompt_scope = parse_enum<PromptScope>(j.value("prompt_scope", to_string(d.prompt_scope)));
}

inline bool targets_projection(TargetProjections targets, char which) {
    switch (targets) {
    case TargetProjections::qv: return which == 'q' || which == 'v';
    case TargetProjections::qkv: return which == 'q' || which == 'k' || which == 'v';
    case TargetProjections::qkvo: return true;
    }
    return false;
}

struct AdapterSite {
    std::string name;
    AdaptedProjection* projection = nullptr;
    bool in_encoder = false;
};

/// The adapted projections of one model. Holds non-owning pointers, so the
/// model must outlive it.
class AdapterRegistry {
  public:
    AdapterRegistry() = default;
    AdapterRegistry(DualLoraConfig config, std::vector<AdapterSite> sites, std::size_t base_count)
        : config_(std::move(config)), sites_(std::move(sites)), base_count_(base_count) {}

    const DualLoraConfig& config() const { return config_; }
    const std::vector<AdapterSite>& sites() const { return sites_; }

    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (const auto& site : sites_) {
            for (auto& [name, t] : site.projection->adapter_parameters()) {
                out.emplace_back(site.name + "." + name, t);
            }
        }
        return out;
    }
    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) {
            out.push_back(t);
        }
        return out;
    }
    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) {
            n += t.size();
        }
        return n;
    }
    std::size_t total_count() const { return base_count_ + trainable_count(); }

    void merge_context_all() {
        for (auto& site : sites_) {
            if (site.projection->context) {
                merge_context(*site.projection);
            }
        }
    }
    void unmerge_context_all() {
        for (auto& site : sites_) {
            if (site.projection->context && site.projection->merged_context) {
                unmerge_context(*site.projection);
            }
        }
    }
    void merge_prompt_all(const Tensor& summary) {
        for (auto& site : sites_) {
            if (!site.projection->prompts.empty()) {
                merge_prompt(*site.projection, summary);
            }
        }
    }
    void unmerge_prompt_all() {
        for (auto& site : sites_) {
            if (!site.projection->prompts.empty() && site.projection->merged_prompt) {
                unmerge_prompt(*site.projection);
            }
        }
    }

    /// Adapter-only archive: tensors named <site>.<kind>.<A|B|...>.
    TensorArchive to_archive(const ModelConfig& model_config) const {
        TensorArchive archive;
        archive.header["model_config"] = model_config;
        archive.header["kind"] = "adapters";
        archive.header["lora_config"] = config_;
        for (auto& [name, t] : named_parameters()) {
            archive.tensors.emplace_back(name, t.clone());
        }
        return archive;
    }

    /// Copies adapter values from an archive written by to_archive().
    void load(const TensorArchive& archive) {
        for (auto& [name, t] : named_parameters()) {
            const Tensor* stored = archive.find(name);
            if (stored == nullptr) {
                throw LoadError("adapter checkpoint is missing '" + name + "'");
            }
            if (stored->shape() != t.shape()) {
                throw LoadError("adapter tensor '" + name + "' has shape " + shape_str(stored->shape()) +
                                ", expected " + shape_str(t.shape()));
            }
            Tensor target = t;
            std::copy(stored->data().begin(), stored->data().end(), target.mutable_data().begin());
        }
    }

  private:
    DualLoraConfig config_;
    std::vector<AdapterSite> sites_;
    std::size_t base_count_ = 0;
};

/// Attaches adapters to the projections named by config.targets in every
/// encoder and decoder attention layer and freezes the base model.
inline AdapterRegistry attach_adapters(Seq2SeqModel& model, const DualLoraConfig& config) {
    const auto d = model.config().d_model;
    config.validate(d, d);
    std::vector<AdapterSite> sites;
    std::uint64_t index = 0;
    model.for_each_projection([&](const std::string& name, AdaptedProjection& proj, bool in_encoder) {
        const char which = name.back();
        const std::uint64_t site_index = index++;
        if (!targets_projection(config.targets, which)) {
            return;
        }
        if (proj.has_adapters()) {
            throw ContractError("projection '" + name + "' already carries adapters");
        }
        const bool with_prompt = config.use_prompt &&
                                 (config.prompt_scope == PromptScope::all_layers || in_encoder);
        if (!config.use_context && !with_prompt) {
            return;
        }
        if (config.use_context) {
            proj.context = init_lora(proj.d_out(), proj.d_in(), config.rank, config.init_std,
                                     mix_seed(config.seed, site_index, 0));
        }
        if (with_prompt) {
            for (std::size_t i = 0; i < config.n_prompt_loras; ++i) {
                proj.prompts.push_back(init_lora(proj.d_out(), proj.d_in(), config.rank, config.init_std,
                                                 mix_seed(config.seed, site_index, 1 + i)));
            }
            proj.fusion = make_fusion(config.fusion, proj.d_out(), config.init_std,
                                      mix_seed(config.seed, site_index, 1000));
        }
        proj.combination = config.combination;
        proj.scaling = config.scaling;
        sites.push_back({name, &proj, in_encoder});
    });
    model.set_base_trainable(false);
    return AdapterRegistry(config, std::move(sites), model.base_parameter_count());
}

}  // namespace duallora
