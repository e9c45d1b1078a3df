// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "duallora/errors.hpp"
#include "duallora/rng.hpp"
#include "duallora/tensor.hpp"

namespace duallora {

enum class TargetProjections { qv, qkv, qkvo };
enum class FusionKind { mean_add, cross_attention, gate_attention };
enum class Combination { horizontal, vertical };
enum class PromptInput { slot_prompt, slot_embedding };
enum class PromptScope { all_layers, encoder_only };

inline std::string to_string(TargetProjections v) {
    switch (v) {
    case TargetProjections::qv: return "qv";
    case TargetProjections::qkv: return "qkv";
    case TargetProjections::qkvo: return "qkvo";
    }
    return "?";
}
inline std::string to_string(FusionKind v) {
    switch (v) {
    case FusionKind::mean_add: return "mean_add";
    case FusionKind::cross_attention: return "cross_attention";
    case FusionKind::gate_attention: return "gate_attention";
    }
    return "?";
}
inline std::string to_string(Combination v) {
    return v == Combination::horizontal ? "horizontal" : "vertical";
}
inline std::string to_string(PromptInput v) {
    return v == PromptInput::slot_prompt ? "slot_prompt" : "slot_embedding";
}
inline std::string to_string(PromptScope v) {
    return v == PromptScope::all_layers ? "all_layers" : "encoder_only";
}

template <typename Enum>
Enum parse_enum(std::string_view text);

template <>
inline TargetProjections parse_enum<TargetProjections>(std::string_view text) {
    if (text == "qv") return TargetProjections::qv;
    if (text == "qkv") return TargetProjections::qkv;
    if (text == "qkvo") return TargetProjections::qkvo;
    throw ConfigError("unknown target projections '" + std::string(text) + "' (qv|qkv|qkvo)");
}
template <>
inline FusionKind parse_enum<FusionKind>(std::string_view text) {
    if (text == "mean_add") return FusionKind::mean_add;
    if (text == "cross_attention") return FusionKind::cross_attention;
    if (text == "gate_attention") return FusionKind::gate_attention;
    throw ConfigError("unknown fusion '" + std::string(text) +
                      "' (mean_add|cross_attention|gate_attention)");
}
template <>
inline Combination parse_enum<Combination>(std::string_view text) {
    if (text == "horizontal") return Combination::horizontal;
    if (text == "vertical") return Combination::vertical;
    throw ConfigError("unknown combination '" + std::string(text) + "' (horizontal|vertical)");
}
template <>
inline PromptInput parse_enum<PromptInput>(std::string_view text) {
    if (text == "slot_prompt") return PromptInput::slot_prompt;
    if (text == "slot_embedding") return PromptInput::slot_embedding;
    throw ConfigError("unknown prompt input '" + std::string(text) +
                      "' (slot_prompt|slot_embedding)");
}
template <>
inline PromptScope parse_enum<PromptScope>(std::string_view text) {
    if (text == "all_layers") return PromptScope::all_layers;
    if (text == "encoder_only") return PromptScope::encoder_only;
    throw ConfigError("unknown prompt scope '" + std::string(text) + "' (all_layers|encoder_only)");
}

struct DualLoraConfig {
    std::size_t rank = 8;
    TargetProjections targets = TargetProjections::qv;
    FusionKind fusion = FusionKind::mean_add;
    Combination combination = Combination::horizontal;
    std::size_t n_prompt_loras = 1;
    double init_std = 0.02;
    std::uint64_t seed = 0;
    PromptInput prompt_input = PromptInput::slot_prompt;
    /// Multiplier on both adapter branches. Eq.-faithful default is 1.
    double scaling = 1.0;
    bool use_context = true;
    bool use_prompt = true;
    PromptScope prompt_scope = PromptScope::all_layers;

    void validate(std::size_t d_in, std::size_t d_out) const {
        if (rank < 1 || rank > std::min(d_in, d_out)) {
            throw ConfigError("rank " + std::to_string(rank) + " outside [1, " +
                              std::to_string(std::min(d_in, d_out)) + "]");
        }
        if (use_prompt && n_prompt_loras < 1) {
            throw ConfigError("n_prompt_loras must be at least 1 when prompt adapters are enabled");
        }
        if (!(init_std > 0.0) || !std::isfinite(init_std)) {
            throw ConfigError("init_std must be positive");
        }
        if (combination == Combination::vertical) {
            if (!use_context || !use_prompt) {
                throw ConfigError("vertical combination needs both context and prompt adapters");
            }
            if (fusion != FusionKind::mean_add) {
                throw ConfigError("vertical combination only supports mean_add fusion");
            }
        }
    }
};

/// Derives independent per-site seeds from one configuration seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    auto splitmix = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    };
    return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0x9e3779b97f4a7c15ULL));
}

/// Low-rank factor pair. B is d_out x r, A is r x d_in, so BA has the shape of
/// the weight it adapts.
struct LoraPair {
    Tensor A;
    Tensor B;
    std::size_t rank = 0;

    std::size_t d_in() const { return A.cols(); }
    std::size_t d_out() const { return B.rows(); }
    std::size_t parameter_count() const { return A.size() + B.size(); }
};

/// A ~ N(0, init_std^2) from the seeded generator, B = 0.
inline LoraPair init_lora(std::size_t d_out, std::size_t d_in, std::size_t rank, double init_std,
                          std::uint64_t seed) {
    if (rank < 1 || rank > std::min(d_out, d_in)) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " invalid for a " +
                          std::to_string(d_out) + "x" + std::to_string(d_in) + " weight");
    }
    Rng rng(seed);
    LoraPair pair;
    pair.A = Tensor::randn({rank, d_in}, rng, init_std).set_requires_grad(true);
    pair.B = Tensor::zeros({d_out, rank}).set_requires_grad(true);
    pair.rank = rank;
    return pair;
}

/// Explicit B*A, outside any graph.
inline Tensor dense_delta(const LoraPair& pair) {
    NoGradGuard no_grad;
    return matmul(pair.B, pair.A);
}

/// The BAh term, computed factor-wise: (h A^T) B^T for row-major h [T x d_in].
inline Tensor context_delta(const LoraPair& pair, const Tensor& h) {
    if (h.cols() != pair.d_in()) {
        throw DimensionError("context_delta input " + shape_str(h.shape()) + " vs A " +
                             shape_str(pair.A.shape()));
    }
    return linear(linear(h, pair.A), pair.B);
}

/// Mean of the prompt's embedding rows [L x d] -> [d].
inline Tensor prompt_summary_input(const Tensor& prompt_embeddings) {
    if (!prompt_embeddings.defined() || prompt_embeddings.dim() != 2) {
        throw ContractError("prompt summary needs a non-empty [L x d] embedding matrix");
    }
    return mean(prompt_embeddings, 0);
}

/// FNV-1a over the little-endian bytes of the summary values.
inline std::uint64_t prompt_fingerprint(const Tensor& summary) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : summary.data()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Fusion of the context output with the prompt term
// ---------------------------------------------------------------------------

/// Trainable parameters owned by a non-default fusion method.
///   cross_attention: query [n x n], key [n x n], out [n x n] (identity init)
///   gate_attention:  context_gate [1 x n], prompt_gate [1 x n], gate_bias [1]
struct FusionParams {
    FusionKind kind = FusionKind::mean_add;
    Tensor query, key, out;
    Tensor context_gate, prompt_gate, gate_bias;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        switch (kind) {
        case FusionKind::mean_add: return {};
        case FusionKind::cross_attention:
            return {{"fuse_query", query}, {"fuse_key", key}, {"fuse_out", out}};
        case FusionKind::gate_attention:
            return {{"gate_context", context_gate},
                    {"gate_prompt", prompt_gate},
                    {"gate_bias", gate_bias}};
        }
        return {};
    }
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_parameters()) {
            n += t.size();
        }
        return n;
    }
};

inline FusionParams make_fusion(FusionKind kind, std::size_t width, double init_std,
                                std::uint64_t seed) {
    FusionParams f;
    f.kind = kind;
    Rng rng(seed);
    switch (kind) {
    case FusionKind::mean_add: break;
    case FusionKind::cross_attention:
        f.query = Tensor::randn({width, width}, rng, init_std).set_requires_grad(true);
        f.key = Tensor::randn({width, width}, rng, init_std).set_requires_grad(true);
        f.out = Tensor::identity(width).set_requires_grad(true);
        break;
    case FusionKind::gate_attention:
        f.context_gate = Tensor::randn({1, width}, rng, init_std).set_requires_grad(true);
        f.prompt_gate = Tensor::randn({1, width}, rng, init_std).set_requires_grad(true);
        f.gate_bias = Tensor::zeros({1}).set_requires_grad(true);
        break;
    }
    return f;
}

/// Combines the position-wise context output [T x n] with the prompt term
/// [1 x n] (or [n]).
///   mean_add:        C + u on every row
///   cross_attention: the prompt queries the context rows; row t receives
///                    T * alpha_t * (u out^T), so uniform attention reduces
///                    to mean_add through `out`
///   gate_attention:  row t receives sigmoid(C_t . gc + u . gp + b) * u
inline Tensor fuse(const FusionParams& fusion, const Tensor& context_term, const Tensor& prompt_term) {
    const std::size_t n = context_term.cols();
    if (prompt_term.size() != n) {
        throw DimensionError("fuse: prompt term " + shape_str(prompt_term.shape()) +
                             " vs context " + shape_str(context_term.shape()));
    }
    const Tensor u = prompt_term.dim() == 2 ? prompt_term : reshape(prompt_term, {1, n});
    switch (fusion.kind) {
    case FusionKind::mean_add: return add(context_term, u);
    case FusionKind::cross_attention: {
        const double positions = static_cast<double>(context_term.rows());
        Tensor q = linear(u, fusion.query);
        Tensor keys = linear(context_term, fusion.key);
        Tensor scores = scale(linear(keys, q), 1.0 / std::sqrt(static_cast<double>(n)));
        Tensor weights = scale(softmax(scores, 0), positions);
        return add(context_term, matmul(weights, linear(u, fusion.out)));
    }
    case FusionKind::gate_attention: {
        Tensor from_context = linear(context_term, fusion.context_gate);
        Tensor from_prompt = reshape(linear(u, fusion.prompt_gate, fusion.gate_bias), {1});
        Tensor gate = sigmoid(add(from_context, from_prompt));
        return add(context_term, matmul(gate, u));
    }
    }
    throw ConfigError("unknown fusion kind");
}

// ---------------------------------------------------------------------------
// Adapted projection
// ---------------------------------------------------------------------------

/// Extension point for non-LoRA prompt bypasses: maps the prompt summary
/// [1 x d_in] to an additive term [1 x d_out]. Projections carrying any
/// extra branch refuse prompt merging.
using PromptBypass = std::function<Tensor(const Tensor& summary)>;

struct MergedPrompt {
    std::uint64_t fingerprint = 0;
    Tensor summary;
    std::vector<double> bias_delta;
};

/// A frozen linear map y = h W^T + b plus optional context and prompt adapters.
struct AdaptedProjection {
    Tensor weight;  // d_out x d_in
    Tensor bias;    // d_out
    std::optional<LoraPair> context;
    std::vector<LoraPair> prompts;  // summed when more than one
    FusionParams fusion;
    Combination combination = Combination::horizontal;
    double scaling = 1.0;
    std::vector<PromptBypass> extra_prompt_branches;

    bool merged_context = false;
    std::vector<double> merged_weight_delta;
    std::optional<MergedPrompt> merged_prompt;

    static AdaptedProjection plain(Tensor weight) {
        AdaptedProjection p;
        const auto d_out = weight.rows();
        p.weight = std::move(weight);
        p.bias = Tensor::zeros({d_out});
        return p;
    }

    std::size_t d_in() const { return weight.cols(); }
    std::size_t d_out() const { return weight.rows(); }
    bool has_prompt_adapter() const { return !prompts.empty() || !extra_prompt_branches.empty(); }
    bool has_adapters() const { return context.has_value() || has_prompt_adapter(); }
    bool needs_prompt() const { return has_prompt_adapter() && !merged_prompt.has_value(); }

    std::vector<std::pair<std::string, Tensor>> adapter_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        if (context) {
            out.emplace_back("context.A", context->A);
            out.emplace_back("context.B", context->B);
        }
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            const auto tag = "prompt" + std::to_string(i);
            out.emplace_back(tag + ".A", prompts[i].A);
            out.emplace_back(tag + ".B", prompts[i].B);
        }
        for (auto& named : fusion.named_parameters()) {
            out.push_back(std::move(named));
        }
        return out;
    }
    std::size_t adapter_parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : adapter_parameters()) {
            n += t.size();
        }
        return n;
    }
};

namespace detail {

inline Tensor as_row(const Tensor& v) {
    return v.dim() == 2 && v.rows() == 1 ? v : reshape(v, {1, v.size()});
}

}  // namespace detail

/// Sum over prompt pairs of B_p (A_p p), as a [1 x d_out] row.
inline Tensor prompt_term(const AdaptedProjection& proj, const Tensor& summary) {
    if (summary.size() != proj.d_in()) {
        throw DimensionError("prompt summary " + shape_str(summary.shape()) + " vs projection input " +
                             std::to_string(proj.d_in()));
    }
    const Tensor p = detail::as_row(summary);
    Tensor total;
    for (const auto& pair : proj.prompts) {
        Tensor term = linear(linear(p, pair.A), pair.B);
        total = total.defined() ? add(total, term) : term;
    }
    for (const auto& branch : proj.extra_prompt_branches) {
        Tensor term = branch(p);
        total = total.defined() ? add(total, term) : term;
    }
    if (!total.defined()) {
        return Tensor::zeros({1, proj.d_out()});
    }
    return proj.scaling == 1.0 ? total : scale(total, proj.scaling);
}

namespace detail {

inline void check_prompt_state(const AdaptedProjection& proj, const Tensor* summary) {
    if (proj.needs_prompt() && (summary == nullptr || !summary->defined())) {
        throw ContractError("projection has an unmerged prompt adapter but no prompt summary was given");
    }
    if (proj.merged_prompt && summary && summary->defined() &&
        prompt_fingerprint(*summary) != proj.merged_prompt->fingerprint) {
        throw MergeStateError("projection bias holds a different merged prompt than the one supplied");
    }
}

}  // namespace detail

/// Stacked topology: h' = W h + b + B A (h + B_p A_p p).
inline Tensor vertical_forward(const AdaptedProjection& proj, const Tensor& h, const Tensor* summary) {
    if (!proj.context || proj.prompts.empty()) {
        throw ContractError("vertical combination needs both a context and a prompt adapter");
    }
    if (proj.merged_context || proj.merged_prompt) {
        throw MergeStateError("vertical combination cannot run on merged adapters");
    }
    if (summary == nullptr || !summary->defined()) {
        throw ContractError("vertical combination requires a prompt summary");
    }
    if (proj.d_in() != proj.d_out()) {
        throw DimensionError("vertical combination needs a square projection");
    }
    Tensor stacked = add(h, prompt_term(proj, *summary));
    Tensor delta = context_delta(*proj.context, stacked);
    if (proj.scaling != 1.0) {
        delta = scale(delta, proj.scaling);
    }
    return add(linear(h, proj.weight, proj.bias), delta);
}

/// h' = W h + b + B A h + B_p A_p p (prompt term fused per `proj.fusion`).
/// Terms whose adapters are merged into W or b are skipped.
inline Tensor dual_forward(const AdaptedProjection& proj, const Tensor& h, const Tensor* summary) {
    if (proj.combination == Combination::vertical && proj.context && !proj.prompts.empty()) {
        return vertical_forward(proj, h, summary);
    }
    detail::check_prompt_state(proj, summary);
    Tensor out = linear(h, proj.weight, proj.bias);
    if (proj.context && !proj.merged_context) {
        Tensor delta = context_delta(*proj.context, h);
        out = add(out, proj.scaling == 1.0 ? delta : scale(delta, proj.scaling));
    }
    if (proj.needs_prompt()) {
        out = fuse(proj.fusion, out, prompt_term(proj, *summary));
    }
    return out;
}

inline void merge_context(AdaptedProjection& proj) {
    if (!proj.context) {
        throw ContractError("merge_context: projection has no context adapter");
    }
    if (proj.merged_context) {
        throw MergeStateError("context adapter is already merged");
    }
    if (proj.combination == Combination::vertical) {
        throw MergeStateError("vertical combination is not mergeable");
    }
    Tensor delta = dense_delta(*proj.context);
    auto w = proj.weight.mutable_data();
    proj.merged_weight_delta.assign(delta.data().begin(), delta.data().end());
    for (std::size_t i = 0; i < w.size(); ++i) {
        proj.merged_weight_delta[i] *= proj.scaling;
        w[i] += proj.merged_weight_delta[i];
    }
    proj.merged_context = true;
}

inline void unmerge_context(AdaptedProjection& proj) {
    if (!proj.context) {
        throw ContractError("unmerge_context: projection has no context adapter");
    }
    if (!proj.merged_context) {
        throw MergeStateError("context adapter is not merged");
    }
    auto w = proj.weight.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] -= proj.merged_weight_delta[i];
    }
    proj.merged_weight_delta.clear();
    proj.merged_context = false;
}

/// Folds the prompt term for one summary vector into the bias.
inline void merge_prompt(AdaptedProjection& proj, const Tensor& summary) {
    if (proj.prompts.empty()) {
        throw ContractError("merge_prompt: projection has no prompt adapter");
    }
    if (proj.merged_prompt) {
        throw MergeStateError("a prompt is already merged into this projection");
    }
    if (proj.combination == Combination::vertical) {
        throw MergeStateError("vertical combination is not mergeable");
    }
    if (proj.fusion.kind != FusionKind::mean_add) {
        throw MergeStateError("only mean_add fusion is position-independent and mergeable");
    }
    if (!proj.extra_prompt_branches.empty()) {
        throw MergeStateError("extra prompt branches are not mergeable");
    }
    NoGradGuard no_grad;
    Tensor delta = prompt_term(proj, summary);
    MergedPrompt merged;
    merged.fingerprint = prompt_fingerprint(summary);
    merged.summary = summary.clone();
    merged.bias_delta.assign(delta.data().begin(), delta.data().end());
    auto b = proj.bias.mutable_data();
    for (std::size_t i = 0; i < b.size(); ++i) {
        b[i] += merged.bias_delta[i];
    }
    proj.merged_prompt = std::move(merged);
}

inline void unmerge_prompt(AdaptedProjection& proj) {
    if (proj.prompts.empty()) {
        throw ContractError("unmerge_prompt: projection has no prompt adapter");
    }
    if (!proj.merged_prompt) {
        throw MergeStateError("no prompt is merged into this projection");
    }
    auto b = proj.bias.mutable_data();
    for (std::size_t i = 0; i < b.size(); ++i) {
        b[i] -= proj.merged_prompt->bias_delta[i];
    }
    proj.merged_prompt.reset();
}

}  // namespace duallora
