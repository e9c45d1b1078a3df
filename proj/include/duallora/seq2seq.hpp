// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "duallora/checkpoint.hpp"
#include "duallora/errors.hpp"
#include "duallora/lora.hpp"
#include "duallora/model_config.hpp"
#include "duallora/rng.hpp"
#include "duallora/tensor.hpp"
#include "duallora/tokenizer.hpp"

namespace duallora {

/// Post-softmax weights of one head of one encoder self-attention layer.
struct AttentionTrace {
    std::size_t layer = 0;
    std::size_t head = 0;
    Tensor weights;  // query positions x key positions
    /// First key position after the dialogue context (context-then-prompt layout).
    std::size_t boundary = 0;
    /// Prompt segment [prompt_begin, prompt_end) in either layout.
    std::size_t prompt_begin = 0;
    std::size_t prompt_end = 0;
};

/// Mean, over query rows in [0, boundary), of the attention placed on keys at
/// or after `boundary`. Zero when there are no context rows.
inline double prompt_attention_mass(const AttentionTrace& trace, std::size_t boundary) {
    const std::size_t keys = trace.weights.cols();
    if (boundary > keys || boundary > trace.weights.rows()) {
        throw ContractError("attention boundary " + std::to_string(boundary) +
                            " exceeds sequence length " + std::to_string(keys));
    }
    if (boundary == 0) {
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < boundary; ++i) {
        for (std::size_t j = boundary; j < keys; ++j) {
            total += trace.weights.at(i, j);
        }
    }
    return std::clamp(total / static_cast<double>(boundary), 0.0, 1.0);
}

/// Layout-aware variant: context rows attend to the trace's prompt segment.
inline double prompt_attention_mass(const AttentionTrace& trace) {
    const std::size_t n = trace.weights.cols();
    if (trace.prompt_begin == trace.boundary) {
        return prompt_attention_mass(trace, trace.boundary);
    }
    if (trace.prompt_end > n || trace.prompt_begin > trace.prompt_end) {
        throw ContractError("trace prompt segment out of range");
    }
    std::size_t rows = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (i >= trace.prompt_begin && i < trace.prompt_end) {
            continue;
        }
        ++rows;
        for (std::size_t j = trace.prompt_begin; j < trace.prompt_end; ++j) {
            total += trace.weights.at(i, j);
        }
    }
    return rows == 0 ? 0.0 : std::clamp(total / static_cast<double>(rows), 0.0, 1.0);
}

struct AttentionBlock {
    AdaptedProjection q, k, v, o;
};

/// Scaled dot-product multi-head attention with per-projection adapter hooks.
/// `summary` is the prompt summary row fed to every adapted projection.
inline Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const AttentionBlock& block,
                                   std::size_t n_heads, const Tensor* summary, bool causal,
                                   AttentionWeights* weights_out = nullptr) {
    Tensor q = dual_forward(block.q, x_q, summary);
    Tensor k = dual_forward(block.k, x_kv, summary);
    Tensor v = dual_forward(block.v, x_kv, summary);
    Tensor mixed = attention(q, k, v, n_heads, causal, weights_out);
    return dual_forward(block.o, mixed, summary);
}

struct EncoderLayer {
    Tensor norm_attn, norm_ffn;
    AttentionBlock self_attn;
    Tensor ff_in, ff_out;
};

struct DecoderLayer {
    Tensor norm_self, norm_cross, norm_ffn;
    AttentionBlock self_attn, cross_attn;
    Tensor ff_in, ff_out;
};

/// Token ids of one encoder input plus where the prompt sits.
struct EncoderInput {
    std::vector<int> ids;
    std::size_t prompt_begin = 0;
    std::size_t prompt_end = 0;
    std::size_t context_length = 0;
    std::size_t dropped_turns = 0;
    /// Tokens fed to the prompt adapters; the prompt segment when empty.
    std::vector<int> adapter_prompt;

    std::span<const int> prompt() const {
        return std::span<const int>(ids).subspan(prompt_begin, prompt_end - prompt_begin);
    }
    std::span<const int> summary_ids() const { return adapter_prompt.empty() ? prompt() : adapter_prompt; }
};

/// Concatenates context turns and the prompt. When the total exceeds
/// max_seq_len, whole turns are dropped oldest first, then the oldest tokens
/// of the remaining turn; the prompt is never shortened.
inline EncoderInput assemble_encoder_input(const std::vector<std::vector<int>>& context_turns,
                                           std::span<const int> prompt, const ModelConfig& config) {
    if (prompt.size() > config.max_seq_len) {
        throw ContractError("prompt of " + std::to_string(prompt.size()) +
                            " tokens exceeds max_seq_len " + std::to_string(config.max_seq_len));
    }
    const std::size_t budget = config.max_seq_len - prompt.size();
    std::size_t first = 0;
    std::size_t total = 0;
    for (const auto& turn : context_turns) {
        total += turn.size();
    }
    while (total > budget && first + 1 < context_turns.size()) {
        total -= context_turns[first].size();
        ++first;
    }
    std::vector<int> context;
    for (std::size_t t = first; t < context_turns.size(); ++t) {
        context.insert(context.end(), context_turns[t].begin(), context_turns[t].end());
    }
    if (context.size() > budget) {
        context.erase(context.begin(), context.begin() + static_cast<std::ptrdiff_t>(context.size() - budget));
    }
    EncoderInput input;
    input.context_length = context.size();
    input.dropped_turns = first;
    if (config.prompt_first) {
        input.ids.assign(prompt.begin(), prompt.end());
        input.ids.insert(input.ids.end(), context.begin(), context.end());
        input.prompt_begin = 0;
        input.prompt_end = prompt.size();
    } else {
        input.ids = std::move(context);
        input.prompt_begin = input.ids.size();
        input.ids.insert(input.ids.end(), prompt.begin(), prompt.end());
        input.prompt_end = input.ids.size();
    }
    return input;
}

struct EncoderOutput {
    Tensor states;   // T x d_model
    Tensor summary;  // 1 x d_model, undefined when no projection needs it
    std::vector<AttentionTrace> traces;
};

/// A small pre-norm T5-style encoder-decoder with learned absolute positions.
class Seq2SeqModel {
  public:
    Seq2SeqModel(ModelConfig config, std::uint64_t seed) : config_(config) {
        config_.validate();
        Rng rng(seed);
        const auto d = config_.d_model, ff = config_.d_ff;
        const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
        const double ff_std = 1.0 / std::sqrt(static_cast<double>(ff));
        const double depth = std::sqrt(2.0 * static_cast<double>(config_.n_encoder_layers + config_.n_decoder_layers));
        auto projection = [&](double stddev) { return AdaptedProjection::plain(Tensor::randn({d, d}, rng, stddev)); };
        auto block = [&] {
            AttentionBlock b;
            b.q = projection(w_std);
            b.k = projection(w_std);
            b.v = projection(w_std);
            b.o = projection(w_std / depth);
            return b;
        };
        token_embedding_ = Tensor::randn({config_.vocab_size, d}, rng, 1.0);
        encoder_positions_ = Tensor::randn({config_.max_seq_len, d}, rng, 0.5);
        decoder_positions_ = Tensor::randn({config_.max_seq_len, d}, rng, 0.5);
        for (std::size_t i = 0; i < config_.n_encoder_layers; ++i) {
            EncoderLayer layer;
            layer.norm_attn = Tensor::ones({d});
            layer.norm_ffn = Tensor::ones({d});
            layer.self_attn = block();
            layer.ff_in = Tensor::randn({ff, d}, rng, w_std);
            layer.ff_out = Tensor::randn({d, ff}, rng, ff_std / depth);
            encoder_.push_back(std::move(layer));
        }
        for (std::size_t i = 0; i < config_.n_decoder_layers; ++i) {
            DecoderLayer layer;
            layer.norm_self = Tensor::ones({d});
            layer.norm_cross = Tensor::ones({d});
            layer.norm_ffn = Tensor::ones({d});
            layer.self_attn = block();
            layer.cross_attn = block();
            layer.ff_in = Tensor::randn({ff, d}, rng, w_std);
            layer.ff_out = Tensor::randn({d, ff}, rng, ff_std / depth);
            decoder_.push_back(std::move(layer));
        }
        encoder_norm_ = Tensor::ones({d});
        decoder_norm_ = Tensor::ones({d});
        if (!config_.tie_embeddings) {
            lm_head_ = Tensor::randn({config_.vocab_size, d}, rng, w_std);
        }
    }

    Seq2SeqModel(const Seq2SeqModel&) = delete;
    Seq2SeqModel& operator=(const Seq2SeqModel&) = delete;
    Seq2SeqModel(Seq2SeqModel&&) = default;
    Seq2SeqModel& operator=(Seq2SeqModel&&) = default;

    const ModelConfig& config() const { return config_; }
    std::vector<EncoderLayer>& encoder_layers() { return encoder_; }
    std::vector<DecoderLayer>& decoder_layers() { return decoder_; }
    const Tensor& token_embedding() const { return token_embedding_; }

    /// Every base tensor with a stable name; adapter tensors are not included.
    std::vector<std::pair<std::string, Tensor>> named_base_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("tok_emb", token_embedding_);
        out.emplace_back("enc_pos", encoder_positions_);
        out.emplace_back("dec_pos", decoder_positions_);
        auto add_block = [&](const std::string& prefix, const AttentionBlock& b) {
            const std::pair<const char*, const AdaptedProjection*> parts[] = {
                {"q", &b.q}, {"k", &b.k}, {"v", &b.v}, {"o", &b.o}};
            for (const auto& [tag, proj] : parts) {
                out.emplace_back(prefix + "." + tag + ".weight", proj->weight);
                out.emplace_back(prefix + "." + tag + ".bias", proj->bias);
            }
        };
        for (std::size_t i = 0; i < encoder_.size(); ++i) {
            const auto p = "encoder." + std::to_string(i);
            const auto& l = encoder_[i];
            out.emplace_back(p + ".norm_attn", l.norm_attn);
            add_block(p + ".self_attn", l.self_attn);
            out.emplace_back(p + ".norm_ffn", l.norm_ffn);
            out.emplace_back(p + ".ff_in", l.ff_in);
            out.emplace_back(p + ".ff_out", l.ff_out);
        }
        out.emplace_back("enc_norm", encoder_norm_);
        for (std::size_t i = 0; i < decoder_.size(); ++i) {
            const auto p = "decoder." + std::to_string(i);
            const auto& l = decoder_[i];
            out.emplace_back(p + ".norm_self", l.norm_self);
            add_block(p + ".self_attn", l.self_attn);
            out.emplace_back(p + ".norm_cross", l.norm_cross);
            add_block(p + ".cross_attn", l.cross_attn);
            out.emplace_back(p + ".norm_ffn", l.norm_ffn);
            out.emplace_back(p + ".ff_in", l.ff_in);
            out.emplace_back(p + ".ff_out", l.ff_out);
        }
        out.emplace_back("dec_norm", decoder_norm_);
        if (!config_.tie_embeddings) {
            out.emplace_back("lm_head", lm_head_);
        }
        return out;
    }

    std::size_t base_parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_base_parameters()) {
            n += t.size();
        }
        return n;
    }

    void set_base_trainable(bool trainable) {
        for (auto& [name, t] : named_base_parameters()) {
            Tensor handle = t;
            handle.set_requires_grad(trainable);
        }
    }

    /// Visits every attention projection as (site name, projection, in encoder).
    void for_each_projection(const std::function<void(const std::string&, AdaptedProjection&, bool)>& fn) {
        visit_projections(*this, fn);
    }
    void for_each_projection(
        const std::function<void(const std::string&, const AdaptedProjection&, bool)>& fn) const {
        visit_projections(*this, fn);
    }

    bool needs_prompt_summary() const {
        bool needed = false;
        for_each_projection([&](const std::string&, const AdaptedProjection& p, bool) {
            needed = needed || p.has_prompt_adapter();
        });
        return needed;
    }

    /// Mean token embedding [1 x d_model] of a prompt.
    Tensor prompt_summary(std::span<const int> prompt_ids) const {
        if (prompt_ids.empty()) {
            throw ContractError("prompt is empty");
        }
        return reshape(prompt_summary_input(embedding_lookup(token_embedding_, prompt_ids)), {1, config_.d_model});
    }

    /// Runs the encoder. The prompt summary is the mean token embedding of the
    /// prompt segment and is shared by every adapted projection.
    EncoderOutput encode(const EncoderInput& input, bool trace = false) const {
        if (input.ids.empty()) {
            throw ContractError("encoder input is empty");
        }
        if (input.ids.size() > config_.max_seq_len) {
            throw ContractError("encoder input of " + std::to_string(input.ids.size()) +
                                " tokens exceeds max_seq_len");
        }
        EncoderOutput out;
        const std::size_t len = input.ids.size();
        if (!input.summary_ids().empty() && needs_prompt_summary()) {
            out.summary = prompt_summary(input.summary_ids());
        }
        const Tensor* summary = out.summary.defined() ? &out.summary : nullptr;
        std::vector<int> positions(len);
        std::iota(positions.begin(), positions.end(), 0);
        Tensor x = add(embedding_lookup(token_embedding_, input.ids), embedding_lookup(encoder_positions_, positions));
        for (std::size_t i = 0; i < encoder_.size(); ++i) {
            const auto& layer = encoder_[i];
            AttentionWeights weights;
            Tensor h = layer_norm(x, layer.norm_attn);
            x = add(x, multi_head_attention(h, h, layer.self_attn, config_.n_heads, summary, false,
                                            trace ? &weights : nullptr));
            if (trace) {
                for (std::size_t head = 0; head < weights.size(); ++head) {
                    const auto& w = weights[head];
                    AttentionTrace t;
                    t.layer = i;
                    t.head = head;
                    t.weights = Tensor({static_cast<std::size_t>(w.rows()), static_cast<std::size_t>(w.cols())},
                                       std::vector<double>(w.data(), w.data() + w.size()));
                    t.boundary = config_.prompt_first ? input.ids.size() - input.context_length
                                                      : input.context_length;
                    t.prompt_begin = input.prompt_begin;
                    t.prompt_end = input.prompt_end;
                    out.traces.push_back(std::move(t));
                }
            }
            h = layer_norm(x, layer.norm_ffn);
            x = add(x, linear(gelu(linear(h, layer.ff_in)), layer.ff_out));
        }
        out.states = layer_norm(x, encoder_norm_);
        return out;
    }

    /// Next-token logits [len(decoder_ids) x vocab] with a causal self-attention mask.
    Tensor decoder_logits(const EncoderOutput& encoded, std::span<const int> decoder_ids) const {
        if (decoder_ids.empty() || decoder_ids.size() > config_.max_seq_len) {
            throw ContractError("decoder input length must be in [1, max_seq_len]");
        }
        const Tensor* summary = encoded.summary.defined() ? &encoded.summary : nullptr;
        std::vector<int> positions(decoder_ids.size());
        std::iota(positions.begin(), positions.end(), 0);
        Tensor x = add(embedding_lookup(token_embedding_, decoder_ids), embedding_lookup(decoder_positions_, positions));
        for (const auto& layer : decoder_) {
            Tensor h = layer_norm(x, layer.norm_self);
            x = add(x, multi_head_attention(h, h, layer.self_attn, config_.n_heads, summary, true));
            h = layer_norm(x, layer.norm_cross);
            x = add(x, multi_head_attention(h, encoded.states, layer.cross_attn, config_.n_heads, summary, false));
            h = layer_norm(x, layer.norm_ffn);
            x = add(x, linear(gelu(linear(h, layer.ff_in)), layer.ff_out));
        }
        if (config_.tie_embeddings) {
            const double s = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
            return linear(scale(layer_norm(x, decoder_norm_), s), token_embedding_);
        }
        return linear(layer_norm(x, decoder_norm_), lm_head_);
    }

    /// Teacher-forced loss for one target sequence (without <bos>/<eos>).
    Tensor sequence_loss(const EncoderOutput& encoded, std::span<const int> target) const {
        std::vector<int> inputs{Tokenizer::kBos};
        inputs.insert(inputs.end(), target.begin(), target.end());
        std::vector<int> labels(target.begin(), target.end());
        labels.push_back(Tokenizer::kEos);
        return cross_entropy(decoder_logits(encoded, inputs), labels);
    }

    /// Argmax decoding until <eos> or max_new_tokens; ties go to the lowest id.
    std::vector<int> greedy_decode(const EncoderOutput& encoded, std::size_t max_new_tokens) const {
        NoGradGuard no_grad;
        std::vector<int> ids{Tokenizer::kBos};
        std::vector<int> produced;
        while (produced.size() < max_new_tokens && ids.size() < config_.max_seq_len) {
            Tensor logits = decoder_logits(encoded, ids);
            const int next = argmax_row(logits, logits.rows() - 1);
            if (next == Tokenizer::kEos) {
                break;
            }
            produced.push_back(next);
            ids.push_back(next);
        }
        return produced;
    }

    static int argmax_row(const Tensor& logits, std::size_t row) {
        const std::size_t v = logits.cols();
        std::size_t best = 0;
        for (std::size_t c = 1; c < v; ++c) {
            if (logits.at(row, c) > logits.at(row, best)) {
                best = c;
            }
        }
        return static_cast<int>(best);
    }

    TensorArchive to_archive() const {
        TensorArchive archive;
        archive.header["model_config"] = config_;
        archive.header["kind"] = "base";
        for (auto& [name, t] : named_base_parameters()) {
            archive.tensors.emplace_back(name, t.clone());
        }
        return archive;
    }

    /// Builds a model from a base (or merged) archive. Adapter tensors, if any,
    /// are ignored here; see AdapterRegistry::load().
    static Seq2SeqModel from_archive(const TensorArchive& archive) {
        if (!archive.header.contains("model_config") || archive.header["model_config"].is_null()) {
            throw LoadError("checkpoint has no model_config");
        }
        Seq2SeqModel model(archive.header["model_config"].get<ModelConfig>(), 0);
        for (auto& [name, t] : model.named_base_parameters()) {
            const Tensor* stored = archive.find(name);
            if (stored == nullptr) {
                throw LoadError("checkpoint is missing tensor '" + name + "'");
            }
            if (stored->shape() != t.shape()) {
                throw LoadError("tensor '" + name + "' has shape " + shape_str(stored->shape()) +
                                ", expected " + shape_str(t.shape()));
            }
            Tensor target = t;
            std::copy(stored->data().begin(), stored->data().end(), target.mutable_data().begin());
        }
        return model;
    }

  private:
    template <typename Self, typename Fn>
    static void visit_projections(Self& self, const Fn& fn) {
        auto visit = [&](const std::string& prefix, auto& b, bool enc) {
            fn(prefix + ".q", b.q, enc);
            fn(prefix + ".k", b.k, enc);
            fn(prefix + ".v", b.v, enc);
            fn(prefix + ".o", b.o, enc);
        };
        for (std::size_t i = 0; i < self.encoder_.size(); ++i) {
            visit("encoder." + std::to_string(i) + ".self_attn", self.encoder_[i].self_attn, true);
        }
        for (std::size_t i = 0; i < self.decoder_.size(); ++i) {
            visit("decoder." + std::to_string(i) + ".self_attn", self.decoder_[i].self_attn, false);
            visit("decoder." + std::to_string(i) + ".cross_attn", self.decoder_[i].cross_attn, false);
        }
    }

    ModelConfig config_;
    Tensor token_embedding_, encoder_positions_, decoder_positions_;
    std::vector<EncoderLayer> encoder_;
    std::vector<DecoderLayer> decoder_;
    Tensor encoder_norm_, decoder_norm_, lm_head_;  // lm_head_ unset when tied
};

}  // namespace duallora
