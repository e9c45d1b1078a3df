// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "duallora/errors.hpp"

namespace duallora {

struct ModelConfig {
    std::size_t vocab_size = 512;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t n_encoder_layers = 2;
    std::size_t n_decoder_layers = 2;
    std::size_t max_seq_len = 256;
    /// Encoder input layout: false = context then prompt, true = prompt then context.
    bool prompt_first = false;
    /// Output logits reuse the token embedding table (scaled by 1/sqrt(d_model)).
    bool tie_embeddings = true;

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || n_encoder_layers < 1 ||
            n_decoder_layers < 1 || max_seq_len < 1) {
            throw ConfigError("model extents must all be at least 1");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        }
    }

    std::size_t attention_layers() const { return n_encoder_layers + 2 * n_decoder_layers; }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"vocab_size", c.vocab_size},
                       {"d_model", c.d_model},
                       {"n_heads", c.n_heads},
                       {"d_ff", c.d_ff},
                       {"n_encoder_layers", c.n_encoder_layers},
                       {"n_decoder_layers", c.n_decoder_layers},
                       {"max_seq_len", c.max_seq_len},
                       {"prompt_first", c.prompt_first},
                       {"tie_embeddings", c.tie_embeddings}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.d_model = j.value("d_model", d.d_model);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.d_ff = j.value("d_ff", d.d_ff);
    c.n_encoder_layers = j.value("n_encoder_layers", d.n_encoder_layers);
    c.n_decoder_layers = j.value("n_decoder_layers", d.n_decoder_layers);
    c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
    c.prompt_first = j.value("prompt_first", d.prompt_first);
    c.tie_embeddings = j.value("tie_embeddings", d.tie_embeddings);
}

}  // namespace duallora
