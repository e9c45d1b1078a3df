// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <vector>

#include "duallora/adapters.hpp"
#include "duallora/checkpoint.hpp"
#include "duallora/seq2seq.hpp"
#include "duallora/tokenizer.hpp"
#include "test_support.hpp"

using namespace duallora;
using duallora::testing::bit_identical;
using duallora::testing::perturb;
using duallora::testing::random_ids;
using duallora::testing::random_input;
using duallora::testing::tiny_config;

namespace {

Tensor logits_for(const Seq2SeqModel& model, const EncoderInput& input, const std::vector<int>& dec) {
    NoGradGuard no_grad;
    return model.decoder_logits(model.encode(input), dec);
}

AttentionTrace uniform_trace(std::size_t n) {
    AttentionTrace t;
    t.weights = Tensor::full({n, n}, 1.0 / static_cast<double>(n));
    return t;
}

}  // namespace

TEST(EncoderInput, ContextThenPrompt) {
    const auto c = tiny_config();
    const std::vector<int> prompt{7, 8};
    const auto in = assemble_encoder_input({{3, 4}, {5, 6}}, prompt, c);
    EXPECT_EQ(in.ids, (std::vector<int>{3, 4, 5, 6, 7, 8}));
    EXPECT_EQ(in.context_length, 4u);
    EXPECT_EQ(in.prompt_begin, 4u);
    EXPECT_EQ(in.prompt_end, 6u);
}

TEST(EncoderInput, TruncatesOldestTurnsFirst) {
    auto c = tiny_config();
    c.max_seq_len = 6;
    const std::vector<int> prompt{9, 9};
    const auto in = assemble_encoder_input({{3, 3, 3}, {4, 4}, {5}}, prompt, c);
    EXPECT_EQ(in.ids, (std::vector<int>{4, 4, 5, 9, 9}));
    EXPECT_EQ(in.dropped_turns, 1u);
    const auto cut = assemble_encoder_input({{3, 4, 5, 6, 7, 8}}, prompt, c);
    EXPECT_EQ(cut.ids, (std::vector<int>{5, 6, 7, 8, 9, 9}));
    EXPECT_THROW(assemble_encoder_input({}, std::vector<int>(7, 3), c), ContractError);
}

TEST(EncoderInput, PromptFirstLayout) {
    auto c = tiny_config();
    c.prompt_first = true;
    const std::vector<int> prompt{7, 8};
    const auto in = assemble_encoder_input({{3, 4, 5}}, prompt, c);
    EXPECT_EQ(in.ids, (std::vector<int>{7, 8, 3, 4, 5}));
    EXPECT_EQ(in.prompt_begin, 0u);
    EXPECT_EQ(in.prompt_end, 2u);
}

TEST(Model, ZeroInitAdaptersLeaveOutputsBitIdentical) {
    const auto c = tiny_config();
    for (auto fusion : {FusionKind::mean_add, FusionKind::cross_attention, FusionKind::gate_attention}) {
        Seq2SeqModel plain(c, 11), adapted(c, 11);
        DualLoraConfig cfg;
        cfg.fusion = fusion;
        cfg.targets = TargetProjections::qkvo;
        cfg.n_prompt_loras = 2;
        attach_adapters(adapted, cfg);
        Rng rng(12);
        for (int i = 0; i < 10; ++i) {
            const auto input = random_input(rng, c);
            const std::vector<int> dec{Tokenizer::kBos, 260, 261};
            EXPECT_TRUE(bit_identical(logits_for(plain, input, dec), logits_for(adapted, input, dec)))
                << to_string(fusion);
        }
    }
}

TEST(Model, DecoderIsCausal) {
    const auto c = tiny_config();
    Seq2SeqModel model(c, 13);
    perturb(attach_adapters(model, DualLoraConfig{}), 14, 0.3);
    Rng rng(15);
    const auto input = random_input(rng, c);
    std::vector<int> dec{Tokenizer::kBos, 270, 271, 272, 273};
    const Tensor before = logits_for(model, input, dec);
    for (std::size_t t = 1; t < dec.size(); ++t) {
        auto changed = dec;
        changed[t] = 280;
        const Tensor after = logits_for(model, input, changed);
        for (std::size_t r = 0; r < t; ++r) {
            for (std::size_t v = 0; v < c.vocab_size; ++v) {
                ASSERT_EQ(before.at(r, v), after.at(r, v)) << "row " << r << " changed with token " << t;
            }
        }
    }
}

TEST(Model, EncoderAttentionRowsSumToOne) {
    const auto c = tiny_config();
    Seq2SeqModel model(c, 16);
    perturb(attach_adapters(model, DualLoraConfig{}), 17, 0.3);
    Rng rng(18);
    NoGradGuard no_grad;
    const auto input = random_input(rng, c);
    const auto out = model.encode(input, true);
    ASSERT_EQ(out.traces.size(), c.n_encoder_layers * c.n_heads);
    for (const auto& t : out.traces) {
        EXPECT_EQ(t.boundary, input.context_length);
        for (std::size_t r = 0; r < t.weights.rows(); ++r) {
            double total = 0.0;
            for (std::size_t k = 0; k < t.weights.cols(); ++k) {
                EXPECT_GE(t.weights.at(r, k), 0.0);
                total += t.weights.at(r, k);
            }
            EXPECT_NEAR(total, 1.0, 1e-9);
        }
        const double mass = prompt_attention_mass(t, t.boundary);
        EXPECT_GE(mass, 0.0);
        EXPECT_LE(mass, 1.0);
    }
}

TEST(Model, GreedyDecodingIsDeterministic) {
    const auto c = tiny_config();
    Seq2SeqModel a(c, 19), b(c, 19);
    Rng rng(20);
    for (int i = 0; i < 5; ++i) {
        const auto input = random_input(rng, c);
        NoGradGuard no_grad;
        EXPECT_EQ(a.greedy_decode(a.encode(input), 6), b.greedy_decode(b.encode(input), 6));
    }
}

TEST(Model, ArgmaxTiesGoToLowestId) {
    EXPECT_EQ(Seq2SeqModel::argmax_row(Tensor::matrix({{0.0, 2.0, 2.0, 1.0}}), 0), 1);
}

TEST(Model, BaseArchiveRoundTrip) {
    const auto c = tiny_config();
    Seq2SeqModel model(c, 21);
    const auto restored = Seq2SeqModel::from_archive(parse_archive(serialize_archive(model.to_archive())));
    const auto a = model.named_base_parameters(), b = restored.named_base_parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(bit_identical(a[i].second, b[i].second)) << a[i].first;
    }
}

TEST(Model, TruncatedArchiveIsALoadError) {
    const auto bytes = serialize_archive(Seq2SeqModel(tiny_config(), 22).to_archive());
    EXPECT_THROW(parse_archive(bytes.substr(0, bytes.size() - 5)), LoadError);
    TensorArchive missing;
    EXPECT_THROW(Seq2SeqModel::from_archive(missing), LoadError);
}

TEST(Model, PromptSummaryIsMeanEmbedding) {
    const auto c = tiny_config();
    Seq2SeqModel model(c, 23);
    const std::vector<int> ids{5, 9, 12};
    const Tensor s = model.prompt_summary(ids);
    const Tensor& e = model.token_embedding();
    for (std::size_t j = 0; j < c.d_model; ++j) {
        EXPECT_NEAR(s.at(0, j), (e.at(5, j) + e.at(9, j) + e.at(12, j)) / 3.0, 1e-14);
    }
    EXPECT_THROW(model.prompt_summary(std::vector<int>{}), ContractError);
}

TEST(PromptAttentionMass, UniformRowsGiveKeyFraction) {
    const auto t = uniform_trace(8);
    EXPECT_NEAR(prompt_attention_mass(t, 4), 0.5, 1e-12);
    EXPECT_NEAR(prompt_attention_mass(t, 6), 0.25, 1e-12);
    EXPECT_EQ(prompt_attention_mass(t, 8), 0.0);
    EXPECT_EQ(prompt_attention_mass(t, 0), 0.0);
    EXPECT_THROW(prompt_attention_mass(t, 9), ContractError);
}

TEST(PromptAttentionMass, PromptFirstSegment) {
    auto t = uniform_trace(8);
    t.boundary = 2;
    t.prompt_begin = 0;
    t.prompt_end = 2;
    EXPECT_NEAR(prompt_attention_mass(t), 0.25, 1e-12);
}

TEST(Tokenizer, KnownWordsAndByteFallback) {
    const auto tok = Tokenizer::build({"book a train", "a train to cambridge"}, 300);
    const auto ids = tok.encode("a train");
    ASSERT_EQ(ids.size(), 2u);
    for (int id : ids) {
        EXPECT_GE(id, Tokenizer::kWordBase);
    }
    EXPECT_EQ(tok.decode(tok.encode("book a train to cambridge")), "book a train to cambridge");
    EXPECT_EQ(tok.decode(tok.encode("a zebra xylophone train")), "a zebra xylophone train");
    EXPECT_THROW(Tokenizer::build({}, 10), ConfigError);
}

TEST(Tokenizer, FrequencyOrderedVocabulary) {
    const auto tok = Tokenizer::build({"b a a c c c"}, Tokenizer::kWordBase + 2);
    EXPECT_EQ(tok.encode("c"), (std::vector<int>{Tokenizer::kWordBase}));
    EXPECT_EQ(tok.encode("a"), (std::vector<int>{Tokenizer::kWordBase + 1}));
    EXPECT_GT(tok.encode("b").size(), 0u);
    EXPECT_LT(tok.encode("b").front(), Tokenizer::kWordBase);
}

TEST(Tokenizer, RandomIdsDecodeWithoutThrowing) {
    const auto tok = Tokenizer::build({"x y z"}, 300);
    Rng rng(24);
    for (int i = 0; i < 50; ++i) {
        EXPECT_NO_THROW(tok.decode(random_ids(rng, 10, 300)));
    }
}
