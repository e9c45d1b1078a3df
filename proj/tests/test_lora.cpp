// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <vector>

#include "duallora/adapters.hpp"
#include "duallora/lora.hpp"
#include "duallora/optim.hpp"
#include "test_support.hpp"

using namespace duallora;
using duallora::testing::bit_identical;
using duallora::testing::naive_matmul;
using duallora::testing::perturb;
using duallora::testing::random_input;
using duallora::testing::tiny_config;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, stddev);
}

/// Random square projection with a context pair and one prompt pair, both
/// moved off their zero initialization.
AdaptedProjection trained_projection(std::size_t d, std::size_t r, std::uint64_t seed,
                                     FusionKind fusion = FusionKind::mean_add) {
    AdaptedProjection p = AdaptedProjection::plain(random_tensor({d, d}, seed));
    p.context = init_lora(d, d, r, 0.3, seed + 1);
    p.prompts.push_back(init_lora(d, d, r, 0.3, seed + 2));
    p.fusion = make_fusion(fusion, d, 0.3, seed + 3);
    Rng rng(seed + 4);
    for (auto* t : {&p.context->B, &p.prompts[0].B}) {
        for (auto& v : t->mutable_data()) {
            v = rng.normal(0.0, 0.3);
        }
    }
    return p;
}

}  // namespace

TEST(InitLora, ZeroBAndSeededA) {
    const auto a = init_lora(12, 10, 3, 0.02, 42);
    const auto b = init_lora(12, 10, 3, 0.02, 42);
    EXPECT_EQ(a.A.shape(), (Shape{3, 10}));
    EXPECT_EQ(a.B.shape(), (Shape{12, 3}));
    EXPECT_TRUE(bit_identical(a.A, b.A));
    for (double v : a.B.data()) {
        EXPECT_EQ(v, 0.0);
    }
    for (double v : dense_delta(a).data()) {
        EXPECT_EQ(v, 0.0);
    }
    EXPECT_FALSE(bit_identical(a.A, init_lora(12, 10, 3, 0.02, 43).A));
}

TEST(InitLora, RankBounds) {
    EXPECT_THROW(init_lora(8, 6, 7, 0.02, 0), ConfigError);
    EXPECT_THROW(init_lora(8, 6, 0, 0.02, 0), ConfigError);
    EXPECT_NO_THROW(init_lora(8, 6, 6, 0.02, 0));
}

TEST(ContextDelta, FreshPairIsZero) {
    const auto pair = init_lora(6, 5, 2, 0.5, 1);
    const Tensor out = context_delta(pair, random_tensor({4, 5}, 2));
    for (double v : out.data()) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(ContextDelta, FactorWiseEqualsDenseProduct) {
    auto pair = init_lora(16, 12, 4, 0.5, 3);
    pair.B = random_tensor({16, 4}, 4);
    const Tensor h = random_tensor({7, 12}, 5);
    const Tensor got = context_delta(pair, h);
    const auto dense = naive_matmul(pair.B, pair.A);
    const auto expected = naive_matmul(h, transpose(Tensor({16, 12}, dense)));
    for (std::size_t i = 0; i < expected.size(); ++i) {
        EXPECT_NEAR(got[i], expected[i], 1e-10);
    }
    EXPECT_THROW(context_delta(pair, random_tensor({7, 11}, 6)), DimensionError);
}

TEST(ContextDelta, RankStaysBoundedAfterAStep) {
    auto pair = init_lora(64, 64, 8, 0.02, 7);
    AdamW opt({pair.A, pair.B}, AdamWOptions{0.05});
    const Tensor h = random_tensor({5, 64}, 8), target = random_tensor({5, 64}, 9);
    Tensor loss = sum(mul(sub(context_delta(pair, h), target), sub(context_delta(pair, h), target)));
    backward(loss);
    opt.step();
    const std::size_t r = rank_of(dense_delta(pair));
    EXPECT_GT(r, 0u);
    EXPECT_LE(r, 8u);
}

TEST(PromptSummary, MeanOfRows) {
    const Tensor e = Tensor::matrix({{1, 2}, {3, 4}, {5, 9}});
    const Tensor p = prompt_summary_input(e);
    EXPECT_DOUBLE_EQ(p[0], 3.0);
    EXPECT_DOUBLE_EQ(p[1], 5.0);
}

TEST(DualForward, HorizontalIsSumOfTerms) {
    const auto proj = trained_projection(6, 2, 10);
    const Tensor h = random_tensor({4, 6}, 11), s = random_tensor({1, 6}, 12);
    const Tensor got = dual_forward(proj, h, &s);
    const auto base = naive_matmul(h, transpose(proj.weight));
    const auto ctx = naive_matmul(h, transpose(Tensor({6, 6}, naive_matmul(proj.context->B, proj.context->A))));
    const auto pr = naive_matmul(s, transpose(Tensor({6, 6}, naive_matmul(proj.prompts[0].B, proj.prompts[0].A))));
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 6; ++c) {
            EXPECT_NEAR(got.at(r, c), base[r * 6 + c] + ctx[r * 6 + c] + pr[c], 1e-10);
        }
    }
}

TEST(DualForward, VerticalStacksPromptUnderContext) {
    auto proj = trained_projection(6, 2, 20);
    proj.combination = Combination::vertical;
    const Tensor h = random_tensor({3, 6}, 21), s = random_tensor({1, 6}, 22);
    const Tensor got = dual_forward(proj, h, &s);
    const Tensor u = prompt_term(proj, s);
    const Tensor expected = add(linear(h, proj.weight, proj.bias), context_delta(*proj.context, add(h, u)));
    EXPECT_LT(max_abs_diff(got, expected), 1e-12);
}

TEST(DualForward, MissingSummaryIsAnError) {
    const auto proj = trained_projection(6, 2, 30);
    EXPECT_THROW(dual_forward(proj, random_tensor({2, 6}, 31), nullptr), ContractError);
}

TEST(Fusion, EveryKindIsIdentityWhenPromptTermIsZero) {
    const Tensor c = random_tensor({5, 6}, 40);
    const Tensor zero = Tensor::zeros({1, 6});
    for (auto kind : {FusionKind::mean_add, FusionKind::cross_attention, FusionKind::gate_attention}) {
        const auto f = make_fusion(kind, 6, 0.5, 41);
        EXPECT_TRUE(bit_identical(fuse(f, c, zero), c)) << to_string(kind);
    }
}

TEST(Fusion, CrossAttentionWithUniformScoresIsMeanAdd) {
    auto f = make_fusion(FusionKind::cross_attention, 6, 0.5, 42);
    f.key = Tensor::zeros({6, 6});
    const Tensor c = random_tensor({5, 6}, 43), u = random_tensor({1, 6}, 44);
    EXPECT_LT(max_abs_diff(fuse(f, c, u), add(c, u)), 1e-12);
}

TEST(Fusion, ParameterOverhead) {
    EXPECT_EQ(make_fusion(FusionKind::mean_add, 8, 0.1, 0).parameter_count(), 0u);
    EXPECT_EQ(make_fusion(FusionKind::cross_attention, 8, 0.1, 0).parameter_count(), 3u * 64u);
    EXPECT_EQ(make_fusion(FusionKind::gate_attention, 8, 0.1, 0).parameter_count(), 2u * 8u + 1u);
}

TEST(Merge, ContextMergeMatchesUnmergedAndRestores) {
    auto proj = trained_projection(8, 3, 50);
    const Tensor w0 = proj.weight.clone();
    const Tensor h = random_tensor({4, 8}, 51), s = random_tensor({1, 8}, 52);
    const Tensor before = dual_forward(proj, h, &s);
    merge_context(proj);
    EXPECT_LT(max_abs_diff(dual_forward(proj, h, &s), before), 1e-9);
    EXPECT_THROW(merge_context(proj), MergeStateError);
    unmerge_context(proj);
    EXPECT_LT(max_abs_diff(proj.weight, w0), 1e-12);
    EXPECT_THROW(unmerge_context(proj), MergeStateError);
}

TEST(Merge, PromptMergeIntoBias) {
    auto proj = trained_projection(8, 3, 60);
    const Tensor b0 = proj.bias.clone();
    const Tensor h = random_tensor({4, 8}, 61), s = random_tensor({1, 8}, 62);
    const Tensor before = dual_forward(proj, h, &s);
    merge_prompt(proj, s);
    EXPECT_LT(max_abs_diff(dual_forward(proj, h, &s), before), 1e-9);
    EXPECT_LT(max_abs_diff(dual_forward(proj, h, nullptr), before), 1e-9);
    const Tensor other = random_tensor({1, 8}, 63);
    EXPECT_THROW(dual_forward(proj, h, &other), MergeStateError);
    EXPECT_THROW(merge_prompt(proj, other), MergeStateError);
    unmerge_prompt(proj);
    EXPECT_LT(max_abs_diff(proj.bias, b0), 1e-12);
    EXPECT_NO_THROW(dual_forward(proj, h, &other));
}

TEST(Merge, BothTermsFoldIntoWeightAndBias) {
    auto proj = trained_projection(8, 2, 70);
    const Tensor h = random_tensor({3, 8}, 71), s = random_tensor({1, 8}, 72);
    const Tensor expected_w = add(proj.weight, dense_delta(*proj.context));
    const Tensor expected_b = reshape(linear(linear(s, proj.prompts[0].A), proj.prompts[0].B), {8});
    merge_context(proj);
    merge_prompt(proj, s);
    EXPECT_LT(max_abs_diff(proj.weight, expected_w), 1e-12);
    EXPECT_LT(max_abs_diff(proj.bias, expected_b), 1e-12);
}

TEST(Merge, NonLinearFusionsAndVerticalRefuse) {
    for (auto kind : {FusionKind::cross_attention, FusionKind::gate_attention}) {
        auto proj = trained_projection(6, 2, 80, kind);
        EXPECT_THROW(merge_prompt(proj, random_tensor({1, 6}, 81)), MergeStateError);
    }
    auto vertical = trained_projection(6, 2, 82);
    vertical.combination = Combination::vertical;
    EXPECT_THROW(merge_context(vertical), MergeStateError);
    EXPECT_THROW(merge_prompt(vertical, random_tensor({1, 6}, 83)), MergeStateError);
}

TEST(Registry, ClosedFormParameterCount) {
    const auto mc = tiny_config();
    for (auto targets : {TargetProjections::qv, TargetProjections::qkv, TargetProjections::qkvo}) {
        for (std::size_t r : {1u, 2u, 4u}) {
            Seq2SeqModel model(mc, 1);
            DualLoraConfig cfg;
            cfg.rank = r;
            cfg.targets = targets;
            const auto reg = attach_adapters(model, cfg);
            const std::size_t per_layer = targets == TargetProjections::qv ? 2 : targets == TargetProjections::qkv ? 3 : 4;
            const std::size_t sites = per_layer * mc.attention_layers();
            const std::size_t pairs = 2;  // context + one prompt
            EXPECT_EQ(reg.trainable_count(), sites * pairs * r * (mc.d_model + mc.d_model));
            EXPECT_EQ(reg.total_count(), model.base_parameter_count() + reg.trainable_count());
        }
    }
}

TEST(Registry, AttachFreezesBaseAndRejectsDoubleAttach) {
    Seq2SeqModel model(tiny_config(), 2);
    const auto reg = attach_adapters(model, DualLoraConfig{});
    for (const auto& [name, t] : model.named_base_parameters()) {
        EXPECT_FALSE(t.requires_grad()) << name;
    }
    for (const auto& t : reg.parameters()) {
        EXPECT_TRUE(t.requires_grad());
    }
    EXPECT_THROW(attach_adapters(model, DualLoraConfig{}), ContractError);
}

TEST(Registry, ArchiveRoundTrip) {
    const auto mc = tiny_config();
    Seq2SeqModel a(mc, 3), b(mc, 3);
    DualLoraConfig cfg;
    cfg.fusion = FusionKind::gate_attention;
    const auto ra = attach_adapters(a, cfg);
    auto rb = attach_adapters(b, cfg);
    perturb(ra, 4, 0.2);
    rb.load(parse_archive(serialize_archive(ra.to_archive(mc))));
    const auto na = ra.named_parameters(), nb = rb.named_parameters();
    ASSERT_EQ(na.size(), nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) {
        EXPECT_EQ(na[i].first, nb[i].first);
        EXPECT_TRUE(bit_identical(na[i].second, nb[i].second)) << na[i].first;
    }
}

TEST(Registry, RegistryMergeMatchesUnmergedModel) {
    const auto mc = tiny_config();
    Seq2SeqModel model(mc, 5);
    auto reg = attach_adapters(model, DualLoraConfig{});
    perturb(reg, 6, 0.3);
    Rng rng(7);
    const auto input = random_input(rng, mc);
    const std::vector<int> dec{Tokenizer::kBos, 270, 271};
    NoGradGuard no_grad;
    const Tensor before = model.decoder_logits(model.encode(input), dec);
    reg.merge_context_all();
    reg.merge_prompt_all(model.prompt_summary(input.prompt()));
    EXPECT_LT(max_abs_diff(model.decoder_logits(model.encode(input), dec), before), 1e-9);
    reg.unmerge_prompt_all();
    reg.unmerge_context_all();
    EXPECT_LT(max_abs_diff(model.decoder_logits(model.encode(input), dec), before), 1e-12);
}

TEST(PromptSummary, InvariantToRowOrder) {
    const Tensor e = random_tensor({5, 7}, 90);
    std::vector<double> reversed;
    for (std::size_t r = 5; r-- > 0;) {
        for (std::size_t c = 0; c < 7; ++c) reversed.push_back(e.at(r, c));
    }
    EXPECT_LT(max_abs_diff(prompt_summary_input(e), prompt_summary_input(Tensor({5, 7}, reversed))), 1e-15);
}

TEST(DualForward, MeanAddIsPositionEquivariant) {
    const auto proj = trained_projection(6, 2, 91);
    const Tensor h = random_tensor({5, 6}, 92), s = random_tensor({1, 6}, 93);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<double> permuted;
    for (auto r : perm) {
        for (std::size_t c = 0; c < 6; ++c) permuted.push_back(h.at(r, c));
    }
    const Tensor out = dual_forward(proj, h, &s);
    const Tensor out_p = dual_forward(proj, Tensor({5, 6}, permuted), &s);
    for (std::size_t i = 0; i < perm.size(); ++i) {
        for (std::size_t c = 0; c < 6; ++c) {
            EXPECT_NEAR(out_p.at(i, c), out.at(perm[i], c), 1e-13);
        }
    }
}
