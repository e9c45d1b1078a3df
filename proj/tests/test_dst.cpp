// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "duallora/dst/corpus.hpp"
#include "duallora/dst/metrics.hpp"
#include "duallora/dst/split.hpp"
#include "duallora/dst/state.hpp"
#include "duallora/dst/synthetic.hpp"
#include "duallora/dst/trainer.hpp"
#include "metric_oracle.hpp"

using namespace duallora;
using namespace duallora::dst;
using namespace duallora::testing;

namespace {

nlohmann::json tiny_corpus_json() {
    return nlohmann::json::parse(R"({
      "schema": [
        {"domain": "train", "slot": "leaveat", "description": "departure time of the train"},
        {"domain": "train", "slot": "day", "description": "day of travel", "values": ["monday", "friday"]},
        {"domain": "hotel", "slot": "area", "description": "area of the hotel"}
      ],
      "dialogues": [
        {"id": "d1", "domains": ["train"], "turns": [
          {"user": "a train at 08:15", "system": "", "state": {"train-leaveat": "08:15"}},
          {"user": "on monday", "system": "ok", "state": {"train-leaveat": "08:15", "train-day": "monday", "hotel-area": "none"}}
        ]}
      ]
    })");
}

std::string load_error(const nlohmann::json& doc) {
    try {
        parse_corpus(doc);
    } catch (const LoadError& e) {
        return e.what();
    }
    return "";
}

ModelConfig small_model() {
    ModelConfig mc;
    mc.d_model = 32;
    mc.d_ff = 64;
    mc.n_heads = 2;
    mc.n_encoder_layers = 1;
    mc.n_decoder_layers = 1;
    mc.max_seq_len = 96;
    return mc;
}

std::vector<Dialogue> first_dialogues(const Corpus& corpus, const std::string& domain, std::size_t n) {
    std::vector<Dialogue> out;
    for (const auto& d : corpus.dialogues) {
        if (d.domains == std::vector<std::string>{domain} && out.size() < n) {
            out.push_back(d);
        }
    }
    return out;
}

}  // namespace

TEST(Corpus, ParsesAndDropsNoneValues) {
    const auto c = parse_corpus(tiny_corpus_json());
    ASSERT_EQ(c.dialogues.size(), 1u);
    EXPECT_EQ(c.dialogues[0].turns[1].state.size(), 2u);
    EXPECT_EQ(c.dialogues[0].turns[1].state.count("hotel-area"), 0u);
    EXPECT_TRUE(c.find_slot("train-day")->categorical());
    EXPECT_FALSE(c.find_slot("train-leaveat")->categorical());
    EXPECT_EQ(c.domains(), (std::vector<std::string>{"train", "hotel"}));
}

TEST(Corpus, EmptyDialogueListIsValid) {
    auto doc = tiny_corpus_json();
    doc["dialogues"] = nlohmann::json::array();
    EXPECT_TRUE(parse_corpus(doc).dialogues.empty());
}

TEST(Corpus, ErrorsNameDialogueAndPath) {
    auto unknown = tiny_corpus_json();
    unknown["dialogues"][0]["turns"][0]["state"]["taxi-arriveby"] = "09:00";
    const auto msg = load_error(unknown);
    EXPECT_NE(msg.find("d1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("turns[0].state.taxi-arriveby"), std::string::npos) << msg;

    auto missing = tiny_corpus_json();
    missing["dialogues"][0]["turns"][1].erase("user");
    EXPECT_NE(load_error(missing).find("turns[1]"), std::string::npos);

    auto dup = tiny_corpus_json();
    dup["dialogues"].push_back(dup["dialogues"][0]);
    EXPECT_NE(load_error(dup).find("duplicate"), std::string::npos);

    auto bad_domain = tiny_corpus_json();
    bad_domain["dialogues"][0]["domains"] = {"spa"};
    EXPECT_NE(load_error(bad_domain).find("domains"), std::string::npos);

    auto empty_value = tiny_corpus_json();
    empty_value["dialogues"][0]["turns"][0]["state"]["train-leaveat"] = "";
    EXPECT_FALSE(load_error(empty_value).empty());

    EXPECT_FALSE(load_error(nlohmann::json::array()).empty());
    EXPECT_FALSE(load_error(nlohmann::json{{"schema", nlohmann::json::array()}}).empty());
}

TEST(Corpus, JsonRoundTrip) {
    const auto c = generate_synthetic_corpus({});
    EXPECT_EQ(corpus_to_json(parse_corpus(corpus_to_json(c))), corpus_to_json(c));
}

TEST(Synthetic, SeededAndStable) {
    SyntheticOptions o;
    const auto a = generate_synthetic_corpus(o), b = generate_synthetic_corpus(o);
    EXPECT_EQ(corpus_to_json(a).dump(), corpus_to_json(b).dump());
    EXPECT_EQ(a.domains().size(), 5u);
    EXPECT_EQ(a.dialogues.size(), 5u * o.dialogues_per_domain);
    o.seed = 8;
    EXPECT_NE(corpus_to_json(generate_synthetic_corpus(o)).dump(), corpus_to_json(a).dump());
}

TEST(Synthetic, StatesGrowMonotonically) {
    for (const auto& d : generate_synthetic_corpus({}).dialogues) {
        for (std::size_t t = 1; t < d.turns.size(); ++t) {
            for (const auto& [k, v] : d.turns[t - 1].state) {
                ASSERT_EQ(d.turns[t].state.at(k), v) << d.id;
            }
        }
    }
}

TEST(SlotPrompt, Templates) {
    const SlotSchema s{"train", "leaveat", "departure time of the train", std::nullopt};
    EXPECT_EQ(slot_prompt_text(s, PromptInput::slot_prompt),
              "domain: train slot: leaveat description: departure time of the train");
    EXPECT_EQ(slot_prompt_text(s, PromptInput::slot_embedding), "leaveat");
    const SlotSchema t{"train", "arriveby", "departure time of the train", std::nullopt};
    EXPECT_NE(slot_prompt_text(s, PromptInput::slot_prompt), slot_prompt_text(t, PromptInput::slot_prompt));
    const auto tok = Tokenizer::build({"leaveat"}, 300);
    EXPECT_EQ(build_slot_prompt(s, PromptInput::slot_embedding, tok), tok.encode("leaveat"));
}

TEST(Split, HeldOutTriplesNeverLeak) {
    const auto c = generate_synthetic_corpus({});
    for (const auto& domain : c.domains()) {
        const auto split = make_split(c, domain);
        EXPECT_EQ(count_leaked_triples(split), 0u) << domain;
        EXPECT_FALSE(split.test.empty());
        EXPECT_EQ(split.train.size() + split.test.size(), c.dialogues.size());
        EXPECT_TRUE(split.warnings.empty());
    }
}

TEST(Split, EdgeCases) {
    const auto c = parse_corpus(tiny_corpus_json());
    const auto hotel = make_split(c, "hotel");
    EXPECT_TRUE(hotel.test.empty());
    EXPECT_EQ(hotel.train.size(), 1u);
    const auto train = make_split(c, "train");
    EXPECT_TRUE(train.train.empty());
    EXPECT_EQ(train.warnings.size(), 1u);
    EXPECT_THROW(make_split(c, "spa"), ConfigError);
}

TEST(State, ValueRoundTrip) {
    const auto v = parse_value(linearize_value(nullptr));
    EXPECT_FALSE(v.has_value());
    const std::string t = "08:15";
    EXPECT_EQ(parse_value(linearize_value(&t)), t);
}

TEST(State, GibberishReadsAsNone) {
    for (std::string_view junk : {"", "   ", "none", "NONE", "\x01\x02", "caf\xc3\xa9", "a=b", "x ; y"}) {
        EXPECT_FALSE(parse_value(junk).has_value()) << junk;
    }
    EXPECT_TRUE(parse_state("%%% ;; = =; garbage").empty());
}

TEST(State, RoundTripOnSchemaValues) {
    const auto c = generate_synthetic_corpus({});
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const auto state = random_state(rng, c.schema);
        EXPECT_EQ(parse_state(linearize_state(state)), state);
        for (const auto& [k, v] : state) {
            EXPECT_EQ(parse_value(linearize_slot(state, k)), v);
        }
    }
}

TEST(Metrics, HandExamples) {
    const std::vector<DialogueState> gold{{{"t-a", "1"}, {"t-b", "2"}}};
    EXPECT_EQ(jga(gold, gold), 1.0);
    EXPECT_EQ(aga(gold, gold), 1.0);
    EXPECT_EQ(jga({{{"t-a", "1"}}}, gold), 0.0);
    EXPECT_EQ(aga({{{"t-a", "1"}, {"t-b", "9"}}}, gold), 0.5);
    EXPECT_EQ(jga({{{"t-a", " 1"}, {"t-b", "2 "}}}, gold), 1.0);
    EXPECT_EQ(jga({{{"t-a", " 1"}, {"t-b", "2 "}}}, gold, MetricOptions{false}), 0.0);
    EXPECT_EQ(jga({{}}, {{}}), 1.0);
    EXPECT_EQ(aga({{}}, {{}}), 0.0);
    EXPECT_EQ(jga({}, {}), 0.0);
    EXPECT_THROW(jga(gold, {}), ContractError);
    EXPECT_THROW(aga({}, gold), ContractError);
}

TEST(Metrics, MatchBruteForceOracle) {
    const auto schema = synthetic_schema();
    Rng rng(2);
    for (int i = 0; i < 1000; ++i) {
        const auto p = random_pair(rng, schema);
        const double j = jga(p.predictions, p.golds), a = aga(p.predictions, p.golds);
        ASSERT_EQ(j, brute_jga(p.predictions, p.golds));
        ASSERT_EQ(a, brute_aga(p.predictions, p.golds));
        bool any_empty_gold = false;
        for (const auto& g : p.golds) any_empty_gold = any_empty_gold || g.empty();
        if (!any_empty_gold) {
            ASSERT_LE(j, a);
        }
    }
}

TEST(Metrics, Properties) {
    const auto schema = synthetic_schema();
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        auto p = random_pair(rng, schema);
        EXPECT_EQ(jga(p.predictions, p.predictions), 1.0);
        const double j = jga(p.predictions, p.golds), a = aga(p.predictions, p.golds);
        std::vector<std::size_t> order(p.golds.size());
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(std::span<std::size_t>(order));
        Pair shuffled;
        for (auto k : order) {
            shuffled.predictions.push_back(p.predictions[k]);
            shuffled.golds.push_back(p.golds[k]);
        }
        EXPECT_EQ(jga(shuffled.predictions, shuffled.golds), j);
        EXPECT_DOUBLE_EQ(aga(shuffled.predictions, shuffled.golds), a);
        auto worse = p.predictions;
        worse[rng.below(worse.size())]["bogus-slot"] = "x";
        EXPECT_LE(jga(worse, p.golds), j);
    }
}

TEST(Trainer, ZeroStepsMatchesFrozenBase) {
    const auto corpus = generate_synthetic_corpus({.seed = 7, .dialogues_per_domain = 4});
    const auto split = make_split(corpus, "train");
    const auto mc = small_model();
    const auto tok = build_tokenizer(corpus, mc.vocab_size);
    Seq2SeqModel plain(mc, 1), adapted(mc, 1);
    auto reg = attach_adapters(adapted, DualLoraConfig{});
    const auto report = train_zero_shot(split, corpus, adapted, reg, tok, TrainOptions{.steps = 0});
    EXPECT_EQ(report.steps, 0u);
    const auto a = evaluate(split.test, corpus, "train", plain, nullptr, tok);
    const auto b = evaluate(split.test, corpus, "train", adapted, &reg, tok);
    EXPECT_EQ(a.predictions, b.predictions);
    EXPECT_EQ(a.jga, b.jga);
    EXPECT_EQ(b.trainable, reg.trainable_count());
    EXPECT_EQ(b.total, plain.base_parameter_count() + reg.trainable_count());
}

TEST(Trainer, SeededRunsAreBitIdentical) {
    const auto corpus = generate_synthetic_corpus({.seed = 7, .dialogues_per_domain = 4});
    const auto split = make_split(corpus, "train");
    const auto mc = small_model();
    const auto tok = build_tokenizer(corpus, mc.vocab_size);
    auto run = [&] {
        Seq2SeqModel model(mc, 1);
        auto reg = attach_adapters(model, DualLoraConfig{.seed = 4});
        const auto r = train_zero_shot(split, corpus, model, reg, tok, TrainOptions{.steps = 15, .seed = 4});
        auto e = evaluate(split.test, corpus, "train", model, &reg, tok);
        return std::make_pair(r.loss_curve, e.to_json().dump());
    };
    const auto first = run(), second = run();
    EXPECT_EQ(first.first, second.first);
    EXPECT_EQ(first.second, second.second);
}

TEST(Trainer, MemorizesTenDialogues) {
    const auto corpus = generate_synthetic_corpus({});
    const auto ten = first_dialogues(corpus, "train", 10);
    ASSERT_EQ(ten.size(), 10u);
    const auto mc = small_model();
    const auto tok = build_tokenizer(corpus, mc.vocab_size);
    Seq2SeqModel model(mc, 1);
    model.set_base_trainable(true);
    std::vector<Tensor> params;
    for (auto& [name, t] : model.named_base_parameters()) params.push_back(t);
    const auto examples = build_examples(ten, corpus, tok, mc, PromptInput::slot_prompt);
    train_examples(model, params, examples, TrainOptions{.steps = 1200, .lr = 3e-3, .warmup = -1.0});
    model.set_base_trainable(false);
    const auto e = evaluate(ten, corpus, "train", model, nullptr, tok);
    EXPECT_EQ(e.jga, 1.0);
    EXPECT_EQ(e.aga, 1.0);
}

TEST(Trainer, OneLayerModelLearnsToCopy) {
    ModelConfig mc = small_model();
    mc.vocab_size = 300;
    mc.max_seq_len = 16;
    Seq2SeqModel model(mc, 2);
    Rng rng(3);
    std::vector<DstExample> examples;
    for (int i = 0; i < 20; ++i) {
        std::vector<int> seq;
        for (int k = 0; k < 3; ++k) seq.push_back(3 + static_cast<int>(rng.below(290)));
        DstExample ex;
        ex.input = assemble_encoder_input({seq}, std::vector<int>{5}, mc);
        ex.target = seq;
        examples.push_back(ex);
    }
    model.set_base_trainable(true);
    std::vector<Tensor> params;
    for (auto& [name, t] : model.named_base_parameters()) params.push_back(t);
    train_examples(model, params, examples, TrainOptions{.steps = 300, .lr = 3e-3, .warmup = -1.0});
    NoGradGuard no_grad;
    for (const auto& ex : examples) {
        EXPECT_EQ(model.greedy_decode(model.encode(ex.input), 4), ex.target);
    }
}

TEST(Trainer, DivergenceIsANumericalError) {
    const auto corpus = generate_synthetic_corpus({.seed = 7, .dialogues_per_domain = 2});
    const auto split = make_split(corpus, "train");
    const auto mc = small_model();
    const auto tok = build_tokenizer(corpus, mc.vocab_size);
    Seq2SeqModel model(mc, 1);
    auto reg = attach_adapters(model, DualLoraConfig{});
    for (auto t : reg.parameters()) t.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(train_zero_shot(split, corpus, model, reg, tok, TrainOptions{.steps = 1}), NumericalError);
    EXPECT_THROW(train_zero_shot(split, corpus, model, reg, tok, TrainOptions{.batch_size = 0}), ConfigError);
}

TEST(Trainer, LearningRateSchedule) {
    const TrainOptions o{.steps = 100, .lr = 1.0, .warmup = 0.1};
    EXPECT_DOUBLE_EQ(o.lr_at(0), 0.1);
    EXPECT_DOUBLE_EQ(o.lr_at(9), 1.0);
    EXPECT_DOUBLE_EQ(o.lr_at(55), 0.5);
    const TrainOptions constant{.steps = 100, .lr = 0.3, .warmup = -1.0};
    EXPECT_EQ(constant.lr_at(99), 0.3);
}

TEST(Evaluate, RejectsUnknownDomainAndSlot) {
    const auto corpus = generate_synthetic_corpus({.seed = 7, .dialogues_per_domain = 1});
    const auto mc = small_model();
    const auto tok = build_tokenizer(corpus, mc.vocab_size);
    Seq2SeqModel model(mc, 1);
    EXPECT_THROW(evaluate(corpus.dialogues, corpus, "spa", model, nullptr, tok), ConfigError);
    EXPECT_THROW(evaluate(corpus.dialogues, corpus, "train", model, nullptr, tok, EvalOptions{.only_slot = "hotel-area"}),
                 ConfigError);
    EXPECT_THROW(evaluate(corpus.dialogues, corpus, "train", model, nullptr, tok, EvalOptions{.merged = true}),
                 ContractError);
}
