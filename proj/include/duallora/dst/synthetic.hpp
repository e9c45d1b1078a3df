// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "duallora/dst/corpus.hpp"
#include "duallora/rng.hpp"

namespace duallora::dst {

struct SyntheticOptions {
    std::uint64_t seed = 7;
    std::size_t dialogues_per_domain = 40;
    double second_domain_rate = 0.3;
    std::size_t max_turns = 3;
};

namespace synth {

inline const std::vector<std::string> kPlaces{"cambridge", "london",  "ely",       "norwich",  "ipswich",
                                              "stevenage", "oxford",  "leicester", "stansted", "kettering"};
inline const std::vector<std::string> kTimes{"07:00", "07:30", "08:15", "09:45", "10:30", "11:00", "12:15",
                                             "13:30", "14:45", "16:00", "17:15", "18:30", "19:45", "21:00"};
inline const std::vector<std::string> kDays{"monday", "tuesday", "wednesday", "thursday",
                                            "friday", "saturday", "sunday"};
inline const std::vector<std::string> kCounts{"1", "2", "3", "4", "5", "6", "7", "8"};
inline const std::vector<std::string> kFood{"italian", "chinese", "indian", "french",
                                            "thai",    "british", "korean", "spanish"};
inline const std::vector<std::string> kAreas{"north", "south", "east", "west", "centre"};
inline const std::vector<std::string> kPrices{"cheap", "moderate", "expensive"};
inline const std::vector<std::string> kStars{"1", "2", "3", "4", "5"};
inline const std::vector<std::string> kTypes{"museum", "park", "theatre", "college", "church", "cinema"};

struct SlotSpec {
    std::string domain;
    std::string slot;
    std::string description;
    const std::vector<std::string>* values;
    bool categorical;
};

inline std::vector<SlotSpec> slot_specs() {
    return {
        {"taxi", "departure", "departure location of the taxi", &kPlaces, false},
        {"taxi", "destination", "destination of the taxi", &kPlaces, false},
        {"taxi", "leaveat", "leaving time of the taxi", &kTimes, false},
        {"taxi", "arriveby", "arrival time of the taxi", &kTimes, false},
        {"train", "departure", "departure location of the train", &kPlaces, false},
        {"train", "destination", "destination of the train", &kPlaces, false},
        {"train", "leaveat", "leaving time of the train", &kTimes, false},
        {"train", "arriveby", "arrival time of the train", &kTimes, false},
        {"train", "day", "day of the train journey", &kDays, true},
        {"train", "people", "number of people for the train booking", &kCounts, false},
        {"restaurant", "food", "food type of the restaurant", &kFood, true},
        {"restaurant", "area", "area of the restaurant", &kAreas, true},
        {"restaurant", "pricerange", "price range of the restaurant", &kPrices, true},
        {"restaurant", "day", "day of the restaurant booking", &kDays, true},
        {"restaurant", "people", "number of people for the restaurant booking", &kCounts, false},
        {"restaurant", "time", "booking time of the restaurant", &kTimes, false},
        {"hotel", "area", "area of the hotel", &kAreas, true},
        {"hotel", "pricerange", "price range of the hotel", &kPrices, true},
        {"hotel", "stars", "star rating of the hotel", &kStars, true},
        {"hotel", "day", "day of the hotel booking", &kDays, true},
        {"hotel", "people", "number of people for the hotel booking", &kCounts, false},
        {"hotel", "stay", "number of nights at the hotel", &kCounts, false},
        {"attraction", "area", "area of the attraction", &kAreas, true},
        {"attraction", "type", "type of the attraction", &kTypes, true},
    };
}

inline std::vector<std::string> phrases(const std::string& slot) {
    if (slot == "departure") return {"from {v}", "leaving from {v}"};
    if (slot == "destination") return {"to {v}", "going to {v}"};
    if (slot == "leaveat") return {"leaving after {v}", "departing after {v}"};
    if (slot == "arriveby") return {"arriving by {v}", "getting there by {v}"};
    if (slot == "day") return {"on {v}"};
    if (slot == "people") return {"for {v} people"};
    if (slot == "time") return {"at {v}"};
    if (slot == "food") return {"serving {v} food"};
    if (slot == "area") return {"in the {v}"};
    if (slot == "pricerange") return {"that is {v}"};
    if (slot == "stars") return {"rated {v} stars"};
    if (slot == "stay") return {"staying {v} nights"};
    if (slot == "type") return {"some {v} to visit"};
    return {"{v}"};
}

inline std::vector<std::string> openers(const std::string& domain) {
    if (domain == "taxi") return {"i need a taxi", "please book a taxi", "can you get me a taxi"};
    if (domain == "train") return {"i need a train", "please book a train", "can you find me a train"};
    if (domain == "restaurant") return {"i want a restaurant", "please find a restaurant", "can you book me a table"};
    if (domain == "hotel") return {"i need a hotel", "please find a hotel", "can you book me a room"};
    return {"i want an attraction", "please find an attraction", "can you suggest an attraction"};
}

inline const std::vector<std::string> kFollowUps{"i also want it", "and also", "one more thing ,"};
inline const std::vector<std::string> kClosings{"thanks , bye", "great , thank you", "perfect , goodbye"};
inline const std::vector<std::string> kSystem{"sure , anything else ?", "ok , what else ?", "i can help with that .",
                                              "noted , anything more ?"};

inline std::string render(const std::string& phrase, const std::string& value) {
    std::string out = phrase;
    const auto pos = out.find("{v}");
    out.replace(pos, 3, value);
    return out;
}

}  // namespace synth

inline std::vector<SlotSchema> synthetic_schema() {
    std::vector<SlotSchema> schema;
    for (const auto& spec : synth::slot_specs()) {
        SlotSchema s{spec.domain, spec.slot, spec.description, std::nullopt};
        if (spec.categorical) {
            s.values = *spec.values;
        }
        schema.push_back(std::move(s));
    }
    return schema;
}

/// Values a slot of the synthetic grammar can take.
inline const std::vector<std::string>& synthetic_values(const std::string& domain, const std::string& slot) {
    static const auto specs = synth::slot_specs();
    for (const auto& s : specs) {
        if (s.domain == domain && s.slot == slot) {
            return *s.values;
        }
    }
    throw ContractError("no synthetic slot " + domain + "-" + slot);
}

inline bool shares_slot_name(const std::string& a, const std::string& b) {
    static const auto specs = synth::slot_specs();
    for (const auto& x : specs) {
        for (const auto& y : specs) {
            if (x.domain == a && y.domain == b && x.slot == y.slot) {
                return true;
            }
        }
    }
    return false;
}

/// Seeded template-grammar corpus: each dialogue has a primary domain whose
/// slots are revealed over a few turns, optionally followed by a second domain
/// that shares no slot name with the first.
/// Each slot name has its own cue phrase, shared across domains, so
/// extraction learned on one domain transfers to another.
inline Corpus generate_synthetic_corpus(const SyntheticOptions& options = {}) {
    Corpus corpus;
    corpus.schema = synthetic_schema();
    Rng rng(options.seed);
    const auto domains = corpus.domains();
    const auto specs = synth::slot_specs();

    auto reveal = [&](const std::string& domain, std::size_t n_turns, DialogueState& state,
                      std::vector<Turn>& turns, bool opening) {
        std::vector<std::string> slots;
        for (const auto& s : specs) {
            if (s.domain == domain) {
                slots.push_back(s.slot);
            }
        }
        rng.shuffle(std::span<std::string>(slots));
        const std::size_t lo = std::min<std::size_t>(2, slots.size());
        const std::size_t count = lo + rng.below(slots.size() - lo + 1);
        slots.resize(count);
        n_turns = std::clamp<std::size_t>(n_turns, 1, count);
        std::vector<std::vector<std::string>> groups(n_turns);
        for (std::size_t i = 0; i < slots.size(); ++i) {
            groups[i < n_turns ? i : rng.below(n_turns)].push_back(slots[i]);
        }
        for (std::size_t g = 0; g < groups.size(); ++g) {
            std::string user = g == 0 && opening ? rng.pick(synth::openers(domain))
                               : g == 0          ? "also , " + rng.pick(synth::openers(domain))
                                                 : rng.pick(synth::kFollowUps);
            for (const auto& slot : groups[g]) {
                const auto& value = rng.pick(synthetic_values(domain, slot));
                user += " " + synth::render(rng.pick(synth::phrases(slot)), value);
                state[domain + "-" + slot] = value;
            }
            Turn turn;
            turn.index = turns.size();
            turn.system = turns.empty() ? "" : rng.pick(synth::kSystem);
            turn.user = user;
            turn.state = state;
            turns.push_back(std::move(turn));
        }
    };

    std::size_t serial = 0;
    for (const auto& primary : domains) {
        for (std::size_t k = 0; k < options.dialogues_per_domain; ++k) {
            Dialogue d;
            d.id = primary + "_" + std::to_string(serial++);
            d.domains.push_back(primary);
            DialogueState state;
            const bool second = rng.uniform() < options.second_domain_rate;
            const std::size_t primary_turns = 1 + rng.below(second ? options.max_turns - 1 : options.max_turns);
            reveal(primary, primary_turns, state, d.turns, true);
            std::vector<std::string> partners;
            for (const auto& other : domains) {
                if (other != primary && !shares_slot_name(primary, other)) {
                    partners.push_back(other);
                }
            }
            if (second && !partners.empty()) {
                const std::string& other = rng.pick(partners);
                d.domains.push_back(other);
                reveal(other, 1, state, d.turns, false);
            } else if (rng.uniform() < 0.3) {
                Turn turn;
                turn.index = d.turns.size();
                turn.system = rng.pick(synth::kSystem);
                turn.user = rng.pick(synth::kClosings);
                turn.state = state;
                d.turns.push_back(std::move(turn));
            }
            corpus.dialogues.push_back(std::move(d));
        }
    }
    return corpus;
}

}  // namespace duallora::dst
