// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "duallora/dst/corpus.hpp"
#include "duallora/dst/state.hpp"
#include "duallora/errors.hpp"

namespace duallora::dst {

struct MetricOptions {
    bool normalize = true;
};

namespace detail {

inline DialogueState canonical(const DialogueState& state, const MetricOptions& options) {
    if (!options.normalize) {
        return state;
    }
    DialogueState out;
    for (const auto& [key, value] : state) {
        out[normalize_value(key)] = normalize_value(value);
    }
    return out;
}

inline void check_aligned(std::size_t predictions, std::size_t golds) {
    if (predictions != golds) {
        throw ContractError("predictions and golds differ in length: " + std::to_string(predictions) + " vs " +
                            std::to_string(golds));
    }
}

}  // namespace detail

/// Fraction of turns whose predicted state equals the gold state exactly.
/// Empty input scores 0.
inline double jga(const std::vector<DialogueState>& predictions, const std::vector<DialogueState>& golds,
                  const MetricOptions& options = {}) {
    detail::check_aligned(predictions.size(), golds.size());
    if (golds.empty()) {
        return 0.0;
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < golds.size(); ++i) {
        hits += detail::canonical(predictions[i], options) == detail::canonical(golds[i], options) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(golds.size());
}

/// Mean over turns with a non-empty gold state of the fraction of gold slots
/// predicted with the right value. Extra predicted slots are not penalized.
/// Scores 0 when no turn is counted.
inline double aga(const std::vector<DialogueState>& predictions, const std::vector<DialogueState>& golds,
                  const MetricOptions& options = {}) {
    detail::check_aligned(predictions.size(), golds.size());
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t i = 0; i < golds.size(); ++i) {
        const auto gold = detail::canonical(golds[i], options);
        if (gold.empty()) {
            continue;
        }
        const auto pred = detail::canonical(predictions[i], options);
        std::size_t correct = 0;
        for (const auto& [key, value] : gold) {
            const auto it = pred.find(key);
            correct += it != pred.end() && it->second == value ? 1 : 0;
        }
        total += static_cast<double>(correct) / static_cast<double>(gold.size());
        ++counted;
    }
    return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

/// Per slot, the fraction of turns where the predicted value (or absence)
/// matches gold.
inline std::map<std::string, double> slot_accuracy(const std::vector<DialogueState>& predictions,
                                                   const std::vector<DialogueState>& golds,
                                                   const std::vector<std::string>& slot_keys,
                                                   const MetricOptions& options = {}) {
    detail::check_aligned(predictions.size(), golds.size());
    std::map<std::string, double> out;
    for (const auto& key : slot_keys) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < golds.size(); ++i) {
            const auto gold = detail::canonical(golds[i], options);
            const auto pred = detail::canonical(predictions[i], options);
            const auto g = gold.find(key);
            const auto p = pred.find(key);
            const bool same = (g == gold.end() && p == pred.end()) ||
                              (g != gold.end() && p != pred.end() && g->second == p->second);
            hits += same ? 1 : 0;
        }
        out[key] = golds.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(golds.size());
    }
    return out;
}

}  // namespace duallora::dst
