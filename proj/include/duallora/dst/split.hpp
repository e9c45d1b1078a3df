// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "duallora/dst/corpus.hpp"
#include "duallora/errors.hpp"

namespace duallora::dst {

struct ZeroShotSplit {
    std::string held_out;
    std::vector<Dialogue> train;
    std::vector<Dialogue> test;
    std::vector<std::string> warnings;
};

/// Leave-one-domain-out split: dialogues touching the held-out domain (by
/// declared domains or by any gold triple) go to test, the rest to train.
inline ZeroShotSplit make_split(const Corpus& corpus, const std::string& held_out) {
    if (corpus.slots_of(held_out).empty()) {
        throw ConfigError("unknown domain '" + held_out + "'");
    }
    ZeroShotSplit split;
    split.held_out = held_out;
    for (const auto& d : corpus.dialogues) {
        (d.touches(held_out) ? split.test : split.train).push_back(d);
    }
    if (split.train.empty()) {
        split.warnings.push_back("training partition is empty after holding out '" + held_out + "'");
    }
    return split;
}

/// Number of held-out gold triples in the training partition; zero for any
/// split produced by make_split.
inline std::size_t count_leaked_triples(const ZeroShotSplit& split) {
    std::size_t leaked = 0;
    for (const auto& d : split.train) {
        for (const auto& turn : d.turns) {
            for (const auto& [key, value] : turn.state) {
                leaked += domain_of_key(key) == split.held_out ? 1 : 0;
            }
        }
    }
    return leaked;
}

}  // namespace duallora::dst
