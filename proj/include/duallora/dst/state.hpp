// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "duallora/dst/corpus.hpp"
#include "duallora/lora.hpp"
#include "duallora/tokenizer.hpp"

namespace duallora::dst {

inline constexpr std::string_view kNone = "none";

/// Text of the adapter prompt for one slot.
inline std::string slot_prompt_text(const SlotSchema& slot, PromptInput mode) {
    if (mode == PromptInput::slot_embedding) {
        return slot.slot;
    }
    return "domain: " + slot.domain + " slot: " + slot.slot + " description: " + slot.description;
}

inline std::vector<int> build_slot_prompt(const SlotSchema& slot, PromptInput mode, const Tokenizer& tokenizer) {
    return tokenizer.encode(slot_prompt_text(slot, mode));
}

/// Lowercases and collapses runs of whitespace; leading/trailing space is dropped.
inline std::string normalize_value(std::string_view text) {
    std::string out;
    bool pending_space = false;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

/// Per-slot generation target: the value itself, or "none" when inactive.
inline std::string linearize_value(const std::string* value) {
    return value == nullptr ? std::string(kNone) : *value;
}

inline std::string linearize_slot(const DialogueState& state, const std::string& key) {
    const auto it = state.find(key);
    return linearize_value(it == state.end() ? nullptr : &it->second);
}

/// Reads a generated slot value. Never fails: empty text, "none", or text with
/// control or non-ASCII characters all read as inactive (empty optional).
inline std::optional<std::string> parse_value(std::string_view text) {
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (c >= 0x80 || (c < 0x20 && !std::isspace(c)) || c == 0x7f || ch == ';' || ch == '=') {
            return std::nullopt;
        }
    }
    std::string v = normalize_value(text);
    if (v.empty() || v == kNone) {
        return std::nullopt;
    }
    return v;
}

/// "key=value ; key=value" over the active slots, in key order.
inline std::string linearize_state(const DialogueState& state) {
    std::string out;
    for (const auto& [key, value] : state) {
        if (!out.empty()) {
            out += " ; ";
        }
        out += key + "=" + value;
    }
    return out;
}

/// Inverse of linearize_state on well-formed text. Malformed segments are
/// skipped, so every input yields some state.
inline DialogueState parse_state(std::string_view text) {
    DialogueState state;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find(';', start);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        const auto segment = text.substr(start, end - start);
        const auto eq = segment.find('=');
        if (eq != std::string_view::npos) {
            const std::string key = normalize_value(segment.substr(0, eq));
            const auto value = parse_value(segment.substr(eq + 1));
            if (!key.empty() && key.find(' ') == std::string::npos && key.find('-') != std::string::npos && value) {
                state[key] = *value;
            }
        }
        start = end + 1;
    }
    return state;
}

inline DialogueState restrict_to_domain(const DialogueState& state, const std::string& domain) {
    DialogueState out;
    for (const auto& [key, value] : state) {
        if (domain_of_key(key) == domain) {
            out.emplace(key, value);
        }
    }
    return out;
}

}  // namespace duallora::dst
