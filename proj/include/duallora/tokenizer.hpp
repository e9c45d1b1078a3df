// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "duallora/errors.hpp"

namespace duallora {

/// Whitespace + lowercase word tokenizer with a byte fallback.
///
/// Ids: 0 <pad>, 1 <eos>, 2 <bos>, 3..258 raw bytes, 259.. vocabulary words.
/// Words outside the vocabulary are spelled as byte tokens; two consecutive
/// spelled words are separated by the byte token for ' '.
class Tokenizer {
  public:
    static constexpr int kPad = 0;
    static constexpr int kEos = 1;
    static constexpr int kBos = 2;
    static constexpr int kByteBase = 3;
    static constexpr int kWordBase = kByteBase + 256;

    Tokenizer() = default;

    Tokenizer(std::vector<std::string> words, std::size_t vocab_size)
        : words_(std::move(words)), vocab_size_(vocab_size) {
        if (vocab_size_ < static_cast<std::size_t>(kWordBase)) {
            throw ConfigError("vocab_size must be at least " + std::to_string(kWordBase));
        }
        if (words_.size() > vocab_size_ - kWordBase) {
            throw ConfigError("too many words for vocab_size " + std::to_string(vocab_size_));
        }
        for (std::size_t i = 0; i < words_.size(); ++i) {
            index_.emplace(words_[i], kWordBase + static_cast<int>(i));
        }
    }

    /// Keeps the most frequent words (ties broken lexicographically) that fit.
    static Tokenizer build(const std::vector<std::string>& texts, std::size_t vocab_size) {
        if (vocab_size < static_cast<std::size_t>(kWordBase)) {
            throw ConfigError("vocab_size must be at least " + std::to_string(kWordBase));
        }
        std::map<std::string, std::size_t> counts;
        for (const auto& text : texts) {
            for (auto& w : split(text)) {
                ++counts[w];
            }
        }
        std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        std::vector<std::string> words;
        const std::size_t capacity = vocab_size - kWordBase;
        for (std::size_t i = 0; i < ranked.size() && i < capacity; ++i) {
            words.push_back(ranked[i].first);
        }
        return Tokenizer(std::move(words), vocab_size);
    }

    static std::vector<std::string> split(std::string_view text) {
        std::vector<std::string> out;
        std::string current;
        for (char ch : text) {
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!current.empty()) {
                    out.push_back(std::move(current));
                    current.clear();
                }
            } else {
                current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
            }
        }
        if (!current.empty()) {
            out.push_back(std::move(current));
        }
        return out;
    }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        bool previous_spelled = false;
        for (const auto& w : split(text)) {
            auto it = index_.find(w);
            if (it != index_.end()) {
                ids.push_back(it->second);
                previous_spelled = false;
                continue;
            }
            if (previous_spelled) {
                ids.push_back(byte_id(' '));
            }
            for (unsigned char ch : w) {
                ids.push_back(byte_id(ch));
            }
            previous_spelled = true;
        }
        return ids;
    }

    /// Stops at <eos>; skips <pad>, <bos> and ids outside the vocabulary.
    std::string decode(std::span<const int> ids) const {
        std::string out;
        bool in_bytes = false;
        for (int id : ids) {
            if (id == kEos) {
                break;
            }
            if (id == kPad || id == kBos || id < 0 || static_cast<std::size_t>(id) >= vocab_size_) {
                continue;
            }
            if (id < kWordBase) {
                if (!in_bytes && !out.empty()) {
                    out.push_back(' ');
                }
                out.push_back(static_cast<char>(id - kByteBase));
                in_bytes = true;
                continue;
            }
            const auto index = static_cast<std::size_t>(id - kWordBase);
            if (index >= words_.size()) {
                continue;
            }
            if (!out.empty()) {
                out.push_back(' ');
            }
            out += words_[index];
            in_bytes = false;
        }
        return out;
    }

    std::size_t vocab_size() const { return vocab_size_; }
    const std::vector<std::string>& words() const { return words_; }
    bool contains(const std::string& word) const { return index_.count(word) > 0; }

  private:
    static int byte_id(unsigned char ch) { return kByteBase + static_cast<int>(ch); }

    std::vector<std::string> words_;
    std::size_t vocab_size_ = 0;
    std::unordered_map<std::string, int> index_;
};

}  // namespace duallora
