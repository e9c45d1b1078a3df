// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duallora/errors.hpp"

namespace duallora::dst {

struct SlotSchema {
    std::string domain;
    std::string slot;
    std::string description;
    /// Categorical slots list their values; free-form slots leave this empty.
    std::optional<std::vector<std::string>> values;

    std::string key() const { return domain + "-" + slot; }
    bool categorical() const { return values.has_value(); }
};

/// Active slot values keyed by "domain-slot". "none" is never stored.
using DialogueState = std::map<std::string, std::string>;

struct Turn {
    std::size_t index = 0;
    std::string user;
    std::string system;
    DialogueState state;  // cumulative
};

struct Dialogue {
    std::string id;
    std::vector<std::string> domains;
    std::vector<Turn> turns;

    bool touches(const std::string& domain) const;
};

struct Corpus {
    std::vector<SlotSchema> schema;
    std::vector<Dialogue> dialogues;

    const SlotSchema* find_slot(const std::string& key) const {
        for (const auto& s : schema) {
            if (s.key() == key) {
                return &s;
            }
        }
        return nullptr;
    }
    std::vector<const SlotSchema*> slots_of(const std::string& domain) const {
        std::vector<const SlotSchema*> out;
        for (const auto& s : schema) {
            if (s.domain == domain) {
                out.push_back(&s);
            }
        }
        return out;
    }
    std::vector<std::string> domains() const {
        std::vector<std::string> out;
        for (const auto& s : schema) {
            if (std::find(out.begin(), out.end(), s.domain) == out.end()) {
                out.push_back(s.domain);
            }
        }
        return out;
    }
};

inline std::string domain_of_key(const std::string& key) { return key.substr(0, key.find('-')); }

inline bool Dialogue::touches(const std::string& domain) const {
    if (std::find(domains.begin(), domains.end(), domain) != domains.end()) {
        return true;
    }
    for (const auto& turn : turns) {
        for (const auto& [key, value] : turn.state) {
            if (domain_of_key(key) == domain) {
                return true;
            }
        }
    }
    return false;
}

namespace detail {

[[noreturn]] inline void reject(const std::string& where, const std::string& what) {
    throw LoadError(where + ": " + what);
}

inline const nlohmann::json& require(const nlohmann::json& j, const char* field, const std::string& where) {
    if (!j.is_object() || !j.contains(field)) {
        reject(where, std::string("missing field '") + field + "'");
    }
    return j.at(field);
}

inline std::string require_string(const nlohmann::json& j, const char* field, const std::string& where) {
    const auto& v = require(j, field, where);
    if (!v.is_string()) {
        reject(where + "." + field, "expected a string");
    }
    return v.get<std::string>();
}

}  // namespace detail

/// Parses and validates a corpus document. Errors name the dialogue id and
/// the JSON path of the offending field.
inline Corpus parse_corpus(const nlohmann::json& doc) {
    using detail::reject;
    Corpus corpus;
    if (!doc.is_object()) {
        reject("$", "corpus must be an object");
    }
    const auto& schema = detail::require(doc, "schema", "$");
    if (!schema.is_array()) {
        reject("$.schema", "expected an array");
    }
    std::set<std::string> keys;
    for (std::size_t i = 0; i < schema.size(); ++i) {
        const auto where = "$.schema[" + std::to_string(i) + "]";
        SlotSchema s;
        s.domain = detail::require_string(schema[i], "domain", where);
        s.slot = detail::require_string(schema[i], "slot", where);
        s.description = detail::require_string(schema[i], "description", where);
        if (s.domain.empty() || s.slot.empty() || s.domain.find('-') != std::string::npos) {
            reject(where, "domain and slot must be non-empty and the domain may not contain '-'");
        }
        if (s.description.empty()) {
            reject(where + ".description", "must be non-empty");
        }
        if (schema[i].contains("values") && !schema[i]["values"].is_null()) {
            const auto& values = schema[i]["values"];
            if (!values.is_array() || values.empty()) {
                reject(where + ".values", "expected a non-empty array of strings");
            }
            std::vector<std::string> list;
            for (const auto& v : values) {
                if (!v.is_string()) {
                    reject(where + ".values", "expected strings");
                }
                list.push_back(v.get<std::string>());
            }
            s.values = std::move(list);
        }
        if (!keys.insert(s.key()).second) {
            reject(where, "duplicate slot " + s.key());
        }
        corpus.schema.push_back(std::move(s));
    }
    const auto& dialogues = detail::require(doc, "dialogues", "$");
    if (!dialogues.is_array()) {
        reject("$.dialogues", "expected an array");
    }
    std::set<std::string> ids;
    for (std::size_t i = 0; i < dialogues.size(); ++i) {
        const auto& dj = dialogues[i];
        Dialogue d;
        d.id = detail::require_string(dj, "id", "$.dialogues[" + std::to_string(i) + "]");
        const auto where = "dialogue '" + d.id + "' $.dialogues[" + std::to_string(i) + "]";
        if (!ids.insert(d.id).second) {
            reject(where + ".id", "duplicate dialogue id");
        }
        const auto& domains = detail::require(dj, "domains", where);
        if (!domains.is_array()) {
            reject(where + ".domains", "expected an array");
        }
        for (const auto& dom : domains) {
            if (!dom.is_string() || corpus.slots_of(dom.get<std::string>()).empty()) {
                reject(where + ".domains", "unknown domain " + dom.dump());
            }
            d.domains.push_back(dom.get<std::string>());
        }
        const auto& turns = detail::require(dj, "turns", where);
        if (!turns.is_array()) {
            reject(where + ".turns", "expected an array");
        }
        for (std::size_t t = 0; t < turns.size(); ++t) {
            const auto tw = where + ".turns[" + std::to_string(t) + "]";
            Turn turn;
            turn.index = t;
            turn.user = detail::require_string(turns[t], "user", tw);
            turn.system = turns[t].contains("system") ? detail::require_string(turns[t], "system", tw) : "";
            const auto& state = detail::require(turns[t], "state", tw);
            if (!state.is_object()) {
                reject(tw + ".state", "expected an object");
            }
            for (const auto& [key, value] : state.items()) {
                if (!value.is_string()) {
                    reject(tw + ".state." + key, "expected a string value");
                }
                if (corpus.find_slot(key) == nullptr) {
                    reject(tw + ".state." + key, "unknown slot");
                }
                const auto v = value.get<std::string>();
                if (v.empty()) {
                    reject(tw + ".state." + key, "empty value");
                }
                if (v == "none") {
                    continue;
                }
                turn.state.emplace(key, v);
            }
            d.turns.push_back(std::move(turn));
        }
        corpus.dialogues.push_back(std::move(d));
    }
    return corpus;
}

inline nlohmann::json corpus_to_json(const Corpus& corpus) {
    nlohmann::json doc;
    doc["schema"] = nlohmann::json::array();
    for (const auto& s : corpus.schema) {
        nlohmann::json js{{"domain", s.domain}, {"slot", s.slot}, {"description", s.description}};
        if (s.values) {
            js["values"] = *s.values;
        }
        doc["schema"].push_back(std::move(js));
    }
    doc["dialogues"] = nlohmann::json::array();
    for (const auto& d : corpus.dialogues) {
        nlohmann::json jd{{"id", d.id}, {"domains", d.domains}, {"turns", nlohmann::json::array()}};
        for (const auto& t : d.turns) {
            jd["turns"].push_back({{"user", t.user}, {"system", t.system}, {"state", t.state}});
        }
        doc["dialogues"].push_back(std::move(jd));
    }
    return doc;
}

inline Corpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot open corpus " + path.string());
    }
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(path.string() + ": not valid JSON: " + e.what());
    }
    return parse_corpus(doc);
}

inline void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw LoadError("cannot write " + path.string());
    }
    out << corpus_to_json(corpus).dump(1) << '\n';
}

}  // namespace duallora::dst
