#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hare/text.hpp"

namespace hare {

enum class Role { precondition, effect };

inline const char* to_string(Role r) { return r == Role::precondition ? "precondition" : "effect"; }

inline std::optional<Role> parse_role(std::string_view s) {
    if (s == "precondition") return Role::precondition;
    if (s == "effect") return Role::effect;
    return std::nullopt;
}

/// One label plus the one-shot sentence used to familiarize a model with it.
struct LabelExemplar {
    std::string label;
    std::string clause;  // "Tom turned on the microwave"
    std::string entity;  // "microwave"
};

struct AttributeLexicon {
    std::string name;
    std::string default_label;
    std::vector<LabelExemplar> precondition;
    std::vector<LabelExemplar> effect;
    // Unordered label pairs that contradict when one is an effect and the other a later precondition.
    std::vector<std::pair<std::string, std::string>> opposed;

    const std::vector<LabelExemplar>& labels(Role r) const { return r == Role::precondition ? precondition : effect; }

    bool has_label(Role r, std::string_view value) const {
        const auto folded = text::casefold(value);
        return std::any_of(labels(r).begin(), labels(r).end(),
                           [&](const LabelExemplar& e) { return text::casefold(e.label) == folded; });
    }

    bool is_default(std::string_view value) const { return text::casefold(value) == text::casefold(default_label); }

    bool are_opposed(std::string_view a, std::string_view b) const {
        const auto fa = text::casefold(a);
        const auto fb = text::casefold(b);
        if (fa == fb) return false;
        return std::any_of(opposed.begin(), opposed.end(), [&](const auto& p) {
            const auto x = text::casefold(p.first);
            const auto y = text::casefold(p.second);
            return (x == fa && y == fb) || (x == fb && y == fa);
        });
    }
};

/// The closed physical-state label space: attributes in familiarization order.
class StateLexicon {
  public:
    StateLexicon() = default;
    StateLexicon(std::vector<AttributeLexicon> attributes,
                 std::vector<std::pair<std::string, std::string>> top6_pairs)
        : attributes_(std::move(attributes)), top6_(std::move(top6_pairs)) {
        validate();
    }

    static StateLexicon from_json(const nlohmann::json& j) {
        if (!j.contains("schema_version")) throw std::runtime_error("lexicon: missing schema_version");
        std::vector<AttributeLexicon> attrs;
        const std::string fallback_default = j.value("default_label", "irrelevant");
        for (const auto& a : j.at("attributes")) {
            AttributeLexicon attr;
            attr.name = a.at("name").get<std::string>();
            attr.default_label = a.value("default", fallback_default);
            auto read_labels = [](const nlohmann::json& arr) {
                std::vector<LabelExemplar> out;
                for (const auto& e : arr) {
                    out.push_back({e.at("label").get<std::string>(), e.at("clause").get<std::string>(),
                                   e.at("entity").get<std::string>()});
                }
                return out;
            };
            attr.precondition = read_labels(a.at("precondition"));
            attr.effect = read_labels(a.at("effect"));
            for (const auto& p : a.value("opposed", nlohmann::json::array())) {
                attr.opposed.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
            }
            attrs.push_back(std::move(attr));
        }
        std::vector<std::pair<std::string, std::string>> top6;
        for (const auto& p : j.value("top6_pairs", nlohmann::json::array())) {
            top6.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
        }
        return StateLexicon(std::move(attrs), std::move(top6));
    }

    static StateLexicon load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open lexicon " + path.string());
        return from_json(nlohmann::json::parse(in));
    }

    const std::vector<AttributeLexicon>& attributes() const { return attributes_; }
    bool empty() const { return attributes_.empty(); }

    /// (effect, precondition) pairs of the most frequent conflicts, e.g. (inedible, edible).
    const std::vector<std::pair<std::string, std::string>>& top6_pairs() const { return top6_; }

    const AttributeLexicon* find(std::string_view name) const {
        for (const auto& a : attributes_) {
            if (a.name == name) return &a;
        }
        return nullptr;
    }

    /// Attributes whose label set for `role` contains `value`.
    std::vector<std::string> attributes_for(std::string_view value, Role role) const {
        std::vector<std::string> out;
        for (const auto& a : attributes_) {
            if (a.has_label(role, value)) out.push_back(a.name);
        }
        return out;
    }

    bool knows_label(std::string_view value, Role role) const { return !attributes_for(value, role).empty(); }

    bool is_default_label(std::string_view value) const {
        return std::any_of(attributes_.begin(), attributes_.end(),
                           [&](const AttributeLexicon& a) { return a.is_default(value); });
    }

    bool is_top6_value(std::string_view value) const {
        const auto f = text::casefold(value);
        return std::any_of(top6_.begin(), top6_.end(), [&](const auto& p) {
            return text::casefold(p.first) == f || text::casefold(p.second) == f;
        });
    }

    /// The lexicon restricted to the top-6 pairs: one effect and one precondition label each,
    /// kept in familiarization order.
    StateLexicon top6_only() const {
        const auto pick = [](const std::vector<LabelExemplar>& v, const std::string& l) -> std::optional<LabelExemplar> {
            for (const auto& e : v) {
                if (text::casefold(e.label) == text::casefold(l)) return e;
            }
            return std::nullopt;
        };
        std::vector<AttributeLexicon> out;
        for (const auto& a : attributes_) {
            for (const auto& [eff, pre] : top6_) {
                auto p = pick(a.precondition, pre);
                auto e = pick(a.effect, eff);
                if (!p || !e) continue;
                AttributeLexicon f;
                f.name = a.name;
                f.default_label = a.default_label;
                f.precondition = {*p};
                f.effect = {*e};
                f.opposed = {{eff, pre}};
                out.push_back(std::move(f));
                break;
            }
        }
        return StateLexicon(std::move(out), top6_);
    }

  private:
    void validate() const {
        for (const auto& a : attributes_) {
            if (a.precondition.empty() && a.effect.empty()) {
                throw std::invalid_argument("lexicon attribute without labels: " + a.name);
            }
        }
    }

    std::vector<AttributeLexicon> attributes_;
    std::vector<std::pair<std::string, std::string>> top6_;
};

}  // namespace hare
