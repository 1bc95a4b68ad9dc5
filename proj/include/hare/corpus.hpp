#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hare/lexicon.hpp"
#include "hare/text.hpp"

namespace hare {

enum class Story { A, B };

inline char to_char(Story s) { return s == Story::A ? 'A' : 'B'; }
inline Story other(Story s) { return s == Story::A ? Story::B : Story::A; }

inline std::optional<Story> parse_story(std::string_view s) {
    s = text::trim(s);
    if (s == "A" || s == "a") return Story::A;
    if (s == "B" || s == "b") return Story::B;
    return std::nullopt;
}

enum class ConflictType { explicit_conflict, implicit_conflict };

inline const char* to_string(ConflictType t) {
    return t == ConflictType::explicit_conflict ? "explicit" : "implicit";
}

inline constexpr int kTripSchemaVersion = 1;
inline constexpr int kConversionSchemaVersion = 1;

struct PhysicalStateAnnotation {
    std::string entity;
    std::string attribute;
    Role role = Role::precondition;
    std::string value;
    int sentence_index = 0;  // 1-based
    bool is_default = false;

    friend bool operator==(const PhysicalStateAnnotation&, const PhysicalStateAnnotation&) = default;
};

struct StoryPairInstance {
    std::string id;
    std::vector<std::string> story_a;
    std::vector<std::string> story_b;
    Story gold_plausible = Story::A;
    std::pair<int, int> gold_conflict_pair{0, 0};  // sorted ascending
    std::vector<PhysicalStateAnnotation> gold_states;
    ConflictType conflict_type = ConflictType::implicit_conflict;

    Story implausible() const { return other(gold_plausible); }
    const std::vector<std::string>& story(Story s) const { return s == Story::A ? story_a : story_b; }
};

struct ConversionInstance {
    std::string id;
    std::vector<std::string> story_a;
    std::vector<std::string> story_b;
    std::string query_entity;
    Story gold_story = Story::A;
    int gold_sentence = 0;  // 1-based into the gold story
    std::string gold_result_entity;

    const std::vector<std::string>& story(Story s) const { return s == Story::A ? story_a : story_b; }
};

enum class LoadErrorKind { MissingField, IndexOutOfRange, UnknownAttribute, InvalidValue, InvariantViolation };

inline const char* to_string(LoadErrorKind k) {
    switch (k) {
        case LoadErrorKind::MissingField: return "MissingField";
        case LoadErrorKind::IndexOutOfRange: return "IndexOutOfRange";
        case LoadErrorKind::UnknownAttribute: return "UnknownAttribute";
        case LoadErrorKind::InvalidValue: return "InvalidValue";
        case LoadErrorKind::InvariantViolation: return "InvariantViolation";
    }
    return "?";
}

/// Why one instance was rejected. Rejections never abort a load.
struct LoadDiagnostic {
    std::string instance_id;
    LoadErrorKind kind;
    std::string message;
};

template <typename T>
struct LoadResult {
    std::vector<T> instances;
    std::vector<LoadDiagnostic> rejected;
};

/// Thrown for file-level failures (unreadable file, bad JSON, missing schema version).
class CorpusError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct InstanceReject {
    LoadErrorKind kind;
    std::string message;
};

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw CorpusError(path.string() + ": " + e.what());
    }
}

inline const nlohmann::json& field(const nlohmann::json& obj, const char* name) {
    if (!obj.is_object() || !obj.contains(name)) {
        throw InstanceReject{LoadErrorKind::MissingField, std::string("missing field '") + name + "'"};
    }
    return obj.at(name);
}

inline std::vector<std::string> sentences(const nlohmann::json& obj, const char* name) {
    const auto& arr = field(obj, name);
    if (!arr.is_array() || arr.empty()) {
        throw InstanceReject{LoadErrorKind::InvalidValue, std::string(name) + " must be a non-empty list"};
    }
    std::vector<std::string> out;
    for (const auto& s : arr) out.push_back(s.get<std::string>());
    return out;
}

inline Story story_field(const nlohmann::json& obj, const char* name) {
    auto s = parse_story(field(obj, name).get<std::string>());
    if (!s) throw InstanceReject{LoadErrorKind::InvalidValue, std::string(name) + " must be A or B"};
    return *s;
}

}  // namespace detail

/// True iff an effect on the earlier conflicting sentence and a precondition on the later one
/// carry lexicon-opposed, non-default values for the same entity and attribute.
inline ConflictType classify_conflict_type(const StoryPairInstance& inst, const StateLexicon& lex) {
    const auto [earlier, later] = inst.gold_conflict_pair;
    for (const auto& eff : inst.gold_states) {
        if (eff.role != Role::effect || eff.sentence_index != earlier || eff.is_default) continue;
        for (const auto& pre : inst.gold_states) {
            if (pre.role != Role::precondition || pre.sentence_index != later || pre.is_default) continue;
            if (pre.attribute != eff.attribute) continue;
            if (text::normalize_entity(pre.entity) != text::normalize_entity(eff.entity)) continue;
            const auto* attr = lex.find(eff.attribute);
            if (attr && attr->are_opposed(eff.value, pre.value)) return ConflictType::explicit_conflict;
        }
    }
    return ConflictType::implicit_conflict;
}

/// Parses and validates one TRIP instance; throws detail::InstanceReject on any violation.
inline StoryPairInstance parse_trip_instance(const nlohmann::json& j, const StateLexicon& lex) {
    using detail::field;
    using detail::InstanceReject;
    StoryPairInstance inst;
    inst.id = field(j, "id").get<std::string>();
    inst.story_a = detail::sentences(j, "story_a");
    inst.story_b = detail::sentences(j, "story_b");
    inst.gold_plausible = detail::story_field(j, "plausible");

    const auto& pair = field(j, "conflict_pair");
    if (!pair.is_array() || pair.size() != 2) {
        throw InstanceReject{LoadErrorKind::InvalidValue, "conflict_pair must hold two indices"};
    }
    int lo = pair.at(0).get<int>();
    int hi = pair.at(1).get<int>();
    if (lo > hi) std::swap(lo, hi);
    const int n = static_cast<int>(inst.story(inst.implausible()).size());
    if (lo < 1 || hi > n) {
        throw InstanceReject{LoadErrorKind::IndexOutOfRange,
                             "conflict_pair (" + std::to_string(lo) + "," + std::to_string(hi) +
                                 ") outside implausible story of " + std::to_string(n) + " sentences"};
    }
    if (lo == hi) throw InstanceReject{LoadErrorKind::InvariantViolation, "conflict_pair indices must differ"};
    inst.gold_conflict_pair = {lo, hi};

    for (const auto& s : j.value("states", nlohmann::json::array())) {
        PhysicalStateAnnotation a;
        a.entity = field(s, "entity").get<std::string>();
        a.attribute = field(s, "attribute").get<std::string>();
        const auto role = parse_role(field(s, "role").get<std::string>());
        if (!role) throw InstanceReject{LoadErrorKind::InvalidValue, "role must be precondition or effect"};
        a.role = *role;
        a.value = field(s, "value").get<std::string>();
        a.sentence_index = field(s, "sentence").get<int>();
        const auto* attr = lex.find(a.attribute);
        if (!attr) throw InstanceReject{LoadErrorKind::UnknownAttribute, "unknown attribute '" + a.attribute + "'"};
        a.is_default = attr->is_default(a.value);
        if (!a.is_default && !attr->has_label(a.role, a.value)) {
            throw InstanceReject{LoadErrorKind::InvalidValue, "value '" + a.value + "' is not a " +
                                                                  to_string(a.role) + " label of " + a.attribute};
        }
        if (a.sentence_index != lo && a.sentence_index != hi) {
            throw InstanceReject{LoadErrorKind::IndexOutOfRange,
                                 "state on sentence " + std::to_string(a.sentence_index) +
                                     " is not one of the conflicting sentences"};
        }
        inst.gold_states.push_back(std::move(a));
    }

    const auto classified = classify_conflict_type(inst, lex);
    if (j.contains("conflict_type")) {
        const auto t = j.at("conflict_type").get<std::string>();
        if (t == "explicit") {
            inst.conflict_type = ConflictType::explicit_conflict;
        } else if (t == "implicit") {
            inst.conflict_type = ConflictType::implicit_conflict;
        } else {
            throw InstanceReject{LoadErrorKind::InvalidValue, "conflict_type must be explicit or implicit"};
        }
    } else {
        inst.conflict_type = classified;
    }
    if (inst.conflict_type == ConflictType::explicit_conflict && inst.gold_states.empty()) {
        throw InstanceReject{LoadErrorKind::InvariantViolation, "explicit conflict without state annotations"};
    }
    return inst;
}

inline LoadResult<StoryPairInstance> load_trip_json(const nlohmann::json& doc, const StateLexicon& lex) {
    if (!doc.contains("schema_version")) throw CorpusError("TRIP file: missing schema_version");
    if (doc.at("schema_version").get<int>() != kTripSchemaVersion) {
        throw CorpusError("TRIP file: unsupported schema_version");
    }
    LoadResult<StoryPairInstance> out;
    std::size_t ordinal = 0;
    for (const auto& j : doc.value("instances", nlohmann::json::array())) {
        const std::string id = (j.is_object() && j.contains("id") && j.at("id").is_string())
                                   ? j.at("id").get<std::string>()
                                   : "#" + std::to_string(ordinal);
        ++ordinal;
        try {
            out.instances.push_back(parse_trip_instance(j, lex));
        } catch (const detail::InstanceReject& r) {
            out.rejected.push_back({id, r.kind, r.message});
        } catch (const nlohmann::json::exception& e) {
            out.rejected.push_back({id, LoadErrorKind::InvalidValue, e.what()});
        }
    }
    return out;
}

inline LoadResult<StoryPairInstance> load_trip(const std::filesystem::path& path, const StateLexicon& lex) {
    return load_trip_json(detail::read_json_file(path), lex);
}

inline nlohmann::json to_json(const StoryPairInstance& inst) {
    nlohmann::json states = nlohmann::json::array();
    for (const auto& s : inst.gold_states) {
        states.push_back({{"entity", s.entity},
                          {"attribute", s.attribute},
                          {"role", to_string(s.role)},
                          {"value", s.value},
                          {"sentence", s.sentence_index}});
    }
    return {{"id", inst.id},
            {"story_a", inst.story_a},
            {"story_b", inst.story_b},
            {"plausible", std::string(1, to_char(inst.gold_plausible))},
            {"conflict_pair", {inst.gold_conflict_pair.first, inst.gold_conflict_pair.second}},
            {"states", states},
            {"conflict_type", to_string(inst.conflict_type)}};
}

/// Keeps explicit-conflict instances whose every non-default gold value is one of the top-6 labels.
inline std::vector<StoryPairInstance> filter_top6(const std::vector<StoryPairInstance>& insts,
                                                  const StateLexicon& lex) {
    std::vector<StoryPairInstance> out;
    for (const auto& inst : insts) {
        if (inst.conflict_type != ConflictType::explicit_conflict) continue;
        const bool all_top6 = std::all_of(inst.gold_states.begin(), inst.gold_states.end(), [&](const auto& s) {
            return s.is_default || lex.is_top6_value(s.value);
        });
        if (all_top6) out.push_back(inst);
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Tiered-ProPara instances

/// Returns the first violated invariant, or nullopt when the instance is well formed.
inline std::optional<std::string> conversion_violation(const ConversionInstance& inst) {
    if (inst.story_a.empty() || inst.story_b.empty()) return "both stories must be non-empty";
    if (inst.query_entity.empty()) return "empty query entity";
    if (inst.gold_result_entity.empty()) return "empty result entity";
    const auto& gold = inst.story(inst.gold_story);
    const int n = static_cast<int>(gold.size());
    if (inst.gold_sentence < 1 || inst.gold_sentence > n) return "gold_sentence out of range";
    const auto occurs_in = [](const std::vector<std::string>& story, const std::string& e) {
        return std::any_of(story.begin(), story.end(), [&](const auto& s) { return text::contains_folded(s, e); });
    };
    if (!occurs_in(inst.story_a, inst.query_entity) || !occurs_in(inst.story_b, inst.query_entity)) {
        return "query entity '" + inst.query_entity + "' does not occur in both stories";
    }
    bool result_seen = false;
    for (int i = 1; i <= n; ++i) {
        const auto& s = gold[static_cast<std::size_t>(i - 1)];
        const bool has_result = text::contains_folded(s, inst.gold_result_entity);
        if (i < inst.gold_sentence && has_result) return "result entity occurs before the conversion sentence";
        if (i >= inst.gold_sentence && has_result) result_seen = true;
        if (i > inst.gold_sentence && text::contains_folded(s, inst.query_entity)) {
            return "query entity occurs after the conversion sentence";
        }
    }
    if (!result_seen) return "result entity never occurs at or after the conversion sentence";
    return std::nullopt;
}

inline ConversionInstance parse_conversion_instance(const nlohmann::json& j) {
    using detail::field;
    ConversionInstance inst;
    inst.id = field(j, "id").get<std::string>();
    inst.story_a = detail::sentences(j, "story_a");
    inst.story_b = detail::sentences(j, "story_b");
    inst.query_entity = field(j, "query_entity").get<std::string>();
    inst.gold_story = detail::story_field(j, "gold_story");
    inst.gold_sentence = field(j, "gold_sentence").get<int>();
    inst.gold_result_entity = field(j, "gold_result_entity").get<std::string>();
    const int n = static_cast<int>(inst.story(inst.gold_story).size());
    if (inst.gold_sentence < 1 || inst.gold_sentence > n) {
        throw detail::InstanceReject{LoadErrorKind::IndexOutOfRange, "gold_sentence outside gold story"};
    }
    if (auto v = conversion_violation(inst)) {
        throw detail::InstanceReject{LoadErrorKind::InvariantViolation, *v};
    }
    return inst;
}

inline LoadResult<ConversionInstance> load_conversions_json(const nlohmann::json& doc) {
    if (!doc.contains("schema_version")) throw CorpusError("ProPara file: missing schema_version");
    if (doc.at("schema_version").get<int>() != kConversionSchemaVersion) {
        throw CorpusError("ProPara file: unsupported schema_version");
    }
    LoadResult<ConversionInstance> out;
    std::size_t ordinal = 0;
    for (const auto& j : doc.value("instances", nlohmann::json::array())) {
        const std::string id = (j.is_object() && j.contains("id") && j.at("id").is_string())
                                   ? j.at("id").get<std::string>()
                                   : "#" + std::to_string(ordinal);
        ++ordinal;
        try {
            out.instances.push_back(parse_conversion_instance(j));
        } catch (const detail::InstanceReject& r) {
            out.rejected.push_back({id, r.kind, r.message});
        } catch (const nlohmann::json::exception& e) {
            out.rejected.push_back({id, LoadErrorKind::InvalidValue, e.what()});
        }
    }
    return out;
}

inline LoadResult<ConversionInstance> load_conversions(const std::filesystem::path& path) {
    return load_conversions_json(detail::read_json_file(path));
}

inline nlohmann::json to_json(const ConversionInstance& inst) {
    return {{"id", inst.id},
            {"story_a", inst.story_a},
            {"story_b", inst.story_b},
            {"query_entity", inst.query_entity},
            {"gold_story", std::string(1, to_char(inst.gold_story))},
            {"gold_sentence", inst.gold_sentence},
            {"gold_result_entity", inst.gold_result_entity}};
}

}  // namespace hare
