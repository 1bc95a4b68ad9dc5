#pragma once

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hare/corpus.hpp"
#include "hare/text.hpp"

namespace hare {

/// One ProPara participant column: its names and its location after each step (index 0 = before sentence 1).
/// "-" means the participant does not exist; "?" means it exists at an unknown location.
struct GridParticipant {
    std::vector<std::string> names;
    std::vector<std::string> locations;

    const std::string& canonical() const { return names.front(); }
    bool exists_at(std::size_t step) const { return locations.at(step) != "-"; }

    bool answers_to(std::string_view name) const {
        const auto f = text::casefold(text::trim(name));
        return std::any_of(names.begin(), names.end(), [&](const auto& n) { return text::casefold(n) == f; });
    }
};

struct ProParaPassage {
    std::string id;
    std::string topic;
    std::vector<std::string> sentences;
    std::vector<GridParticipant> participants;

    const GridParticipant* participant(std::string_view name) const {
        for (const auto& p : participants) {
            if (p.answers_to(name)) return &p;
        }
        return nullptr;
    }
};

/// A participant that stops existing at `sentence` while `result` first exists there.
struct Conversion {
    std::string entity;
    int sentence = 0;
    std::string result;
};

struct GridParseResult {
    std::vector<ProParaPassage> passages;
    std::vector<std::string> diagnostics;  // AnnotationGap: passage skipped
};

namespace grid_detail {

inline std::vector<std::string> split_names(const std::string& cell) {
    std::vector<std::string> out;
    for (const auto& n : text::split(cell, ';')) {
        auto t = std::string(text::trim(n));
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

struct RawPassage {
    std::string id;
    std::string topic;
    std::vector<std::string> participant_cells;
    std::map<int, std::string> events;
    std::map<int, std::vector<std::string>> states;
    std::vector<std::string> problems;
};

inline std::optional<int> step_number(std::string_view kind, std::string_view prefix) {
    if (!text::starts_with(kind, prefix)) return std::nullopt;
    const auto digits = kind.substr(prefix.size());
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        return std::nullopt;
    }
    int v = 0;
    if (std::from_chars(digits.data(), digits.data() + digits.size(), v).ec != std::errc{}) return std::nullopt;
    return v;
}

}  // namespace grid_detail

/// Reads the grid TSV layout:
///   id  PROMPT  topic  participant...
///   id  state0  (empty) location...
///   id  event1  sentence
///   id  state1  (empty) location...
inline GridParseResult parse_propara_grid(std::istream& in) {
    using grid_detail::RawPassage;
    std::map<std::string, RawPassage> raw;
    std::vector<std::string> order;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (text::trim(line).empty()) continue;
        auto cols = text::split(line, '\t');
        if (cols.size() < 2) continue;
        const std::string id(text::trim(cols[0]));
        const std::string kind(text::trim(cols[1]));
        auto [it, inserted] = raw.try_emplace(id);
        if (inserted) {
            it->second.id = id;
            order.push_back(id);
        }
        auto& p = it->second;
        if (text::starts_with(kind, "PROMPT")) {
            p.topic = cols.size() > 2 ? cols[2] : "";
            p.participant_cells.assign(cols.begin() + std::min<std::size_t>(3, cols.size()), cols.end());
        } else if (auto ev = grid_detail::step_number(kind, "event")) {
            p.events[*ev] = cols.size() > 2 ? std::string(text::trim(cols[2])) : "";
        } else if (auto st = grid_detail::step_number(kind, "state")) {
            std::vector<std::string> locs;
            for (std::size_t c = 3; c < cols.size(); ++c) locs.emplace_back(text::trim(cols[c]));
            p.states[*st] = std::move(locs);
        } else {
            p.problems.push_back("unrecognized row kind '" + kind + "'");
        }
    }

    GridParseResult out;
    for (const auto& id : order) {
        auto& r = raw.at(id);
        const auto gap = [&](const std::string& why) { out.diagnostics.push_back("AnnotationGap: passage " + id + ": " + why); };
        if (!r.problems.empty()) { gap(r.problems.front()); continue; }
        if (r.participant_cells.empty()) { gap("no PROMPT row with participants"); continue; }
        const int n = static_cast<int>(r.events.size());
        if (n == 0) { gap("no sentences"); continue; }
        bool ok = true;
        for (int i = 1; i <= n && ok; ++i) {
            if (!r.events.count(i) || r.events.at(i).empty()) { gap("missing sentence " + std::to_string(i)); ok = false; }
        }
        for (int s = 0; s <= n && ok; ++s) {
            if (!r.states.count(s)) { gap("missing state row " + std::to_string(s)); ok = false; }
            else if (r.states.at(s).size() != r.participant_cells.size()) {
                gap("state row " + std::to_string(s) + " has " + std::to_string(r.states.at(s).size()) +
                    " columns, expected " + std::to_string(r.participant_cells.size()));
                ok = false;
            }
        }
        if (!ok) continue;
        ProParaPassage p;
        p.id = id;
        p.topic = r.topic;
        for (int i = 1; i <= n; ++i) p.sentences.push_back(r.events.at(i));
        for (std::size_t c = 0; c < r.participant_cells.size(); ++c) {
            GridParticipant gp;
            gp.names = grid_detail::split_names(r.participant_cells[c]);
            if (gp.names.empty()) { ok = false; gap("empty participant name in column " + std::to_string(c)); break; }
            for (int s = 0; s <= n; ++s) {
                auto loc = r.states.at(s)[c];
                if (loc.empty()) { ok = false; gap("empty location cell for " + gp.canonical()); break; }
                gp.locations.push_back(std::move(loc));
            }
            if (!ok) break;
            p.participants.push_back(std::move(gp));
        }
        if (ok) out.passages.push_back(std::move(p));
    }
    return out;
}

inline GridParseResult parse_propara_grid(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot open " + path.string());
    return parse_propara_grid(in);
}

/// The first sentence at which `p` stops existing while some other participant starts existing,
/// regardless of whether the stricter Tiered-ProPara constraints hold.
inline std::optional<Conversion> raw_conversion(const ProParaPassage& passage, const GridParticipant& p) {
    const auto n = passage.sentences.size();
    for (std::size_t i = 1; i <= n; ++i) {
        if (!p.exists_at(i - 1) || p.exists_at(i)) continue;
        for (const auto& q : passage.participants) {
            if (&q == &p) continue;
            if (!q.exists_at(i - 1) && q.exists_at(i)) {
                return Conversion{p.canonical(), static_cast<int>(i), q.canonical()};
            }
        }
    }
    return std::nullopt;
}

/// A conversion satisfying the source-side constraints: the entity never exists again after the
/// conversion sentence and the result never exists before it.
inline std::optional<Conversion> valid_conversion(const ProParaPassage& passage, const GridParticipant& p) {
    const auto n = passage.sentences.size();
    for (std::size_t i = 1; i <= n; ++i) {
        if (!p.exists_at(i - 1) || p.exists_at(i)) continue;
        bool gone_for_good = true;
        for (std::size_t t = i; t <= n; ++t) gone_for_good = gone_for_good && !p.exists_at(t);
        if (!gone_for_good) return std::nullopt;
        for (const auto& q : passage.participants) {
            if (&q == &p) continue;
            bool absent_before = true;
            for (std::size_t t = 0; t < i; ++t) absent_before = absent_before && !q.exists_at(t);
            if (absent_before && q.exists_at(i)) return Conversion{p.canonical(), static_cast<int>(i), q.canonical()};
        }
        return std::nullopt;
    }
    return std::nullopt;
}

/// Passage id -> split name. Without an explicit spec, passages are bucketed by a stable hash in
/// roughly the 496/206/213 train/dev/test proportions.
class SplitSpec {
  public:
    SplitSpec() = default;
    explicit SplitSpec(std::map<std::string, std::string> assignment) : assignment_(std::move(assignment)), explicit_(true) {}

    static SplitSpec from_json(const nlohmann::json& j) {
        if (!j.contains("schema_version")) throw CorpusError("split spec: missing schema_version");
        std::map<std::string, std::string> a;
        for (const auto& [split, ids] : j.at("splits").items()) {
            for (const auto& id : ids) {
                auto [it, inserted] = a.emplace(id.get<std::string>(), split);
                if (!inserted && it->second != split) {
                    throw CorpusError("split spec: passage " + it->first + " assigned to two splits");
                }
            }
        }
        return SplitSpec(std::move(a));
    }

    static SplitSpec load(const std::filesystem::path& path) { return from_json(detail::read_json_file(path)); }

    std::optional<std::string> split_of(const std::string& passage_id) const {
        if (explicit_) {
            auto it = assignment_.find(passage_id);
            if (it == assignment_.end()) return std::nullopt;
            return it->second;
        }
        const auto bucket = text::fnv1a(passage_id) % 915;  // 496 + 206 + 213
        if (bucket < 496) return "train";
        if (bucket < 702) return "dev";
        return "test";
    }

    bool is_explicit() const { return explicit_; }

  private:
    std::map<std::string, std::string> assignment_;
    bool explicit_ = false;
};

struct GenerationResult {
    std::map<std::string, std::vector<ConversionInstance>> splits;
    std::vector<std::string> no_valid_pairs;  // splits that produced nothing
    std::vector<std::string> diagnostics;
};

/// Pairs each (passage, converting entity) with the lowest-id passage of the same split where the
/// entity is a participant that never converts. Output depends only on the passage set.
inline GenerationResult generate_tiered_propara(const std::vector<ProParaPassage>& passages, const SplitSpec& split_spec) {
    GenerationResult out;
    std::map<std::string, int> id_count;
    for (const auto& p : passages) ++id_count[p.id];

    std::map<std::string, std::vector<const ProParaPassage*>> by_split;
    for (const auto& p : passages) {
        if (id_count[p.id] > 1) continue;
        auto split = split_spec.split_of(p.id);
        if (!split) {
            out.diagnostics.push_back("passage " + p.id + " has no split assignment; skipped");
            continue;
        }
        by_split[*split].push_back(&p);
    }
    for (const auto& [id, n] : id_count) {
        if (n > 1) out.diagnostics.push_back("duplicate passage id " + id + "; all copies skipped");
    }

    for (auto& [split, members] : by_split) {
        std::sort(members.begin(), members.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
        auto& emitted = out.splits[split];
        for (const auto* conv_passage : members) {
            std::vector<const GridParticipant*> parts;
            for (const auto& gp : conv_passage->participants) parts.push_back(&gp);
            std::sort(parts.begin(), parts.end(), [](const auto* a, const auto* b) {
                return text::casefold(a->canonical()) < text::casefold(b->canonical());
            });
            for (const auto* gp : parts) {
                const auto conv = valid_conversion(*conv_passage, *gp);
                if (!conv) continue;
                for (const auto* partner : members) {
                    if (partner == conv_passage) continue;
                    const GridParticipant* shared = nullptr;
                    for (const auto& name : gp->names) {
                        if ((shared = partner->participant(name))) break;
                    }
                    if (!shared || raw_conversion(*partner, *shared)) continue;

                    ConversionInstance inst;
                    inst.id = conv_passage->id + "~" + partner->id + ":" + conv->entity;
                    const bool swap = (text::fnv1a(conv_passage->id + "|" + partner->id + "|" + conv->entity) & 1U) != 0;
                    inst.gold_story = swap ? Story::B : Story::A;
                    (swap ? inst.story_b : inst.story_a) = conv_passage->sentences;
                    (swap ? inst.story_a : inst.story_b) = partner->sentences;
                    inst.query_entity = conv->entity;
                    inst.gold_sentence = conv->sentence;
                    inst.gold_result_entity = conv->result;
                    if (auto why = conversion_violation(inst)) {
                        out.diagnostics.push_back("pair " + inst.id + " rejected: " + *why);
                        continue;
                    }
                    emitted.push_back(std::move(inst));
                    break;
                }
            }
        }
        if (emitted.empty()) out.no_valid_pairs.push_back(split);
    }
    return out;
}

}  // namespace hare
