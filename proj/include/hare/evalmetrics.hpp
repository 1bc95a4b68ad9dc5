#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hare/chainparse.hpp"
#include "hare/corpus.hpp"
#include "hare/lexicon.hpp"
#include "hare/text.hpp"

namespace hare {

inline constexpr int kReportSchemaVersion = 1;

struct InstanceScore {
    std::string instance_id;
    bool accurate = false;
    bool consistent = false;
    bool verifiable = false;
    std::optional<ConflictType> conflict_type;  // TRIP only

    bool monotone() const { return (!verifiable || consistent) && (!consistent || accurate); }
};

namespace score_detail {

inline bool matches_gold(const StateAssertion& a, const StoryPairInstance& gold, const StateLexicon& lex) {
    const auto entity = text::normalize_entity(a.entity);
    const auto value = text::casefold(a.value);
    const auto attrs = lex.attributes_for(a.value, a.role);
    for (const auto& g : gold.gold_states) {
        if (g.is_default || g.role != a.role || g.sentence_index != a.sentence_index) continue;
        if (text::normalize_entity(g.entity) != entity) continue;
        if (text::casefold(g.value) != value) continue;
        if (std::find(attrs.begin(), attrs.end(), g.attribute) == attrs.end()) continue;
        return true;
    }
    return false;
}

}  // namespace score_detail

/// accurate: the plausible story is right. consistent: also the conflicting sentence pair (as a
/// set). verifiable: also at least one non-default state on each conflicting sentence, and every
/// non-default predicted state matches a gold annotation.
inline InstanceScore score_trip(const ReasoningChain& chain, const StoryPairInstance& gold, const StateLexicon& lex) {
    if (chain.task != Task::trip) throw std::invalid_argument("score_trip: chain is not a TRIP chain");
    InstanceScore s;
    s.instance_id = gold.id;
    s.conflict_type = gold.conflict_type;
    s.accurate = chain.story_status == StepStatus::parsed && chain.story == gold.implausible();
    const auto [lo, hi] = gold.gold_conflict_pair;
    s.consistent = s.accurate && chain.sentence_status == StepStatus::parsed &&
                   std::set<int>(chain.sentences.begin(), chain.sentences.end()) == std::set<int>{lo, hi};
    if (!s.consistent || chain.state_status != StepStatus::parsed) return s;

    bool covers_lo = false;
    bool covers_hi = false;
    for (const auto& a : chain.states) {
        if (a.malformed) return s;
        if (lex.is_default_label(a.value)) continue;
        if (!score_detail::matches_gold(a, gold, lex)) return s;
        covers_lo = covers_lo || a.sentence_index == lo;
        covers_hi = covers_hi || a.sentence_index == hi;
    }
    s.verifiable = covers_lo && covers_hi;
    return s;
}

inline InstanceScore score_propara(const ReasoningChain& chain, const ConversionInstance& gold) {
    if (chain.task != Task::propara) throw std::invalid_argument("score_propara: chain is not a ProPara chain");
    InstanceScore s;
    s.instance_id = gold.id;
    s.accurate = chain.story_status == StepStatus::parsed && chain.story == gold.gold_story;
    s.consistent = s.accurate && chain.sentence_status == StepStatus::parsed &&
                   chain.sentences == std::vector<int>{gold.gold_sentence};
    s.verifiable = s.consistent && chain.state_status == StepStatus::parsed && chain.result_entity &&
                   text::normalize_entity(*chain.result_entity) == text::normalize_entity(gold.gold_result_entity);
    return s;
}

// ---------------------------------------------------------------------------------------------
// McNemar

struct McNemarResult {
    int b01 = 0;  // A wrong, B right
    int b10 = 0;  // A right, B wrong
    bool no_discordant_pairs = false;
    double statistic = std::numeric_limits<double>::quiet_NaN();  // undefined without discordant pairs
    double p_value = 1.0;                                         // chi-square, 1 dof
    std::optional<double> exact_p;                                // two-sided binomial, when b01 + b10 < 25
};

inline double chi_square_1dof_sf(double x) { return std::erfc(std::sqrt(x / 2.0)); }

/// Two-sided exact sign-test p-value for `k` successes out of `n` at p = 1/2.
inline double binomial_two_sided_p(int k, int n) {
    const int lo = std::min(k, n - k);
    long double term = std::pow(0.5L, n);
    long double tail = 0;
    for (int i = 0; i <= lo; ++i) {
        tail += term;
        term = term * static_cast<long double>(n - i) / static_cast<long double>(i + 1);
    }
    return static_cast<double>(std::min(1.0L, 2.0L * tail));
}

/// Paired comparison on per-instance correctness; continuity-corrected statistic.
inline McNemarResult mcnemar(const std::vector<bool>& a, const std::vector<bool>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("mcnemar: systems scored on different instance counts");
    McNemarResult r;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!a[i] && b[i]) ++r.b01;
        if (a[i] && !b[i]) ++r.b10;
    }
    const int n = r.b01 + r.b10;
    if (n == 0) {
        r.no_discordant_pairs = true;
        r.exact_p = 1.0;
        return r;
    }
    const double d = std::abs(r.b10 - r.b01) - 1.0;
    r.statistic = d * d / n;
    r.p_value = chi_square_1dof_sf(r.statistic);
    if (n < 25) r.exact_p = binomial_two_sided_p(r.b10, n);
    return r;
}

// ---------------------------------------------------------------------------------------------
// Aggregation

class EmptyScoreSet : public std::invalid_argument {
  public:
    EmptyScoreSet() : std::invalid_argument("aggregate: no scores") {}
};

struct MetricCounts {
    std::size_t n = 0;
    std::size_t accurate = 0;
    std::size_t consistent = 0;
    std::size_t verifiable = 0;

    double pct(std::size_t count) const { return n == 0 ? 0.0 : 100.0 * static_cast<double>(count) / static_cast<double>(n); }
    double accuracy() const { return pct(accurate); }
    double consistency() const { return pct(consistent); }
    double verifiability() const { return pct(verifiable); }
    bool monotone() const { return verifiable <= consistent && consistent <= accurate; }

    void add(const InstanceScore& s) {
        ++n;
        accurate += s.accurate;
        consistent += s.consistent;
        verifiable += s.verifiable;
    }
};

struct Comparison {
    std::string label;
    std::string metric;
    McNemarResult result;
};

struct EvalReport {
    MetricCounts overall;
    std::map<std::string, MetricCounts> by_conflict_type;
    std::vector<Comparison> significance;
    nlohmann::json metadata = nlohmann::json::object();
};

inline EvalReport aggregate(const std::vector<InstanceScore>& scores) {
    if (scores.empty()) throw EmptyScoreSet();
    EvalReport r;
    for (const auto& s : scores) {
        if (!s.monotone()) throw std::logic_error("non-monotone score for " + s.instance_id);
        r.overall.add(s);
        if (s.conflict_type) r.by_conflict_type[to_string(*s.conflict_type)].add(s);
    }
    return r;
}

inline nlohmann::json to_json(const MetricCounts& c) {
    return {{"n", c.n},
            {"accurate", c.accurate},
            {"consistent", c.consistent},
            {"verifiable", c.verifiable},
            {"accuracy", c.accuracy()},
            {"consistency", c.consistency()},
            {"verifiability", c.verifiability()}};
}

inline nlohmann::json to_json(const McNemarResult& m) {
    nlohmann::json j{{"b01", m.b01}, {"b10", m.b10}, {"no_discordant_pairs", m.no_discordant_pairs}, {"p_value", m.p_value}};
    j["statistic"] = m.no_discordant_pairs ? nlohmann::json(nullptr) : nlohmann::json(m.statistic);
    j["exact_p"] = m.exact_p ? nlohmann::json(*m.exact_p) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["metadata"] = r.metadata;
    j["overall"] = to_json(r.overall);
    j["by_conflict_type"] = nlohmann::json::object();
    for (const auto& [k, v] : r.by_conflict_type) j["by_conflict_type"][k] = to_json(v);
    j["significance"] = nlohmann::json::array();
    for (const auto& c : r.significance) {
        j["significance"].push_back({{"label", c.label}, {"metric", c.metric}, {"mcnemar", to_json(c.result)}});
    }
    return j;
}

inline std::string format_pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

inline std::string pad(std::string s, std::size_t width) {
    if (s.size() < width) s.append(width - s.size(), ' ');
    return s;
}

/// Rows of (label, counts) rendered as an aligned Accuracy / Consistency / Verifiability table.
inline std::string render_table(const std::vector<std::pair<std::string, MetricCounts>>& rows) {
    std::size_t w = 8;
    for (const auto& [label, _] : rows) w = std::max(w, label.size());
    std::string out = pad("Approach", w) + "  " + pad("N", 5) + "  Acc.   Cons.  Ver.\n";
    for (const auto& [label, c] : rows) {
        out += pad(label, w) + "  " + pad(std::to_string(c.n), 5) + "  " + pad(format_pct(c.accuracy()), 5) + "  " +
               pad(format_pct(c.consistency()), 5) + "  " + format_pct(c.verifiability()) + "\n";
    }
    return out;
}

inline std::string render_text(const EvalReport& r) {
    const std::string label = r.metadata.value("strategy", std::string("run"));
    std::string out;
    out += "Task: " + r.metadata.value("task", std::string("?")) + "  Backend: " + r.metadata.value("backend", std::string("?")) +
           "  Config: " + r.metadata.value("config_hash", std::string("?")).substr(0, 12) + "\n\n";
    out += render_table({{label, r.overall}});
    if (!r.by_conflict_type.empty()) {
        std::vector<std::pair<std::string, MetricCounts>> rows;
        for (const auto& [k, v] : r.by_conflict_type) rows.emplace_back(label + " (" + k + ")", v);
        out += "\nBy conflict type\n" + render_table(rows);
    }
    if (!r.significance.empty()) {
        out += "\nMcNemar\n";
        for (const auto& c : r.significance) {
            char buf[256];
            if (c.result.no_discordant_pairs) {
                std::snprintf(buf, sizeof buf, "%s [%s]: no discordant pairs, p = 1\n", c.label.c_str(), c.metric.c_str());
            } else {
                std::snprintf(buf, sizeof buf, "%s [%s]: b01=%d b10=%d chi2=%.4f p=%.4g", c.label.c_str(),
                              c.metric.c_str(), c.result.b01, c.result.b10, c.result.statistic, c.result.p_value);
            }
            out += buf;
            if (!c.result.no_discordant_pairs) {
                if (c.result.exact_p) {
                    std::snprintf(buf, sizeof buf, " exact p=%.4g", *c.result.exact_p);
                    out += buf;
                }
                out += "\n";
            }
        }
    }
    return out;
}

}  // namespace hare
