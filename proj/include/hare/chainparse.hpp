#pragma once

#include <algorithm>
#include <optional>
#include <charconv>
#include <regex>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hare/corpus.hpp"
#include "hare/lexicon.hpp"
#include "hare/text.hpp"

namespace hare {

enum class Task { trip, propara };

inline const char* to_string(Task t) { return t == Task::trip ? "trip" : "propara"; }

inline std::optional<Task> parse_task(std::string_view s) {
    if (s == "trip" || s == "TRIP") return Task::trip;
    if (s == "propara" || s == "ProPara") return Task::propara;
    return std::nullopt;
}

/// The three reasoning levels, plus the single-prompt chain used by ICL-HAR.
enum class Step { story, sentence, state, full_chain };

inline const char* to_string(Step s) {
    switch (s) {
        case Step::story: return "story";
        case Step::sentence: return "sentence";
        case Step::state: return "state";
        case Step::full_chain: return "full_chain";
    }
    return "?";
}

inline std::optional<Step> parse_step(std::string_view s) {
    if (s == "story") return Step::story;
    if (s == "sentence") return Step::sentence;
    if (s == "state") return Step::state;
    if (s == "full_chain") return Step::full_chain;
    return std::nullopt;
}

enum class StepStatus { parsed, malformed, absent };

inline const char* to_string(StepStatus s) {
    switch (s) {
        case StepStatus::parsed: return "parsed";
        case StepStatus::malformed: return "malformed";
        case StepStatus::absent: return "absent";
    }
    return "?";
}

inline std::optional<StepStatus> parse_step_status(std::string_view s) {
    if (s == "parsed") return StepStatus::parsed;
    if (s == "malformed") return StepStatus::malformed;
    if (s == "absent") return StepStatus::absent;
    return std::nullopt;
}

struct StateAssertion {
    std::string entity;
    Role role = Role::precondition;  // "was"/"were" -> precondition, "is now"/"are now" -> effect
    std::string value;               // lexicon spelling when recognized
    int sentence_index = 0;          // 0 until a "For sentence N:" scope or merge assigns one
    bool malformed = false;

    friend bool operator==(const StateAssertion&, const StateAssertion&) = default;
};

/// A parsed generation. For TRIP `story` is the implausible story (the letter the model did
/// not call plausible); for ProPara it is the story the conversion happens in.
struct ReasoningChain {
    Task task = Task::trip;
    std::optional<Story> story;
    std::optional<Story> sentence_story;  // story the sentence step was scoped to, if stated
    std::vector<int> sentences;           // sorted, unique
    std::vector<StateAssertion> states;   // TRIP
    std::optional<std::string> result_entity;  // ProPara
    std::string raw_text;
    StepStatus story_status = StepStatus::absent;
    StepStatus sentence_status = StepStatus::absent;
    StepStatus state_status = StepStatus::absent;
    std::vector<std::string> diagnostics;

    StepStatus status(Step s) const {
        switch (s) {
            case Step::story: return story_status;
            case Step::sentence: return sentence_status;
            default: return state_status;
        }
    }
};

/// Compares everything a scorer looks at; raw text and diagnostics are ignored.
inline bool same_prediction(const ReasoningChain& a, const ReasoningChain& b) {
    return a.task == b.task && a.story == b.story && a.sentences == b.sentences && a.states == b.states &&
           a.result_entity == b.result_entity && a.story_status == b.story_status &&
           a.sentence_status == b.sentence_status && a.state_status == b.state_status;
}

namespace parse_detail {

// Digits that do not fit an int read as 0, which no rule accepts.
inline int to_index(const std::string& digits) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
    return ec == std::errc{} && ptr == digits.data() + digits.size() ? v : 0;
}

struct Patterns {
    std::regex plausible{R"(\bstory\s+(\S+?)\s+is\s+more\s+plausible)", std::regex::icase};
    std::regex plausible_loose{R"(more\s+plausible)", std::regex::icase};
    std::regex sentence_pair{R"(\bsentences\s+(\d+)\s+and\s+(\d+)\s+conflict)", std::regex::icase};
    std::regex conflict_loose{R"(\bconflict)", std::regex::icase};
    std::regex in_story{R"(\bin\s+story\s+([A-Za-z])\b)", std::regex::icase};
    std::regex scope{R"(^for\s+sentence\s+(\d+)\s*:)", std::regex::icase};
    std::regex scope_loose{R"(^for\s+sentence\b)", std::regex::icase};
    std::regex question{R"(what\s+(is|was|are|were)\s+the\s+state\s+of)", std::regex::icase};
    std::regex answer{R"(^the\s+(.+?)\s+(is\s+now|are\s+now|was|were)\s+(.+?)\s*\.?$)", std::regex::icase};
    std::regex converted_story{R"(\bconverted\s+in\s+story\s+(\S+?)(?:[.,;:!?]|\s|$))", std::regex::icase};
    std::regex converted_story_loose{R"(\bconverted\s+in\s+story\b)", std::regex::icase};
    std::regex converted_sentence{R"(\bconverted\s+in\s+sentence\s+(\d+)\b)", std::regex::icase};
    std::regex converted_sentence_loose{R"(\bconverted\s+in\s+sentence\b)", std::regex::icase};
    std::regex converted_to{R"(^.*\bconverted\s+to\s+(.*)$)", std::regex::icase};
};

inline const Patterns& patterns() {
    static const Patterns p;
    return p;
}

inline std::vector<std::string> clean_lines(std::string_view raw) {
    std::vector<std::string> out;
    for (auto& l : text::lines(raw)) {
        auto t = std::string(text::trim(l));
        if (!t.empty()) out.push_back(std::move(t));
    }
    return out;
}

inline std::optional<Story> story_letter(const std::string& token) {
    return parse_story(text::strip_terminal_punct(token));
}

inline std::string lexicon_spelling(const StateLexicon& lex, std::string_view value, Role role) {
    const auto f = text::casefold(value);
    for (const auto& a : lex.attributes()) {
        for (const auto& e : a.labels(role)) {
            if (text::casefold(e.label) == f) return e.label;
        }
        if (a.is_default(value)) return a.default_label;
    }
    return std::string(value);
}

}  // namespace parse_detail

/// Unscoped assertions (the ICL-U state step names no sentence) go to the earlier conflicting
/// sentence when they describe an effect and to the later one when they describe a precondition.
inline void resolve_unscoped_states(ReasoningChain& chain) {
    if (chain.sentences.size() != 2) return;
    for (auto& s : chain.states) {
        if (s.sentence_index != 0) continue;
        s.sentence_index = s.role == Role::effect ? chain.sentences[0] : chain.sentences[1];
    }
}

inline ReasoningChain parse_trip_chain(std::string_view raw, const StateLexicon& lex) {
    const auto& P = parse_detail::patterns();
    ReasoningChain chain;
    chain.task = Task::trip;
    chain.raw_text = std::string(raw);
    bool state_problem = false;
    bool saw_state_section = false;
    bool near_story = false;
    bool near_sentence = false;
    int scope = 0;

    auto lines = parse_detail::clean_lines(raw);
    for (std::size_t li = 0; li < lines.size(); ++li) {
        auto& line = lines[li];
        std::smatch m;
        if (std::regex_search(line, m, P.plausible)) {
            if (chain.story_status != StepStatus::parsed) {
                if (auto s = parse_detail::story_letter(m[1].str())) {
                    chain.story = other(*s);
                    chain.story_status = StepStatus::parsed;
                } else {
                    near_story = true;
                }
            }
            continue;
        }
        if (std::regex_search(line, P.plausible_loose)) {
            near_story = true;
            continue;
        }
        if (std::regex_search(line, m, P.scope)) {
            scope = parse_detail::to_index(m[1].str());
            saw_state_section = true;
            continue;
        }
        if (std::regex_search(line, P.scope_loose)) {
            saw_state_section = true;
            state_problem = true;
            continue;
        }
        if (std::regex_search(line, P.question)) {
            saw_state_section = true;
            const auto q = line.rfind('?');
            auto answer = std::string(text::trim(std::string_view(line).substr(q + 1)));
            // The answer sometimes sits on its own line after the question.
            if (answer.empty() && li + 1 < lines.size() && std::regex_match(lines[li + 1], P.answer)) answer = lines[++li];
            std::smatch am;
            if (!std::regex_match(answer, am, P.answer)) {
                state_problem = true;
                continue;
            }
            StateAssertion a;
            a.entity = std::string(text::trim(am[1].str()));
            const auto verb = text::casefold(am[2].str());
            a.role = verb.find("now") != std::string::npos ? Role::effect : Role::precondition;
            const auto value = text::strip_terminal_punct(am[3].str());
            a.sentence_index = scope;
            if (lex.knows_label(value, a.role) || lex.is_default_label(value)) {
                a.value = parse_detail::lexicon_spelling(lex, value, a.role);
            } else {
                a.value = value;
                a.malformed = true;
                state_problem = true;
            }
            chain.states.push_back(std::move(a));
            continue;
        }
        if (std::regex_search(line, m, P.sentence_pair)) {
            if (chain.sentence_status != StepStatus::parsed) {
                const int x = parse_detail::to_index(m[1].str());
                const int y = parse_detail::to_index(m[2].str());
                if (x == y || x < 1 || y < 1) {
                    near_sentence = true;
                } else {
                    chain.sentences = {std::min(x, y), std::max(x, y)};
                    chain.sentence_status = StepStatus::parsed;
                    std::smatch sm;
                    if (std::regex_search(line, sm, P.in_story)) chain.sentence_story = parse_story(sm[1].str());
                }
            }
            continue;
        }
        if (std::regex_search(line, P.conflict_loose)) near_sentence = true;
    }

    if (chain.story_status != StepStatus::parsed && near_story) chain.story_status = StepStatus::malformed;
    if (chain.sentence_status != StepStatus::parsed && near_sentence) chain.sentence_status = StepStatus::malformed;
    if (saw_state_section) {
        chain.state_status = (state_problem || chain.states.empty()) ? StepStatus::malformed : StepStatus::parsed;
    }
    resolve_unscoped_states(chain);
    return chain;
}

inline ReasoningChain parse_propara_chain(std::string_view raw) {
    const auto& P = parse_detail::patterns();
    ReasoningChain chain;
    chain.task = Task::propara;
    chain.raw_text = std::string(raw);
    bool near_story = false;
    bool near_sentence = false;
    bool near_result = false;
    for (const auto& line : parse_detail::clean_lines(raw)) {
        std::smatch m;
        if (std::regex_search(line, P.converted_story_loose)) {
            if (chain.story_status != StepStatus::parsed) {
                std::optional<Story> s;
                if (std::regex_search(line, m, P.converted_story)) s = parse_detail::story_letter(m[1].str());
                if (s) {
                    chain.story = *s;
                    chain.story_status = StepStatus::parsed;
                } else {
                    near_story = true;
                }
            }
            continue;
        }
        if (std::regex_search(line, P.converted_sentence_loose)) {
            if (chain.sentence_status != StepStatus::parsed) {
                if (std::regex_search(line, m, P.converted_sentence) && parse_detail::to_index(m[1].str()) >= 1) {
                    chain.sentences = {parse_detail::to_index(m[1].str())};
                    chain.sentence_status = StepStatus::parsed;
                    std::smatch sm;
                    if (std::regex_search(line, sm, P.in_story)) chain.sentence_story = parse_story(sm[1].str());
                } else {
                    near_sentence = true;
                }
            }
            continue;
        }
        if (std::regex_search(line, m, P.converted_to)) {
            if (chain.state_status != StepStatus::parsed) {
                auto result = text::strip_terminal_punct(m[1].str());
                if (result.empty()) {
                    near_result = true;
                } else {
                    chain.result_entity = std::move(result);
                    chain.state_status = StepStatus::parsed;
                }
            }
        }
    }
    if (chain.story_status != StepStatus::parsed && near_story) chain.story_status = StepStatus::malformed;
    if (chain.sentence_status != StepStatus::parsed && near_sentence) chain.sentence_status = StepStatus::malformed;
    if (chain.state_status != StepStatus::parsed && near_result) chain.state_status = StepStatus::malformed;
    return chain;
}

inline ReasoningChain parse_chain(Task task, std::string_view raw, const StateLexicon& lex) {
    return task == Task::trip ? parse_trip_chain(raw, lex) : parse_propara_chain(raw);
}

/// One step's parsed output for one instance.
struct StepFragment {
    std::string instance_id;
    Step step = Step::story;
    ReasoningChain chain;
};

class InstanceIdMismatch : public std::invalid_argument {
  public:
    explicit InstanceIdMismatch(const std::string& what) : std::invalid_argument(what) {}
};

/// Composes per-step outputs (ICL-U, ICL-CoT, PCICL-HAR) into one chain. Each step's field comes
/// from that step's fragment; disagreements elsewhere are kept as diagnostics.
inline ReasoningChain merge_step_outputs(const std::vector<StepFragment>& parts) {
    if (parts.empty()) throw std::invalid_argument("merge_step_outputs: no fragments");
    ReasoningChain out;
    out.task = parts.front().chain.task;
    const auto& id = parts.front().instance_id;
    std::vector<std::string> raws;
    const StepFragment* story_part = nullptr;
    const StepFragment* sentence_part = nullptr;
    const StepFragment* state_part = nullptr;
    for (const auto& p : parts) {
        if (p.instance_id != id) {
            throw InstanceIdMismatch("merge_step_outputs: fragment for '" + p.instance_id + "' mixed with '" + id + "'");
        }
        raws.push_back(p.chain.raw_text);
        switch (p.step) {
            case Step::story: story_part = &p; break;
            case Step::sentence: sentence_part = &p; break;
            case Step::state: state_part = &p; break;
            case Step::full_chain: throw std::invalid_argument("merge_step_outputs: full_chain is not a step fragment");
        }
    }
    out.raw_text = text::join(raws, "\n");

    if (story_part) {
        out.story = story_part->chain.story;
        out.story_status = story_part->chain.story_status;
    }
    if (sentence_part) {
        const auto& c = sentence_part->chain;
        out.sentences = c.sentences;
        out.sentence_status = c.sentence_status;
        out.sentence_story = c.sentence_story;
        if (c.story_status == StepStatus::parsed && out.story && c.story != out.story) {
            out.diagnostics.push_back("sentence step restated a different story");
        }
    }
    if (state_part) {
        const auto& c = state_part->chain;
        out.states = c.states;
        out.result_entity = c.result_entity;
        out.state_status = c.state_status;
        if (c.sentence_status == StepStatus::parsed && sentence_part && c.sentences != out.sentences) {
            out.diagnostics.push_back("state step restated different sentences");
        }
    }

    // Which story the sentence step worked in, as opposed to the one the story step picked.
    if (out.story && out.sentence_story && *out.story != *out.sentence_story) {
        out.diagnostics.push_back(std::string("story step chose ") + to_char(*out.story) +
                                  " but sentence step is scoped to story " + to_char(*out.sentence_story));
    }
    if (out.task == Task::trip) {
        for (const auto& s : out.states) {
            if (s.sentence_index != 0 && out.sentences.size() == 2 &&
                s.sentence_index != out.sentences[0] && s.sentence_index != out.sentences[1]) {
                out.diagnostics.push_back("state assertion on sentence " + std::to_string(s.sentence_index) +
                                          " outside the selected sentences");
            }
        }
        resolve_unscoped_states(out);
    }
    return out;
}

inline nlohmann::json to_json(const ReasoningChain& c) {
    nlohmann::json j;
    j["task"] = to_string(c.task);
    j["story"] = c.story ? nlohmann::json(std::string(1, to_char(*c.story))) : nlohmann::json(nullptr);
    j["sentence_story"] =
        c.sentence_story ? nlohmann::json(std::string(1, to_char(*c.sentence_story))) : nlohmann::json(nullptr);
    j["sentences"] = c.sentences;
    nlohmann::json states = nlohmann::json::array();
    for (const auto& s : c.states) {
        states.push_back({{"entity", s.entity},
                          {"role", to_string(s.role)},
                          {"value", s.value},
                          {"sentence", s.sentence_index},
                          {"malformed", s.malformed}});
    }
    j["states"] = states;
    j["result_entity"] = c.result_entity ? nlohmann::json(*c.result_entity) : nlohmann::json(nullptr);
    j["status"] = {{"story", to_string(c.story_status)},
                   {"sentence", to_string(c.sentence_status)},
                   {"state", to_string(c.state_status)}};
    j["diagnostics"] = c.diagnostics;
    return j;
}

}  // namespace hare
