#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hare/chainparse.hpp"
#include "hare/corpus.hpp"
#include "hare/lexicon.hpp"
#include "hare/text.hpp"

namespace hare {

enum class Strategy { ICL_U, ICL_CoT, ICL_HAR, PCICL_HAR };

inline const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::ICL_U: return "ICL-U";
        case Strategy::ICL_CoT: return "ICL-CoT";
        case Strategy::ICL_HAR: return "ICL-HAR";
        case Strategy::PCICL_HAR: return "PCICL-HAR";
    }
    return "?";
}

inline std::optional<Strategy> parse_strategy(std::string_view s) {
    const auto f = text::casefold(s);
    if (f == "icl-u" || f == "icl_u") return Strategy::ICL_U;
    if (f == "icl-cot" || f == "icl_cot") return Strategy::ICL_CoT;
    if (f == "icl-har" || f == "icl_har") return Strategy::ICL_HAR;
    if (f == "pcicl-har" || f == "pcicl_har") return Strategy::PCICL_HAR;
    return std::nullopt;
}

/// Steps a strategy prompts for, in order.
inline std::vector<Step> steps_for(Strategy s) {
    if (s == Strategy::ICL_HAR) return {Step::full_chain};
    return {Step::story, Step::sentence, Step::state};
}

inline bool uses_har_templates(Strategy s) { return s == Strategy::ICL_HAR || s == Strategy::PCICL_HAR; }

inline constexpr std::size_t kDefaultDemonstrations = 4;
inline constexpr std::size_t kLlamaContextTokens = 2048;

class MissingGold : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class DecisionOutOfRange : public std::out_of_range {
  public:
    using std::out_of_range::out_of_range;
};

// ---------------------------------------------------------------------------------------------
// Familiarization

enum class FamiliarizationStyle {
    question_first,  // "Before Tom turned on the microwave, what was ...?"  (HAR prompts)
    clause_first,    // "Tom turned on the microwave. Before, what was ...?" (ICL-U / ICL-CoT prompts)
};

inline FamiliarizationStyle familiarization_style(Strategy s) {
    return uses_har_templates(s) ? FamiliarizationStyle::question_first : FamiliarizationStyle::clause_first;
}

inline std::string render_exemplar(const LabelExemplar& e, Role role, FamiliarizationStyle style) {
    const bool pre = role == Role::precondition;
    const std::string question = pre ? "what was the state of the " : "what is the state of the ";
    const std::string answer = "The " + e.entity + (pre ? " was " : " is now ") + e.label + ".";
    if (style == FamiliarizationStyle::question_first) {
        return std::string(pre ? "Before " : "After ") + e.clause + ", " + question + e.entity + "? " + answer;
    }
    return e.clause + ". " + (pre ? "Before, " : "After, ") + question + e.entity + "? " + answer;
}

/// Option list plus one exemplar per label: preconditions first, then effects.
inline std::string build_familiarization(const StateLexicon& lex, bool filtered,
                                         FamiliarizationStyle style = FamiliarizationStyle::question_first) {
    if (lex.empty()) throw std::invalid_argument("build_familiarization: empty lexicon");
    StateLexicon filtered_copy;
    const StateLexicon* source = &lex;
    if (filtered) {
        filtered_copy = lex.top6_only();
        source = &filtered_copy;
    }
    std::vector<std::string> out;
    for (const Role role : {Role::precondition, Role::effect}) {
        std::vector<std::string> options;
        std::vector<std::string> lines;
        for (const auto& a : source->attributes()) {
            for (const auto& e : a.labels(role)) {
                options.push_back(e.label);
                lines.push_back(render_exemplar(e, role, style));
            }
        }
        if (options.empty()) continue;
        out.push_back("Physical state options: " + text::join(options, ", "));
        out.insert(out.end(), lines.begin(), lines.end());
    }
    return text::join(out, "\n");
}

// ---------------------------------------------------------------------------------------------
// Story context and refinement

struct NumberedSentence {
    int index = 0;  // original 1-based position
    std::string text;
};

struct StoryView {
    Story story = Story::A;
    std::vector<NumberedSentence> sentences;
};

/// The stories shown in a prompt, after any context refinement.
struct StoryContext {
    std::vector<StoryView> stories;

    std::string render() const {
        std::vector<std::string> out;
        for (const auto& s : stories) {
            out.push_back(std::string("Story ") + to_char(s.story) + ":");
            for (const auto& ns : s.sentences) out.push_back(std::to_string(ns.index) + ". " + ns.text);
        }
        return text::join(out, "\n");
    }

    struct Span {
        Story story;
        int index;
        std::size_t begin;  // byte range of the sentence text inside render()
        std::size_t end;
    };

    std::vector<Span> spans() const {
        std::vector<Span> out;
        std::size_t pos = 0;
        for (const auto& s : stories) {
            pos += std::string("Story X:").size() + 1;
            for (const auto& ns : s.sentences) {
                const auto begin = pos + std::to_string(ns.index).size() + 2;
                out.push_back({s.story, ns.index, begin, begin + ns.text.size()});
                pos = begin + ns.text.size() + 1;
            }
        }
        return out;
    }

    friend bool operator==(const StoryContext& a, const StoryContext& b) { return a.render() == b.render(); }
};

inline StoryContext make_context(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    StoryContext ctx;
    for (const auto& [letter, sents] : {std::pair{Story::A, &a}, std::pair{Story::B, &b}}) {
        StoryView v;
        v.story = letter;
        for (std::size_t i = 0; i < sents->size(); ++i) v.sentences.push_back({static_cast<int>(i + 1), (*sents)[i]});
        ctx.stories.push_back(std::move(v));
    }
    return ctx;
}

/// A higher-level decision that narrows the context: a story alone, or sentences within a story.
struct ContextDecision {
    Story story = Story::A;
    std::vector<int> sentences;  // empty: story-level decision
};

/// Deletes the non-selected story, or the non-selected sentences of the selected story.
/// Surviving sentences keep their original numbers and order.
inline StoryContext refine_context(const StoryContext& ctx, const ContextDecision& decision) {
    auto it = std::find_if(ctx.stories.begin(), ctx.stories.end(),
                           [&](const StoryView& v) { return v.story == decision.story; });
    if (it == ctx.stories.end()) {
        throw DecisionOutOfRange(std::string("story ") + to_char(decision.story) + " is not in the context");
    }
    StoryView kept = *it;
    if (!decision.sentences.empty()) {
        std::set<int> wanted(decision.sentences.begin(), decision.sentences.end());
        for (int n : wanted) {
            const bool present = std::any_of(kept.sentences.begin(), kept.sentences.end(),
                                             [&](const NumberedSentence& s) { return s.index == n; });
            if (!present) {
                throw DecisionOutOfRange("sentence " + std::to_string(n) + " is not in story " + to_char(decision.story));
            }
        }
        std::erase_if(kept.sentences, [&](const NumberedSentence& s) { return !wanted.count(s.index); });
    }
    return StoryContext{{std::move(kept)}};
}

inline StoryContext refine_all(StoryContext ctx, const std::vector<ContextDecision>& decisions) {
    for (const auto& d : decisions) ctx = refine_context(ctx, d);
    return ctx;
}

// ---------------------------------------------------------------------------------------------
// Chain-of-thought suffixes and explanation bank

inline std::string build_cot_suffix(Task task, Step step, std::string_view entity = {}) {
    const std::string e(entity);
    if (task == Task::trip) {
        switch (step) {
            case Step::story: return "Let's think step by step about which story is more plausible.";
            case Step::sentence: return "Let's think step by step about which sentences are conflicting in one story.";
            case Step::state:
                return "Let's think step by step about which physical states are conflicting in two sentences in one story.";
            default: break;
        }
    } else {
        switch (step) {
            case Step::story: return "Let's think step by step about which story " + e + " were converted in.";
            case Step::sentence: return "Let's think step by step about which sentence " + e + " were converted in one story.";
            case Step::state:
                return "Let's think step by step about what " + e + " were converted to in one sentence in one story.";
            default: break;
        }
    }
    throw std::invalid_argument("build_cot_suffix: step must be story, sentence or state");
}

/// Fixed free-text explanations for ICL-CoT demonstrations, keyed by instance id and step.
class CotBank {
  public:
    CotBank() = default;

    static CotBank from_json(const nlohmann::json& j) {
        if (!j.contains("schema_version")) throw std::runtime_error("CoT bank: missing schema_version");
        CotBank bank;
        for (const auto& [id, steps] : j.at("explanations").items()) {
            for (const auto& [step, textv] : steps.items()) {
                const auto s = parse_step(step);
                if (!s) throw std::runtime_error("CoT bank: unknown step '" + step + "'");
                bank.entries_[{id, *s}] = textv.get<std::string>();
            }
        }
        return bank;
    }

    static CotBank load(const std::filesystem::path& path) { return from_json(detail::read_json_file(path)); }

    const std::string* find(const std::string& id, Step step) const {
        auto it = entries_.find({id, step});
        return it == entries_.end() ? nullptr : &it->second;
    }

    void put(std::string id, Step step, std::string explanation) { entries_[{std::move(id), step}] = std::move(explanation); }

  private:
    std::map<std::pair<std::string, Step>, std::string> entries_;
};

// ---------------------------------------------------------------------------------------------
// Gold answers

namespace prompt_detail {

inline std::string clause_of(const std::string& sentence) { return text::strip_terminal_punct(sentence); }

inline std::vector<const PhysicalStateAnnotation*> shown_states(const StoryPairInstance& inst, int sentence) {
    std::vector<const PhysicalStateAnnotation*> out;
    for (const auto& s : inst.gold_states) {
        if (s.sentence_index == sentence && !s.is_default) out.push_back(&s);
    }
    return out;
}

}  // namespace prompt_detail

/// Story-level decisions implied by the gold annotation, in chain order.
inline std::vector<ContextDecision> gold_decisions(const StoryPairInstance& inst, Step up_to) {
    std::vector<ContextDecision> out;
    if (up_to == Step::sentence || up_to == Step::state) out.push_back({inst.implausible(), {}});
    if (up_to == Step::state) out.push_back({inst.implausible(), {inst.gold_conflict_pair.first, inst.gold_conflict_pair.second}});
    return out;
}

inline std::vector<ContextDecision> gold_decisions(const ConversionInstance& inst, Step up_to) {
    std::vector<ContextDecision> out;
    if (up_to == Step::sentence || up_to == Step::state) out.push_back({inst.gold_story, {}});
    if (up_to == Step::state) out.push_back({inst.gold_story, {inst.gold_sentence}});
    return out;
}

/// The answer text a perfect model would generate for (strategy, step).
inline std::string gold_answer(const StoryPairInstance& inst, Strategy strategy, Step step) {
    const bool har = uses_har_templates(strategy);
    const auto [lo, hi] = inst.gold_conflict_pair;
    const std::string implausible(1, to_char(inst.implausible()));
    const auto story_line = std::string("Story ") + to_char(inst.gold_plausible) + " is more plausible.";
    const auto sentence_line =
        har ? "In Story " + implausible + ", sentences " + std::to_string(lo) + " and " + std::to_string(hi) +
                  " conflict with each other."
            : "Sentences " + std::to_string(lo) + " and " + std::to_string(hi) + " conflict with each other in story " +
                  implausible + ".";
    const auto state_lines = [&] {
        const auto& story = inst.story(inst.implausible());
        std::vector<std::string> out;
        bool any = false;
        for (const int n : {lo, hi}) {
            const auto states = prompt_detail::shown_states(inst, n);
            if (states.empty()) throw MissingGold(inst.id + ": no non-default state on sentence " + std::to_string(n));
            any = true;
            if (har) out.push_back("For sentence " + std::to_string(n) + ":");
            const auto clause = prompt_detail::clause_of(story.at(static_cast<std::size_t>(n - 1)));
            for (const auto* s : states) {
                const bool pre = s->role == Role::precondition;
                const std::string q = pre ? "what was the state of the " : "what is the state of the ";
                const std::string a = "The " + s->entity + (pre ? " was " : " is now ") + s->value + ".";
                if (har) {
                    out.push_back(std::string(pre ? "Before " : "After ") + clause + ", " + q + s->entity + "? " + a);
                } else {
                    out.push_back(std::string(pre ? "Before, " : "After, ") + q + s->entity + "? " + a);
                }
            }
        }
        if (!any) throw MissingGold(inst.id + ": no state annotations");
        return text::join(out, "\n");
    };
    switch (step) {
        case Step::story: return story_line;
        case Step::sentence: return sentence_line;
        case Step::state: return state_lines();
        case Step::full_chain: return story_line + "\n" + sentence_line + "\n" + state_lines();
    }
    return {};
}

inline std::string gold_answer(const ConversionInstance& inst, Strategy strategy, Step step) {
    const bool har = uses_har_templates(strategy);
    const std::string letter(1, to_char(inst.gold_story));
    const auto& e = inst.query_entity;
    const auto n = std::to_string(inst.gold_sentence);
    const auto story_line = text::capitalize_first(e) + " is converted in story " + letter + ".";
    const auto sentence_line = har ? "In story " + letter + ", " + e + " is converted in sentence " + n + "."
                                   : text::capitalize_first(e) + " is converted in sentence " + n + " in story " + letter + ".";
    const auto& sentence = inst.story(inst.gold_story).at(static_cast<std::size_t>(inst.gold_sentence - 1));
    const auto state_line =
        har ? "After " + text::lowercase_first(prompt_detail::clause_of(sentence)) + ", " + e + " is converted to " +
                  inst.gold_result_entity + "."
            : text::capitalize_first(e) + " is converted to " + inst.gold_result_entity + ".";
    switch (step) {
        case Step::story: return story_line;
        case Step::sentence: return sentence_line;
        case Step::state: return state_line;
        case Step::full_chain: return story_line + "\n" + sentence_line + "\n" + state_line;
    }
    return {};
}

/// The chain a perfect model's output parses to.
inline ReasoningChain gold_chain(const StoryPairInstance& inst) {
    ReasoningChain c;
    c.task = Task::trip;
    c.story = inst.implausible();
    c.sentences = {inst.gold_conflict_pair.first, inst.gold_conflict_pair.second};
    for (const int n : c.sentences) {
        for (const auto* s : prompt_detail::shown_states(inst, n)) {
            c.states.push_back({s->entity, s->role, s->value, s->sentence_index, false});
        }
    }
    c.story_status = c.sentence_status = c.state_status = StepStatus::parsed;
    return c;
}

inline ReasoningChain gold_chain(const ConversionInstance& inst) {
    ReasoningChain c;
    c.task = Task::propara;
    c.story = inst.gold_story;
    c.sentences = {inst.gold_sentence};
    c.result_entity = inst.gold_result_entity;
    c.story_status = c.sentence_status = c.state_status = StepStatus::parsed;
    return c;
}

// ---------------------------------------------------------------------------------------------
// Demonstrations and prompt assembly

inline StoryContext context_of(const StoryPairInstance& inst) { return make_context(inst.story_a, inst.story_b); }
inline StoryContext context_of(const ConversionInstance& inst) { return make_context(inst.story_a, inst.story_b); }

inline Task task_of(const StoryPairInstance&) { return Task::trip; }
inline Task task_of(const ConversionInstance&) { return Task::propara; }

inline std::string question_of(const StoryPairInstance&) { return {}; }
inline std::string question_of(const ConversionInstance& inst) { return "What happened to " + inst.query_entity + "?"; }

inline std::string entity_of(const StoryPairInstance&) { return {}; }
inline std::string entity_of(const ConversionInstance& inst) { return inst.query_entity; }

inline void check_strategy_step(Strategy strategy, Step step) {
    if (strategy == Strategy::ICL_HAR && step != Step::full_chain) {
        throw std::invalid_argument("ICL-HAR prompts cover the full chain");
    }
    if (strategy != Strategy::ICL_HAR && step == Step::full_chain) {
        throw std::invalid_argument(std::string(to_string(strategy)) + " prompts one step at a time");
    }
}

struct Demonstration {
    Strategy strategy = Strategy::ICL_HAR;
    Step step = Step::full_chain;
    std::string instance_id;
    std::string text;
};

/// Context block (refined for PCICL-HAR) plus the ProPara question and, for ICL-CoT, the CoT suffix.
template <typename Instance>
std::string render_test_block(const Instance& inst, Strategy strategy, Step step,
                              const std::vector<ContextDecision>& decisions) {
    StoryContext ctx = context_of(inst);
    if (strategy == Strategy::PCICL_HAR) ctx = refine_all(ctx, decisions);
    std::string out = ctx.render();
    const auto q = question_of(inst);
    if (!q.empty()) out += "\n" + q;
    if (strategy == Strategy::ICL_CoT) out += "\n" + build_cot_suffix(task_of(inst), step, entity_of(inst));
    return out;
}

template <typename Instance>
Demonstration build_demonstration(const Instance& inst, Strategy strategy, Step step, const CotBank* cot = nullptr) {
    check_strategy_step(strategy, step);
    std::string block = render_test_block(inst, strategy, step, gold_decisions(inst, step));
    if (strategy == Strategy::ICL_CoT) {
        const std::string* why = cot ? cot->find(inst.id, step) : nullptr;
        if (!why) throw MissingGold(inst.id + ": no CoT explanation for step " + to_string(step));
        block += " " + *why;
    }
    block += "\n" + gold_answer(inst, strategy, step);
    return {strategy, step, inst.id, std::move(block)};
}

struct PromptBundle {
    Strategy strategy = Strategy::ICL_HAR;
    Step step = Step::full_chain;
    std::string instance_id;
    std::optional<std::string> familiarization;
    std::vector<std::string> demonstrations;
    std::string test_block;
    std::size_t token_estimate = 0;
    std::vector<std::string> warnings;

    /// Familiarization, demonstrations, then the test block; blocks separated by a blank line.
    std::string text() const {
        std::vector<std::string> blocks;
        if (familiarization) blocks.push_back(*familiarization);
        blocks.insert(blocks.end(), demonstrations.begin(), demonstrations.end());
        blocks.push_back(test_block);
        return text::join(blocks, "\n\n") + "\n";
    }

    /// Byte offset of the test block inside text().
    std::size_t test_block_offset() const { return text().size() - 1 - test_block.size(); }
};

template <typename Instance>
PromptBundle assemble_prompt(const Instance& inst, Strategy strategy, Step step, const std::vector<Demonstration>& demos,
                             std::optional<std::string> familiarization,
                             const std::vector<ContextDecision>& prior_decisions = {},
                             std::size_t context_tokens = kLlamaContextTokens) {
    check_strategy_step(strategy, step);
    const bool trip = task_of(inst) == Task::trip;
    if (trip && !familiarization) throw std::invalid_argument("TRIP prompts need a familiarization block");
    if (!trip && familiarization) throw std::invalid_argument("ProPara prompts take no familiarization block");
    PromptBundle b;
    b.strategy = strategy;
    b.step = step;
    b.instance_id = inst.id;
    b.familiarization = std::move(familiarization);
    for (const auto& d : demos) {
        if (d.strategy != strategy || d.step != step) {
            throw std::invalid_argument("demonstration " + d.instance_id + " was built for a different strategy/step");
        }
        b.demonstrations.push_back(d.text);
    }
    b.test_block = render_test_block(inst, strategy, step, prior_decisions);
    b.token_estimate = text::estimate_tokens(b.text());
    if (b.token_estimate > context_tokens) {
        b.warnings.push_back("prompt for " + inst.id + " is ~" + std::to_string(b.token_estimate) +
                             " tokens, over the " + std::to_string(context_tokens) + "-token context");
    }
    return b;
}

/// Pool of gold training instances, ordered by id; the first k eligible ones become demonstrations.
template <typename Instance>
std::vector<Demonstration> select_demonstrations(std::vector<Instance> pool, Strategy strategy, Step step, std::size_t k,
                                                 const CotBank* cot = nullptr) {
    std::sort(pool.begin(), pool.end(), [](const Instance& a, const Instance& b) { return a.id < b.id; });
    std::vector<Demonstration> out;
    for (const auto& inst : pool) {
        if (out.size() >= k) break;
        try {
            out.push_back(build_demonstration(inst, strategy, step, cot));
        } catch (const MissingGold&) {
            continue;
        }
    }
    return out;
}

}  // namespace hare
