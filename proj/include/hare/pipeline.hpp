#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "hare/attention.hpp"
#include "hare/chainparse.hpp"
#include "hare/corpus.hpp"
#include "hare/evalmetrics.hpp"
#include "hare/lexicon.hpp"
#include "hare/llm_client.hpp"
#include "hare/promptgen.hpp"
#include "hare/propara_grid.hpp"

namespace hare {

namespace fs = std::filesystem;

inline constexpr int kRunLogSchemaVersion = 1;
inline constexpr int kPromptsFileVersion = 1;

class SchemaMismatch : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class IdMismatch : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------------------------
// Configuration

struct BackendConfig {
    std::string kind = "replay";  // replay | http
    std::string replay;           // replay map path
    HttpBackendConfig http;
};

struct RunConfig {
    Task task = Task::trip;
    Strategy strategy = Strategy::ICL_HAR;
    std::string train;
    std::string test;
    std::string lexicon = "data/trip_lexicon.json";
    std::string cot;
    std::size_t k = kDefaultDemonstrations;
    bool filter_top6 = false;
    bool filtered_familiarization = false;
    BackendConfig backend;
    int max_new_tokens = 128;
    std::vector<std::string> stop{kDefaultStop};
    std::size_t max_concurrency = 4;
    std::string cache_dir;
    bool no_network = false;
    std::optional<std::size_t> context_budget;
    nlohmann::json layer_range = "center20";  // or an explicit list of layer indices
    std::string gen_tokens = "answer";        // answer | all
    std::vector<double> thresholds = default_thresholds();
    std::string output_dir = "runs/latest";
    std::uint64_t seed = 0;  // the default pipeline draws no random numbers
};

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["task"] = to_string(c.task);
    j["strategy"] = to_string(c.strategy);
    j["train"] = c.train;
    j["test"] = c.test;
    j["lexicon"] = c.lexicon;
    j["cot"] = c.cot;
    j["k"] = c.k;
    j["filter_top6"] = c.filter_top6;
    j["filtered_familiarization"] = c.filtered_familiarization;
    j["backend"] = {{"kind", c.backend.kind},
                    {"replay", c.backend.replay},
                    {"base_url", c.backend.http.base_url},
                    {"path", c.backend.http.path},
                    {"model", c.backend.http.model},
                    {"api_key_env", c.backend.http.api_key_env},
                    {"timeout_s", c.backend.http.timeout_s}};
    j["max_new_tokens"] = c.max_new_tokens;
    j["stop"] = c.stop;
    j["max_concurrency"] = c.max_concurrency;
    j["cache_dir"] = c.cache_dir;
    j["no_network"] = c.no_network;
    j["context_budget"] = c.context_budget ? nlohmann::json(*c.context_budget) : nlohmann::json(nullptr);
    j["layer_range"] = c.layer_range;
    j["gen_tokens"] = c.gen_tokens;
    j["thresholds"] = c.thresholds;
    j["output_dir"] = c.output_dir;
    j["seed"] = c.seed;
    return j;
}

/// Overlays the keys present in `j` on `base`.
inline RunConfig config_from_json(const nlohmann::json& j, RunConfig c = {}) {
    if (j.contains("task")) {
        auto t = parse_task(j["task"].get<std::string>());
        if (!t) throw std::invalid_argument("config: unknown task " + j["task"].dump());
        c.task = *t;
    }
    if (j.contains("strategy")) {
        auto s = parse_strategy(j["strategy"].get<std::string>());
        if (!s) throw std::invalid_argument("config: unknown strategy " + j["strategy"].dump());
        c.strategy = *s;
    }
    const auto str = [&](const char* key, std::string& dst) {
        if (j.contains(key)) dst = j[key].get<std::string>();
    };
    str("train", c.train);
    str("test", c.test);
    str("lexicon", c.lexicon);
    str("cot", c.cot);
    str("cache_dir", c.cache_dir);
    str("gen_tokens", c.gen_tokens);
    str("output_dir", c.output_dir);
    if (j.contains("k")) c.k = j["k"].get<std::size_t>();
    if (j.contains("filter_top6")) c.filter_top6 = j["filter_top6"].get<bool>();
    if (j.contains("filtered_familiarization")) c.filtered_familiarization = j["filtered_familiarization"].get<bool>();
    if (j.contains("backend")) {
        const auto& b = j["backend"];
        c.backend.kind = b.value("kind", c.backend.kind);
        c.backend.replay = b.value("replay", c.backend.replay);
        c.backend.http.base_url = b.value("base_url", c.backend.http.base_url);
        c.backend.http.path = b.value("path", c.backend.http.path);
        c.backend.http.model = b.value("model", c.backend.http.model);
        c.backend.http.api_key_env = b.value("api_key_env", c.backend.http.api_key_env);
        c.backend.http.timeout_s = b.value("timeout_s", c.backend.http.timeout_s);
    }
    if (j.contains("max_new_tokens")) c.max_new_tokens = j["max_new_tokens"].get<int>();
    if (j.contains("stop")) c.stop = j["stop"].get<std::vector<std::string>>();
    if (j.contains("max_concurrency")) c.max_concurrency = j["max_concurrency"].get<std::size_t>();
    if (j.contains("no_network")) c.no_network = j["no_network"].get<bool>();
    if (j.contains("context_budget")) {
        c.context_budget = j["context_budget"].is_null() ? std::nullopt
                                                          : std::optional<std::size_t>(j["context_budget"].get<std::size_t>());
    }
    if (j.contains("layer_range")) c.layer_range = j["layer_range"];
    if (j.contains("thresholds")) c.thresholds = j["thresholds"].get<std::vector<double>>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    return c;
}

inline RunConfig load_config(const fs::path& path) {
    return config_from_json(detail::read_json_file(path));
}

/// Keys are serialized sorted, so the hash ignores key order in the source file.
inline std::string config_hash(const RunConfig& c) { return text::sha256_hex(to_json(c).dump()); }

// ---------------------------------------------------------------------------------------------
// Task data

struct TaskData {
    Task task = Task::trip;
    StateLexicon lex;
    std::vector<StoryPairInstance> trip_train, trip_test;
    std::vector<ConversionInstance> propara_train, propara_test;
    CotBank cot;
    std::vector<LoadDiagnostic> rejected;

    std::size_t test_size() const { return task == Task::trip ? trip_test.size() : propara_test.size(); }
};

template <typename T>
void sort_by_id(std::vector<T>& v) {
    std::sort(v.begin(), v.end(), [](const T& a, const T& b) { return a.id < b.id; });
}

inline TaskData load_task_data(const RunConfig& cfg, bool need_train = true) {
    TaskData d;
    d.task = cfg.task;
    if (!cfg.cot.empty()) d.cot = CotBank::load(cfg.cot);
    const auto keep = [&](auto&& result) {
        d.rejected.insert(d.rejected.end(), result.rejected.begin(), result.rejected.end());
        return std::move(result.instances);
    };
    if (cfg.task == Task::trip) {
        d.lex = StateLexicon::load(cfg.lexicon);
        if (need_train && !cfg.train.empty()) d.trip_train = keep(load_trip(cfg.train, d.lex));
        d.trip_test = keep(load_trip(cfg.test, d.lex));
        if (cfg.filter_top6) {
            d.trip_train = filter_top6(d.trip_train, d.lex);
            d.trip_test = filter_top6(d.trip_test, d.lex);
        }
        sort_by_id(d.trip_train);
        sort_by_id(d.trip_test);
    } else {
        if (need_train && !cfg.train.empty()) d.propara_train = keep(load_conversions(cfg.train));
        d.propara_test = keep(load_conversions(cfg.test));
        sort_by_id(d.propara_train);
        sort_by_id(d.propara_test);
    }
    return d;
}

// ---------------------------------------------------------------------------------------------
// Prompts

/// Demonstrations and familiarization are fixed per run; only the test block varies.
class PromptFactory {
  public:
    PromptFactory(const RunConfig& cfg, const TaskData& data) : cfg_(cfg) {
        for (const Step step : steps_for(cfg.strategy)) {
            auto demos = cfg.task == Task::trip
                             ? select_demonstrations(data.trip_train, cfg.strategy, step, cfg.k, &data.cot)
                             : select_demonstrations(data.propara_train, cfg.strategy, step, cfg.k, &data.cot);
            if (demos.size() < cfg.k) {
                throw std::runtime_error("only " + std::to_string(demos.size()) + " training instances can demonstrate " +
                                         to_string(cfg.strategy) + "/" + to_string(step) + "; k = " + std::to_string(cfg.k));
            }
            demos_[step] = std::move(demos);
        }
        if (cfg.task == Task::trip) {
            familiarization_ = build_familiarization(data.lex, cfg.filtered_familiarization, familiarization_style(cfg.strategy));
        }
    }

    template <typename Instance>
    PromptBundle prompt(const Instance& inst, Step step, const std::vector<ContextDecision>& decisions) const {
        return assemble_prompt(inst, cfg_.strategy, step, demos_.at(step), familiarization_, decisions);
    }

    template <typename Instance>
    StoryContext context(const Instance& inst, const std::vector<ContextDecision>& decisions) const {
        auto ctx = context_of(inst);
        return cfg_.strategy == Strategy::PCICL_HAR ? refine_all(ctx, decisions) : ctx;
    }

    const RunConfig& config() const { return cfg_; }

  private:
    RunConfig cfg_;
    std::map<Step, std::vector<Demonstration>> demos_;
    std::optional<std::string> familiarization_;
};

/// One line of the prompts file handed to the attention exporter.
template <typename Instance>
nlohmann::json prompt_record(const PromptFactory& f, const Instance& inst, Step step, const PromptBundle& b,
                             const std::vector<ContextDecision>& decisions) {
    const auto text = b.text();
    const auto base = b.test_block_offset();
    nlohmann::json sentences = nlohmann::json::array();
    for (const auto& s : f.context(inst, decisions).spans()) {
        sentences.push_back({{"story", std::string(1, to_char(s.story))},
                             {"index", s.index},
                             {"char_begin", base + s.begin},
                             {"char_end", base + s.end}});
    }
    return {{"format_version", kPromptsFileVersion},
            {"example_id", inst.id},
            {"strategy", to_string(b.strategy)},
            {"step", to_string(step)},
            {"prompt", text},
            {"prompt_hash", prompt_hash(text)},
            {"test_block_begin", base},
            {"test_block_end", base + b.test_block.size()},
            {"sentences", sentences}};
}

// ---------------------------------------------------------------------------------------------
// Chain execution

struct StepRecord {
    Step step = Step::story;
    std::string prompt_hash;
    std::string raw;
};

struct InstanceOutcome {
    std::string instance_id;
    std::vector<StepRecord> steps;
    ReasoningChain chain;
    std::optional<std::string> error;
    std::vector<nlohmann::json> prompts;  // filled when emitting prompts
};

/// Returns the model's raw text for a prompt; may throw LlmError.
using Responder = std::function<std::string(const std::string& prompt, Step step)>;

inline ReasoningChain chain_from_steps(Task task, Strategy strategy, const std::string& id, const std::vector<StepRecord>& steps,
                                       const StateLexicon& lex) {
    if (steps.empty()) {
        ReasoningChain c;
        c.task = task;
        return c;
    }
    if (strategy == Strategy::ICL_HAR) return parse_chain(task, steps.front().raw, lex);
    std::vector<StepFragment> parts;
    for (const auto& s : steps) parts.push_back({id, s.step, parse_chain(task, s.raw, lex)});
    return merge_step_outputs(parts);
}

/// The decision a parsed step hands to the next PCICL-HAR step, if it produced one.
inline std::optional<ContextDecision> next_decision(const ReasoningChain& part, Step step,
                                                    const std::vector<ContextDecision>& so_far) {
    if (step == Step::story) {
        if (part.story_status != StepStatus::parsed || !part.story) return std::nullopt;
        return ContextDecision{*part.story, {}};
    }
    if (step == Step::sentence) {
        if (part.sentence_status != StepStatus::parsed || part.sentences.empty() || so_far.empty()) return std::nullopt;
        return ContextDecision{so_far.front().story, part.sentences};
    }
    return std::nullopt;
}

template <typename Instance>
InstanceOutcome execute_chain(const Instance& inst, const PromptFactory& factory, const StateLexicon& lex,
                              const Responder& respond, bool emit_prompts = false) {
    const auto& cfg = factory.config();
    InstanceOutcome out;
    out.instance_id = inst.id;
    std::vector<ContextDecision> decisions;
    for (const Step step : steps_for(cfg.strategy)) {
        PromptBundle bundle;
        try {
            bundle = factory.prompt(inst, step, decisions);
        } catch (const DecisionOutOfRange& e) {
            out.error = std::string("DecisionOutOfRange: ") + e.what();
            break;
        }
        const auto text = bundle.text();
        if (emit_prompts) out.prompts.push_back(prompt_record(factory, inst, step, bundle, decisions));
        std::string raw;
        try {
            raw = respond(text, step);
        } catch (const LlmError& e) {
            out.error = std::string(e.kind()) + ": " + e.what();
            break;
        }
        out.steps.push_back({step, prompt_hash(text), raw});
        if (cfg.strategy == Strategy::PCICL_HAR && step != Step::state) {
            const auto part = parse_chain(cfg.task, raw, lex);
            auto d = next_decision(part, step, decisions);
            if (!d) {
                out.error = std::string("cascade: ") + to_string(step) + " step gave no usable decision";
                break;
            }
            decisions.push_back(std::move(*d));
        }
    }
    out.chain = chain_from_steps(cfg.task, cfg.strategy, inst.id, out.steps, lex);
    return out;
}

/// Simulates a run against `answer(inst, step)` and records what each prompt should return.
/// PCICL-HAR prompts depend on earlier answers, so the map follows the answered path.
template <typename Answer>
std::map<std::string, std::string> build_replay_map(const PromptFactory& factory, const TaskData& data, Answer&& answer) {
    std::map<std::string, std::string> m;
    const auto run = [&](const auto& insts) {
        for (const auto& inst : insts) {
            const Responder r = [&](const std::string& prompt, Step step) {
                auto a = answer(inst, step);
                m[prompt_hash(prompt)] = a;
                return a;
            };
            execute_chain(inst, factory, data.lex, r);
        }
    };
    if (data.task == Task::trip) {
        run(data.trip_test);
    } else {
        run(data.propara_test);
    }
    return m;
}

inline std::map<std::string, std::string> gold_replay_map(const PromptFactory& factory, const TaskData& data) {
    const auto strategy = factory.config().strategy;
    return build_replay_map(factory, data, [&](const auto& inst, Step step) { return gold_answer(inst, strategy, step); });
}

// ---------------------------------------------------------------------------------------------
// Run log

inline nlohmann::json to_json(const InstanceScore& s) {
    return {{"accurate", s.accurate}, {"consistent", s.consistent}, {"verifiable", s.verifiable}};
}

inline nlohmann::json log_header(const RunConfig& cfg, const std::string& backend_id) {
    return {{"kind", "header"},
            {"schema_version", kRunLogSchemaVersion},
            {"config", to_json(cfg)},
            {"config_hash", config_hash(cfg)},
            {"backend", backend_id}};
}

inline nlohmann::json log_line(const InstanceOutcome& o, const InstanceScore& score) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : o.steps) steps.push_back({{"step", to_string(s.step)}, {"prompt_hash", s.prompt_hash}, {"raw", s.raw}});
    return {{"kind", "instance"},
            {"instance_id", o.instance_id},
            {"steps", steps},
            {"chain", to_json(o.chain)},
            {"score", to_json(score)},
            {"error", o.error ? nlohmann::json(*o.error) : nlohmann::json(nullptr)}};
}

struct RunLog {
    nlohmann::json header;
    RunConfig config;
    std::vector<nlohmann::json> instances;
};

inline RunLog read_run_log(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open run log " + path.string());
    RunLog log;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (text::trim(line).empty()) continue;
        auto j = nlohmann::json::parse(line);
        if (first) {
            if (j.value("kind", "") != "header" || j.value("schema_version", -1) != kRunLogSchemaVersion) {
                throw SchemaMismatch(path.string() + ": not a version " + std::to_string(kRunLogSchemaVersion) + " run log");
            }
            log.config = config_from_json(j.at("config"));
            log.header = std::move(j);
            first = false;
            continue;
        }
        if (j.value("kind", "") != "instance" || !j.contains("instance_id") || !j.contains("steps")) {
            throw SchemaMismatch(path.string() + ": malformed instance line");
        }
        log.instances.push_back(std::move(j));
    }
    if (first) throw SchemaMismatch(path.string() + ": empty run log");
    return log;
}

// ---------------------------------------------------------------------------------------------
// Scoring a log

struct ScoredRun {
    RunLog log;
    std::vector<InstanceScore> scores;
    std::vector<ReasoningChain> chains;
    std::size_t failures = 0;
    EvalReport report;
};

inline std::vector<StepRecord> steps_from_log(const nlohmann::json& line) {
    std::vector<StepRecord> out;
    for (const auto& s : line.at("steps")) {
        const auto step = parse_step(s.at("step").get<std::string>());
        if (!step) throw SchemaMismatch("unknown step in run log: " + s.at("step").dump());
        out.push_back({*step, s.at("prompt_hash").get<std::string>(), s.at("raw").get<std::string>()});
    }
    return out;
}

/// Re-parses and re-scores every raw generation in the log; never touches a backend or cache.
inline ScoredRun score_run_log(RunLog log, const TaskData& data) {
    ScoredRun out;
    const auto& cfg = log.config;
    std::map<std::string, const StoryPairInstance*> trip_gold;
    std::map<std::string, const ConversionInstance*> pp_gold;
    for (const auto& i : data.trip_test) trip_gold[i.id] = &i;
    for (const auto& i : data.propara_test) pp_gold[i.id] = &i;
    for (const auto& line : log.instances) {
        const auto id = line.at("instance_id").get<std::string>();
        auto chain = chain_from_steps(cfg.task, cfg.strategy, id, steps_from_log(line), data.lex);
        InstanceScore s;
        if (cfg.task == Task::trip) {
            const auto it = trip_gold.find(id);
            if (it == trip_gold.end()) throw SchemaMismatch("run log instance " + id + " is not in the gold set");
            s = score_trip(chain, *it->second, data.lex);
        } else {
            const auto it = pp_gold.find(id);
            if (it == pp_gold.end()) throw SchemaMismatch("run log instance " + id + " is not in the gold set");
            s = score_propara(chain, *it->second);
        }
        if (!line.at("error").is_null()) ++out.failures;
        out.scores.push_back(std::move(s));
        out.chains.push_back(std::move(chain));
    }
    out.report = aggregate(out.scores);
    out.report.metadata = {{"task", to_string(cfg.task)},
                           {"strategy", to_string(cfg.strategy)},
                           {"backend", log.header.value("backend", "")},
                           {"config_hash", log.header.value("config_hash", "")},
                           {"failures", out.failures}};
    out.log = std::move(log);
    return out;
}

inline ScoredRun score_run_log(const fs::path& path) {
    auto log = read_run_log(path);
    const auto data = load_task_data(log.config, false);
    return score_run_log(std::move(log), data);
}

/// McNemar on each metric for two runs over the same instance ids.
inline std::vector<Comparison> compare_runs(const ScoredRun& a, const ScoredRun& b, const std::string& label) {
    std::map<std::string, const InstanceScore*> bi;
    for (const auto& s : b.scores) bi[s.instance_id] = &s;
    if (a.scores.size() != b.scores.size()) throw IdMismatch("runs cover different instance counts");
    std::vector<bool> acc_a, acc_b, con_a, con_b, ver_a, ver_b;
    for (const auto& s : a.scores) {
        const auto it = bi.find(s.instance_id);
        if (it == bi.end()) throw IdMismatch("instance " + s.instance_id + " missing from the second run");
        acc_a.push_back(s.accurate), acc_b.push_back(it->second->accurate);
        con_a.push_back(s.consistent), con_b.push_back(it->second->consistent);
        ver_a.push_back(s.verifiable), ver_b.push_back(it->second->verifiable);
    }
    return {{label, "accuracy", mcnemar(acc_a, acc_b)},
            {label, "consistency", mcnemar(con_a, con_b)},
            {label, "verifiability", mcnemar(ver_a, ver_b)}};
}

inline void write_file(const fs::path& path, const std::string& content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto tmp = fs::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        out << content;
    }
    fs::rename(tmp, path);
}

inline void write_report(const EvalReport& r, const fs::path& json_path, const fs::path& text_path) {
    write_file(json_path, to_json(r).dump(2) + "\n");
    write_file(text_path, render_text(r));
}

// ---------------------------------------------------------------------------------------------
// Commands

struct RunSummary {
    std::size_t instances = 0;
    std::size_t failures = 0;
    std::vector<std::string> failure_lines;
    fs::path log_path;
    EvalReport report;
};

inline std::shared_ptr<Backend> make_backend(const RunConfig& cfg) {
    if (cfg.backend.kind == "replay") {
        if (cfg.backend.replay.empty()) throw std::invalid_argument("replay backend needs a replay map path");
        return replay_seed(load_replay_map(cfg.backend.replay));
    }
    if (cfg.backend.kind == "http") return std::make_shared<HttpBackend>(cfg.backend.http);
    throw std::invalid_argument("unknown backend kind " + cfg.backend.kind);
}

/// Runs every test instance, committing log lines in instance-id order as they complete.
inline RunSummary cmd_run(const RunConfig& cfg, std::shared_ptr<Backend> backend = nullptr, bool emit_prompts = false,
                          std::ostream* progress = nullptr) {
    const auto data = load_task_data(cfg);
    const PromptFactory factory(cfg, data);
    if (!backend) backend = make_backend(cfg);
    ClientOptions opts;
    if (!cfg.cache_dir.empty()) opts.cache_dir = cfg.cache_dir;
    opts.context_budget = cfg.context_budget;
    opts.max_concurrency = std::max<std::size_t>(1, cfg.max_concurrency);
    opts.no_network = cfg.no_network;
    CompletionClient client(backend, opts);

    const fs::path out_dir(cfg.output_dir);
    fs::create_directories(out_dir);
    RunSummary summary;
    summary.log_path = out_dir / "run.jsonl";
    std::ofstream log(summary.log_path, std::ios::binary | std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + summary.log_path.string());
    log << log_header(cfg, backend->id()).dump() << "\n" << std::flush;
    std::ofstream prompts_out;
    if (emit_prompts) prompts_out.open(out_dir / "prompts.jsonl", std::ios::binary | std::ios::trunc);

    const Responder respond = [&](const std::string& prompt, Step) {
        CompletionRequest req;
        req.prompt = prompt;
        req.max_new_tokens = cfg.max_new_tokens;
        req.stop_sequences = cfg.stop;
        return client.complete(std::move(req)).text;
    };

    const std::size_t n = data.test_size();
    std::vector<std::optional<std::pair<InstanceOutcome, InstanceScore>>> done(n);
    std::size_t next_commit = 0;
    std::mutex commit_mu;
    std::atomic<std::size_t> next_job{0};
    std::exception_ptr fatal;

    const auto commit_ready = [&] {
        while (next_commit < n && done[next_commit]) {
            const auto& [outcome, score] = *done[next_commit];
            log << log_line(outcome, score).dump() << "\n" << std::flush;
            for (const auto& p : outcome.prompts) prompts_out << p.dump() << "\n";
            if (outcome.error) {
                ++summary.failures;
                summary.failure_lines.push_back(outcome.instance_id + ": " + *outcome.error);
            }
            if (progress) *progress << "[" << next_commit + 1 << "/" << n << "] " << outcome.instance_id << "\n";
            done[next_commit].reset();
            ++next_commit;
        }
    };

    const auto worker = [&] {
        for (;;) {
            const std::size_t i = next_job++;
            if (i >= n) return;
            try {
                std::pair<InstanceOutcome, InstanceScore> r;
                if (cfg.task == Task::trip) {
                    const auto& inst = data.trip_test[i];
                    r.first = execute_chain(inst, factory, data.lex, respond, emit_prompts);
                    r.second = score_trip(r.first.chain, inst, data.lex);
                } else {
                    const auto& inst = data.propara_test[i];
                    r.first = execute_chain(inst, factory, data.lex, respond, emit_prompts);
                    r.second = score_propara(r.first.chain, inst);
                }
                std::lock_guard lock(commit_mu);
                done[i] = std::move(r);
                commit_ready();
            } catch (...) {
                std::lock_guard lock(commit_mu);
                if (!fatal) fatal = std::current_exception();
                next_job = n;
                return;
            }
        }
    };
    const std::size_t workers = std::min<std::size_t>(std::max<std::size_t>(1, cfg.max_concurrency), std::max<std::size_t>(1, n));
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    log.close();
    if (fatal) std::rethrow_exception(fatal);

    summary.instances = n;
    if (n > 0) {
        auto scored = score_run_log(read_run_log(summary.log_path), data);
        summary.report = scored.report;
        write_report(summary.report, out_dir / "report.json", out_dir / "report.txt");
    }
    return summary;
}

/// Prompts for every test instance along the gold path, plus the replay map that echoes gold answers.
inline std::size_t cmd_build_prompts(const RunConfig& cfg, const fs::path& prompts_path,
                                     const std::optional<fs::path>& gold_replay_path) {
    const auto data = load_task_data(cfg);
    const PromptFactory factory(cfg, data);
    std::string out;
    std::size_t count = 0;
    const auto emit = [&](const auto& insts) {
        for (const auto& inst : insts) {
            for (const Step step : steps_for(cfg.strategy)) {
                const auto decisions = cfg.strategy == Strategy::PCICL_HAR ? gold_decisions(inst, step) : std::vector<ContextDecision>{};
                const auto b = factory.prompt(inst, step, decisions);
                out += prompt_record(factory, inst, step, b, decisions).dump() + "\n";
                ++count;
            }
        }
    };
    if (cfg.task == Task::trip) {
        emit(data.trip_test);
    } else {
        emit(data.propara_test);
    }
    write_file(prompts_path, out);
    if (gold_replay_path) {
        fs::create_directories(gold_replay_path->parent_path().empty() ? fs::path(".") : gold_replay_path->parent_path());
        save_replay_map(*gold_replay_path, gold_replay_map(factory, data));
    }
    return count;
}

struct GenerateSummary {
    std::map<std::string, std::size_t> counts;
    std::vector<std::string> diagnostics;
    std::vector<std::string> violations;
    std::size_t passages = 0;
};

inline std::vector<fs::path> grid_files(const fs::path& input) {
    std::vector<fs::path> files;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input)) {
            if (e.is_regular_file() && e.path().extension() == ".tsv") files.push_back(e.path());
        }
    } else if (fs::is_regular_file(input)) {
        files.push_back(input);
    }
    std::sort(files.begin(), files.end());
    return files;
}

inline GenerateSummary cmd_generate_dataset(const fs::path& input, const std::optional<fs::path>& split_spec,
                                            const fs::path& out_dir) {
    GenerateSummary s;
    std::vector<ProParaPassage> passages;
    for (const auto& f : grid_files(input)) {
        auto parsed = parse_propara_grid(f);
        s.diagnostics.insert(s.diagnostics.end(), parsed.diagnostics.begin(), parsed.diagnostics.end());
        for (auto& p : parsed.passages) passages.push_back(std::move(p));
    }
    s.passages = passages.size();
    if (passages.empty()) return s;
    const SplitSpec spec = split_spec ? SplitSpec::load(*split_spec) : SplitSpec{};
    auto result = generate_tiered_propara(passages, spec);
    s.diagnostics.insert(s.diagnostics.end(), result.diagnostics.begin(), result.diagnostics.end());
    for (const auto& split : result.no_valid_pairs) s.diagnostics.push_back("NoValidPairs: split " + split);
    fs::create_directories(out_dir);
    for (const auto& [split, insts] : result.splits) {
        nlohmann::json doc{{"schema_version", kConversionSchemaVersion}, {"instances", nlohmann::json::array()}};
        for (const auto& inst : insts) {
            if (auto v = conversion_violation(inst)) s.violations.push_back(inst.id + ": " + *v);
            doc["instances"].push_back(to_json(inst));
        }
        write_file(out_dir / (split + ".json"), doc.dump(2) + "\n");
        s.counts[split] = insts.size();
    }
    return s;
}

// ---------------------------------------------------------------------------------------------
// Attention analysis

struct StepAttention {
    std::vector<double> ratios;
    std::size_t zero_denominator = 0;
    std::size_t not_conditioned = 0;  // higher-level prediction wrong, no ratio
    std::vector<PrItem> pr_items;
    std::vector<AttentionRecord> records;
};

struct AttentionSummary {
    std::map<std::string, StepAttention> steps;  // "sentence" | "state"
    std::map<std::string, PrResult> pr;
    std::vector<std::string> diagnostics;
    nlohmann::json report;
    std::string text;
};

inline std::vector<int> resolve_layers(const RunConfig& cfg, const AttentionExport& e) {
    if (cfg.layer_range.is_string()) {
        if (cfg.layer_range.get<std::string>() != "center20") throw LayerRangeUnavailable("unknown layer spec " + cfg.layer_range.dump());
        return center_layers(e.num_model_layers > 0 ? e.num_model_layers : static_cast<int>(e.layers.size()));
    }
    return cfg.layer_range.get<std::vector<int>>();
}

inline std::string fmt(double v, const char* f = "%.3f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

/// Ratios (conditioned on a correct higher-level prediction), precision/recall per threshold, heatmaps.
inline AttentionSummary cmd_attention(const std::vector<fs::path>& export_files, const fs::path& run_log,
                                      const std::optional<fs::path>& heatmap_dir, const RunConfig* overrides = nullptr) {
    auto scored = score_run_log(run_log);
    RunConfig cfg = overrides ? *overrides : scored.log.config;
    const auto data = load_task_data(scored.log.config, false);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < scored.scores.size(); ++i) index[scored.scores[i].instance_id] = i;

    AttentionSummary out;
    for (const auto& path : export_files) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("cannot open attention export " + path.string());
        for (const auto& e : read_exports(in)) {
            const auto it = index.find(e.example_id);
            if (it == index.end()) throw IdMismatch("attention export " + e.example_id + " is not in the run log");
            const auto& score = scored.scores[it->second];

            std::vector<int> gen = cfg.gen_tokens == "all" ? std::vector<int>{} : default_gen_tokens(e);
            if (cfg.gen_tokens == "all") {
                for (int t = 0; t < e.generated_tokens; ++t) gen.push_back(t);
            }
            AttentionRecord rec;
            try {
                rec = aggregate_sentence_attention(e, resolve_layers(cfg, e), gen);
            } catch (const EmptyAfterMask& ex) {
                out.diagnostics.push_back(ex.what());
                continue;
            }

            Segment seg;
            bool conditioned = false;
            bool correct = false;
            if (cfg.task == Task::trip) {
                const auto& g = *std::find_if(data.trip_test.begin(), data.trip_test.end(), [&](const auto& x) { return x.id == e.example_id; });
                seg.story = g.implausible();
                if (e.step == "state") seg.sentences = {g.gold_conflict_pair.first, g.gold_conflict_pair.second};
            } else {
                const auto& g = *std::find_if(data.propara_test.begin(), data.propara_test.end(), [&](const auto& x) { return x.id == e.example_id; });
                seg.story = g.gold_story;
                if (e.step == "state") seg.sentences = {g.gold_sentence};
            }
            if (e.step == "sentence") {
                conditioned = score.accurate;
                correct = score.consistent;
            } else {
                conditioned = score.consistent;
                correct = score.verifiable;
            }

            auto& st = out.steps[e.step];
            if (conditioned) {
                try {
                    st.ratios.push_back(attentional_ratio(rec, seg));
                } catch (const ZeroDenominator& ex) {
                    ++st.zero_denominator;
                    out.diagnostics.push_back(ex.what());
                }
            } else {
                ++st.not_conditioned;
            }
            st.pr_items.push_back({rec, seg, correct});
            if (heatmap_dir) {
                const auto h = emit_heatmap(rec);
                write_file(*heatmap_dir / (e.example_id + "." + e.step + ".tsv"), h.tsv);
                write_file(*heatmap_dir / (e.example_id + "." + e.step + ".txt"), h.text);
            }
            st.records.push_back(std::move(rec));
        }
    }

    nlohmann::json rep{{"schema_version", kReportSchemaVersion},
                       {"thresholds", cfg.thresholds},
                       {"config_hash", scored.log.header.value("config_hash", "")},
                       {"steps", nlohmann::json::object()}};
    std::string txt = "Thresholds:";
    for (double t : cfg.thresholds) txt += " " + fmt(t);
    txt += "\n";
    for (auto& [step, st] : out.steps) {
        const auto pr = attentional_pr(st.pr_items, cfg.thresholds);
        out.pr[step] = pr;
        double mean_ratio = 0;
        for (double r : st.ratios) mean_ratio += r;
        const bool have_ratio = !st.ratios.empty();
        if (have_ratio) mean_ratio /= static_cast<double>(st.ratios.size());
        nlohmann::json per = nlohmann::json::array();
        for (const auto& c : pr.per_threshold) {
            per.push_back({{"threshold", c.threshold},
                           {"tp", c.tp},
                           {"fp", c.fp},
                           {"tn", c.tn},
                           {"fn", c.fn},
                           {"precision", c.precision ? nlohmann::json(*c.precision) : nlohmann::json(nullptr)},
                           {"recall", c.recall ? nlohmann::json(*c.recall) : nlohmann::json(nullptr)}});
        }
        rep["steps"][step] = {{"records", st.records.size()},
                              {"ratio_mean", have_ratio ? nlohmann::json(mean_ratio) : nlohmann::json(nullptr)},
                              {"ratio_count", st.ratios.size()},
                              {"zero_denominator", st.zero_denominator},
                              {"not_conditioned", st.not_conditioned},
                              {"precision", pr.precision ? nlohmann::json(*pr.precision) : nlohmann::json(nullptr)},
                              {"recall", pr.recall ? nlohmann::json(*pr.recall) : nlohmann::json(nullptr)},
                              {"precision_undefined", pr.precision_undefined},
                              {"recall_undefined", pr.recall_undefined},
                              {"per_threshold", per}};
        txt += "\nStep: " + step + "  records " + std::to_string(st.records.size()) + "\n";
        txt += "  ratio " + (have_ratio ? fmt(mean_ratio, "%.2f") : std::string("n/a")) + " over " +
               std::to_string(st.ratios.size()) + " (" + std::to_string(st.not_conditioned) + " not conditioned, " +
               std::to_string(st.zero_denominator) + " zero denominator)\n";
        txt += "  precision " + (pr.precision ? fmt(*pr.precision, "%.1f") : std::string("n/a")) + "  recall " +
               (pr.recall ? fmt(*pr.recall, "%.1f") : std::string("n/a")) + "\n";
        txt += "  thr     TP  FP  TN  FN   P      R\n";
        for (const auto& c : pr.per_threshold) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "  %.3f  %3d %3d %3d %3d  %-6s %-6s\n", c.threshold, c.tp, c.fp, c.tn, c.fn,
                          c.precision ? fmt(*c.precision, "%.1f").c_str() : "n/a",
                          c.recall ? fmt(*c.recall, "%.1f").c_str() : "n/a");
            txt += buf;
        }
    }
    out.report = std::move(rep);
    out.text = std::move(txt);
    return out;
}

/// One row per run; McNemar of every later run against the first.
inline std::pair<std::string, nlohmann::json> cmd_report(const std::vector<fs::path>& logs) {
    if (logs.empty()) throw std::invalid_argument("report: no run logs");
    std::vector<ScoredRun> runs;
    for (const auto& l : logs) runs.push_back(score_run_log(l));
    std::vector<std::pair<std::string, MetricCounts>> rows;
    nlohmann::json j{{"schema_version", kReportSchemaVersion}, {"runs", nlohmann::json::array()}, {"significance", nlohmann::json::array()}};
    std::string sig;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto label = std::string(to_string(runs[i].log.config.task)) + " " + to_string(runs[i].log.config.strategy);
        rows.emplace_back(label, runs[i].report.overall);
        j["runs"].push_back(to_json(runs[i].report));
        if (i == 0) continue;
        const auto base = std::string(to_string(runs[0].log.config.strategy));
        for (const auto& c : compare_runs(runs[0], runs[i], base + " vs " + to_string(runs[i].log.config.strategy))) {
            j["significance"].push_back({{"label", c.label}, {"metric", c.metric}, {"mcnemar", to_json(c.result)}});
            sig += c.label + " [" + c.metric + "]: p=" + fmt(c.result.p_value, "%.4g") +
                   (c.result.exact_p ? " exact p=" + fmt(*c.result.exact_p, "%.4g") : std::string()) + "\n";
        }
    }
    std::string txt = render_table(rows);
    if (!sig.empty()) txt += "\nMcNemar\n" + sig;
    return {txt, j};
}

}  // namespace hare
