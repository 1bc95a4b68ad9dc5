#include <gtest/gtest.h>

#include "hare/pipeline.hpp"
#include "runs.hpp"

using namespace hare;
using runs::Corruption;

namespace {

const std::vector<Strategy> kStrategies{Strategy::ICL_U, Strategy::ICL_CoT, Strategy::ICL_HAR, Strategy::PCICL_HAR};
const std::vector<Task> kTasks{Task::trip, Task::propara};

std::string tag(Task t, Strategy s) { return std::string(to_string(t)) + "-" + to_string(s); }

RunSummary run_with(const RunConfig& cfg, std::map<std::string, std::string> replay, bool emit_prompts = false) {
    return cmd_run(cfg, replay_seed(std::move(replay)), emit_prompts);
}

RunSummary gold_run(Task task, Strategy strategy, const std::filesystem::path& dir) {
    const auto cfg = runs::mini_config(task, strategy, dir);
    const auto data = load_task_data(cfg);
    return run_with(cfg, gold_replay_map(PromptFactory(cfg, data), data));
}

}  // namespace

TEST(GoldEcho, EveryTaskAndStrategyScoresPerfectly) {
    const auto root = support::scratch_dir("gold");
    for (const auto task : kTasks) {
        for (const auto strategy : kStrategies) {
            const auto s = gold_run(task, strategy, root / tag(task, strategy));
            EXPECT_EQ(s.instances, 20u);
            EXPECT_EQ(s.failures, 0u) << tag(task, strategy);
            EXPECT_DOUBLE_EQ(s.report.overall.verifiability(), 100.0) << tag(task, strategy);
            EXPECT_DOUBLE_EQ(s.report.overall.accuracy(), 100.0);
        }
    }
}

TEST(GoldEcho, FilteredTripKeepsThirteen) {
    auto cfg = runs::mini_config(Task::trip, Strategy::ICL_HAR, support::scratch_dir("top6"));
    cfg.filter_top6 = true;
    const auto data = load_task_data(cfg);
    const auto s = run_with(cfg, gold_replay_map(PromptFactory(cfg, data), data));
    EXPECT_EQ(s.instances, 13u);
    EXPECT_DOUBLE_EQ(s.report.overall.verifiability(), 100.0);
    EXPECT_EQ(s.report.by_conflict_type.count("implicit"), 0u);
}

TEST(Corruption, SentenceAndStateDifferentials) {
    const auto root = support::scratch_dir("corrupt");
    for (const auto task : kTasks) {
        for (const auto strategy : kStrategies) {
            const auto dir = root / tag(task, strategy);
            const auto cfg = runs::mini_config(task, strategy, dir);
            const auto base = runs::counts(gold_run(task, strategy, dir / "gold").report.overall);

            auto c = cfg;
            c.output_dir = (dir / "sentence").string();
            const auto sent = run_with(c, runs::corrupted_replay(c, Corruption::sentence));
            EXPECT_EQ(runs::counts(sent.report.overall), runs::expected_counts(c, Corruption::sentence)) << tag(task, strategy);
            EXPECT_EQ(sent.report.overall.accurate, base[0]);
            EXPECT_LT(sent.report.overall.consistent, base[1]);

            c.output_dir = (dir / "state").string();
            const auto state = run_with(c, runs::corrupted_replay(c, Corruption::state));
            EXPECT_EQ(runs::counts(state.report.overall), runs::expected_counts(c, Corruption::state)) << tag(task, strategy);
            EXPECT_EQ(state.report.overall.accurate, base[0]);
            EXPECT_EQ(state.report.overall.consistent, base[1]);
            EXPECT_LT(state.report.overall.verifiable, base[2]);
        }
    }
}

TEST(Cascade, UnusableStoryAnswerStopsTheChain) {
    const auto cfg = runs::mini_config(Task::propara, Strategy::PCICL_HAR, support::scratch_dir("cascade"));
    const auto data = load_task_data(cfg);
    const PromptFactory factory(cfg, data);
    int calls = 0;
    const Responder garbled = [&](const std::string&, Step) {
        ++calls;
        return std::string("I am not sure.");
    };
    const auto out = execute_chain(data.propara_test.front(), factory, data.lex, garbled);
    EXPECT_EQ(calls, 1);
    ASSERT_TRUE(out.error);
    EXPECT_NE(out.error->find("cascade"), std::string::npos);
    EXPECT_FALSE(score_propara(out.chain, data.propara_test.front()).accurate);
}

TEST(Cascade, WrongStoryNarrowsToThatStory) {
    const auto cfg = runs::mini_config(Task::trip, Strategy::PCICL_HAR, support::scratch_dir("cascade2"));
    const auto data = load_task_data(cfg);
    const PromptFactory factory(cfg, data);
    const auto& inst = data.trip_test.front();
    std::vector<std::string> prompts;
    const Responder wrong = [&](const std::string& p, Step step) {
        prompts.push_back(p);
        if (step == Step::story) return std::string("Story ") + to_char(inst.implausible()) + " is more plausible.";
        return gold_answer(inst, cfg.strategy, step);
    };
    const auto out = execute_chain(inst, factory, data.lex, wrong);
    ASSERT_EQ(prompts.size(), 3u);
    const auto test_block = prompts[1].substr(prompts[1].rfind("\n\n") + 2);
    EXPECT_EQ(test_block.rfind(std::string("Story ") + to_char(inst.gold_plausible) + ":", 0), 0u) << test_block;
    EXPECT_EQ(test_block.find(std::string("Story ") + to_char(inst.implausible()) + ":"), std::string::npos);
    EXPECT_FALSE(score_trip(out.chain, inst, data.lex).accurate);
}

TEST(RunLog, RescoringIsByteIdentical) {
    const auto dir = support::scratch_dir("rescore");
    const auto s = gold_run(Task::trip, Strategy::ICL_CoT, dir);
    const auto rescored = score_run_log(s.log_path);
    EXPECT_EQ(to_json(rescored.report).dump(2) + "\n", runs::slurp(dir / "report.json"));
    EXPECT_EQ(render_text(rescored.report), runs::slurp(dir / "report.txt"));
}

TEST(RunLog, ConcurrencyDoesNotChangeTheLog) {
    const auto root = support::scratch_dir("order");
    auto cfg = runs::mini_config(Task::propara, Strategy::ICL_U, root / "one");
    const auto data = load_task_data(cfg);
    const auto replay = gold_replay_map(PromptFactory(cfg, data), data);
    cfg.max_concurrency = 1;
    run_with(cfg, replay);
    cfg.output_dir = (root / "eight").string();
    cfg.max_concurrency = 8;
    run_with(cfg, replay);
    // The header carries the config, so compare instance lines only.
    auto body = [](const std::string& s) { return s.substr(s.find('\n')); };
    EXPECT_EQ(body(runs::slurp(root / "one" / "run.jsonl")), body(runs::slurp(root / "eight" / "run.jsonl")));
}

TEST(RunLog, SchemaErrors) {
    const auto dir = support::scratch_dir("schema");
    std::ofstream(dir / "empty.jsonl").close();
    EXPECT_THROW(read_run_log(dir / "empty.jsonl"), SchemaMismatch);
    std::ofstream(dir / "v2.jsonl") << R"({"kind":"header","schema_version":2,"config":{}})" << "\n";
    EXPECT_THROW(read_run_log(dir / "v2.jsonl"), SchemaMismatch);

    const auto s = gold_run(Task::propara, Strategy::ICL_HAR, dir / "ok");
    auto text = runs::slurp(s.log_path);
    const auto bad = text.replace(text.find("pp-t01"), 6, "pp-zzz");
    std::ofstream(dir / "stranger.jsonl") << bad;
    EXPECT_THROW(score_run_log(dir / "stranger.jsonl"), SchemaMismatch);
    std::ofstream(dir / "junk.jsonl") << runs::slurp(s.log_path) << R"({"kind":"instance"})" << "\n";
    EXPECT_THROW(read_run_log(dir / "junk.jsonl"), SchemaMismatch);
}

TEST(RunLog, ComparingRunsNeedsTheSameIds) {
    const auto root = support::scratch_dir("compare");
    const auto a = score_run_log(gold_run(Task::trip, Strategy::ICL_U, root / "a").log_path);
    auto cfg = runs::mini_config(Task::trip, Strategy::ICL_HAR, root / "b");
    const auto b = score_run_log(run_with(cfg, runs::corrupted_replay(cfg, Corruption::state)).log_path);
    const auto cmp = compare_runs(a, b, "U vs HAR");
    ASSERT_EQ(cmp.size(), 3u);
    EXPECT_TRUE(cmp[0].result.no_discordant_pairs);
    EXPECT_EQ(cmp[2].result.b10, 10);  // every corrupted instance loses verifiability

    cfg.filter_top6 = true;
    cfg.output_dir = (root / "c").string();
    const auto data = load_task_data(cfg);
    const auto c = score_run_log(run_with(cfg, gold_replay_map(PromptFactory(cfg, data), data)).log_path);
    EXPECT_THROW(compare_runs(a, c, "x"), IdMismatch);

    const auto [txt, j] = cmd_report({root / "a" / "run.jsonl", root / "b" / "run.jsonl"});
    EXPECT_NE(txt.find("McNemar"), std::string::npos);
    EXPECT_EQ(j["runs"].size(), 2u);
}

TEST(RunLog, BackendErrorsAreRecordedPerInstance) {
    auto cfg = runs::mini_config(Task::trip, Strategy::ICL_U, support::scratch_dir("overflow"));
    cfg.context_budget = 10;
    const auto s = run_with(cfg, {});
    EXPECT_EQ(s.instances, 20u);
    EXPECT_EQ(s.failures, 20u);
    EXPECT_NE(s.failure_lines.front().find("ContextOverflow"), std::string::npos);
    EXPECT_DOUBLE_EQ(s.report.overall.accuracy(), 0.0);

    cfg.context_budget.reset();
    cfg.output_dir = (std::filesystem::path(cfg.output_dir) / "miss").string();
    const auto miss = run_with(cfg, {});
    EXPECT_EQ(miss.failures, 20u);
    EXPECT_NE(miss.failure_lines.front().find("ReplayMiss"), std::string::npos);
}

TEST(Config, HashIgnoresKeyOrder) {
    const auto a = nlohmann::json::parse(R"({"task":"trip","strategy":"ICL-HAR","k":4,"backend":{"kind":"http","model":"m"}})");
    const auto b = nlohmann::json::parse(R"({"backend":{"model":"m","kind":"http"},"k":4,"strategy":"ICL-HAR","task":"trip"})");
    EXPECT_EQ(config_hash(config_from_json(a)), config_hash(config_from_json(b)));
    auto c = a;
    c["k"] = 3;
    EXPECT_NE(config_hash(config_from_json(a)), config_hash(config_from_json(c)));
    EXPECT_EQ(config_hash(config_from_json(to_json(config_from_json(a)))), config_hash(config_from_json(a)));
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"strategy":"ICL-XYZ"})")), std::invalid_argument);
}

TEST(PromptsFile, SpansPointAtSentences) {
    const auto dir = support::scratch_dir("prompts");
    for (const auto task : kTasks) {
        const auto cfg = runs::mini_config(task, Strategy::PCICL_HAR, dir);
        const auto path = dir / (std::string(to_string(task)) + ".jsonl");
        EXPECT_EQ(cmd_build_prompts(cfg, path, dir / "replay.json"), 60u);
        const auto data = load_task_data(cfg);
        std::ifstream in(path);
        std::string line;
        std::size_t n = 0;
        while (std::getline(in, line)) {
            const auto j = nlohmann::json::parse(line);
            const auto prompt = j["prompt"].get<std::string>();
            EXPECT_EQ(j["prompt_hash"], prompt_hash(prompt));
            EXPECT_EQ(j["test_block_end"].get<std::size_t>(), prompt.size() - 1);
            const auto id = j["example_id"].get<std::string>();
            for (const auto& s : j["sentences"]) {
                const auto b = s["char_begin"].get<std::size_t>();
                const auto e = s["char_end"].get<std::size_t>();
                const auto story = *parse_story(s["story"].get<std::string>());
                const auto idx = static_cast<std::size_t>(s["index"].get<int>() - 1);
                const auto& want = task == Task::trip
                                       ? std::find_if(data.trip_test.begin(), data.trip_test.end(), [&](auto& x) { return x.id == id; })->story(story)[idx]
                                       : std::find_if(data.propara_test.begin(), data.propara_test.end(), [&](auto& x) { return x.id == id; })->story(story)[idx];
                EXPECT_EQ(prompt.substr(b, e - b), want);
            }
            if (j["step"] == "state") EXPECT_LE(j["sentences"].size(), 2u);
            ++n;
        }
        EXPECT_EQ(n, 60u);
    }
}

TEST(PromptsFile, EmittedDuringRun) {
    const auto dir = support::scratch_dir("emit");
    const auto cfg = runs::mini_config(Task::trip, Strategy::ICL_U, dir);
    const auto data = load_task_data(cfg);
    run_with(cfg, gold_replay_map(PromptFactory(cfg, data), data), true);
    std::ifstream in(dir / "prompts.jsonl");
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["format_version"], kPromptsFileVersion);
        ++n;
    }
    EXPECT_EQ(n, 60u);
}

namespace {

// One export per instance for `step`, with every sentence a single token. `hot` sentences get
// `heat` times the attention of the others.
void write_exports(const std::filesystem::path& path, const TaskData& data, const std::string& step, float heat) {
    std::ofstream out(path);
    for (const auto& g : data.trip_test) {
        AttentionExport e;
        e.example_id = g.id;
        e.step = step;
        e.layers = {0, 1};
        e.num_model_layers = 2;
        e.generated_tokens = 1;
        std::vector<float> row;
        int pos = 0;
        for (const auto story : {Story::A, Story::B}) {
            for (std::size_t i = 0; i < g.story(story).size(); ++i) {
                const int idx = static_cast<int>(i) + 1;
                e.tokens.push_back(g.story(story)[i]);
                e.sentences.push_back({story, idx, pos, pos + 1});
                ++pos;
                const bool hot = story == g.implausible() &&
                                 (step == "sentence" || idx == g.gold_conflict_pair.first || idx == g.gold_conflict_pair.second);
                row.push_back(hot ? heat : 1.0f);
            }
        }
        e.attention = {row, row};
        out << to_json(e).dump() << "\n";
    }
}

}  // namespace

TEST(Attention, RatiosAndPrecisionFromExports) {
    const auto dir = support::scratch_dir("attn");
    const auto s = gold_run(Task::trip, Strategy::ICL_HAR, dir);
    const auto data = load_task_data(runs::mini_config(Task::trip, Strategy::ICL_HAR, dir));
    write_exports(dir / "state.jsonl", data, "state", 3.0f);
    write_exports(dir / "sentence.jsonl", data, "sentence", 1.0f);
    const auto a = cmd_attention({dir / "state.jsonl", dir / "sentence.jsonl"}, s.log_path, dir / "heat");
    ASSERT_EQ(a.steps.at("state").ratios.size(), 20u);
    for (double r : a.steps.at("state").ratios) EXPECT_NEAR(r, 3.0, 1e-9);
    for (double r : a.steps.at("sentence").ratios) EXPECT_NEAR(r, 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(*a.pr.at("state").recall, 100.0);
    EXPECT_TRUE(std::filesystem::exists(dir / "heat" / (data.trip_test.front().id + ".state.tsv")));
    EXPECT_NE(a.text.find("Step: state"), std::string::npos);
    EXPECT_EQ(a.report["steps"]["state"]["ratio_count"], 20);

    std::ifstream in(dir / "state.jsonl");
    auto stranger = read_exports(in).front();
    stranger.example_id = "trip-nope";
    std::ofstream(dir / "stranger.jsonl") << to_json(stranger).dump() << "\n";
    EXPECT_THROW(cmd_attention({dir / "stranger.jsonl"}, s.log_path, std::nullopt), IdMismatch);
}

TEST(Attention, WrongHigherLevelPredictionIsNotConditioned) {
    const auto dir = support::scratch_dir("attn-cond");
    auto cfg = runs::mini_config(Task::trip, Strategy::ICL_HAR, dir);
    const auto s = run_with(cfg, runs::corrupted_replay(cfg, Corruption::sentence));
    const auto data = load_task_data(cfg);
    write_exports(dir / "state.jsonl", data, "state", 2.0f);
    const auto a = cmd_attention({dir / "state.jsonl"}, s.log_path, std::nullopt);
    EXPECT_EQ(a.steps.at("state").ratios.size(), 10u);
    EXPECT_EQ(a.steps.at("state").not_conditioned, 10u);
    // Unconditioned records still count towards precision: faithful but wrong.
    EXPECT_EQ(a.pr.at("state").per_threshold.front().fp, 10);
}

TEST(GenerateDataset, MiniGrid) {
    const auto dir = support::scratch_dir("gen");
    const auto s = cmd_generate_dataset(support::data_dir() / "propara_grid_mini" / "grids.tsv",
                                        support::data_dir() / "propara_grid_mini" / "split.json", dir);
    EXPECT_EQ(s.passages, 12u);
    EXPECT_TRUE(s.violations.empty());
    EXPECT_EQ(s.counts.at("train"), 2u);
    EXPECT_EQ(s.counts.at("dev"), 2u);
    EXPECT_EQ(s.counts.at("test"), 2u);
    const auto test = load_conversions(dir / "test.json");
    EXPECT_TRUE(test.rejected.empty());
    EXPECT_EQ(test.instances.size(), 2u);
}
