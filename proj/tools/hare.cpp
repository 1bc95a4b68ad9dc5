// hare: build prompts, run models, and score tiered physical-commonsense reasoning chains.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "hare/pipeline.hpp"

namespace fs = std::filesystem;
using namespace hare;

namespace {

struct ConfigFlags {
    std::string config_file;
    std::string task, strategy, train, test, lexicon, cot, backend, replay, base_url, model, cache_dir, out;
    std::optional<std::size_t> k, max_concurrency, context_budget;
    bool no_network = false, filter_top6 = false, filtered_fam = false;

    void add(CLI::App* app) {
        app->add_option("-c,--config", config_file, "JSON run config; flags override its keys");
        app->add_option("--task", task, "trip | propara");
        app->add_option("--strategy", strategy, "ICL-U | ICL-CoT | ICL-HAR | PCICL-HAR");
        app->add_option("--train", train, "training instances (demonstration pool)");
        app->add_option("--test", test, "test instances");
        app->add_option("--lexicon", lexicon, "TRIP state lexicon");
        app->add_option("--cot", cot, "CoT explanation bank");
        app->add_option("-k,--demos", k, "demonstrations per prompt");
        app->add_option("--backend", backend, "replay | http");
        app->add_option("--replay", replay, "replay map for the replay backend");
        app->add_option("--base-url", base_url, "completion endpoint, scheme://host:port");
        app->add_option("--model", model, "model name sent to the endpoint");
        app->add_option("--max-concurrency", max_concurrency, "in-flight request cap");
        app->add_option("--cache-dir", cache_dir, "persistent response cache");
        app->add_option("--context-budget", context_budget, "refuse prompts estimated above this many tokens");
        app->add_flag("--no-network", no_network, "serve from cache/replay only");
        app->add_flag("--top6", filter_top6, "keep only explicit top-6 TRIP instances");
        app->add_flag("--filtered-familiarization", filtered_fam, "familiarize with the top-6 pairs only");
        app->add_option("-o,--out", out, "output directory");
    }

    RunConfig resolve() const {
        RunConfig c = config_file.empty() ? RunConfig{} : load_config(config_file);
        nlohmann::json o = nlohmann::json::object();
        if (!task.empty()) o["task"] = task;
        if (!strategy.empty()) o["strategy"] = strategy;
        if (!train.empty()) o["train"] = train;
        if (!test.empty()) o["test"] = test;
        if (!lexicon.empty()) o["lexicon"] = lexicon;
        if (!cot.empty()) o["cot"] = cot;
        if (!cache_dir.empty()) o["cache_dir"] = cache_dir;
        if (!out.empty()) o["output_dir"] = out;
        if (k) o["k"] = *k;
        if (max_concurrency) o["max_concurrency"] = *max_concurrency;
        if (context_budget) o["context_budget"] = *context_budget;
        if (no_network) o["no_network"] = true;
        if (filter_top6) o["filter_top6"] = true;
        if (filtered_fam) o["filtered_familiarization"] = true;
        nlohmann::json b = nlohmann::json::object();
        if (!backend.empty()) b["kind"] = backend;
        if (!replay.empty()) b["replay"] = replay;
        if (!base_url.empty()) b["base_url"] = base_url;
        if (!model.empty()) b["model"] = model;
        if (!b.empty()) o["backend"] = b;
        c = config_from_json(o, c);
        if (c.test.empty()) throw CLI::ValidationError("--test", "no test instances configured");
        return c;
    }
};

int generate_dataset(const std::string& input, const std::string& split_spec, const std::string& out) {
    const auto s = cmd_generate_dataset(input, split_spec.empty() ? std::nullopt : std::optional<fs::path>(split_spec), out);
    for (const auto& d : s.diagnostics) std::cerr << d << "\n";
    if (s.passages == 0) {
        std::cerr << "no passages found under " << input << "\n";
        return 2;
    }
    std::cout << "passages: " << s.passages << "\n";
    for (const auto& [split, n] : s.counts) std::cout << split << ": " << n << " pairs\n";
    std::cout << "reference split sizes (informational): train 496, dev 206, test 213\n";
    for (const auto& v : s.violations) std::cerr << "constraint violation: " << v << "\n";
    return s.violations.empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Heuristic-analytic reasoning harness"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate-dataset", "pair ProPara grids into Tiered-ProPara instances");
    std::string gen_input, gen_split, gen_out = "data/generated";
    gen->add_option("input", gen_input, "grid TSV file or directory")->required();
    gen->add_option("--split-spec", gen_split, "explicit passage split assignment");
    gen->add_option("-o,--out", gen_out, "output directory");

    ConfigFlags bp_flags;
    auto* bp = app.add_subcommand("build-prompts", "write prompts (gold path) and optionally a gold replay map");
    bp_flags.add(bp);
    std::string bp_prompts, bp_gold;
    bp->add_option("--prompts", bp_prompts, "prompts JSONL output")->required();
    bp->add_option("--gold-replay", bp_gold, "replay map answering every prompt with its gold answer");

    ConfigFlags run_flags;
    auto* run = app.add_subcommand("run", "run a strategy over the test set");
    run_flags.add(run);
    bool emit_prompts = false;
    run->add_flag("--emit-prompts", emit_prompts, "also write the prompts actually sent (for attention export)");

    auto* ev = app.add_subcommand("evaluate", "rescore run logs");
    std::vector<std::string> ev_logs;
    std::string ev_out;
    ev->add_option("logs", ev_logs, "one run log, or two to compare")->required()->expected(1, 2);
    ev->add_option("-o,--out", ev_out, "output directory (default: next to the first log)");

    auto* at = app.add_subcommand("attention", "attentional ratio and precision/recall from exports");
    std::vector<std::string> at_exports;
    std::string at_log, at_out = "attention";
    std::string at_layers;
    std::vector<double> at_thresholds;
    std::string at_gen;
    at->add_option("--log", at_log, "run log the exports belong to")->required();
    at->add_option("exports", at_exports, "attention export JSONL files")->required();
    at->add_option("-o,--out", at_out, "output directory");
    at->add_option("--layers", at_layers, "center20 or comma-separated layer indices");
    at->add_option("--thresholds", at_thresholds, "faithfulness thresholds")->delimiter(',');
    at->add_option("--gen-tokens", at_gen, "answer | all");

    auto* rep = app.add_subcommand("report", "combined table over several run logs");
    std::vector<std::string> rep_logs;
    std::string rep_out;
    rep->add_option("logs", rep_logs, "run logs; the first is the comparison baseline")->required();
    rep->add_option("-o,--out", rep_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return generate_dataset(gen_input, gen_split, gen_out);

        if (bp->parsed()) {
            const auto cfg = bp_flags.resolve();
            const auto n = cmd_build_prompts(cfg, bp_prompts, bp_gold.empty() ? std::nullopt : std::optional<fs::path>(bp_gold));
            std::cout << n << " prompts written to " << bp_prompts << "\n";
            return 0;
        }

        if (run->parsed()) {
            const auto cfg = run_flags.resolve();
            std::cerr << "config " << config_hash(cfg).substr(0, 12) << "\n";
            const auto s = cmd_run(cfg, nullptr, emit_prompts, &std::cerr);
            std::cout << render_text(s.report);
            if (!s.failure_lines.empty()) {
                std::cout << "\n" << s.failures << " instance(s) failed:\n";
                for (const auto& f : s.failure_lines) std::cout << "  " << f << "\n";
            }
            std::cout << "log: " << s.log_path.string() << "\n";
            return 0;
        }

        if (ev->parsed()) {
            auto a = score_run_log(ev_logs[0]);
            const fs::path out = ev_out.empty() ? fs::path(ev_logs[0]).parent_path() : fs::path(ev_out);
            if (ev_logs.size() == 2) {
                const auto b = score_run_log(ev_logs[1]);
                a.report.significance = compare_runs(a, b, std::string(to_string(a.log.config.strategy)) + " vs " +
                                                               to_string(b.log.config.strategy));
            }
            write_report(a.report, out / "report.json", out / "report.txt");
            std::cout << render_text(a.report);
            return 0;
        }

        if (at->parsed()) {
            RunConfig cfg = read_run_log(at_log).config;
            if (!at_layers.empty()) {
                if (at_layers == "center20") {
                    cfg.layer_range = "center20";
                } else {
                    std::vector<int> layers;
                    for (const auto& p : text::split(at_layers, ',')) layers.push_back(std::stoi(p));
                    cfg.layer_range = layers;
                }
            }
            if (!at_thresholds.empty()) cfg.thresholds = at_thresholds;
            if (!at_gen.empty()) cfg.gen_tokens = at_gen;
            std::vector<fs::path> files(at_exports.begin(), at_exports.end());
            const auto s = cmd_attention(files, at_log, fs::path(at_out) / "heatmaps", &cfg);
            write_file(fs::path(at_out) / "attention_report.json", s.report.dump(2) + "\n");
            write_file(fs::path(at_out) / "attention_report.txt", s.text);
            for (const auto& d : s.diagnostics) std::cerr << d << "\n";
            std::cout << s.text;
            return 0;
        }

        if (rep->parsed()) {
            std::vector<fs::path> logs(rep_logs.begin(), rep_logs.end());
            const auto [txt, j] = cmd_report(logs);
            if (!rep_out.empty()) {
                write_file(fs::path(rep_out) / "table.txt", txt);
                write_file(fs::path(rep_out) / "table.json", j.dump(2) + "\n");
            }
            std::cout << txt;
            return 0;
        }
    } catch (const AttentionError& e) {
        std::cerr << e.kind() << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
