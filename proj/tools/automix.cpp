// Command-line driver for the data-mixing pipeline. Every subcommand maps to
// one pipeline stage or runner; configuration comes from an optional config
// file plus per-key flag overrides, applied in that order.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "automixer/pipeline.hpp"

namespace {

using automixer::ArtifactPaths;
using automixer::PipelineConfig;

const std::vector<std::string> kConfigKeys = {
    "seed",          "out_dir",          "vocab_size",       "num_tasks",
    "band_width",    "band_overlap",     "noise_rates",      "per_task_docs",
    "distractor_fraction", "seq_len",    "length_jitter",    "num_sources",
    "probe_q",       "sim_steps",        "batch_size",       "checkpoint_every",
    "learning_rate", "d_model",          "init_scale",       "lambda_multiplier",
    "retention",     "token_budget",     "group_cap_tokens", "raw_density",
    "filter_percentile", "final_epochs", "repeats"};

struct CommandState {
    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;
    std::vector<std::string> sets;
    std::string strategy = "automixer";

    PipelineConfig build() const {
        PipelineConfig cfg;
        if (!config_path.empty()) cfg = PipelineConfig::from_file(config_path);
        for (const auto& [key, value] : overrides) cfg.set_key(key, value);
        for (const auto& entry : sets) {
            const auto eq = entry.find('=');
            if (eq == std::string::npos)
                throw automixer::config_error("--set expects key=value, got '" + entry + "'");
            cfg.set_key(entry.substr(0, eq), entry.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }
};

void attach_config_options(CLI::App* cmd, CommandState& state) {
    cmd->add_option("--config", state.config_path, "Config file of key=value lines");
    cmd->add_option("--set", state.sets, "Override one config key (key=value); repeatable");
    for (const auto& key : kConfigKeys) {
        cmd->add_option_function<std::string>(
            "--" + key,
            [&state, key](const std::string& value) { state.overrides.emplace_back(key, value); },
            "Config key " + key);
    }
}

// Strategies with finished evaluations, in canonical report order: uniform
// first, the primary recipe last.
std::vector<std::string> strategies_on_disk(const ArtifactPaths& paths) {
    const std::vector<std::string> order = {"uniform",   "last-only", "all-checkpoints",
                                            "task-best", "ppl",       "automixer"};
    std::vector<std::string> present;
    for (const auto& strategy : order) {
        if (std::filesystem::exists(paths.eval(strategy))) present.push_back(strategy);
    }
    return present;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"automix: influence-guided data mixing for proxy language models"};
    app.require_subcommand(1);

    CommandState state;
    std::string baseline_kind;

    auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic corpus and task probes");
    auto* simulate = app.add_subcommand("simulate", "Train the proxy model, saving checkpoints");
    auto* progression = app.add_subcommand("progression", "Tabulate per-task best checkpoints");
    auto* select = app.add_subcommand("select", "Select the per-task best checkpoint set");
    auto* score = app.add_subcommand("score", "Score corpus influence for a strategy");
    auto* regroup = app.add_subcommand("regroup", "Regroup the corpus by influence rankings");
    auto* reweight = app.add_subcommand("reweight", "Compute group sampling weights");
    auto* sample = app.add_subcommand("sample", "Draw the token-budgeted mixture manifest");
    auto* train_eval = app.add_subcommand("train-eval", "Train a fresh model on a manifest");
    auto* baseline = app.add_subcommand("baseline", "Run a baseline end to end");
    auto* ablate = app.add_subcommand("ablate", "Compare checkpoint selection strategies");
    auto* report = app.add_subcommand("report", "Render the comparison report");
    auto* run = app.add_subcommand("run", "Run the full mixing pipeline end to end");

    for (auto* cmd : {gen, simulate, progression, select, score, regroup, reweight, sample,
                      train_eval, baseline, ablate, report, run}) {
        attach_config_options(cmd, state);
    }
    for (auto* cmd : {score, regroup, reweight, sample, train_eval}) {
        cmd->add_option("--strategy", state.strategy,
                        "Mixing strategy (automixer, task-best, last-only, all-checkpoints, "
                        "ppl, uniform)")
            ->capture_default_str();
    }
    baseline->add_option("kind", baseline_kind, "Baseline to run: uniform or ppl")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        const auto cfg = state.build();
        const auto& strategy = state.strategy;
        using automixer::run_stage;

        if (gen->parsed()) {
            run_stage("gen-corpus", [&] { automixer::stage_gen_corpus(cfg); });
        } else if (simulate->parsed()) {
            run_stage("simulate", [&] { automixer::stage_simulate(cfg); });
        } else if (progression->parsed()) {
            run_stage("progression", [&] { automixer::stage_progression(cfg); });
        } else if (select->parsed()) {
            run_stage("select", [&] { automixer::stage_select(cfg); });
        } else if (score->parsed()) {
            run_stage("score:" + strategy, [&] { automixer::stage_score(cfg, strategy); });
        } else if (regroup->parsed()) {
            run_stage("regroup:" + strategy, [&] { automixer::stage_regroup(cfg, strategy); });
        } else if (reweight->parsed()) {
            run_stage("reweight:" + strategy, [&] { automixer::stage_reweight(cfg, strategy); });
        } else if (sample->parsed()) {
            if (strategy == "uniform") {
                run_stage("sample:uniform", [&] { automixer::stage_uniform_manifest(cfg); });
            } else {
                run_stage("sample:" + strategy, [&] { automixer::stage_sample(cfg, strategy); });
            }
        } else if (train_eval->parsed()) {
            run_stage("train-eval:" + strategy,
                      [&] { automixer::stage_train_eval(cfg, strategy); });
        } else if (baseline->parsed()) {
            if (baseline_kind == "uniform") {
                automixer::run_uniform_baseline(cfg);
            } else if (baseline_kind == "ppl") {
                automixer::run_ppl_baseline(cfg);
            } else {
                throw automixer::config_error("unknown baseline '" + baseline_kind +
                                              "'; expected uniform or ppl");
            }
        } else if (ablate->parsed()) {
            automixer::run_ablation_checkpoint_strategies(cfg);
        } else if (report->parsed()) {
            run_stage("report", [&] {
                const ArtifactPaths paths(cfg.out_dir);
                const auto strategies = strategies_on_disk(paths);
                if (strategies.empty() ||
                    !std::filesystem::exists(paths.eval("uniform"))) {
                    throw automixer::config_error(
                        "uniform baseline results missing; run it first");
                }
                automixer::emit_report(cfg, strategies);
            });
        } else if (run->parsed()) {
            automixer::run_automixer(cfg);
        }
    } catch (const automixer::stage_error& e) {
        std::cerr << "automix: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "automix: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
