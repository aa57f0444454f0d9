#pragma once

// End-to-end orchestration: configuration, artifact layout, idempotent
// stages, final-model training, and the comparison report. Every stage
// reads its inputs from disk and persists its outputs, so any prefix of
// the pipeline can be re-run from the saved artifacts.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "automixer/corpus.hpp"
#include "automixer/errors.hpp"
#include "automixer/influence.hpp"
#include "automixer/mixer.hpp"
#include "automixer/model.hpp"
#include "automixer/rng.hpp"
#include "automixer/simulator.hpp"
#include "automixer/util.hpp"

namespace automixer {

// ---------------------------------------------------------------------------
// Configuration: flat key=value file, '#' comments. The seed has no default;
// a config without one is rejected so no stage ever draws from an ambient
// entropy source.
// ---------------------------------------------------------------------------

struct PipelineConfig {
    std::uint64_t seed = 0;
    bool seed_set = false;

    std::string out_dir = "out";

    int vocab_size = 64;
    int num_tasks = 3;
    int band_width = 16;
    double band_overlap = 0.5;
    std::vector<double> noise_rates = {0.0, 0.1, 0.2};  // cycled across tasks
    int per_task_docs = 500;
    double distractor_fraction = 0.25;
    int seq_len = 64;
    double length_jitter = 0.25;
    int num_sources = 4;
    int probe_q = 256;

    std::int64_t sim_steps = 5000;
    int batch_size = 8;
    std::int64_t checkpoint_every = 500;
    double learning_rate = 0.2;
    int d_model = 16;
    double init_scale = 0.1;

    double lambda_multiplier = 0.1;
    double retention = 0.5;
    std::int64_t token_budget = 100000;
    std::int64_t group_cap_tokens = 0;   // 0 disables per-group caps
    bool raw_density = false;            // skip min-max scaling before densities
    double filter_percentile = -1.0;     // joint-score percentile gate; <0 disables

    int final_epochs = 10;
    int repeats = 2;

    void set_key(const std::string& key, const std::string& value);
    static PipelineConfig from_text(const std::string& text, const std::string& origin);
    static PipelineConfig from_file(const std::string& path);
    std::string to_text() const;
    std::string hash_text() const;  // to_text minus out_dir: relocating outputs is not a change
    void save(const std::string& path) const { util::write_file(path, to_text()); }
    void validate() const;
};

namespace detail {

inline double parse_double_or(const std::string& value, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return x;
    } catch (const std::exception&) {
        throw config_error("bad numeric value for " + key + ": '" + value + "'");
    }
}

inline std::int64_t parse_int_or(const std::string& value, const std::string& key) {
    try {
        std::size_t pos = 0;
        const std::int64_t x = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return x;
    } catch (const std::exception&) {
        throw config_error("bad integer value for " + key + ": '" + value + "'");
    }
}

inline bool parse_bool_or(const std::string& value, const std::string& key) {
    if (value == "0" || value == "false") return false;
    if (value == "1" || value == "true") return true;
    throw config_error("bad boolean value for " + key + ": '" + value + "'");
}

inline std::vector<double> parse_double_list(const std::string& value, const std::string& key) {
    std::vector<double> out;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) {
        const auto trimmed = util::trim(item);
        if (trimmed.empty()) continue;
        out.push_back(parse_double_or(std::string(trimmed), key));
    }
    if (out.empty()) throw config_error(key + " needs at least one value");
    return out;
}

}  // namespace detail

inline void PipelineConfig::set_key(const std::string& key, const std::string& value) {
    if (key == "seed") {
        try {
            std::size_t pos = 0;
            seed = std::stoull(value, &pos);
            if (pos != value.size()) throw std::invalid_argument(value);
        } catch (const std::exception&) {
            throw config_error("bad seed value: '" + value + "'");
        }
        seed_set = true;
    } else if (key == "out_dir") {
        out_dir = value;
    } else if (key == "vocab_size") {
        vocab_size = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "num_tasks") {
        num_tasks = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "band_width") {
        band_width = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "band_overlap") {
        band_overlap = detail::parse_double_or(value, key);
    } else if (key == "noise_rates") {
        noise_rates = detail::parse_double_list(value, key);
    } else if (key == "per_task_docs") {
        per_task_docs = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "distractor_fraction") {
        distractor_fraction = detail::parse_double_or(value, key);
    } else if (key == "seq_len") {
        seq_len = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "length_jitter") {
        length_jitter = detail::parse_double_or(value, key);
    } else if (key == "num_sources") {
        num_sources = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "probe_q") {
        probe_q = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "sim_steps") {
        sim_steps = detail::parse_int_or(value, key);
    } else if (key == "batch_size") {
        batch_size = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "checkpoint_every") {
        checkpoint_every = detail::parse_int_or(value, key);
    } else if (key == "learning_rate") {
        learning_rate = detail::parse_double_or(value, key);
    } else if (key == "d_model") {
        d_model = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "init_scale") {
        init_scale = detail::parse_double_or(value, key);
    } else if (key == "lambda_multiplier") {
        lambda_multiplier = detail::parse_double_or(value, key);
    } else if (key == "retention") {
        retention = detail::parse_double_or(value, key);
    } else if (key == "token_budget") {
        token_budget = detail::parse_int_or(value, key);
    } else if (key == "group_cap_tokens") {
        group_cap_tokens = detail::parse_int_or(value, key);
    } else if (key == "raw_density") {
        raw_density = detail::parse_bool_or(value, key);
    } else if (key == "filter_percentile") {
        filter_percentile = detail::parse_double_or(value, key);
    } else if (key == "final_epochs") {
        final_epochs = static_cast<int>(detail::parse_int_or(value, key));
    } else if (key == "repeats") {
        repeats = static_cast<int>(detail::parse_int_or(value, key));
    } else {
        throw config_error("unknown config key: " + key);
    }
}

inline PipelineConfig PipelineConfig::from_text(const std::string& text,
                                                const std::string& origin) {
    PipelineConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto trimmed = util::trim(line);
        if (trimmed.empty()) continue;
        const auto eq = trimmed.find('=');
        if (eq == std::string_view::npos)
            throw parse_error(origin, line_no, "expected key=value");
        const auto key = std::string(util::trim(trimmed.substr(0, eq)));
        const auto value = std::string(util::trim(trimmed.substr(eq + 1)));
        cfg.set_key(key, value);
    }
    return cfg;
}

inline PipelineConfig PipelineConfig::from_file(const std::string& path) {
    return from_text(util::read_file(path), path);
}

inline std::string PipelineConfig::to_text() const {
    std::string noise;
    for (const auto r : noise_rates) {
        if (!noise.empty()) noise += ",";
        noise += util::format_score(r);
    }
    std::string out;
    out += "seed=" + std::to_string(seed) + "\n";
    out += "out_dir=" + out_dir + "\n";
    out += "vocab_size=" + std::to_string(vocab_size) + "\n";
    out += "num_tasks=" + std::to_string(num_tasks) + "\n";
    out += "band_width=" + std::to_string(band_width) + "\n";
    out += "band_overlap=" + util::format_score(band_overlap) + "\n";
    out += "noise_rates=" + noise + "\n";
    out += "per_task_docs=" + std::to_string(per_task_docs) + "\n";
    out += "distractor_fraction=" + util::format_score(distractor_fraction) + "\n";
    out += "seq_len=" + std::to_string(seq_len) + "\n";
    out += "length_jitter=" + util::format_score(length_jitter) + "\n";
    out += "num_sources=" + std::to_string(num_sources) + "\n";
    out += "probe_q=" + std::to_string(probe_q) + "\n";
    out += "sim_steps=" + std::to_string(sim_steps) + "\n";
    out += "batch_size=" + std::to_string(batch_size) + "\n";
    out += "checkpoint_every=" + std::to_string(checkpoint_every) + "\n";
    out += "learning_rate=" + util::format_score(learning_rate) + "\n";
    out += "d_model=" + std::to_string(d_model) + "\n";
    out += "init_scale=" + util::format_score(init_scale) + "\n";
    out += "lambda_multiplier=" + util::format_score(lambda_multiplier) + "\n";
    out += "retention=" + util::format_score(retention) + "\n";
    out += "token_budget=" + std::to_string(token_budget) + "\n";
    out += "group_cap_tokens=" + std::to_string(group_cap_tokens) + "\n";
    out += "raw_density=" + std::string(raw_density ? "1" : "0") + "\n";
    out += "filter_percentile=" + util::format_score(filter_percentile) + "\n";
    out += "final_epochs=" + std::to_string(final_epochs) + "\n";
    out += "repeats=" + std::to_string(repeats) + "\n";
    return out;
}

inline std::string PipelineConfig::hash_text() const {
    std::istringstream in(to_text());
    std::string line;
    std::string out;
    while (std::getline(in, line)) {
        if (line.rfind("out_dir=", 0) == 0) continue;
        out += line + "\n";
    }
    return out;
}

inline void PipelineConfig::validate() const {
    if (!seed_set) throw config_error("config must set seed; there is no default");
    if (vocab_size < 2) throw config_error("vocab_size must be >= 2");
    if (num_tasks < 1) throw config_error("num_tasks must be >= 1");
    if (band_width < 1) throw config_error("band_width must be >= 1");
    if (static_cast<std::int64_t>(num_tasks) * band_width > vocab_size)
        throw config_error("num_tasks * band_width must fit within vocab_size");
    if (band_overlap < 0.0 || band_overlap > 1.0)
        throw config_error("band_overlap must be in [0,1]");
    for (const auto r : noise_rates) {
        if (r < 0.0 || r >= 1.0) throw config_error("noise_rates must lie in [0,1)");
    }
    if (per_task_docs < 1) throw config_error("per_task_docs must be >= 1");
    if (distractor_fraction < 0.0 || distractor_fraction >= 1.0)
        throw config_error("distractor_fraction must be in [0,1)");
    if (seq_len < 2) throw config_error("seq_len must be >= 2");
    if (length_jitter < 0.0 || length_jitter >= 1.0)
        throw config_error("length_jitter must be in [0,1)");
    if (num_sources < 1) throw config_error("num_sources must be >= 1");
    if (probe_q < 1) throw config_error("probe_q must be >= 1");
    if (sim_steps < 2 || checkpoint_every < 1 || sim_steps % checkpoint_every != 0 ||
        sim_steps / checkpoint_every < 2)
        throw config_error("checkpoint_every must divide sim_steps into at least 2 checkpoints");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (learning_rate <= 0.0) throw config_error("learning_rate must be positive");
    if (d_model < 1) throw config_error("d_model must be >= 1");
    if (init_scale <= 0.0) throw config_error("init_scale must be positive");
    if (lambda_multiplier <= 0.0) throw config_error("lambda_multiplier must be positive");
    if (retention <= 0.0 || retention > 1.0) throw config_error("retention must be in (0,1]");
    if (token_budget < 1) throw config_error("token_budget must be >= 1");
    if (group_cap_tokens < 0) throw config_error("group_cap_tokens must be >= 0");
    if (filter_percentile >= 100.0)
        throw config_error("filter_percentile must be below 100 (negative disables it)");
    if (final_epochs < 1) throw config_error("final_epochs must be >= 1");
    if (repeats < 1) throw config_error("repeats must be >= 1");
}

// ---------------------------------------------------------------------------
// Artifact layout. Shared artifacts live at the root; everything specific to
// one mixing strategy lives under mix-<strategy>/.
// ---------------------------------------------------------------------------

struct ArtifactPaths {
    std::string root;

    explicit ArtifactPaths(std::string out_dir) : root(std::move(out_dir)) {}

    std::string corpus() const { return root + "/corpus.txt"; }
    std::string origins() const { return root + "/origins.tsv"; }
    std::string probes() const { return root + "/probes.txt"; }
    std::string ckpt_dir() const { return root + "/checkpoints"; }
    std::string evals() const { return ckpt_dir() + "/evals.txt"; }
    std::string progression() const { return root + "/progression.tsv"; }
    std::string progression_table() const { return root + "/progression_table.txt"; }
    std::string selection() const { return root + "/selection.txt"; }
    std::string stages() const { return root + "/stages.txt"; }
    std::string report() const { return root + "/report.txt"; }

    std::string strategy_dir(const std::string& strategy) const {
        return root + "/mix-" + strategy;
    }
    std::string scores_dir(const std::string& strategy) const {
        return strategy_dir(strategy) + "/scores";
    }
    std::string score_file(const std::string& strategy, const std::string& checkpoint_id) const {
        return scores_dir(strategy) + "/" + checkpoint_id + ".txt";
    }
    std::string joint(const std::string& strategy) const {
        return scores_dir(strategy) + "/joint.txt";
    }
    std::string strategy_selection(const std::string& strategy) const {
        return strategy_dir(strategy) + "/selection.txt";
    }
    std::string groups(const std::string& strategy) const {
        return strategy_dir(strategy) + "/groups.txt";
    }
    std::string weights(const std::string& strategy) const {
        return strategy_dir(strategy) + "/weights.txt";
    }
    std::string manifest(const std::string& strategy) const {
        return strategy_dir(strategy) + "/manifest.txt";
    }
    std::string eval(const std::string& strategy) const {
        return strategy_dir(strategy) + "/eval.txt";
    }
};

// ---------------------------------------------------------------------------
// Stage ledger: one "name hash" line per completed stage. A stage is up to
// date when its recorded input hash matches and all its outputs still exist.
// ---------------------------------------------------------------------------

class StageLedger {
  public:
    explicit StageLedger(std::string path) : path_(std::move(path)) {
        if (!std::filesystem::exists(path_)) return;
        std::istringstream in(util::read_file(path_));
        std::string line;
        while (std::getline(in, line)) {
            const auto fields = util::split_ws(line);
            if (fields.size() == 2) entries_[fields[0]] = fields[1];
        }
    }

    bool up_to_date(const std::string& stage, const std::string& hash,
                    const std::vector<std::string>& outputs) const {
        const auto it = entries_.find(stage);
        if (it == entries_.end() || it->second != hash) return false;
        for (const auto& out : outputs) {
            if (!std::filesystem::exists(out)) return false;
        }
        return true;
    }

    void record(const std::string& stage, const std::string& hash) {
        entries_[stage] = hash;
        std::string out;
        for (const auto& [name, h] : entries_) out += name + " " + h + "\n";
        util::write_file(path_, out);
    }

  private:
    std::string path_;
    std::map<std::string, std::string> entries_;
};

// Wraps a stage body so any failure surfaces with the stage's name attached.
template <typename Fn>
void run_stage(const std::string& name, Fn&& body) {
    try {
        body();
    } catch (const stage_error&) {
        throw;
    } catch (const std::exception& e) {
        throw stage_error(name, e.what());
    }
}

// ---------------------------------------------------------------------------
// Config-derived generation inputs.
// ---------------------------------------------------------------------------

inline std::vector<SyntheticTaskSpec> task_specs_from_config(const PipelineConfig& cfg) {
    std::vector<SyntheticTaskSpec> specs;
    for (int i = 0; i < cfg.num_tasks; ++i) {
        const auto noise = cfg.noise_rates[static_cast<std::size_t>(i) % cfg.noise_rates.size()];
        specs.push_back(make_task_spec("task-" + std::to_string(i), i * cfg.band_width,
                                       (i + 1) * cfg.band_width, noise, cfg.seed));
    }
    return specs;
}

inline GenOptions gen_options_from_config(const PipelineConfig& cfg) {
    GenOptions options;
    options.source_tags.clear();
    for (int s = 0; s < cfg.num_sources; ++s) {
        char tag[16];
        std::snprintf(tag, sizeof(tag), "crawl-%02d", s);
        options.source_tags.push_back(tag);
    }
    options.max_band_overlap = cfg.band_overlap;
    options.length_jitter = cfg.length_jitter;
    return options;
}

// ---------------------------------------------------------------------------
// Shared stages: corpus generation, proxy simulation, progression, selection.
// ---------------------------------------------------------------------------

inline void stage_gen_corpus(const PipelineConfig& cfg) {
    const ArtifactPaths paths(cfg.out_dir);
    std::filesystem::create_directories(paths.root);
    StageLedger ledger(paths.stages());
    const auto hash = util::content_hash({}, cfg.hash_text());
    const std::vector<std::string> outputs = {paths.corpus(), paths.origins(), paths.probes()};
    if (ledger.up_to_date("gen-corpus", hash, outputs)) return;

    const auto specs = task_specs_from_config(cfg);
    const auto generated =
        generate_corpus_with_origins(specs, cfg.per_task_docs, cfg.distractor_fraction,
                                     cfg.seq_len, cfg.seed, gen_options_from_config(cfg));
    Corpus corpus = generated.corpus;
    corpus.vocab_size = cfg.vocab_size;

    std::vector<TaskProbe> probes;
    for (const auto& spec : specs) {
        probes.push_back(generate_probe(spec, cfg.probe_q, cfg.seq_len, cfg.seed));
    }

    save_corpus(corpus, paths.corpus());
    save_origins(generated.origins, paths.origins());
    save_probes(probes, cfg.vocab_size, paths.probes());
    ledger.record("gen-corpus", hash);
}

inline std::vector<std::string> expected_params_files(const PipelineConfig& cfg,
                                                      const ArtifactPaths& paths) {
    std::vector<std::string> files;
    for (std::int64_t step = cfg.checkpoint_every; step <= cfg.sim_steps;
         step += cfg.checkpoint_every) {
        files.push_back(checkpoint_params_path(paths.ckpt_dir(), checkpoint_id_for_step(step)));
    }
    return files;
}

inline void stage_simulate(const PipelineConfig& cfg) {
    const ArtifactPaths paths(cfg.out_dir);
    StageLedger ledger(paths.stages());
    const auto hash = util::content_hash({paths.corpus(), paths.probes()}, cfg.hash_text());
    auto outputs = expected_params_files(cfg, paths);
    outputs.push_back(paths.evals());
    if (ledger.up_to_date("simulate", hash, outputs)) return;

    const auto corpus = load_corpus(paths.corpus());
    const auto probes = load_probes(paths.probes());
    SimulationOptions options;
    options.steps = cfg.sim_steps;
    options.batch_size = cfg.batch_size;
    options.checkpoint_every = cfg.checkpoint_every;
    options.learning_rate = cfg.learning_rate;
    options.seed = cfg.seed;
    options.d_model = cfg.d_model;
    options.init_scale = cfg.init_scale;
    const auto checkpoints = run_simulation(corpus, probes, options);

    std::filesystem::create_directories(paths.ckpt_dir());
    save_checkpoint_evals(checkpoints, paths.evals());
    save_checkpoint_params(checkpoints, paths.ckpt_dir());
    ledger.record("simulate", hash);
}

inline void stage_progression(const PipelineConfig& cfg) {
    const ArtifactPaths paths(cfg.out_dir);
    StageLedger ledger(paths.stages());
    const auto hash = util::content_hash({paths.evals()}, cfg.hash_text());
    const std::vector<std::string> outputs = {paths.progression(), paths.progression_table()};
    if (ledger.up_to_date("progression", hash, outputs)) return;

    const auto checkpoints = load_checkpoint_evals(paths.evals());
    const auto table = build_progression_table(checkpoints, cfg.sim_steps);
    save_progression(table, paths.progression());
    util::write_file(paths.progression_table(), render_progression_table(table, "proxy"));
    ledger.record("progression", hash);
}

inline void stage_select(const PipelineConfig& cfg) {
    const ArtifactPaths paths(cfg.out_dir);
    StageLedger ledger(paths.stages());
    const auto hash = util::content_hash({paths.progression(), paths.evals()}, cfg.hash_text());
    const std::vector<std::string> outputs = {paths.selection()};
    if (ledger.up_to_date("select", hash, outputs)) return;

    const auto checkpoints = load_checkpoint_evals(paths.evals());
    const auto table = load_progression(paths.progression());
    const auto selection = select_task_checkpoints(table, checkpoints);
    save_selection(selection, paths.selection());
    ledger.record("select", hash);
}

// ---------------------------------------------------------------------------
// Checkpoint strategies. A strategy names both a mixing recipe and the
// mix-<strategy>/ directory its artifacts live in.
//   automixer        per-task best checkpoints (the default recipe)
//   task-best        same selection, kept as a separately named ablation arm
//   last-only        the final checkpoint alone
//   all-checkpoints  every saved checkpoint, step-weighted
//   ppl              task-best selection, utility = -perplexity per sample
//   uniform          no influence at all; a uniform draw from the corpus
// ---------------------------------------------------------------------------

inline bool strategy_uses_selection_file(const std::string& strategy) {
    return strategy == "automixer" || strategy == "ppl";
}

// Selection metadata for a strategy; checkpoint params are left unloaded.
inline SelectedCheckpointSet selection_for_strategy(const std::string& strategy,
                                                    const ArtifactPaths& paths,
                                                    std::span<const Checkpoint> checkpoints) {
    if (checkpoints.empty()) throw integrity_error("no checkpoints available");
    if (strategy_uses_selection_file(strategy)) {
        return load_selection(paths.selection(), checkpoints);
    }
    if (strategy == "task-best") {
        const auto table = load_progression(paths.progression());
        return select_task_checkpoints(table, checkpoints);
    }
    if (strategy == "last-only") {
        SelectedCheckpointSet out;
        const auto last = std::max_element(
            checkpoints.begin(), checkpoints.end(),
            [](const Checkpoint& a, const Checkpoint& b) { return a.step < b.step; });
        out.checkpoints.push_back(*last);
        out.alphas[last->checkpoint_id] = 1.0;
        for (const auto& [task, acc] : last->eval) {
            (void)acc;
            out.task_assignment[task] = last->checkpoint_id;
        }
        return out;
    }
    if (strategy == "all-checkpoints") {
        SelectedCheckpointSet out;
        out.checkpoints.assign(checkpoints.begin(), checkpoints.end());
        std::sort(out.checkpoints.begin(), out.checkpoints.end(),
                  [](const Checkpoint& a, const Checkpoint& b) { return a.step < b.step; });
        std::vector<std::int64_t> steps;
        for (const auto& ckpt : out.checkpoints) steps.push_back(ckpt.step);
        const auto alphas = blending_factors(steps);
        for (std::size_t i = 0; i < alphas.size(); ++i) {
            out.alphas[out.checkpoints[i].checkpoint_id] = alphas[i];
        }
        const auto table = load_progression(paths.progression());
        for (const auto& row : table.rows) {
            out.task_assignment[row.task_id] = row.best_checkpoint_id;
        }
        return out;
    }
    throw config_error("unknown checkpoint strategy: " + strategy);
}

// Validation set for one selected checkpoint: the probes of its assigned
// tasks, or every probe when the strategy assigned it none.
inline TaskProbe probe_for_checkpoint(const SelectedCheckpointSet& selection,
                                      const std::string& checkpoint_id,
                                      std::span<const TaskProbe> probes) {
    std::map<std::string, const TaskProbe*> by_task;
    for (const auto& probe : probes) by_task[probe.task_id] = &probe;

    std::vector<TaskProbe> assigned;
    for (const auto& [task, ckpt_id] : selection.task_assignment) {
        if (ckpt_id != checkpoint_id) continue;
        const auto it = by_task.find(task);
        if (it == by_task.end()) throw integrity_error("no probe for task " + task);
        assigned.push_back(*it->second);
    }
    if (!assigned.empty()) return merge_probes(assigned);

    std::vector<TaskProbe> all;
    for (const auto& [task, probe] : by_task) all.push_back(*probe);
    return merge_probes(all);
}

// ---------------------------------------------------------------------------
// Per-strategy stages: influence scoring, regrouping, weighting, sampling.
// ---------------------------------------------------------------------------

inline void stage_score(const PipelineConfig& cfg, const std::string& strategy) {
    const ArtifactPaths paths(cfg.out_dir);
    StageLedger ledger(paths.stages());

    const auto checkpoints = load_checkpoint_evals(paths.evals());
    auto selection = selection_for_strategy(strategy, paths, checkpoints);

    std::vector<std::string> inputs = {paths.corpus(), paths.probes(), paths.evals(),
                                       paths.progression()};
    if (strategy_uses_selection_file(strategy)) inputs.push_back(paths.selection());
    for (const auto& ckpt : selection.checkpoints) {
        inputs.push_back(checkpoint_params_path(paths.ckpt_dir(), ckpt.checkpoint_id));
    }
    const auto hash = util::content_hash(inputs, cfg.hash_text() + "strategy=" + strategy);

    std::vector<std::string> outputs = {paths.strategy_selection(strategy),
                                        paths.joint(strategy)};
    for (const auto& ckpt : selection.checkpoints) {
        outputs.push_back(paths.score_file(strategy, ckpt.checkpoint_id));
    }
    const auto stage_name = "score:" + strategy;
    if (ledger.up_to_date(stage_name, hash, outputs)) return;

    load_checkpoint_params(selection.checkpoints, paths.ckpt_dir());
    const auto corpus = load_corpus(paths.corpus());
    const auto probes = load_probes(paths.probes());

    std::filesystem::create_directories(paths.scores_dir(strategy));
    save_selection(selection, paths.strategy_selection(strategy));

    std::map<std::string, std::vector<InfluenceRecord>> by_sample;
    for (const auto& ckpt : selection.checkpoints) {
        std::vector<InfluenceRecord> records;
        if (strategy == "ppl") {
            records.reserve(corpus.samples.size());
            for (const auto& sample : corpus.samples) {
                records.push_back(
                    {sample.id, ckpt.checkpoint_id, -perplexity(ckpt.params, sample)});
            }
        } else {
            const auto probe = probe_for_checkpoint(selection, ckpt.checkpoint_id, probes);
            records = score_corpus(ckpt.params, probe, corpus, ckpt.checkpoint_id,
                                   cfg.lambda_multiplier);
        }
        save_influence_scores(records, paths.score_file(strategy, ckpt.checkpoint_id));
        for (auto& record : records) by_sample[record.sample_id].push_back(std::move(record));
    }

    std::vector<JointInfluence> joints;
    for (const auto& sample : corpus.samples) {
        const auto it = by_sample.find(sample.id);
        if (it == by_sample.end())
            throw integrity_error("sample " + sample.id + " was never scored");
        joints.push_back(joint_influence(it->second, selection.alphas));
    }
    save_joint_scores(joints, paths.joint(strategy));
    ledger.record(stage_name, hash);
}

// Checkpoint ids with a score file under mix-<strategy>/scores/, sorted.
inline std::vector<std::string> scored_checkpoint_ids(const ArtifactPaths& paths,
                                                      const std::string& strategy) {
    std::vector<std::string> ids;
    for (const auto& entry : std::filesystem::directory_iterator(paths.scores_dir(strategy))) {
        const auto name = entry.path().filename().string();
        if (name == "joint.txt" || entry.path().extension() != ".txt") continue;
        ids.push_back(entry.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw integrity_error("no per-checkpoint scores under " +
                                           paths.scores_dir(strategy));
    return ids;
}

inline void stage_regroup(const PipelineConfig& cfg, const std::string& strategy) {
    const ArtifactPaths paths(cfg.out_dir);
    StageLedger ledger(paths.stages());

    const auto ids = scored_checkpoint_ids(paths, strategy);
    std::vector<std::string> inputs = {paths.corpus(), paths.joint(strategy)};
    for (const auto& id : ids) inputs.push_back(paths.score_file(strategy, id));
    const auto hash = util::content_hash(inputs, cfg.hash_text() + "strategy=" + strategy);
    const std::vector<std::string> outputs = {paths.groups(strategy)};
    const auto stage_name = "regroup:" + strategy;
    if (ledger.up_to_date(stage_name, hash, outputs)) return;

    auto corpus = load_corpus(paths.corpus());
    std::map<std::string, double> joint;
    for (const auto& j : load_joint_scores(paths.joint(strategy))) joint[j.sample_id] = j.score;

    std::map<std::string, std::map<std::string, double>> per_checkpoint;
    for (const auto& id : ids) {
        auto& scores = per_checkpoint[id];
        for (const auto& r : load_influence_scores(paths.score_file(strategy, id))) {
            scores[r.sample_id] = r.score;
        }
    }

    if (cfg.filter_percentile >= 0.0) {
        const auto kept = percentile_filter(joint, cfg.filter_percentile);
        const std::set<std::string> keep(kept.begin(), kept.end());
        std::vector<Sample> filtered;
        for (auto& sample : corpus.samples) {
            if (keep.count(sample.id)) filtered.push_back(std::move(sample));
        }
        corpus.samples = std::move(filtered);
        if (corpus.samples.empty())
            throw integrity_error("percentile filter removed every sample");
    }

    auto groups = regroup(corpus, per_checkpoint, joint, cfg.retention);
    if (!cfg.raw_density) {
        try {
            groups = scale_group_influences(groups);
        } catch (const all_equal_error&) {
            std::cerr << "note: influence scores are all equal; keeping raw scores\n";
        }
    }
    save_groups(groups, paths.groups(strategy));
    ledger.record(stage_name, hash);
}

inline void stage_reweight(const PipelineConfig& cfg, const std::string& strategy) {
    const ArtifactPaths paths(cfg.out_dir);
    StageLedger ledger(paths.stages());
    const auto hash =
        util::content_hash({paths.groups(strategy)}, cfg.hash_text() + "strategy=" + strategy);
    const std::vector<std::string> outputs = {paths.weights(strategy)};
    const auto stage_name = "reweight:" + strategy;
    if (ledger.up_to_date(stage_name, hash, outputs)) return;

    const auto groups = load_groups(paths.groups(strategy));
    auto spec = sampling_weights(groups);
    spec.token_budget = cfg.token_budget;
    if (cfg.group_cap_tokens > 0) {
        for (const auto& group : groups) {
            spec.group_caps[group.group_id] = cfg.group_cap_tokens;
        }
    }
    save_mixture_spec(spec, paths.weights(strategy));
    ledger.record(stage_name, hash);
}

inline void stage_sample(const PipelineConfig& cfg, const std::string& strategy) {
    const ArtifactPaths paths(cfg.out_dir);
    StageLedger ledger(paths.stages());
    const auto hash = util::content_hash({paths.groups(strategy), paths.weights(strategy)},
                                         cfg.hash_text() + "strategy=" + strategy);
    const std::vector<std::string> outputs = {paths.manifest(strategy)};
    const auto stage_name = "sample:" + strategy;
    if (ledger.up_to_date(stage_name, hash, outputs)) return;

    const auto groups = load_groups(paths.groups(strategy));
    const auto spec = load_mixture_spec(paths.weights(strategy));
    const auto manifest = sample_mixture(groups, spec, cfg.seed);
    save_manifest(manifest, spec, paths.manifest(strategy));
    ledger.record(stage_name, hash);
}

// The uniform baseline draws directly from the corpus: one shuffled pass,
// taking every sample that still fits in the budget.
inline void stage_uniform_manifest(const PipelineConfig& cfg) {
    const ArtifactPaths paths(cfg.out_dir);
    StageLedger ledger(paths.stages());
    const auto hash = util::content_hash({paths.corpus()}, cfg.hash_text());
    const std::vector<std::string> outputs = {paths.manifest("uniform")};
    if (ledger.up_to_date("sample:uniform", hash, outputs)) return;

    const auto corpus = load_corpus(paths.corpus());
    std::vector<std::size_t> order(corpus.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng::Stream stream(cfg.seed, "uniform-draw");
    stream.shuffle(order);

    MixtureManifest manifest;
    std::int64_t drawn = 0;
    for (const auto i : order) {
        const auto& sample = corpus.samples[i];
        const auto tokens = static_cast<std::int64_t>(sample.token_count());
        if (drawn + tokens > cfg.token_budget) continue;
        drawn += tokens;
        manifest.entries.push_back({sample.id, "uniform", tokens, drawn});
    }
    manifest.group_tokens["uniform"] = drawn;
    manifest.total_tokens = drawn;

    MixtureSpec spec;
    spec.weights["uniform"] = 1.0;
    spec.token_budget = cfg.token_budget;
    std::filesystem::create_directories(paths.strategy_dir("uniform"));
    save_manifest(manifest, spec, paths.manifest("uniform"));
    ledger.record("sample:uniform", hash);
}

// ---------------------------------------------------------------------------
// Final training: a fresh model per repeat, trained on the manifest in its
// recorded order, evaluated on every task probe. Repeat seeds depend only on
// the config seed, so every strategy trains from identical initializations.
// ---------------------------------------------------------------------------

struct EvalRow {
    int repeat = 0;
    std::string task_id;
    double accuracy = 0.0;
};

inline std::vector<EvalRow> final_train_and_eval(const PipelineConfig& cfg, const Corpus& corpus,
                                                 std::span<const TaskProbe> probes,
                                                 const MixtureManifest& manifest) {
    std::map<std::string, const Sample*> by_id;
    for (const auto& sample : corpus.samples) by_id[sample.id] = &sample;

    std::vector<Sample> train_set;
    train_set.reserve(manifest.entries.size());
    for (const auto& entry : manifest.entries) {
        const auto it = by_id.find(entry.sample_id);
        if (it == by_id.end())
            throw integrity_error("manifest sample " + entry.sample_id + " is not in the corpus");
        train_set.push_back(*it->second);
    }

    std::vector<EvalRow> rows;
    for (int r = 0; r < cfg.repeats; ++r) {
        const auto repeat_seed =
            rng::splitmix64(cfg.seed ^ rng::fnv1a64("final-train:" + std::to_string(r)));
        auto params = ModelParams::random_init(corpus.vocab_size, cfg.d_model, repeat_seed,
                                               cfg.init_scale);
        if (train_set.empty()) {
            std::cerr << "warning: empty manifest; evaluating an untrained model\n";
        }
        for (int epoch = 0; epoch < cfg.final_epochs; ++epoch) {
            for (std::size_t start = 0; start < train_set.size();
                 start += static_cast<std::size_t>(cfg.batch_size)) {
                const auto count = std::min(static_cast<std::size_t>(cfg.batch_size),
                                            train_set.size() - start);
                params = sgd_step(params, std::span(train_set).subspan(start, count),
                                  cfg.learning_rate);
            }
        }
        for (const auto& probe : probes) {
            rows.push_back({r, probe.task_id, evaluate_checkpoint(params, probe)});
        }
    }
    return rows;
}

inline void save_eval_rows(std::span<const EvalRow> rows, const std::string& path) {
    std::string out;
    for (const auto& row : rows) {
        out += "repeat " + std::to_string(row.repeat) + " " + row.task_id + " " +
               util::format_score(row.accuracy) + "\n";
    }
    util::write_file(path, out);
}

inline std::vector<EvalRow> load_eval_rows(const std::string& path) {
    const auto text = util::read_file(path);
    std::vector<EvalRow> rows;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (util::trim(line).empty()) continue;
        const auto fields = util::split_ws(line);
        if (fields.size() != 4 || fields[0] != "repeat")
            throw parse_error(path, line_no, "expected: repeat <r> <task> <accuracy>");
        EvalRow row;
        try {
            row.repeat = std::stoi(fields[1]);
            row.task_id = fields[2];
            row.accuracy = std::stod(fields[3]);
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "bad repeat or accuracy value");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// Mean accuracy per task over all repeats.
inline std::map<std::string, double> mean_task_accuracy(std::span<const EvalRow> rows) {
    std::map<std::string, double> sums;
    std::map<std::string, int> counts;
    for (const auto& row : rows) {
        sums[row.task_id] += row.accuracy;
        counts[row.task_id] += 1;
    }
    std::map<std::string, double> means;
    for (const auto& [task, sum] : sums) means[task] = sum / counts[task];
    return means;
}

inline void stage_train_eval(const PipelineConfig& cfg, const std::string& strategy) {
    const ArtifactPaths paths(cfg.out_dir);
    StageLedger ledger(paths.stages());
    const auto hash =
        util::content_hash({paths.manifest(strategy), paths.corpus(), paths.probes()},
                           cfg.hash_text() + "strategy=" + strategy);
    const std::vector<std::string> outputs = {paths.eval(strategy)};
    const auto stage_name = "train-eval:" + strategy;
    if (ledger.up_to_date(stage_name, hash, outputs)) return;

    const auto corpus = load_corpus(paths.corpus());
    const auto probes = load_probes(paths.probes());
    const auto manifest = load_manifest(paths.manifest(strategy)).manifest;
    const auto rows = final_train_and_eval(cfg, corpus, probes, manifest);
    save_eval_rows(rows, paths.eval(strategy));
    ledger.record(stage_name, hash);
}

// ---------------------------------------------------------------------------
// Report: accuracies, deltas against the uniform baseline, the checkpoint
// strategy ablation, mixture composition, and the influence diagnostics.
// ---------------------------------------------------------------------------

inline std::string render_accuracy_table(
    const std::vector<std::string>& strategies,
    const std::map<std::string, std::map<std::string, double>>& accuracy,
    const std::vector<std::string>& tasks, bool as_delta,
    const std::map<std::string, double>& baseline) {
    std::string out = "strategy";
    for (const auto& task : tasks) out += "\t" + task;
    out += "\tAvg.\n";
    for (const auto& strategy : strategies) {
        const auto& acc = accuracy.at(strategy);
        out += strategy;
        double sum = 0.0;
        for (const auto& task : tasks) {
            const auto value = acc.at(task) - (as_delta ? baseline.at(task) : 0.0);
            sum += value;
            out += "\t" + util::format_score(value);
        }
        out += "\t" + util::format_score(sum / static_cast<double>(tasks.size())) + "\n";
    }
    return out;
}

inline void emit_report(const PipelineConfig& cfg, const std::vector<std::string>& strategies) {
    const ArtifactPaths paths(cfg.out_dir);

    std::map<std::string, std::map<std::string, double>> accuracy;
    std::vector<std::string> tasks;
    for (const auto& strategy : strategies) {
        const auto eval_path = paths.eval(strategy);
        if (!std::filesystem::exists(eval_path)) {
            if (strategy == "uniform")
                throw config_error("uniform baseline results missing; run it first");
            throw config_error("missing evaluation results for strategy " + strategy);
        }
        accuracy[strategy] = mean_task_accuracy(load_eval_rows(eval_path));
        if (tasks.empty()) {
            for (const auto& [task, acc] : accuracy[strategy]) {
                (void)acc;
                tasks.push_back(task);
            }
        }
    }
    if (strategies.empty()) throw config_error("report needs at least one strategy");

    std::string out = "== accuracy ==\n";
    out += render_accuracy_table(strategies, accuracy, tasks, false, {});

    if (accuracy.count("uniform")) {
        out += "\n== improvement over uniform ==\n";
        out += render_accuracy_table(strategies, accuracy, tasks, true, accuracy.at("uniform"));
    }

    const std::vector<std::string> ablation = {"last-only", "all-checkpoints", "task-best"};
    const bool have_ablation = std::all_of(ablation.begin(), ablation.end(),
                                           [&](const std::string& s) {
                                               return accuracy.count(s) != 0;
                                           });
    if (have_ablation) {
        out += "\n== checkpoint strategy ablation ==\n";
        out += render_accuracy_table(ablation, accuracy, tasks, false, {});
    }

    // Token share drawn from distractor documents, per manifest occurrence.
    if (std::filesystem::exists(paths.origins())) {
        std::map<std::string, std::string> origin_task;
        std::map<std::string, double> quality;
        for (const auto& origin : load_origins(paths.origins())) {
            origin_task[origin.sample_id] = origin.task_id;
            quality[origin.sample_id] = origin.rule_fraction;
        }
        out += "\n== mixture composition ==\n";
        out += "strategy\ttotal_tokens\tdistractor_share\n";
        for (const auto& strategy : strategies) {
            const auto manifest = load_manifest(paths.manifest(strategy)).manifest;
            std::int64_t distractor = 0;
            for (const auto& entry : manifest.entries) {
                const auto it = origin_task.find(entry.sample_id);
                if (it == origin_task.end())
                    throw integrity_error("no origin recorded for " + entry.sample_id);
                if (it->second.empty()) distractor += entry.token_count;
            }
            const auto share = manifest.total_tokens == 0
                                   ? 0.0
                                   : static_cast<double>(distractor) /
                                         static_cast<double>(manifest.total_tokens);
            out += strategy + "\t" + std::to_string(manifest.total_tokens) + "\t" +
                   util::format_score(share) + "\n";
        }

        if (std::filesystem::exists(paths.progression())) {
            out += "\n== task progression ==\n";
            out += render_progression_table(load_progression(paths.progression()), "proxy");
        }

        // Influence diagnostics use the last listed strategy that scored the
        // corpus (the runners put the primary strategy last).
        std::string scored;
        for (const auto& strategy : strategies) {
            if (std::filesystem::exists(paths.joint(strategy))) scored = strategy;
        }
        if (!scored.empty()) {
            const auto corpus = load_corpus(paths.corpus());
            std::map<std::string, double> joint;
            for (const auto& j : load_joint_scores(paths.joint(scored)))
                joint[j.sample_id] = j.score;
            std::vector<double> scores;
            std::vector<std::int64_t> token_counts;
            std::vector<double> rule_fractions;
            for (const auto& sample : corpus.samples) {
                const auto it = joint.find(sample.id);
                if (it == joint.end())
                    throw integrity_error("no joint score for " + sample.id);
                scores.push_back(it->second);
                token_counts.push_back(static_cast<std::int64_t>(sample.token_count()));
                rule_fractions.push_back(quality.at(sample.id));
            }
            const std::vector<BucketRange> edges = {{0, 50},  {50, 75}, {75, 90},
                                                    {90, 95}, {95, 99}, {99, 100}};
            out += "\n== influence buckets (" + scored + ") ==\n";
            out += render_bucket_table(bucket_stats(scores, token_counts, rule_fractions, edges));

            const auto ids = scored_checkpoint_ids(paths, scored);
            std::map<std::string, double> earliest;
            std::map<std::string, double> latest;
            for (const auto& r : load_influence_scores(paths.score_file(scored, ids.front())))
                earliest[r.sample_id] = r.score;
            for (const auto& r : load_influence_scores(paths.score_file(scored, ids.back())))
                latest[r.sample_id] = r.score;
            out += "\n== ranking overlap (" + scored + ", " + ids.front() + " vs " +
                   ids.back() + ") ==\n";
            out += render_overlap_table(overlap_analysis(earliest, latest, 10));
        }
    }

    util::write_file(paths.report(), out);
}

// ---------------------------------------------------------------------------
// Runners. Each runner drives the stage sequence for one experiment; every
// stage is individually idempotent, so interrupted runs resume.
// ---------------------------------------------------------------------------

inline void influence_strategy_stages(const PipelineConfig& cfg, const std::string& strategy) {
    run_stage("score:" + strategy, [&] { stage_score(cfg, strategy); });
    run_stage("regroup:" + strategy, [&] { stage_regroup(cfg, strategy); });
    run_stage("reweight:" + strategy, [&] { stage_reweight(cfg, strategy); });
    run_stage("sample:" + strategy, [&] { stage_sample(cfg, strategy); });
    run_stage("train-eval:" + strategy, [&] { stage_train_eval(cfg, strategy); });
}

inline void uniform_baseline_stages(const PipelineConfig& cfg) {
    run_stage("sample:uniform", [&] { stage_uniform_manifest(cfg); });
    run_stage("train-eval:uniform", [&] { stage_train_eval(cfg, "uniform"); });
}

inline void shared_simulation_stages(const PipelineConfig& cfg) {
    run_stage("gen-corpus", [&] { stage_gen_corpus(cfg); });
    run_stage("simulate", [&] { stage_simulate(cfg); });
    run_stage("progression", [&] { stage_progression(cfg); });
}

inline void run_automixer(const PipelineConfig& cfg) {
    cfg.validate();
    shared_simulation_stages(cfg);
    run_stage("select", [&] { stage_select(cfg); });
    influence_strategy_stages(cfg, "automixer");
    uniform_baseline_stages(cfg);
    run_stage("report", [&] { emit_report(cfg, {"uniform", "automixer"}); });
}

inline void run_uniform_baseline(const PipelineConfig& cfg) {
    cfg.validate();
    run_stage("gen-corpus", [&] { stage_gen_corpus(cfg); });
    uniform_baseline_stages(cfg);
    run_stage("report", [&] { emit_report(cfg, {"uniform"}); });
}

inline void run_ppl_baseline(const PipelineConfig& cfg) {
    cfg.validate();
    shared_simulation_stages(cfg);
    run_stage("select", [&] { stage_select(cfg); });
    influence_strategy_stages(cfg, "ppl");
    uniform_baseline_stages(cfg);
    run_stage("report", [&] { emit_report(cfg, {"uniform", "ppl"}); });
}

inline void run_ablation_checkpoint_strategies(const PipelineConfig& cfg) {
    cfg.validate();
    shared_simulation_stages(cfg);
    influence_strategy_stages(cfg, "last-only");
    influence_strategy_stages(cfg, "all-checkpoints");
    influence_strategy_stages(cfg, "task-best");
    uniform_baseline_stages(cfg);
    run_stage("report", [&] {
        emit_report(cfg, {"uniform", "last-only", "all-checkpoints", "task-best"});
    });
}

}  // namespace automixer
