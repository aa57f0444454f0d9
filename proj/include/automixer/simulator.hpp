#pragma once

// Simulation run machinery: trains the proxy model with seeded uniform
// batching, snapshots parameter-only checkpoints on a fixed cadence,
// evaluates every checkpoint on every task probe, and reduces the results
// to the progression table / task-best checkpoint selection.
//
// Conventions fixed here:
//  - progression ratio = best_step / total_steps, task-best tie broken by
//    the earliest checkpoint;
//  - evaluation accuracy = fraction of probe transitions whose argmax logit
//    matches the true next token, argmax ties broken by the lowest token id;
//  - blending factors alpha_j = (s_j / s_max) / sum_i (s_i / s_max).

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "automixer/corpus.hpp"
#include "automixer/errors.hpp"
#include "automixer/model.hpp"
#include "automixer/rng.hpp"
#include "automixer/util.hpp"

namespace automixer {

struct Checkpoint {
    std::string checkpoint_id;
    std::int64_t step = 0;
    ModelParams params;
    std::map<std::string, double> eval;  // task_id -> accuracy
};

struct ProgressionRow {
    std::string task_id;
    std::string best_checkpoint_id;
    std::int64_t best_step = 0;
    double best_accuracy = 0.0;
    double ratio = 0.0;  // best_step / total_steps, in (0, 1]
};

struct ProgressionTable {
    std::int64_t total_steps = 0;
    std::vector<ProgressionRow> rows;  // one per task
};

struct SelectedCheckpointSet {
    std::vector<Checkpoint> checkpoints;                  // k distinct, ordered by step
    std::map<std::string, std::string> task_assignment;   // task_id -> checkpoint_id
    std::map<std::string, double> alphas;                 // checkpoint_id -> alpha_j
};

struct SimulationOptions {
    std::int64_t steps = 0;
    int batch_size = 8;
    std::int64_t checkpoint_every = 0;
    double learning_rate = 0.05;
    std::uint64_t seed = 0;
    int d_model = 16;
    double init_scale = 0.1;
};

inline std::string checkpoint_id_for_step(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt-%06lld", static_cast<long long>(step));
    return buf;
}

// Argmax next-token accuracy over all probe transitions, pooled.
inline double evaluate_checkpoint(const ModelParams& params, const TaskProbe& probe) {
    if (probe.probe_samples.empty()) throw config_error("probe is empty");
    std::int64_t hits = 0, total = 0;
    for (const auto& sample : probe.probe_samples) {
        const auto logits = forward_logits(params, sample.tokens);
        for (int t = 0; t < logits.rows; ++t) {
            const auto row = logits.row(t);
            int best = 0;
            for (int c = 1; c < logits.vocab; ++c) {
                if (row[static_cast<std::size_t>(c)] > row[static_cast<std::size_t>(best)]) best = c;
            }
            if (best == sample.tokens[static_cast<std::size_t>(t) + 1]) ++hits;
            ++total;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

inline double evaluate_checkpoint(const Checkpoint& checkpoint, const TaskProbe& probe) {
    return evaluate_checkpoint(checkpoint.params, probe);
}

// Seeded uniform batch stream: reshuffled epoch order, consumed batch_size
// indices at a time.
class BatchStream {
public:
    BatchStream(std::size_t corpus_size, int batch_size, std::uint64_t seed)
        : stream_(seed, "batch-stream"), batch_size_(batch_size) {
        order_.resize(corpus_size);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        cursor_ = corpus_size;  // force shuffle on first use
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> batch;
        batch.reserve(static_cast<std::size_t>(batch_size_));
        for (int i = 0; i < batch_size_; ++i) {
            if (cursor_ >= order_.size()) {
                stream_.shuffle(order_);
                cursor_ = 0;
            }
            batch.push_back(order_[cursor_++]);
        }
        return batch;
    }

private:
    rng::Stream stream_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    int batch_size_ = 0;
};

inline std::vector<Checkpoint> run_simulation(const Corpus& corpus,
                                              std::span<const TaskProbe> probes,
                                              const SimulationOptions& options) {
    if (corpus.samples.empty()) throw config_error("cannot simulate on an empty corpus");
    if (options.steps < 1 || options.checkpoint_every < 1)
        throw config_error("steps and checkpoint_every must be >= 1");
    if (options.steps % options.checkpoint_every != 0 ||
        options.steps / options.checkpoint_every < 2)
        throw config_error("checkpoint_every must divide steps into at least 2 checkpoints");
    if (options.batch_size < 1) throw config_error("batch_size must be >= 1");

    ModelParams params =
        ModelParams::random_init(corpus.vocab_size, options.d_model, options.seed, options.init_scale);
    BatchStream batches(corpus.samples.size(), options.batch_size, options.seed);

    std::vector<Checkpoint> checkpoints;
    std::vector<Sample> batch(static_cast<std::size_t>(options.batch_size));
    for (std::int64_t step = 1; step <= options.steps; ++step) {
        const auto idx = batches.next();
        for (std::size_t i = 0; i < idx.size(); ++i) batch[i] = corpus.samples[idx[i]];
        try {
            params = sgd_step(params, batch, options.learning_rate);
        } catch (const divergence_error&) {
            throw divergence_error("simulation diverged", step);
        }
        if (step % options.checkpoint_every == 0) {
            Checkpoint ckpt;
            ckpt.checkpoint_id = checkpoint_id_for_step(step);
            ckpt.step = step;
            ckpt.params = params;
            for (const auto& probe : probes) {
                ckpt.eval[probe.task_id] = evaluate_checkpoint(ckpt.params, probe);
            }
            checkpoints.push_back(std::move(ckpt));
        }
    }
    return checkpoints;
}

// Per task: the earliest checkpoint achieving the maximum accuracy.
inline ProgressionTable build_progression_table(std::span<const Checkpoint> checkpoints,
                                                std::int64_t total_steps) {
    if (checkpoints.empty()) throw config_error("no checkpoints to tabulate");
    std::vector<std::string> task_ids;
    for (const auto& [task, acc] : checkpoints.front().eval) task_ids.push_back(task);
    if (task_ids.empty()) throw integrity_error("checkpoints carry no evaluations");

    ProgressionTable table;
    table.total_steps = total_steps;
    for (const auto& task : task_ids) {
        ProgressionRow row;
        row.task_id = task;
        bool first = true;
        for (const auto& ckpt : checkpoints) {
            const auto it = ckpt.eval.find(task);
            if (it == ckpt.eval.end())
                throw integrity_error("checkpoint " + ckpt.checkpoint_id +
                                      " was not evaluated on task " + task);
            if (first || it->second > row.best_accuracy) {
                row.best_checkpoint_id = ckpt.checkpoint_id;
                row.best_step = ckpt.step;
                row.best_accuracy = it->second;
                first = false;
            }
        }
        row.ratio = static_cast<double>(row.best_step) / static_cast<double>(total_steps);
        table.rows.push_back(std::move(row));
    }
    return table;
}

// alpha_j = (s_j / s_max) / sum_i (s_i / s_max); sums to 1.
inline std::vector<double> blending_factors(std::span<const std::int64_t> steps) {
    if (steps.empty()) throw config_error("blending_factors needs at least one step");
    const double s_max = static_cast<double>(*std::max_element(steps.begin(), steps.end()));
    for (const auto s : steps) {
        if (s <= 0) throw config_error("checkpoint steps must be positive");
    }
    std::vector<double> normalized(steps.size());
    double total = 0.0;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        normalized[i] = static_cast<double>(steps[i]) / s_max;
        total += normalized[i];
    }
    for (auto& a : normalized) a /= total;
    return normalized;
}

// Collapses the per-task best checkpoints into the distinct selected set
// (k <= m) and computes the blending factors over their steps.
inline SelectedCheckpointSet select_task_checkpoints(const ProgressionTable& table,
                                                     std::span<const Checkpoint> checkpoints) {
    SelectedCheckpointSet out;
    std::map<std::string, const Checkpoint*> by_id;
    for (const auto& ckpt : checkpoints) by_id[ckpt.checkpoint_id] = &ckpt;

    std::vector<std::string> selected_ids;
    for (const auto& row : table.rows) {
        out.task_assignment[row.task_id] = row.best_checkpoint_id;
        if (std::find(selected_ids.begin(), selected_ids.end(), row.best_checkpoint_id) ==
            selected_ids.end()) {
            selected_ids.push_back(row.best_checkpoint_id);
        }
    }
    for (const auto& id : selected_ids) {
        const auto it = by_id.find(id);
        if (it == by_id.end()) throw integrity_error("selected checkpoint " + id + " is missing");
        out.checkpoints.push_back(*it->second);
    }
    std::sort(out.checkpoints.begin(), out.checkpoints.end(),
              [](const Checkpoint& a, const Checkpoint& b) { return a.step < b.step; });

    std::vector<std::int64_t> steps;
    for (const auto& ckpt : out.checkpoints) steps.push_back(ckpt.step);
    const auto alphas = blending_factors(steps);
    for (std::size_t i = 0; i < alphas.size(); ++i) {
        out.alphas[out.checkpoints[i].checkpoint_id] = alphas[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Progression table text layout: rows = run, columns = tasks, cells = ratio%.
// ---------------------------------------------------------------------------

inline std::string format_ratio_percent(double ratio) {
    return util::format_score(ratio * 100.0) + "%";
}

inline std::string render_progression_table(const ProgressionTable& table,
                                            const std::string& run_label) {
    std::string out = "run";
    for (const auto& row : table.rows) out += "\t" + row.task_id;
    out += "\n" + run_label;
    for (const auto& row : table.rows) out += "\t" + format_ratio_percent(row.ratio);
    out += "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Stage artifacts: checkpoint eval table, progression rows, selection.
// Checkpoint parameters themselves go through save_params/load_params, one
// file per checkpoint named <checkpoint_id>.params.
// ---------------------------------------------------------------------------

inline void save_checkpoint_evals(std::span<const Checkpoint> checkpoints,
                                  const std::string& path) {
    std::string out;
    for (const auto& ckpt : checkpoints) {
        for (const auto& [task, acc] : ckpt.eval) {
            out += ckpt.checkpoint_id + " " + std::to_string(ckpt.step) + " " + task + " " +
                   util::format_score(acc) + "\n";
        }
    }
    util::write_file(path, out);
}

// Rebuilds checkpoints (without parameters) from the eval table, in step
// order.
inline std::vector<Checkpoint> load_checkpoint_evals(const std::string& path) {
    const auto text = util::read_file(path);
    std::map<std::int64_t, Checkpoint> by_step;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (util::trim(line).empty()) continue;
        const auto fields = util::split_ws(line);
        if (fields.size() != 4)
            throw parse_error(path, line_no, "expected: checkpoint_id step task accuracy");
        std::int64_t step = 0;
        double acc = 0.0;
        try {
            step = std::stoll(fields[1]);
            acc = std::stod(fields[3]);
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "bad step or accuracy value");
        }
        auto& ckpt = by_step[step];
        if (ckpt.checkpoint_id.empty()) {
            ckpt.checkpoint_id = fields[0];
            ckpt.step = step;
        } else if (ckpt.checkpoint_id != fields[0]) {
            throw integrity_error("conflicting checkpoint ids for step " + fields[1]);
        }
        if (!ckpt.eval.emplace(fields[2], acc).second)
            throw integrity_error("duplicate eval for " + fields[0] + "/" + fields[2]);
    }
    std::vector<Checkpoint> out;
    for (auto& [step, ckpt] : by_step) out.push_back(std::move(ckpt));
    return out;
}

inline std::string checkpoint_params_path(const std::string& dir,
                                          const std::string& checkpoint_id) {
    return dir + "/" + checkpoint_id + ".params";
}

inline void save_checkpoint_params(std::span<const Checkpoint> checkpoints,
                                   const std::string& dir) {
    for (const auto& ckpt : checkpoints) {
        save_params(ckpt.params, checkpoint_params_path(dir, ckpt.checkpoint_id));
    }
}

inline void load_checkpoint_params(std::vector<Checkpoint>& checkpoints,
                                   const std::string& dir) {
    for (auto& ckpt : checkpoints) {
        ckpt.params = load_params(checkpoint_params_path(dir, ckpt.checkpoint_id));
    }
}

inline void save_progression(const ProgressionTable& table, const std::string& path) {
    std::string out = "total_steps=" + std::to_string(table.total_steps) + "\n";
    for (const auto& row : table.rows) {
        out += row.task_id + " " + row.best_checkpoint_id + " " + std::to_string(row.best_step) +
               " " + util::format_score(row.best_accuracy) + "\n";
    }
    util::write_file(path, out);
}

inline ProgressionTable load_progression(const std::string& path) {
    const auto text = util::read_file(path);
    ProgressionTable table;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto trimmed = util::trim(line);
        if (trimmed.empty()) continue;
        if (trimmed.rfind("total_steps=", 0) == 0) {
            try {
                table.total_steps = std::stoll(std::string(trimmed.substr(12)));
            } catch (const std::exception&) {
                throw parse_error(path, line_no, "bad total_steps value");
            }
            continue;
        }
        const auto fields = util::split_ws(trimmed);
        if (fields.size() != 4)
            throw parse_error(path, line_no, "expected: task checkpoint_id step accuracy");
        ProgressionRow row;
        row.task_id = fields[0];
        row.best_checkpoint_id = fields[1];
        try {
            row.best_step = std::stoll(fields[2]);
            row.best_accuracy = std::stod(fields[3]);
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "bad step or accuracy value");
        }
        table.rows.push_back(std::move(row));
    }
    if (table.total_steps <= 0) throw integrity_error("progression file lacks total_steps: " + path);
    for (auto& row : table.rows) {
        row.ratio = static_cast<double>(row.best_step) / static_cast<double>(table.total_steps);
    }
    return table;
}

inline void save_selection(const SelectedCheckpointSet& selection, const std::string& path) {
    std::string out;
    for (const auto& ckpt : selection.checkpoints) {
        out += "checkpoint " + ckpt.checkpoint_id + " " + std::to_string(ckpt.step) + " " +
               util::format_score(selection.alphas.at(ckpt.checkpoint_id)) + "\n";
    }
    for (const auto& [task, ckpt_id] : selection.task_assignment) {
        out += "assign " + task + " " + ckpt_id + "\n";
    }
    util::write_file(path, out);
}

// Selection metadata plus parameters resolved against the given checkpoints.
inline SelectedCheckpointSet load_selection(const std::string& path,
                                            std::span<const Checkpoint> checkpoints) {
    std::map<std::string, const Checkpoint*> by_id;
    for (const auto& ckpt : checkpoints) by_id[ckpt.checkpoint_id] = &ckpt;

    const auto text = util::read_file(path);
    SelectedCheckpointSet out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (util::trim(line).empty()) continue;
        const auto fields = util::split_ws(line);
        if (fields.size() == 4 && fields[0] == "checkpoint") {
            const auto it = by_id.find(fields[1]);
            if (it == by_id.end())
                throw integrity_error("selection references unknown checkpoint " + fields[1]);
            out.checkpoints.push_back(*it->second);
            try {
                out.alphas[fields[1]] = std::stod(fields[3]);
            } catch (const std::exception&) {
                throw parse_error(path, line_no, "bad alpha value");
            }
        } else if (fields.size() == 3 && fields[0] == "assign") {
            out.task_assignment[fields[1]] = fields[2];
        } else {
            throw parse_error(path, line_no, "expected a checkpoint or assign line");
        }
    }
    if (out.checkpoints.empty()) throw integrity_error("selection file is empty: " + path);
    return out;
}

}  // namespace automixer
