#pragma once

// DataInf influence scoring against a checkpoint, restricted to the first
// (embedding) and last (output) layers.
//
// Per layer l with per-sample training gradients g_li and averaged
// validation gradient v_l:
//   lambda_l = multiplier * (n * d_l)^-1 * sum_i ||g_li||^2
//   c_li     = v_l . g_li / (lambda_l + ||g_li||^2)
//   r_l      = (1 / (n * lambda_l)) * sum_i (v_l - c_li * g_li)
// Exported score of a query sample with gradients g_k:
//   score = + sum_l r_l . g_kl
// Higher score means upweighting the sample decreases validation loss.

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "automixer/corpus.hpp"
#include "automixer/errors.hpp"
#include "automixer/model.hpp"
#include "automixer/util.hpp"

namespace automixer {

struct InfluenceRecord {
    std::string sample_id;
    std::string checkpoint_id;
    double score = 0.0;

    friend bool operator==(const InfluenceRecord&, const InfluenceRecord&) = default;
};

struct JointInfluence {
    std::string sample_id;
    double score = 0.0;

    friend bool operator==(const JointInfluence&, const JointInfluence&) = default;
};

struct LayerState {
    std::string name;  // "embed" or "output"
    std::size_t dim = 0;
    double lambda = 0.0;
    std::vector<double> v;  // averaged validation gradient
    std::vector<double> r;  // inverse-HVP estimate
};

struct LayerContext {
    LayerState embed;
    LayerState output;
    std::size_t corpus_size = 0;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) total += a[i] * b[i];
    return total;
}

}  // namespace detail

// Mean of the per-sample {embed, output} gradient bundles over the probe.
inline GradientBundle validation_gradient(const ModelParams& params, const TaskProbe& probe) {
    if (probe.probe_samples.empty()) throw config_error("validation probe is empty");
    GradientBundle mean;
    mean.embed.assign(params.embed_dim(), 0.0);
    mean.output.assign(params.output_dim(), 0.0);
    for (const auto& sample : probe.probe_samples) {
        const auto g = per_sample_layer_gradients(params, sample);
        for (std::size_t i = 0; i < mean.embed.size(); ++i) mean.embed[i] += g.embed[i];
        for (std::size_t i = 0; i < mean.output.size(); ++i) mean.output[i] += g.output[i];
    }
    const double inv_q = 1.0 / static_cast<double>(probe.probe_samples.size());
    for (auto& x : mean.embed) x *= inv_q;
    for (auto& x : mean.output) x *= inv_q;
    return mean;
}

// lambda_l = multiplier * (n * d_l)^-1 * sum of squared gradient norms.
inline double layer_lambda(double sum_squared_norms, std::size_t dim, std::size_t n,
                           double multiplier = 0.1) {
    if (n < 1 || dim < 1) throw config_error("layer_lambda needs n >= 1 and dim >= 1");
    return multiplier * sum_squared_norms / (static_cast<double>(n) * static_cast<double>(dim));
}

// Builds one layer's DataInf state from per-sample flattened gradients.
// grad_at(i) must return the i-th sample's gradient vector of length dim.
template <typename GradAt>
LayerState build_layer_state(std::string name, std::size_t n, std::size_t dim,
                             const std::vector<double>& v, double multiplier, GradAt&& grad_at) {
    if (v.size() != dim) throw integrity_error("validation gradient length mismatch for " + name);
    LayerState state;
    state.name = std::move(name);
    state.dim = dim;
    state.v = v;

    std::vector<double> squared(n, 0.0);
    double total_squared = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double>& g = grad_at(i);
        if (g.size() != dim)
            throw integrity_error("training gradient length mismatch for " + state.name);
        squared[i] = detail::dot(g, g);
        total_squared += squared[i];
    }
    state.lambda = layer_lambda(total_squared, dim, n, multiplier);
    if (state.lambda <= 0.0) throw degenerate_layer_error(state.name);

    state.r.assign(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double>& g = grad_at(i);
        const double c = detail::dot(state.v, g) / (state.lambda + squared[i]);
        for (std::size_t j = 0; j < dim; ++j) state.r[j] += state.v[j] - c * g[j];
    }
    const double scale = 1.0 / (static_cast<double>(n) * state.lambda);
    for (auto& x : state.r) x *= scale;
    return state;
}

inline LayerState build_layer_state(std::string name,
                                    std::span<const std::vector<double>> gradients,
                                    const std::vector<double>& v, double multiplier = 0.1) {
    if (gradients.empty()) throw config_error("build_layer_state needs at least one gradient");
    return build_layer_state(std::move(name), gradients.size(), v.size(), v, multiplier,
                             [&](std::size_t i) -> const std::vector<double>& {
                                 return gradients[i];
                             });
}

inline LayerContext datainf_context_from_bundles(std::span<const GradientBundle> bundles,
                                                 const GradientBundle& v,
                                                 double multiplier = 0.1) {
    if (bundles.empty()) throw config_error("datainf_context needs a nonempty corpus");
    LayerContext ctx;
    ctx.corpus_size = bundles.size();
    ctx.embed = build_layer_state("embed", bundles.size(), v.embed.size(), v.embed, multiplier,
                                  [&](std::size_t i) -> const std::vector<double>& {
                                      return bundles[i].embed;
                                  });
    ctx.output = build_layer_state("output", bundles.size(), v.output.size(), v.output,
                                   multiplier,
                                   [&](std::size_t i) -> const std::vector<double>& {
                                       return bundles[i].output;
                                   });
    return ctx;
}

inline LayerContext datainf_context(const ModelParams& params, const TaskProbe& probe,
                                    const Corpus& corpus, double multiplier = 0.1) {
    if (corpus.samples.empty()) throw config_error("datainf_context needs a nonempty corpus");
    const auto v = validation_gradient(params, probe);
    std::vector<GradientBundle> bundles;
    bundles.reserve(corpus.samples.size());
    for (const auto& sample : corpus.samples) {
        bundles.push_back(per_sample_layer_gradients(params, sample));
    }
    return datainf_context_from_bundles(bundles, v, multiplier);
}

// Exported influence of a query sample: + sum_l r_l . g_l.
inline double influence_score(const LayerContext& ctx, const GradientBundle& gradients) {
    if (gradients.embed.size() != ctx.embed.dim || gradients.output.size() != ctx.output.dim)
        throw integrity_error("query gradient dimensions do not match the layer context");
    return detail::dot(ctx.embed.r, gradients.embed) +
           detail::dot(ctx.output.r, gradients.output);
}

// Scores every corpus sample against one checkpoint's context.
inline std::vector<InfluenceRecord> score_corpus(const ModelParams& params,
                                                 const TaskProbe& probe, const Corpus& corpus,
                                                 const std::string& checkpoint_id,
                                                 double multiplier = 0.1) {
    const auto ctx = datainf_context(params, probe, corpus, multiplier);
    std::vector<InfluenceRecord> records;
    records.reserve(corpus.samples.size());
    for (const auto& sample : corpus.samples) {
        const auto g = per_sample_layer_gradients(params, sample);
        records.push_back({sample.id, checkpoint_id, influence_score(ctx, g)});
    }
    return records;
}

// Joint influence of one sample: sum_j alpha_j * score_j. The alphas and the
// records must cover exactly the same checkpoint set.
inline JointInfluence joint_influence(std::span<const InfluenceRecord> records,
                                      const std::map<std::string, double>& alphas) {
    if (records.empty()) throw integrity_error("joint_influence got no records");
    JointInfluence joint;
    joint.sample_id = records.front().sample_id;

    std::map<std::string, double> seen;
    for (const auto& record : records) {
        if (record.sample_id != joint.sample_id)
            throw integrity_error("joint_influence records mix samples " + joint.sample_id +
                                  " and " + record.sample_id);
        if (!seen.emplace(record.checkpoint_id, record.score).second)
            throw integrity_error("duplicate influence record for checkpoint " +
                                  record.checkpoint_id);
        if (alphas.find(record.checkpoint_id) == alphas.end())
            throw integrity_error("no blending factor for checkpoint " + record.checkpoint_id);
    }
    for (const auto& [checkpoint_id, alpha] : alphas) {
        const auto it = seen.find(checkpoint_id);
        if (it == seen.end())
            throw integrity_error("missing influence score for checkpoint " + checkpoint_id);
        joint.score += alpha * it->second;
    }
    return joint;
}

// Merges the probes of the tasks assigned to one checkpoint into a single
// validation set; task ids are joined with '+'.
inline TaskProbe merge_probes(std::span<const TaskProbe> probes) {
    if (probes.empty()) throw config_error("merge_probes got no probes");
    TaskProbe merged;
    for (const auto& probe : probes) {
        if (!merged.task_id.empty()) merged.task_id += "+";
        merged.task_id += probe.task_id;
        merged.probe_samples.insert(merged.probe_samples.end(), probe.probe_samples.begin(),
                                    probe.probe_samples.end());
    }
    return merged;
}

// ---------------------------------------------------------------------------
// Score files: one line per record, 12 significant digits.
// ---------------------------------------------------------------------------

inline void save_influence_scores(std::span<const InfluenceRecord> records,
                                  const std::string& path) {
    std::string out;
    for (const auto& record : records) {
        out += record.sample_id + " " + record.checkpoint_id + " " +
               util::format_score(record.score) + "\n";
    }
    util::write_file(path, out);
}

inline std::vector<InfluenceRecord> load_influence_scores(const std::string& path) {
    const auto text = util::read_file(path);
    std::vector<InfluenceRecord> records;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (util::trim(line).empty()) continue;
        const auto fields = util::split_ws(line);
        if (fields.size() != 3)
            throw parse_error(path, line_no, "expected: sample_id checkpoint_id score");
        InfluenceRecord record;
        record.sample_id = fields[0];
        record.checkpoint_id = fields[1];
        try {
            record.score = std::stod(fields[2]);
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "bad score value '" + fields[2] + "'");
        }
        if (!std::isfinite(record.score))
            throw integrity_error("non-finite influence score at " + path + ":" +
                                  std::to_string(line_no));
        records.push_back(std::move(record));
    }
    return records;
}

inline void save_joint_scores(std::span<const JointInfluence> joints, const std::string& path) {
    std::string out;
    for (const auto& joint : joints) {
        out += joint.sample_id + " " + util::format_score(joint.score) + "\n";
    }
    util::write_file(path, out);
}

inline std::vector<JointInfluence> load_joint_scores(const std::string& path) {
    const auto text = util::read_file(path);
    std::vector<JointInfluence> joints;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (util::trim(line).empty()) continue;
        const auto fields = util::split_ws(line);
        if (fields.size() != 2)
            throw parse_error(path, line_no, "expected: sample_id score");
        JointInfluence joint;
        joint.sample_id = fields[0];
        try {
            joint.score = std::stod(fields[1]);
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "bad score value '" + fields[1] + "'");
        }
        if (!std::isfinite(joint.score))
            throw integrity_error("non-finite joint score at " + path + ":" +
                                  std::to_string(line_no));
        joints.push_back(std::move(joint));
    }
    return joints;
}

}  // namespace automixer
