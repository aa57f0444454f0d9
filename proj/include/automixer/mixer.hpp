#pragma once

// Corpus regrouping and mixture construction. Membership of a group is the
// top retention fraction of the corpus under that checkpoint's own scores;
// inside a group, members are ordered by joint score. Group weights come
// from influence density over min-max scaled joint scores (the raw-score
// density is available behind a flag), and the manifest draw interleaves
// groups by largest token deficit under a fixed budget.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "automixer/corpus.hpp"
#include "automixer/errors.hpp"
#include "automixer/rng.hpp"
#include "automixer/stats.hpp"
#include "automixer/util.hpp"

namespace automixer {

struct GroupMember {
    std::string sample_id;
    double joint_score = 0.0;
    std::int64_t token_count = 0;

    friend bool operator==(const GroupMember&, const GroupMember&) = default;
};

struct DataGroup {
    std::string group_id;
    std::vector<GroupMember> members;

    std::int64_t total_tokens() const {
        std::int64_t total = 0;
        for (const auto& m : members) total += m.token_count;
        return total;
    }

    friend bool operator==(const DataGroup&, const DataGroup&) = default;
};

struct MixtureSpec {
    std::map<std::string, double> weights;           // group_id -> w_g
    std::int64_t token_budget = 0;                   // T
    std::map<std::string, std::int64_t> group_caps;  // optional max tokens per group
    bool uniform_fallback = false;
};

struct ManifestEntry {
    std::string sample_id;
    std::string group_id;
    std::int64_t token_count = 0;
    std::int64_t cumulative_tokens = 0;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct MixtureManifest {
    std::vector<ManifestEntry> entries;
    std::map<std::string, std::int64_t> group_tokens;
    std::int64_t total_tokens = 0;

    friend bool operator==(const MixtureManifest&, const MixtureManifest&) = default;
};

// Number of members a retention fraction keeps out of n: ceil(r * n), with a
// guard against float noise just above an integer boundary.
inline std::size_t retention_count(double retention, std::size_t n) {
    if (!(retention > 0.0) || retention > 1.0)
        throw config_error("retention must lie in (0, 1]");
    const double raw = retention * static_cast<double>(n);
    auto count = static_cast<std::size_t>(std::ceil(raw - 1e-12));
    if (count < 1) count = 1;
    if (count > n) count = n;
    return count;
}

// One group per checkpoint: membership by the checkpoint's own scores,
// member order by joint score. Ties keep corpus order (stable ranking).
inline std::vector<DataGroup> regroup(
    const Corpus& corpus,
    const std::map<std::string, std::map<std::string, double>>& per_checkpoint_scores,
    const std::map<std::string, double>& joint_scores, double retention = 0.5) {
    if (corpus.samples.empty()) throw config_error("cannot regroup an empty corpus");
    if (per_checkpoint_scores.empty()) throw config_error("regroup needs at least one checkpoint");
    const std::size_t keep = retention_count(retention, corpus.samples.size());

    for (const auto& sample : corpus.samples) {
        if (joint_scores.find(sample.id) == joint_scores.end())
            throw integrity_error("no joint score for sample " + sample.id);
    }

    std::vector<DataGroup> groups;
    for (const auto& [checkpoint_id, own_scores] : per_checkpoint_scores) {
        std::vector<std::size_t> order(corpus.samples.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::vector<double> own(corpus.samples.size());
        for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
            const auto it = own_scores.find(corpus.samples[i].id);
            if (it == own_scores.end())
                throw integrity_error("checkpoint " + checkpoint_id + " has no score for sample " +
                                      corpus.samples[i].id);
            own[i] = it->second;
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return own[a] > own[b]; });

        DataGroup group;
        group.group_id = checkpoint_id;
        for (std::size_t r = 0; r < keep; ++r) {
            const auto& sample = corpus.samples[order[r]];
            group.members.push_back(
                {sample.id, joint_scores.at(sample.id), sample.token_count()});
        }
        std::stable_sort(group.members.begin(), group.members.end(),
                         [](const GroupMember& a, const GroupMember& b) {
                             return a.joint_score > b.joint_score;
                         });
        groups.push_back(std::move(group));
    }
    return groups;
}

// rho_g: token-weighted mean of the members' joint scores.
inline double influence_density(const DataGroup& group) {
    if (group.members.empty()) throw config_error("influence_density of an empty group");
    const auto total = group.total_tokens();
    if (total <= 0) throw integrity_error("group " + group.group_id + " has no tokens");
    double weighted = 0.0;
    for (const auto& m : group.members) {
        weighted += m.joint_score * static_cast<double>(m.token_count);
    }
    return weighted / static_cast<double>(total);
}

// Min-max scaling to [0,1]. All-equal inputs cannot be scaled; callers fall
// back to uniform weights on that signal.
inline std::map<std::string, double> scale_influences(
    const std::map<std::string, double>& joint_scores) {
    if (joint_scores.empty()) throw config_error("scale_influences got no scores");
    double lo = joint_scores.begin()->second, hi = lo;
    for (const auto& [id, score] : joint_scores) {
        lo = std::min(lo, score);
        hi = std::max(hi, score);
    }
    if (hi == lo) throw all_equal_error("cannot min-max scale: all influence scores are equal");
    std::map<std::string, double> scaled;
    for (const auto& [id, score] : joint_scores) {
        scaled[id] = (score - lo) / (hi - lo);
    }
    return scaled;
}

// Rewrites member scores to min-max scaled values computed over the union
// of all group members. The scaling is strictly monotone, so the per-group
// joint-score ordering is unchanged.
inline std::vector<DataGroup> scale_group_influences(std::span<const DataGroup> groups) {
    std::map<std::string, double> union_scores;
    for (const auto& group : groups) {
        for (const auto& m : group.members) union_scores[m.sample_id] = m.joint_score;
    }
    const auto scaled = scale_influences(union_scores);
    std::vector<DataGroup> out(groups.begin(), groups.end());
    for (auto& group : out) {
        for (auto& m : group.members) m.joint_score = scaled.at(m.sample_id);
    }
    return out;
}

// Unnormalized numerator of rho_g * T_g: sum of score * token_count.
inline double influence_token_product(const DataGroup& group) {
    double total = 0.0;
    for (const auto& m : group.members) {
        total += m.joint_score * static_cast<double>(m.token_count);
    }
    return total;
}

// w_g = rho_g / sum rho. Degenerate densities (all zero, or any negative
// under the raw-score path) fall back to uniform weights with a warning.
inline MixtureSpec sampling_weights(std::span<const DataGroup> groups) {
    if (groups.empty()) throw config_error("sampling_weights got no groups");
    MixtureSpec spec;
    std::vector<double> densities;
    double total = 0.0;
    bool degenerate = false;
    for (const auto& group : groups) {
        const double rho = influence_density(group);
        if (rho < 0.0) degenerate = true;
        densities.push_back(rho);
        total += rho;
    }
    if (total <= 0.0) degenerate = true;

    if (degenerate) {
        std::cerr << "warning: degenerate influence densities; falling back to uniform weights\n";
        spec.uniform_fallback = true;
        const double w = 1.0 / static_cast<double>(groups.size());
        for (const auto& group : groups) spec.weights[group.group_id] = w;
        return spec;
    }
    for (std::size_t i = 0; i < groups.size(); ++i) {
        spec.weights[groups[i].group_id] = densities[i] / total;
    }
    return spec;
}

// Keeps ids whose score is >= the nearest-rank percentile threshold.
inline std::vector<std::string> percentile_filter(const std::map<std::string, double>& scores,
                                                  double threshold_percentile) {
    if (threshold_percentile < 0.0 || threshold_percentile >= 100.0)
        throw config_error("filter percentile must lie in [0, 100)");
    if (scores.empty()) return {};
    std::vector<double> values;
    values.reserve(scores.size());
    for (const auto& [id, score] : scores) values.push_back(score);
    const double threshold = stats::nearest_rank_percentile(values, threshold_percentile);
    std::vector<std::string> retained;
    for (const auto& [id, score] : scores) {
        if (score >= threshold) retained.push_back(id);
    }
    return retained;
}

namespace detail {

struct DrawState {
    const DataGroup* group = nullptr;
    double weight = 0.0;
    std::vector<std::size_t> order;  // seeded shuffle of member indices
    std::size_t cursor = 0;
    std::int64_t drawn_tokens = 0;
    std::int64_t cap = -1;  // -1 = uncapped
};

}  // namespace detail

// Token-budgeted interleaved draw. Each step picks the active group with
// the largest token deficit w_g * drawn_total - drawn_g (ties to the
// smallest group_id) and takes its next fitting sample from a seeded
// shuffle. Samples that no longer fit the budget or the group cap are
// discarded for good (both limits only shrink). A capped or exhausted
// group deactivates, which renormalizes weights over the remainder.
inline MixtureManifest sample_mixture(std::span<const DataGroup> groups,
                                      const MixtureSpec& spec, std::uint64_t seed) {
    if (spec.token_budget <= 0) throw config_error("token budget must be positive");
    double weight_sum = 0.0;
    for (const auto& [id, w] : spec.weights) {
        if (w < 0.0) throw config_error("negative mixture weight for group " + id);
        weight_sum += w;
    }
    if (std::abs(weight_sum - 1.0) > 1e-9)
        throw config_error("mixture weights must sum to 1");

    std::map<std::string, detail::DrawState> states;
    for (const auto& group : groups) {
        const auto it = spec.weights.find(group.group_id);
        if (it == spec.weights.end())
            throw integrity_error("no weight for group " + group.group_id);
        if (it->second == 0.0 || group.members.empty()) continue;
        detail::DrawState state;
        state.group = &group;
        state.weight = it->second;
        state.order.resize(group.members.size());
        std::iota(state.order.begin(), state.order.end(), std::size_t{0});
        rng::Stream stream(seed, "mixture-draw:" + group.group_id);
        stream.shuffle(state.order);
        const auto cap = spec.group_caps.find(group.group_id);
        if (cap != spec.group_caps.end()) state.cap = cap->second;
        states.emplace(group.group_id, std::move(state));
    }

    MixtureManifest manifest;
    for (const auto& group : groups) manifest.group_tokens[group.group_id] = 0;

    while (!states.empty()) {
        const std::int64_t remaining = spec.token_budget - manifest.total_tokens;
        if (remaining <= 0) break;

        // Most-behind active group; weights renormalize implicitly because
        // deficits are compared against the live weight mass.
        double active_weight = 0.0;
        for (const auto& [id, state] : states) active_weight += state.weight;
        std::string chosen;
        double best_deficit = 0.0;
        for (const auto& [id, state] : states) {
            const double share = state.weight / active_weight;
            const double deficit = share * static_cast<double>(manifest.total_tokens) -
                                   static_cast<double>(state.drawn_tokens);
            if (chosen.empty() || deficit > best_deficit) {
                chosen = id;
                best_deficit = deficit;
            }
        }

        auto& state = states.at(chosen);
        const std::int64_t cap_left =
            state.cap < 0 ? remaining : std::min(remaining, state.cap - state.drawn_tokens);
        bool drew = false;
        while (state.cursor < state.order.size()) {
            const auto& member = state.group->members[state.order[state.cursor]];
            ++state.cursor;
            if (member.token_count > cap_left) continue;  // never fits again; discard
            ManifestEntry entry;
            entry.sample_id = member.sample_id;
            entry.group_id = chosen;
            entry.token_count = member.token_count;
            state.drawn_tokens += member.token_count;
            manifest.total_tokens += member.token_count;
            entry.cumulative_tokens = manifest.total_tokens;
            manifest.entries.push_back(std::move(entry));
            manifest.group_tokens[chosen] = state.drawn_tokens;
            drew = true;
            break;
        }
        if (!drew) states.erase(chosen);  // capped or exhausted
    }

    if (manifest.entries.empty()) {
        std::cerr << "warning: mixture draw produced an empty manifest\n";
    }
    return manifest;
}

// Proportional token allocations by aggregate scaled influence; members kept
// in their joint-score order whenever they still fit the allocation.
inline std::vector<DataGroup> subsample_to_budget(std::span<const DataGroup> groups,
                                                  std::int64_t budget) {
    if (budget <= 0) throw config_error("subsample budget must be positive");
    std::int64_t total = 0;
    for (const auto& group : groups) total += group.total_tokens();
    if (total <= budget) return {groups.begin(), groups.end()};

    double aggregate_sum = 0.0;
    std::vector<double> aggregates;
    for (const auto& group : groups) {
        const double a = influence_token_product(group);
        aggregates.push_back(a);
        aggregate_sum += a;
    }

    std::vector<DataGroup> out;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        const double share = aggregate_sum > 0.0
                                 ? aggregates[i] / aggregate_sum
                                 : 1.0 / static_cast<double>(groups.size());
        auto allocation =
            static_cast<std::int64_t>(std::floor(share * static_cast<double>(budget) + 1e-9));
        DataGroup trimmed;
        trimmed.group_id = groups[i].group_id;
        for (const auto& m : groups[i].members) {
            if (m.token_count > allocation) continue;
            trimmed.members.push_back(m);
            allocation -= m.token_count;
        }
        out.push_back(std::move(trimmed));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Bucket and overlap reports.
// ---------------------------------------------------------------------------

struct BucketRange {
    double lo = 0.0;
    double hi = 100.0;
};

struct BucketRow {
    BucketRange range;
    std::size_t count = 0;
    double mean_score = 0.0;
    double mean_tokens = 0.0;
    std::int64_t sum_tokens = 0;
    bool has_quality = false;
    double mean_quality = 0.0;
};

// Percentile-bucket statistics of the score ordering. Ranks are ascending
// with ties kept in input order; rank r of n lands in the bucket whose
// range satisfies lo < 100*r/n <= hi (lo = 0 inclusive).
inline std::vector<BucketRow> bucket_stats(std::span<const double> scores,
                                           std::span<const std::int64_t> token_counts,
                                           std::span<const double> quality_scores,
                                           std::span<const BucketRange> edges) {
    if (scores.size() != token_counts.size())
        throw config_error("bucket_stats: scores and token counts differ in length");
    const bool has_quality = !quality_scores.empty();
    if (has_quality && quality_scores.size() != scores.size())
        throw config_error("bucket_stats: quality scores differ in length");
    for (const auto& e : edges) {
        if (e.lo < 0.0 || e.hi > 100.0 || e.lo >= e.hi)
            throw config_error("bucket_stats: bad percentile range");
    }
    for (std::size_t a = 0; a < edges.size(); ++a) {
        for (std::size_t b = a + 1; b < edges.size(); ++b) {
            const double lo = std::max(edges[a].lo, edges[b].lo);
            const double hi = std::min(edges[a].hi, edges[b].hi);
            if (lo < hi) throw config_error("bucket_stats: overlapping percentile ranges");
        }
    }

    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    std::vector<BucketRow> rows(edges.size());
    for (std::size_t b = 0; b < edges.size(); ++b) {
        rows[b].range = edges[b];
        rows[b].has_quality = has_quality;
    }
    for (std::size_t r = 1; r <= n; ++r) {
        const double pct = 100.0 * static_cast<double>(r) / static_cast<double>(n);
        for (std::size_t b = 0; b < edges.size(); ++b) {
            const bool above_lo = (edges[b].lo == 0.0) ? true : pct > edges[b].lo;
            if (!above_lo || pct > edges[b].hi) continue;
            const std::size_t i = order[r - 1];
            rows[b].count += 1;
            rows[b].mean_score += scores[i];
            rows[b].mean_tokens += static_cast<double>(token_counts[i]);
            rows[b].sum_tokens += token_counts[i];
            if (has_quality) rows[b].mean_quality += quality_scores[i];
            break;
        }
    }
    for (auto& row : rows) {
        if (row.count == 0) continue;
        const auto c = static_cast<double>(row.count);
        row.mean_score /= c;
        row.mean_tokens /= c;
        if (has_quality) row.mean_quality /= c;
    }
    return rows;
}

inline std::string render_bucket_table(std::span<const BucketRow> rows) {
    std::string out = "range\tcount\tmean_score\tmean_tokens\tsum_tokens";
    const bool has_quality = !rows.empty() && rows.front().has_quality;
    if (has_quality) out += "\tmean_quality";
    out += "\n";
    for (const auto& row : rows) {
        out += "p" + util::format_score(row.range.lo) + "-p" + util::format_score(row.range.hi) +
               "\t" + std::to_string(row.count);
        if (row.count == 0) {
            out += "\t-\t-\t0";
            if (has_quality) out += "\t-";
        } else {
            out += "\t" + util::format_score(row.mean_score) + "\t" +
                   util::format_score(row.mean_tokens) + "\t" + std::to_string(row.sum_tokens);
            if (has_quality) out += "\t" + util::format_score(row.mean_quality);
        }
        out += "\n";
    }
    return out;
}

// For each equal-width percentile bucket of A's ranking (ascending), the
// percentage of its sample ids that land in the same bucket of B's ranking.
inline std::vector<double> overlap_analysis(const std::map<std::string, double>& scores_a,
                                            const std::map<std::string, double>& scores_b,
                                            std::size_t num_buckets) {
    if (num_buckets < 1) throw config_error("overlap_analysis needs at least one bucket");
    if (scores_a.size() != scores_b.size())
        throw integrity_error("overlap_analysis: score maps differ in size");
    for (const auto& [id, score] : scores_a) {
        if (scores_b.find(id) == scores_b.end())
            throw integrity_error("overlap_analysis: sample " + id + " missing from one map");
    }

    const std::size_t n = scores_a.size();
    auto bucket_assignment = [&](const std::map<std::string, double>& scores) {
        std::vector<std::string> ids;
        std::vector<double> values;
        for (const auto& [id, score] : scores) {
            ids.push_back(id);
            values.push_back(score);
        }
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
        std::map<std::string, std::size_t> bucket;
        for (std::size_t r = 1; r <= n; ++r) {
            // Smallest b with 100*r/n <= 100*(b+1)/num_buckets.
            const std::size_t b = (r * num_buckets + n - 1) / n - 1;
            bucket[ids[order[r - 1]]] = b;
        }
        return bucket;
    };

    const auto bucket_a = bucket_assignment(scores_a);
    const auto bucket_b = bucket_assignment(scores_b);

    std::vector<std::size_t> size_a(num_buckets, 0), hits(num_buckets, 0);
    for (const auto& [id, b] : bucket_a) {
        size_a[b] += 1;
        if (bucket_b.at(id) == b) hits[b] += 1;
    }
    std::vector<double> overlap(num_buckets, 0.0);
    for (std::size_t b = 0; b < num_buckets; ++b) {
        overlap[b] = size_a[b] == 0
                         ? 0.0
                         : 100.0 * static_cast<double>(hits[b]) / static_cast<double>(size_a[b]);
    }
    return overlap;
}

inline std::string render_overlap_table(std::span<const double> overlap) {
    const auto k = overlap.size();
    std::string out = "bucket\trange\toverlap_pct\n";
    for (std::size_t b = 0; b < k; ++b) {
        const double lo = 100.0 * static_cast<double>(b) / static_cast<double>(k);
        const double hi = 100.0 * static_cast<double>(b + 1) / static_cast<double>(k);
        out += std::to_string(b + 1) + "\tp" + util::format_score(lo) + "-p" +
               util::format_score(hi) + "\t" + util::format_score(overlap[b]) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spec, group, and manifest files. The manifest is the spec text, a "---"
// separator, then one line per drawn sample with its running cumulative
// token total.
// ---------------------------------------------------------------------------

inline std::string spec_to_text(const MixtureSpec& spec) {
    std::string out = "token_budget=" + std::to_string(spec.token_budget) + "\n";
    if (spec.uniform_fallback) out += "uniform_fallback=1\n";
    for (const auto& [id, w] : spec.weights) {
        out += "weight " + id + " " + util::format_score(w) + "\n";
    }
    for (const auto& [id, cap] : spec.group_caps) {
        out += "cap " + id + " " + std::to_string(cap) + "\n";
    }
    return out;
}

namespace detail {

inline bool parse_spec_line(std::string_view trimmed, MixtureSpec& spec, const std::string& path,
                            std::size_t line_no) {
    if (trimmed.rfind("token_budget=", 0) == 0) {
        try {
            spec.token_budget = std::stoll(std::string(trimmed.substr(13)));
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "bad token_budget value");
        }
        return true;
    }
    if (trimmed == "uniform_fallback=1") {
        spec.uniform_fallback = true;
        return true;
    }
    const auto fields = util::split_ws(trimmed);
    if (fields.size() == 3 && fields[0] == "weight") {
        try {
            spec.weights[fields[1]] = std::stod(fields[2]);
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "bad weight value");
        }
        return true;
    }
    if (fields.size() == 3 && fields[0] == "cap") {
        try {
            spec.group_caps[fields[1]] = std::stoll(fields[2]);
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "bad cap value");
        }
        return true;
    }
    return false;
}

}  // namespace detail

inline void save_mixture_spec(const MixtureSpec& spec, const std::string& path) {
    util::write_file(path, spec_to_text(spec));
}

inline MixtureSpec load_mixture_spec(const std::string& path) {
    const auto text = util::read_file(path);
    MixtureSpec spec;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto trimmed = util::trim(line);
        if (trimmed.empty()) continue;
        if (!detail::parse_spec_line(trimmed, spec, path, line_no))
            throw parse_error(path, line_no, "unrecognized mixture spec line");
    }
    return spec;
}

inline void save_groups(std::span<const DataGroup> groups, const std::string& path) {
    std::string out;
    for (const auto& group : groups) {
        out += "group " + group.group_id + "\n";
        for (const auto& m : group.members) {
            out += "member " + m.sample_id + " " + util::format_score(m.joint_score) + " " +
                   std::to_string(m.token_count) + "\n";
        }
    }
    util::write_file(path, out);
}

inline std::vector<DataGroup> load_groups(const std::string& path) {
    const auto text = util::read_file(path);
    std::vector<DataGroup> groups;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto trimmed = util::trim(line);
        if (trimmed.empty()) continue;
        const auto fields = util::split_ws(trimmed);
        if (fields.size() == 2 && fields[0] == "group") {
            groups.push_back(DataGroup{fields[1], {}});
            continue;
        }
        if (fields.size() == 4 && fields[0] == "member") {
            if (groups.empty())
                throw parse_error(path, line_no, "member line before any group line");
            GroupMember m;
            m.sample_id = fields[1];
            try {
                m.joint_score = std::stod(fields[2]);
                m.token_count = std::stoll(fields[3]);
            } catch (const std::exception&) {
                throw parse_error(path, line_no, "bad member score or token count");
            }
            groups.back().members.push_back(std::move(m));
            continue;
        }
        throw parse_error(path, line_no, "expected a group or member line");
    }
    return groups;
}

inline void save_manifest(const MixtureManifest& manifest, const MixtureSpec& spec,
                          const std::string& path) {
    std::string out = spec_to_text(spec);
    out += "---\n";
    for (const auto& entry : manifest.entries) {
        out += entry.sample_id + " " + entry.group_id + " " +
               std::to_string(entry.cumulative_tokens) + "\n";
    }
    util::write_file(path, out);
}

struct ManifestFile {
    MixtureSpec spec;
    MixtureManifest manifest;
};

inline ManifestFile load_manifest(const std::string& path) {
    const auto text = util::read_file(path);
    ManifestFile out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool in_header = true;
    std::int64_t cumulative = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto trimmed = util::trim(line);
        if (trimmed.empty()) continue;
        if (in_header) {
            if (trimmed == "---") {
                in_header = false;
                continue;
            }
            if (!detail::parse_spec_line(trimmed, out.spec, path, line_no))
                throw parse_error(path, line_no, "unrecognized manifest header line");
            continue;
        }
        const auto fields = util::split_ws(trimmed);
        if (fields.size() != 3)
            throw parse_error(path, line_no, "expected: sample_id group_id cumulative_tokens");
        ManifestEntry entry;
        entry.sample_id = fields[0];
        entry.group_id = fields[1];
        try {
            entry.cumulative_tokens = std::stoll(fields[2]);
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "bad cumulative token value");
        }
        if (entry.cumulative_tokens <= cumulative)
            throw integrity_error("non-increasing cumulative tokens at " + path + ":" +
                                  std::to_string(line_no));
        entry.token_count = entry.cumulative_tokens - cumulative;
        cumulative = entry.cumulative_tokens;
        out.manifest.entries.push_back(std::move(entry));
    }
    if (in_header && !out.manifest.entries.empty())
        throw parse_error(path, 0, "missing manifest separator");
    for (const auto& entry : out.manifest.entries) {
        out.manifest.group_tokens[entry.group_id] += entry.token_count;
    }
    out.manifest.total_tokens = cumulative;
    for (const auto& [id, w] : out.spec.weights) {
        if (out.manifest.group_tokens.find(id) == out.manifest.group_tokens.end())
            out.manifest.group_tokens[id] = 0;
    }
    return out;
}

}  // namespace automixer
