#pragma once

// Corpus data model and synthetic multi-task generation.
//
// Each synthetic task is a deterministic next-token rule (a seeded bijection
// over a contiguous token band) plus a noise rate. Task membership is never
// written into a Sample: source tags are assigned round-robin over a
// configured list of synthetic crawl-snapshot names, deliberately cross-
// cutting tasks, so the mixing side has to rediscover alignment from model
// signals alone. Ground truth is kept in a separate SampleOrigin sidecar for
// evaluation and reporting only.
//
// Corpus file format (one record per line, space separated):
//   vocab_size=V                 <- header
//   <id> <source_id> <t0> <t1> ...
// Probe files use the same layout plus a task_id field:
//   <id> <source_id> <task_id> <t0> <t1> ...

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "automixer/errors.hpp"
#include "automixer/rng.hpp"
#include "automixer/util.hpp"

namespace automixer {

struct Sample {
    std::string id;
    std::string source_id;
    std::vector<std::int32_t> tokens;

    std::int64_t token_count() const { return static_cast<std::int64_t>(tokens.size()); }

    friend bool operator==(const Sample&, const Sample&) = default;
};

struct Corpus {
    std::vector<Sample> samples;
    int vocab_size = 0;

    std::int64_t total_tokens() const {
        std::int64_t t = 0;
        for (const auto& s : samples) t += s.token_count();
        return t;
    }
    std::size_t size() const { return samples.size(); }

    friend bool operator==(const Corpus&, const Corpus&) = default;
};

struct TaskProbe {
    std::string task_id;
    std::vector<Sample> probe_samples;

    std::size_t q() const { return probe_samples.size(); }
};

// Deterministic next-token rule over a half-open token band [band_lo, band_hi).
struct SyntheticTaskSpec {
    std::string task_id;
    std::int32_t band_lo = 0;
    std::int32_t band_hi = 0;
    std::vector<std::int32_t> next_token;  // absolute token ids, size band_hi - band_lo
    double noise_rate = 0.0;               // in [0, 1)

    std::int32_t band_size() const { return band_hi - band_lo; }
    std::int32_t rule(std::int32_t current) const {
        const std::int32_t n = band_size();
        std::int32_t off = (current - band_lo) % n;
        if (off < 0) off += n;  // out-of-band inputs (noise hits) wrap into the band
        return next_token[static_cast<std::size_t>(off)];
    }
};

// Rule = seeded random bijection of the band onto itself.
inline SyntheticTaskSpec make_task_spec(const std::string& task_id, std::int32_t band_lo,
                                        std::int32_t band_hi, double noise_rate,
                                        std::uint64_t seed) {
    if (band_hi - band_lo < 2) throw config_error("task band needs at least 2 tokens");
    if (noise_rate < 0.0 || noise_rate >= 1.0) throw config_error("noise_rate must be in [0,1)");
    SyntheticTaskSpec spec{task_id, band_lo, band_hi, {}, noise_rate};
    spec.next_token.resize(static_cast<std::size_t>(band_hi - band_lo));
    std::iota(spec.next_token.begin(), spec.next_token.end(), band_lo);
    rng::Stream stream(seed, "task-rule:" + task_id);
    stream.shuffle(spec.next_token);
    return spec;
}

// Where a sample came from. task_id is empty for pure-noise distractors;
// rule_fraction is the share of transitions that followed the generating rule.
struct SampleOrigin {
    std::string sample_id;
    std::string task_id;
    double rule_fraction = 0.0;
};

struct GeneratedCorpus {
    Corpus corpus;
    std::vector<SampleOrigin> origins;  // parallel to corpus.samples
};

struct GenOptions {
    std::vector<std::string> source_tags = {"crawl-00", "crawl-01", "crawl-02", "crawl-03"};
    double max_band_overlap = 0.5;  // allowed |band_i & band_j| / min(|band_i|, |band_j|)
    double length_jitter = 0.0;     // lengths drawn uniformly in [seq_len*(1-jitter), seq_len]
};

namespace detail {

inline Sample generate_task_sample(const SyntheticTaskSpec& spec, int vocab_size, int length,
                                   rng::Stream& stream, double* rule_fraction) {
    Sample s;
    s.tokens.reserve(static_cast<std::size_t>(length));
    std::int32_t cur = spec.band_lo + static_cast<std::int32_t>(stream.below(
                                          static_cast<std::uint64_t>(spec.band_size())));
    s.tokens.push_back(cur);
    int followed = 0;
    for (int t = 1; t < length; ++t) {
        const std::int32_t ruled = spec.rule(cur);
        std::int32_t emitted = ruled;
        if (spec.noise_rate > 0.0 && stream.unit() < spec.noise_rate) {
            emitted = static_cast<std::int32_t>(stream.below(static_cast<std::uint64_t>(vocab_size)));
        }
        if (emitted == ruled) ++followed;
        s.tokens.push_back(emitted);
        cur = emitted;
    }
    if (rule_fraction) *rule_fraction = static_cast<double>(followed) / static_cast<double>(length - 1);
    return s;
}

inline int jittered_length(int seq_len, double jitter, rng::Stream& stream) {
    if (jitter <= 0.0) return seq_len;
    const int lo = std::max(2, static_cast<int>(std::lround(seq_len * (1.0 - jitter))));
    return lo + static_cast<int>(stream.below(static_cast<std::uint64_t>(seq_len - lo + 1)));
}

inline void check_band_overlaps(std::span<const SyntheticTaskSpec> specs, double max_overlap) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
        for (std::size_t j = i + 1; j < specs.size(); ++j) {
            const auto& a = specs[i];
            const auto& b = specs[j];
            const std::int32_t lo = std::max(a.band_lo, b.band_lo);
            const std::int32_t hi = std::min(a.band_hi, b.band_hi);
            const std::int32_t inter = std::max(0, hi - lo);
            const double frac =
                static_cast<double>(inter) / static_cast<double>(std::min(a.band_size(), b.band_size()));
            if (frac > max_overlap + 1e-12) {
                throw config_error("vocab bands of tasks '" + a.task_id + "' and '" + b.task_id +
                                   "' overlap by " + util::format_score(frac) +
                                   ", exceeding the configured limit " +
                                   util::format_score(max_overlap));
            }
        }
    }
}

}  // namespace detail

// Pure function of (specs, counts, seed). Task samples follow each task's
// rule with its noise rate; an extra distractor_fraction of pure-noise
// samples is appended so the final corpus is distractor_fraction noise.
inline GeneratedCorpus generate_corpus_with_origins(std::span<const SyntheticTaskSpec> specs,
                                                    int per_task_docs, double distractor_fraction,
                                                    int seq_len, std::uint64_t seed,
                                                    const GenOptions& options = {}) {
    if (seq_len < 2) throw config_error("seq_len must be >= 2");
    if (per_task_docs < 1) throw config_error("per_task_docs must be >= 1");
    if (distractor_fraction < 0.0 || distractor_fraction >= 1.0)
        throw config_error("distractor_fraction must be in [0,1)");
    if (options.source_tags.empty()) throw config_error("need at least one source tag");
    detail::check_band_overlaps(specs, options.max_band_overlap);

    int vocab_size = 0;
    for (const auto& spec : specs) vocab_size = std::max(vocab_size, spec.band_hi);
    if (vocab_size < 2) throw config_error("task specs imply an empty vocabulary");

    GeneratedCorpus out;
    out.corpus.vocab_size = vocab_size;

    const std::int64_t task_total = static_cast<std::int64_t>(specs.size()) * per_task_docs;
    const std::int64_t distractors = static_cast<std::int64_t>(
        std::llround(static_cast<double>(task_total) * distractor_fraction / (1.0 - distractor_fraction)));

    rng::Stream stream(seed, "corpus-gen");
    std::int64_t doc_index = 0;
    auto next_id = [&doc_index] {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "doc-%06lld", static_cast<long long>(doc_index++));
        return std::string(buf);
    };

    for (const auto& spec : specs) {
        for (int d = 0; d < per_task_docs; ++d) {
            const int length = detail::jittered_length(seq_len, options.length_jitter, stream);
            double rule_fraction = 0.0;
            Sample s = detail::generate_task_sample(spec, vocab_size, length, stream, &rule_fraction);
            s.id = next_id();
            out.origins.push_back({s.id, spec.task_id, rule_fraction});
            out.corpus.samples.push_back(std::move(s));
        }
    }
    for (std::int64_t d = 0; d < distractors; ++d) {
        const int length = detail::jittered_length(seq_len, options.length_jitter, stream);
        Sample s;
        s.id = next_id();
        s.tokens.reserve(static_cast<std::size_t>(length));
        for (int t = 0; t < length; ++t) {
            s.tokens.push_back(
                static_cast<std::int32_t>(stream.below(static_cast<std::uint64_t>(vocab_size))));
        }
        out.origins.push_back({s.id, "", 0.0});
        out.corpus.samples.push_back(std::move(s));
    }

    // Round-robin over the whole generation stream, ignoring task identity.
    for (std::size_t i = 0; i < out.corpus.samples.size(); ++i) {
        out.corpus.samples[i].source_id = options.source_tags[i % options.source_tags.size()];
    }
    return out;
}

inline Corpus generate_corpus(std::span<const SyntheticTaskSpec> specs, int per_task_docs,
                              double distractor_fraction, int seq_len, std::uint64_t seed,
                              const GenOptions& options = {}) {
    return generate_corpus_with_origins(specs, per_task_docs, distractor_fraction, seq_len, seed,
                                        options)
        .corpus;
}

// Held-out probe set; ids live in a "val-" namespace disjoint from corpus ids.
inline TaskProbe generate_probe(const SyntheticTaskSpec& spec, int q, int seq_len,
                                std::uint64_t seed) {
    if (q < 1) throw config_error("probe size q must be >= 1");
    if (seq_len < 2) throw config_error("seq_len must be >= 2");
    TaskProbe probe;
    probe.task_id = spec.task_id;
    rng::Stream stream(seed, "probe-gen:" + spec.task_id);
    const int vocab_size = spec.band_hi;
    for (int i = 0; i < q; ++i) {
        Sample s = detail::generate_task_sample(spec, vocab_size, seq_len, stream, nullptr);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "val-%s-%04d", spec.task_id.c_str(), i);
        s.id = buf;
        s.source_id = "heldout";
        probe.probe_samples.push_back(std::move(s));
    }
    return probe;
}

// ---------------------------------------------------------------------------
// Line-format I/O
// ---------------------------------------------------------------------------

namespace detail {

inline void append_sample_line(std::string& out, const Sample& s, const std::string* task_id) {
    out += s.id;
    out += ' ';
    out += s.source_id;
    if (task_id) {
        out += ' ';
        out += *task_id;
    }
    for (const auto t : s.tokens) {
        out += ' ';
        out += std::to_string(t);
    }
    out += '\n';
}

inline int parse_vocab_header(const std::string& path, const std::string& line, std::size_t line_no) {
    const auto trimmed = util::trim(line);
    if (trimmed.rfind("vocab_size=", 0) != 0)
        throw parse_error(path, line_no, "expected 'vocab_size=V' header");
    try {
        const int v = std::stoi(std::string(trimmed.substr(11)));
        if (v < 1) throw parse_error(path, line_no, "vocab_size must be >= 1");
        return v;
    } catch (const parse_error&) {
        throw;
    } catch (const std::exception&) {
        throw parse_error(path, line_no, "malformed vocab_size header");
    }
}

inline std::vector<std::int32_t> parse_tokens(const std::string& path, std::size_t line_no,
                                              std::span<const std::string> fields, int vocab_size) {
    if (fields.size() < 2) throw parse_error(path, line_no, "sample needs at least 2 tokens");
    std::vector<std::int32_t> tokens;
    tokens.reserve(fields.size());
    for (const auto& f : fields) {
        std::int32_t t = 0;
        try {
            std::size_t pos = 0;
            t = std::stoi(f, &pos);
            if (pos != f.size()) throw std::invalid_argument(f);
        } catch (const std::exception&) {
            throw parse_error(path, line_no, "malformed token id '" + f + "'");
        }
        if (t < 0 || t >= vocab_size) {
            throw integrity_error(path + ":" + std::to_string(line_no) + ": token id " +
                                  std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(vocab_size));
        }
        tokens.push_back(t);
    }
    return tokens;
}

}  // namespace detail

inline void save_corpus(const Corpus& corpus, const std::string& path) {
    std::string out = "vocab_size=" + std::to_string(corpus.vocab_size) + "\n";
    for (const auto& s : corpus.samples) detail::append_sample_line(out, s, nullptr);
    util::write_file(path, out);
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path);
    Corpus corpus;
    std::string line;
    std::size_t line_no = 0;
    std::unordered_set<std::string> seen;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (util::trim(line).empty()) continue;
        if (!have_header) {
            corpus.vocab_size = detail::parse_vocab_header(path, line, line_no);
            have_header = true;
            continue;
        }
        const auto fields = util::split_ws(line);
        if (fields.size() < 4) throw parse_error(path, line_no, "expected 'id source tokens...'");
        Sample s;
        s.id = fields[0];
        s.source_id = fields[1];
        s.tokens = detail::parse_tokens(path, line_no,
                                        std::span(fields).subspan(2), corpus.vocab_size);
        if (!seen.insert(s.id).second)
            throw integrity_error(path + ": duplicate sample id '" + s.id + "'");
        corpus.samples.push_back(std::move(s));
    }
    if (!have_header && line_no == 0) corpus.vocab_size = 1;  // empty file -> empty corpus
    return corpus;
}

inline void save_probes(std::span<const TaskProbe> probes, int vocab_size, const std::string& path) {
    std::string out = "vocab_size=" + std::to_string(vocab_size) + "\n";
    for (const auto& probe : probes) {
        for (const auto& s : probe.probe_samples) detail::append_sample_line(out, s, &probe.task_id);
    }
    util::write_file(path, out);
}

inline std::vector<TaskProbe> load_probes(const std::string& path, int* vocab_size_out = nullptr) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path);
    std::vector<TaskProbe> probes;
    std::map<std::string, std::size_t> index;
    std::unordered_set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    int vocab_size = 1;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (util::trim(line).empty()) continue;
        if (!have_header) {
            vocab_size = detail::parse_vocab_header(path, line, line_no);
            have_header = true;
            continue;
        }
        const auto fields = util::split_ws(line);
        if (fields.size() < 5)
            throw parse_error(path, line_no, "expected 'id source task tokens...'");
        Sample s;
        s.id = fields[0];
        s.source_id = fields[1];
        const std::string task_id = fields[2];
        s.tokens = detail::parse_tokens(path, line_no, std::span(fields).subspan(3), vocab_size);
        if (!seen.insert(s.id).second)
            throw integrity_error(path + ": duplicate probe id '" + s.id + "'");
        auto it = index.find(task_id);
        if (it == index.end()) {
            index.emplace(task_id, probes.size());
            probes.push_back({task_id, {}});
            it = index.find(task_id);
        }
        probes[it->second].probe_samples.push_back(std::move(s));
    }
    if (vocab_size_out) *vocab_size_out = vocab_size;
    return probes;
}

inline void save_origins(std::span<const SampleOrigin> origins, const std::string& path) {
    std::string out = "# sample_id\ttask_id\trule_fraction\n";
    for (const auto& o : origins) {
        out += o.sample_id;
        out += '\t';
        out += o.task_id.empty() ? "-" : o.task_id;
        out += '\t';
        out += util::format_score(o.rule_fraction);
        out += '\n';
    }
    util::write_file(path, out);
}

inline std::vector<SampleOrigin> load_origins(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path);
    std::vector<SampleOrigin> origins;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto t = util::trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto fields = util::split_ws(t);
        if (fields.size() != 3) throw parse_error(path, line_no, "expected 'id task rule_fraction'");
        SampleOrigin o;
        o.sample_id = fields[0];
        o.task_id = fields[1] == "-" ? "" : fields[1];
        o.rule_fraction = std::stod(fields[2]);
        origins.push_back(std::move(o));
    }
    return origins;
}

}  // namespace automixer
