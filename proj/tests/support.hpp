#pragma once

// Shared fixtures and independent oracles for the test suites. Everything
// here stays off the library's implementation paths on purpose.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "automixer/corpus.hpp"
#include "automixer/model.hpp"
#include "automixer/rng.hpp"

namespace testsupport {

inline automixer::Sample random_sample(const std::string& id, int vocab_size, int length,
                                       automixer::rng::Stream& stream) {
    automixer::Sample s;
    s.id = id;
    s.source_id = "fixture";
    s.tokens.reserve(static_cast<std::size_t>(length));
    for (int i = 0; i < length; ++i) {
        s.tokens.push_back(
            static_cast<std::int32_t>(stream.below(static_cast<std::uint64_t>(vocab_size))));
    }
    return s;
}

inline automixer::Corpus random_corpus(int n, int vocab_size, int length, std::uint64_t seed) {
    automixer::rng::Stream stream(seed, "test-corpus");
    automixer::Corpus corpus;
    corpus.vocab_size = vocab_size;
    for (int i = 0; i < n; ++i) {
        corpus.samples.push_back(random_sample("fx-" + std::to_string(i), vocab_size, length, stream));
    }
    return corpus;
}

// Central finite difference of a scalar function of one parameter entry.
inline double central_difference(std::function<double(double)> f, double x, double step) {
    return (f(x + step) - f(x - step)) / (2.0 * step);
}

// Central-difference gradient of sequence_loss w.r.t. every entry of the
// embedding and output matrices. Independent oracle for the analytic path.
inline automixer::GradientBundle finite_difference_gradients(const automixer::ModelParams& params,
                                                             const automixer::Sample& sample,
                                                             double step = 1e-4) {
    automixer::GradientBundle g;
    automixer::ModelParams work = params;
    auto probe_matrix = [&](std::vector<double>& mat, std::vector<double>& out) {
        out.resize(mat.size());
        for (std::size_t i = 0; i < mat.size(); ++i) {
            const double saved = mat[i];
            mat[i] = saved + step;
            const double up = automixer::sequence_loss(work, sample);
            mat[i] = saved - step;
            const double down = automixer::sequence_loss(work, sample);
            mat[i] = saved;
            out[i] = (up - down) / (2.0 * step);
        }
    };
    probe_matrix(work.embed, g.embed);
    probe_matrix(work.output, g.output);
    return g;
}

// Frozen instance for the approximation-fidelity regression bound: a seeded
// random-init model plus corpus/probe pair. The acceptance gate re-measures
// the DataInf-vs-oracle rank correlation on exactly this instance.
struct FidelityFixture {
    automixer::ModelParams params;
    automixer::Corpus corpus;
    automixer::TaskProbe probe;
};

inline FidelityFixture fidelity_fixture(std::uint64_t seed) {
    constexpr int kVocab = 8;
    constexpr int kDModel = 4;
    constexpr int kCorpusSize = 32;
    constexpr int kProbeSize = 8;
    constexpr int kSeqLen = 12;

    FidelityFixture fx;
    fx.params = automixer::ModelParams::random_init(kVocab, kDModel, seed);
    automixer::rng::Stream corpus_stream(seed, "fidelity-corpus");
    fx.corpus.vocab_size = kVocab;
    for (int i = 0; i < kCorpusSize; ++i) {
        fx.corpus.samples.push_back(
            random_sample("doc-" + std::to_string(i), kVocab, kSeqLen, corpus_stream));
    }
    automixer::rng::Stream probe_stream(seed, "fidelity-probe");
    fx.probe.task_id = "fidelity";
    for (int i = 0; i < kProbeSize; ++i) {
        fx.probe.probe_samples.push_back(
            random_sample("val-" + std::to_string(i), kVocab, kSeqLen, probe_stream));
    }
    return fx;
}

// Closed-form (lambda*I + g g^T)^-1 v via Sherman-Morrison. Independent
// check for the single-sample inverse-HVP and the dense oracle.
inline std::vector<double> sherman_morrison_solve(double lambda, const std::vector<double>& g,
                                                  const std::vector<double>& v) {
    double gv = 0.0, gg = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        gv += g[i] * v[i];
        gg += g[i] * g[i];
    }
    const double coeff = gv / (lambda * (lambda + gg));
    std::vector<double> x(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) x[i] = v[i] / lambda - coeff * g[i];
    return x;
}

inline std::vector<double> random_vector(std::size_t dim, automixer::rng::Stream& stream) {
    std::vector<double> v(dim);
    for (auto& x : v) x = stream.gaussian();
    return v;
}

inline double max_relative_error(const std::vector<double>& got, const std::vector<double>& want,
                                 double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double denom = std::max(std::abs(want[i]), floor);
        worst = std::max(worst, std::abs(got[i] - want[i]) / denom);
    }
    return worst;
}

}  // namespace testsupport
