#pragma once

// Minimal next-token model with analytic gradients:
//
//   e_t = E[x_t]                    embedding row, V x d      (layer 1)
//   h_t = tanh(H e_t + b)           hidden, d x d + bias
//   z_t = W^T h_t                   logits, W is d x V        (layer L)
//
// z_t predicts x_{t+1}; the loss is the mean token-level cross-entropy over
// the len-1 transitions of a sample. Gradient export is restricted to the
// embedding and output layers; H and b gradients exist only inside the SGD
// update. Flattening is row-major: the embedding bundle has length V*d
// (row = token id), the output bundle length d*V (row = hidden unit).
//
// Checkpoint parameter file: one ASCII dims header line, then E, H, b, W as
// little-endian 64-bit floats in row-major order.

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "automixer/corpus.hpp"
#include "automixer/errors.hpp"
#include "automixer/rng.hpp"

namespace automixer {

struct ModelParams {
    int vocab_size = 0;  // V
    int d_model = 0;     // d
    std::vector<double> embed;        // V x d
    std::vector<double> hidden;       // d x d
    std::vector<double> hidden_bias;  // d
    std::vector<double> output;       // d x V

    std::size_t embed_dim() const { return embed.size(); }    // d_1 = V*d
    std::size_t output_dim() const { return output.size(); }  // d_L = d*V

    static ModelParams random_init(int vocab_size, int d_model, std::uint64_t seed,
                                   double scale = 0.1) {
        if (vocab_size < 1 || d_model < 1) throw config_error("model dims must be >= 1");
        ModelParams p;
        p.vocab_size = vocab_size;
        p.d_model = d_model;
        rng::Stream stream(seed, "model-init");
        auto fill = [&](std::vector<double>& v, std::size_t n) {
            v.resize(n);
            for (auto& x : v) x = scale * stream.gaussian();
        };
        fill(p.embed, static_cast<std::size_t>(vocab_size) * d_model);
        fill(p.hidden, static_cast<std::size_t>(d_model) * d_model);
        fill(p.hidden_bias, static_cast<std::size_t>(d_model));
        fill(p.output, static_cast<std::size_t>(d_model) * vocab_size);
        return p;
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Exported per-sample gradients of the two designated layers, flattened.
struct GradientBundle {
    std::vector<double> embed;   // length V*d
    std::vector<double> output;  // length d*V

    double squared_norm() const {
        double s = 0.0;
        for (double x : embed) s += x * x;
        for (double x : output) s += x * x;
        return s;
    }
};

struct LogitRows {
    int rows = 0;
    int vocab = 0;
    std::vector<double> values;  // rows x vocab, row-major

    std::span<const double> row(int r) const {
        return {values.data() + static_cast<std::size_t>(r) * vocab, static_cast<std::size_t>(vocab)};
    }
};

namespace detail {

inline void check_tokens(const ModelParams& params, std::span<const std::int32_t> tokens) {
    if (tokens.size() < 2) throw config_error("need at least 2 tokens for a transition");
    for (const auto t : tokens) {
        if (t < 0 || t >= params.vocab_size)
            throw integrity_error("token id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(params.vocab_size));
    }
}

// h = tanh(H * E[token] + b)
inline void hidden_activation(const ModelParams& params, std::int32_t token, std::span<double> h) {
    const int d = params.d_model;
    const double* e = params.embed.data() + static_cast<std::size_t>(token) * d;
    for (int i = 0; i < d; ++i) {
        double acc = params.hidden_bias[static_cast<std::size_t>(i)];
        const double* hrow = params.hidden.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) acc += hrow[j] * e[j];
        h[static_cast<std::size_t>(i)] = std::tanh(acc);
    }
}

// z = W^T h
inline void logits_from_hidden(const ModelParams& params, std::span<const double> h,
                               std::span<double> z) {
    const int d = params.d_model;
    const int v = params.vocab_size;
    for (int c = 0; c < v; ++c) z[static_cast<std::size_t>(c)] = 0.0;
    for (int i = 0; i < d; ++i) {
        const double hi = h[static_cast<std::size_t>(i)];
        const double* wrow = params.output.data() + static_cast<std::size_t>(i) * v;
        for (int c = 0; c < v; ++c) z[static_cast<std::size_t>(c)] += wrow[c] * hi;
    }
}

// softmax in place; returns log(sum(exp(z))) + max for the loss identity
// loss = logsumexp(z) - z[target].
inline double softmax_inplace(std::span<double> z) {
    double zmax = z[0];
    for (const double x : z) zmax = std::max(zmax, x);
    double sum = 0.0;
    for (auto& x : z) {
        x = std::exp(x - zmax);
        sum += x;
    }
    for (auto& x : z) x /= sum;
    return std::log(sum) + zmax;
}

// All-layer gradients of the mean transition loss for one sample.
struct FullGradients {
    std::vector<double> embed, hidden, hidden_bias, output;
    double loss = 0.0;

    explicit FullGradients(const ModelParams& p)
        : embed(p.embed.size(), 0.0),
          hidden(p.hidden.size(), 0.0),
          hidden_bias(p.hidden_bias.size(), 0.0),
          output(p.output.size(), 0.0) {}

    void accumulate(const FullGradients& other, double weight) {
        for (std::size_t i = 0; i < embed.size(); ++i) embed[i] += weight * other.embed[i];
        for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] += weight * other.hidden[i];
        for (std::size_t i = 0; i < hidden_bias.size(); ++i)
            hidden_bias[i] += weight * other.hidden_bias[i];
        for (std::size_t i = 0; i < output.size(); ++i) output[i] += weight * other.output[i];
        loss += weight * other.loss;
    }
};

inline FullGradients backprop(const ModelParams& params, std::span<const std::int32_t> tokens) {
    check_tokens(params, tokens);
    const int d = params.d_model;
    const int v = params.vocab_size;
    const int transitions = static_cast<int>(tokens.size()) - 1;
    const double inv_t = 1.0 / transitions;

    FullGradients g(params);
    std::vector<double> h(static_cast<std::size_t>(d));
    std::vector<double> p(static_cast<std::size_t>(v));
    std::vector<double> gamma(static_cast<std::size_t>(d));

    for (int t = 0; t < transitions; ++t) {
        const std::int32_t x = tokens[static_cast<std::size_t>(t)];
        const std::int32_t y = tokens[static_cast<std::size_t>(t) + 1];
        hidden_activation(params, x, h);
        logits_from_hidden(params, h, p);
        const double zy = p[static_cast<std::size_t>(y)];
        const double lse = softmax_inplace(p);  // p now holds probabilities
        g.loss += inv_t * (lse - zy);           // -log p[y]

        // delta = (p - onehot(y)) / transitions
        p[static_cast<std::size_t>(y)] -= 1.0;
        for (auto& x_ : p) x_ *= inv_t;

        const double* e = params.embed.data() + static_cast<std::size_t>(x) * d;
        // gW[i][c] += h_i * delta_c ; gh_i = sum_c W[i][c] delta_c
        for (int i = 0; i < d; ++i) {
            double gh = 0.0;
            const double* wrow = params.output.data() + static_cast<std::size_t>(i) * v;
            double* gwrow = g.output.data() + static_cast<std::size_t>(i) * v;
            const double hi = h[static_cast<std::size_t>(i)];
            for (int c = 0; c < v; ++c) {
                gwrow[c] += hi * p[static_cast<std::size_t>(c)];
                gh += wrow[c] * p[static_cast<std::size_t>(c)];
            }
            gamma[static_cast<std::size_t>(i)] = (1.0 - hi * hi) * gh;
        }
        // gb += gamma ; gH[i][j] += gamma_i e_j ; gE[x] += H^T gamma
        for (int i = 0; i < d; ++i) {
            const double gi = gamma[static_cast<std::size_t>(i)];
            g.hidden_bias[static_cast<std::size_t>(i)] += gi;
            double* ghrow = g.hidden.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) ghrow[j] += gi * e[j];
        }
        double* ge = g.embed.data() + static_cast<std::size_t>(x) * d;
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int i = 0; i < d; ++i)
                acc += params.hidden[static_cast<std::size_t>(i) * d + j] *
                       gamma[static_cast<std::size_t>(i)];
            ge[j] += acc;
        }
    }
    return g;
}

}  // namespace detail

inline LogitRows forward_logits(const ModelParams& params, std::span<const std::int32_t> tokens) {
    detail::check_tokens(params, tokens);
    const int transitions = static_cast<int>(tokens.size()) - 1;
    LogitRows out;
    out.rows = transitions;
    out.vocab = params.vocab_size;
    out.values.resize(static_cast<std::size_t>(transitions) * params.vocab_size);
    std::vector<double> h(static_cast<std::size_t>(params.d_model));
    for (int t = 0; t < transitions; ++t) {
        detail::hidden_activation(params, tokens[static_cast<std::size_t>(t)], h);
        detail::logits_from_hidden(
            params, h,
            {out.values.data() + static_cast<std::size_t>(t) * params.vocab_size,
             static_cast<std::size_t>(params.vocab_size)});
    }
    return out;
}

// Mean token-level cross-entropy over the sample's transitions.
inline double sequence_loss(const ModelParams& params, const Sample& sample) {
    detail::check_tokens(params, sample.tokens);
    const int transitions = static_cast<int>(sample.tokens.size()) - 1;
    std::vector<double> h(static_cast<std::size_t>(params.d_model));
    std::vector<double> z(static_cast<std::size_t>(params.vocab_size));
    double loss = 0.0;
    for (int t = 0; t < transitions; ++t) {
        detail::hidden_activation(params, sample.tokens[static_cast<std::size_t>(t)], h);
        detail::logits_from_hidden(params, h, z);
        const std::int32_t y = sample.tokens[static_cast<std::size_t>(t) + 1];
        const double zy = z[static_cast<std::size_t>(y)];
        loss += detail::softmax_inplace(z) - zy;  // logsumexp(z) - z[y]
    }
    return loss / transitions;
}

inline double perplexity(const ModelParams& params, const Sample& sample) {
    return std::exp(sequence_loss(params, sample));
}

inline GradientBundle per_sample_layer_gradients(const ModelParams& params, const Sample& sample) {
    auto g = detail::backprop(params, sample.tokens);
    GradientBundle bundle;
    bundle.embed = std::move(g.embed);
    bundle.output = std::move(g.output);
    return bundle;
}

// One step of plain SGD on the mean batch loss, over all layers. Pure: the
// input parameters are untouched.
inline ModelParams sgd_step(const ModelParams& params, std::span<const Sample> batch, double lr) {
    if (batch.empty()) throw config_error("sgd_step needs a nonempty batch");
    if (!(lr >= 0.0)) throw config_error("learning rate must be >= 0");
    detail::FullGradients mean(params);
    const double w = 1.0 / static_cast<double>(batch.size());
    for (const auto& sample : batch) {
        const auto g = detail::backprop(params, sample.tokens);
        mean.accumulate(g, w);
    }
    ModelParams next = params;
    auto apply = [lr](std::vector<double>& dst, const std::vector<double>& grad) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= lr * grad[i];
    };
    apply(next.embed, mean.embed);
    apply(next.hidden, mean.hidden);
    apply(next.hidden_bias, mean.hidden_bias);
    apply(next.output, mean.output);
    for (const auto& v : {&next.embed, &next.hidden, &next.hidden_bias, &next.output}) {
        for (const double x : *v) {
            if (!std::isfinite(x)) throw divergence_error("non-finite parameter update", -1);
        }
    }
    return next;
}

// ---------------------------------------------------------------------------
// Parameter file I/O (dims header + little-endian 64-bit floats, row-major)
// ---------------------------------------------------------------------------

namespace detail {

inline void write_f64_le(std::ostream& out, double x) {
    const auto bits = std::bit_cast<std::uint64_t>(x);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    out.write(bytes, 8);
}

inline double read_f64_le(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return std::bit_cast<double>(bits);
}

}  // namespace detail

inline void save_params(const ModelParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path);
    out << "vocab_size=" << params.vocab_size << " d_model=" << params.d_model << "\n";
    for (const auto* mat : {&params.embed, &params.hidden, &params.hidden_bias, &params.output}) {
        for (const double x : *mat) detail::write_f64_le(out, x);
    }
    if (!out) throw io_error("write failed for " + path);
}

inline ModelParams load_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open " + path);
    std::string header;
    std::getline(in, header);
    int v = 0, d = 0;
    if (std::sscanf(header.c_str(), "vocab_size=%d d_model=%d", &v, &d) != 2 || v < 1 || d < 1)
        throw parse_error(path, 1, "malformed parameter file header");
    ModelParams params;
    params.vocab_size = v;
    params.d_model = d;
    params.embed.resize(static_cast<std::size_t>(v) * d);
    params.hidden.resize(static_cast<std::size_t>(d) * d);
    params.hidden_bias.resize(static_cast<std::size_t>(d));
    params.output.resize(static_cast<std::size_t>(d) * v);
    for (auto* mat : {&params.embed, &params.hidden, &params.hidden_bias, &params.output}) {
        for (auto& x : *mat) x = detail::read_f64_le(in);
    }
    if (!in) throw parse_error(path, 2, "parameter file truncated");
    return params;
}

// Optional gradient dump: sample_id, layer index (1 = embedding, 3 = output),
// then the flattened vector at fixed precision.
inline void append_gradient_dump(std::ostream& out, const std::string& sample_id,
                                 const GradientBundle& bundle) {
    auto emit = [&](int layer, const std::vector<double>& v) {
        out << sample_id << ' ' << layer;
        for (const double x : v) out << ' ' << util::format_score(x);
        out << '\n';
    };
    emit(1, bundle.embed);
    emit(3, bundle.output);
}

}  // namespace automixer
