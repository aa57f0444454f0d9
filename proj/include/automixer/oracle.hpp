#pragma once

// Exact damped inverse-Hessian influence, the verification counterpart of
// the DataInf approximation. Per layer it forms the dense Gauss-Newton
// surrogate G_l = lambda_l * I + (1/n) * sum_i g_li g_li^T, solves
// G_l x_l = v_l by Cholesky, and scores a query as + sum_l x_l . g_kl.
// Sign convention matches influence_score: higher = more beneficial.
//
// Intended for small layers only (dense d_l x d_l solves).

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "automixer/corpus.hpp"
#include "automixer/errors.hpp"
#include "automixer/influence.hpp"
#include "automixer/model.hpp"

namespace automixer {

namespace detail {

// x = (lambda * I + (1/n) sum_i g_i g_i^T)^-1 v for one layer.
template <typename GradAt>
std::vector<double> oracle_solve(const std::string& layer_name, std::size_t n, std::size_t dim,
                                 double lambda, const std::vector<double>& v, GradAt&& grad_at) {
    if (lambda <= 0.0) throw degenerate_layer_error(layer_name);
    if (v.size() != dim)
        throw integrity_error("validation gradient length mismatch for " + layer_name);
    const auto d = static_cast<Eigen::Index>(dim);
    Eigen::MatrixXd G = Eigen::MatrixXd::Identity(d, d) * lambda;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double>& g = grad_at(i);
        if (g.size() != dim)
            throw integrity_error("training gradient length mismatch for " + layer_name);
        const Eigen::Map<const Eigen::VectorXd> gv(g.data(), d);
        G.noalias() += inv_n * gv * gv.transpose();
    }
    const Eigen::Map<const Eigen::VectorXd> vv(v.data(), d);
    const Eigen::VectorXd x = Eigen::LLT<Eigen::MatrixXd>(G).solve(vv);
    return std::vector<double>(x.data(), x.data() + d);
}

}  // namespace detail

// Gradient-level entry point for fixtures: returns x = G^-1 v; the layer
// score of a query g_k is then dot(x, g_k).
inline std::vector<double> oracle_solve(std::span<const std::vector<double>> gradients,
                                        double lambda, const std::vector<double>& v) {
    if (gradients.empty()) throw config_error("oracle_solve needs at least one gradient");
    return detail::oracle_solve("layer", gradients.size(), v.size(), lambda, v,
                                [&](std::size_t i) -> const std::vector<double>& {
                                    return gradients[i];
                                });
}

// Factorizes both layers once; scoring a sample is then two dot products.
class ExactOracle {
public:
    static constexpr std::size_t kMaxDenseDim = 2000;

    ExactOracle(const ModelParams& params, const TaskProbe& probe, const Corpus& corpus,
                double multiplier = 0.1)
        : params_(params) {
        if (corpus.samples.empty()) throw config_error("oracle needs a nonempty corpus");
        if (params.embed_dim() + params.output_dim() > kMaxDenseDim)
            throw config_error("layer dimensions too large for the dense oracle");

        const auto v = validation_gradient(params, probe);
        std::vector<GradientBundle> bundles;
        bundles.reserve(corpus.samples.size());
        double embed_sq = 0.0, output_sq = 0.0;
        for (const auto& sample : corpus.samples) {
            auto g = per_sample_layer_gradients(params, sample);
            embed_sq += detail::dot(g.embed, g.embed);
            output_sq += detail::dot(g.output, g.output);
            bundles.push_back(std::move(g));
        }
        const std::size_t n = bundles.size();
        const double embed_lambda = layer_lambda(embed_sq, params.embed_dim(), n, multiplier);
        const double output_lambda = layer_lambda(output_sq, params.output_dim(), n, multiplier);

        embed_x_ = detail::oracle_solve("embed", n, params.embed_dim(), embed_lambda, v.embed,
                                        [&](std::size_t i) -> const std::vector<double>& {
                                            return bundles[i].embed;
                                        });
        output_x_ = detail::oracle_solve("output", n, params.output_dim(), output_lambda,
                                         v.output,
                                         [&](std::size_t i) -> const std::vector<double>& {
                                             return bundles[i].output;
                                         });
    }

    double score(const GradientBundle& gradients) const {
        if (gradients.embed.size() != embed_x_.size() ||
            gradients.output.size() != output_x_.size())
            throw integrity_error("query gradient dimensions do not match the oracle");
        return detail::dot(embed_x_, gradients.embed) + detail::dot(output_x_, gradients.output);
    }

    double score(const Sample& sample) const {
        return score(per_sample_layer_gradients(params_, sample));
    }

private:
    ModelParams params_;
    std::vector<double> embed_x_;
    std::vector<double> output_x_;
};

inline double exact_influence_oracle(const ModelParams& params, const TaskProbe& probe,
                                     const Corpus& corpus, const Sample& sample,
                                     double multiplier = 0.1) {
    return ExactOracle(params, probe, corpus, multiplier).score(sample);
}

}  // namespace automixer
