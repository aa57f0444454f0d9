#pragma once

// Small order-statistics toolbox shared by the mixing and reporting paths.
// Percentiles use the nearest-rank method throughout: the p-th percentile of
// N ascending values is the value at rank ceil(p/100 * N), and rank r covers
// the percentile interval (100*(r-1)/N, 100*r/N].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace automixer::stats {

// Nearest-rank percentile of unsorted values. p in [0, 100]; p = 0 maps to
// the minimum so a ">= threshold" filter keeps everything.
inline double nearest_rank_percentile(std::span<const double> values, double p) {
    if (values.empty()) throw std::invalid_argument("percentile of empty set");
    if (p < 0.0 || p > 100.0) throw std::invalid_argument("percentile out of [0,100]");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const auto n = sorted.size();
    std::size_t rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
    if (rank < 1) rank = 1;
    if (rank > n) rank = n;
    return sorted[rank - 1];
}

// Index of the percentile bucket holding ascending rank r (1-based) of n,
// given half-open percentile edges [edges[b], edges[b+1]). Returns
// edges.size()-1 buckets; ranks outside every range get SIZE_MAX.
inline std::size_t bucket_of_rank(std::size_t rank, std::size_t n, std::span<const double> edges) {
    const double pct = 100.0 * static_cast<double>(rank) / static_cast<double>(n);
    for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
        const bool above_lo = (edges[b] == 0.0) ? pct >= 0.0 : pct > edges[b];
        if (above_lo && pct <= edges[b + 1]) return b;
    }
    return static_cast<std::size_t>(-1);
}

// Average-tie fractional ranks, 1-based.
inline std::vector<double> fractional_ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("pearson: size mismatch");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0) throw std::invalid_argument("pearson: zero variance");
    return cov / std::sqrt(va * vb);
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
    const auto ra = fractional_ranks(a);
    const auto rb = fractional_ranks(b);
    return pearson(ra, rb);
}

}  // namespace automixer::stats
