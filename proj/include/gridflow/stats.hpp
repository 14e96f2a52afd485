#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace gridflow {

struct WilcoxonResult {
    double w_plus = 0.0;
    double w_minus = 0.0;
    double statistic = 0.0;  // min(W+, W-)
    double p_value = 1.0;    // two-sided
    std::size_t n = 0;       // pairs left after dropping zero differences
    bool exact = true;
};

/// Paired signed-rank test on a - b. Zero differences are dropped and tied
/// magnitudes receive average ranks. For n <= 25 the p-value comes from the
/// exact null distribution of the (tied) ranks; above that from the normal
/// approximation with tie and continuity correction. All-zero differences
/// give W = 0, p = 1.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b);

// Exact two-sided p for W+ over the given ranks: min(1, 2 P(W <= min(W+, W-))).
double wilcoxon_exact_p(std::span<const double> ranks, double w_plus);

double bonferroni(double p, std::size_t comparisons);

/// Seeded sample of n positions from strata[0..size), allocated to strata in
/// proportion to their size (largest remainder). Returns sorted positions;
/// all of them when n >= size.
std::vector<std::size_t> stratified_sample(std::span<const std::size_t> strata, std::size_t n, std::uint64_t seed);

}  // namespace gridflow
