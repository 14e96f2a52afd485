#include "gridflow/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "gridflow/rng.hpp"

namespace gridflow {

namespace {

constexpr std::size_t kExactLimit = 25;

// Average ranks of |d| (1-based).
std::vector<double> average_ranks(std::span<const double> magnitudes) {
    const std::size_t n = magnitudes.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return magnitudes[x] < magnitudes[y]; });
    std::vector<double> ranks(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && magnitudes[order[j + 1]] == magnitudes[order[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double wilcoxon_exact_p(std::span<const double> ranks, double w_plus) {
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    std::vector<std::size_t> doubled;
    std::size_t total = 0;
    for (double r : ranks) {
        doubled.push_back(static_cast<std::size_t>(std::llround(2.0 * r)));
        total += doubled.back();
    }
    std::vector<double> count(total + 1, 0.0);
    count[0] = 1.0;
    std::size_t reach = 0;
    for (std::size_t r : doubled) {
        for (std::size_t s = reach + 1; s-- > 0;) {
            if (count[s] != 0.0) count[s + r] += count[s];
        }
        reach += r;
    }
    const auto w2 = static_cast<std::size_t>(std::llround(2.0 * w_plus));
    const std::size_t tail = std::min(w2, total - w2);
    double below = 0.0;
    for (std::size_t s = 0; s <= tail; ++s) below += count[s];
    const double p = 2.0 * below / std::ldexp(1.0, static_cast<int>(ranks.size()));
    return std::min(1.0, p);
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: paired samples must have equal length");
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d != 0.0) diffs.push_back(d);
    }
    WilcoxonResult result;
    result.n = diffs.size();
    if (diffs.empty()) return result;
    std::vector<double> magnitudes(diffs.size());
    std::transform(diffs.begin(), diffs.end(), magnitudes.begin(), [](double d) { return std::fabs(d); });
    const auto ranks = average_ranks(magnitudes);
    for (std::size_t i = 0; i < diffs.size(); ++i) (diffs[i] > 0.0 ? result.w_plus : result.w_minus) += ranks[i];
    result.statistic = std::min(result.w_plus, result.w_minus);
    const double n = static_cast<double>(result.n);
    if (result.n <= kExactLimit) {
        result.p_value = wilcoxon_exact_p(ranks, result.w_plus);
        return result;
    }
    result.exact = false;
    std::map<double, std::size_t> ties;
    for (double r : ranks) ++ties[r];
    double tie_term = 0.0;
    for (const auto& [rank, t] : ties) {
        const double tt = static_cast<double>(t);
        tie_term += tt * tt * tt - tt;
    }
    const double mean = n * (n + 1.0) / 4.0;
    const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) {
        result.p_value = 1.0;
        return result;
    }
    const double z = std::min(0.0, result.statistic - mean + 0.5) / std::sqrt(var);
    result.p_value = std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
    return result;
}

double bonferroni(double p, std::size_t comparisons) {
    if (comparisons == 0) throw std::invalid_argument("bonferroni: need at least one comparison");
    return std::min(1.0, p * static_cast<double>(comparisons));
}

std::vector<std::size_t> stratified_sample(std::span<const std::size_t> strata, std::size_t n, std::uint64_t seed) {
    const std::size_t total = strata.size();
    std::vector<std::size_t> all(total);
    std::iota(all.begin(), all.end(), 0);
    if (n >= total) return all;
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < total; ++i) groups[strata[i]].push_back(i);

    struct Share {
        std::size_t key, take;
        double remainder;
    };
    std::vector<Share> shares;
    std::size_t assigned = 0;
    for (const auto& [key, members] : groups) {
        const double exact = static_cast<double>(n) * static_cast<double>(members.size()) / static_cast<double>(total);
        const auto take = static_cast<std::size_t>(std::floor(exact));
        shares.push_back({key, take, exact - static_cast<double>(take)});
        assigned += take;
    }
    std::vector<std::size_t> by_remainder(shares.size());
    std::iota(by_remainder.begin(), by_remainder.end(), 0);
    std::stable_sort(by_remainder.begin(), by_remainder.end(),
                     [&](std::size_t x, std::size_t y) { return shares[x].remainder > shares[y].remainder; });
    for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++shares[by_remainder[k]].take;

    auto rng = make_rng(seed, 0x7374726174ULL);
    std::vector<std::size_t> picked;
    for (const auto& share : shares) {
        auto members = groups[share.key];
        std::shuffle(members.begin(), members.end(), rng);
        picked.insert(picked.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(share.take));
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

}  // namespace gridflow
