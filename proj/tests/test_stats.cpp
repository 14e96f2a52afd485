#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "gridflow/stats.hpp"

using namespace gridflow;

namespace {

// Two-sided p by enumerating all 2^n sign assignments of the average ranks.
struct Brute {
    double w_plus;
    double p;
};

Brute brute_force(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) d.push_back(a[i] - b[i]);
    }
    const std::size_t n = d.size();
    if (n == 0) return {0.0, 1.0};
    std::vector<double> ranks(n);
    for (std::size_t i = 0; i < n; ++i) {
        double below = 0, equal = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (std::abs(d[j]) < std::abs(d[i])) ++below;
            if (std::abs(d[j]) == std::abs(d[i])) ++equal;
        }
        ranks[i] = below + (equal + 1) / 2;
    }
    double w_plus = 0, total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        total += ranks[i];
        if (d[i] > 0) w_plus += ranks[i];
    }
    const double observed = std::min(w_plus, total - w_plus);
    std::size_t hits = 0;
    for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
        double w = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (mask >> i & 1) w += ranks[i];
        }
        if (std::min(w, total - w) <= observed + 1e-9) ++hits;
    }
    return {w_plus, std::min(1.0, static_cast<double>(hits) / static_cast<double>(std::size_t{1} << n))};
}

}  // namespace

TEST_CASE("signed-rank worked examples") {
    const std::vector<double> a{0.1, 0.2, 0.3, 0.4};
    const auto same = wilcoxon_signed_rank(a, a);
    CHECK(same.p_value == 1.0);
    CHECK(same.statistic == 0.0);
    CHECK(same.n == 0);

    const std::vector<double> x{2, 4, 6, 8, 10}, y{1, 2, 3, 4, 5};
    const auto r = wilcoxon_signed_rank(y, x);
    CHECK(r.w_plus == 0.0);
    CHECK(r.w_minus == 15.0);
    CHECK(r.statistic == 0.0);
    CHECK(r.p_value == doctest::Approx(0.0625).epsilon(1e-12));
    CHECK(r.exact);
    CHECK(wilcoxon_signed_rank(x, y).p_value == r.p_value);

    CHECK_THROWS(wilcoxon_signed_rank(x, std::vector<double>{1, 2}));
}

TEST_CASE("Bonferroni correction") {
    CHECK(bonferroni(0.004, 3) == doctest::Approx(0.012).epsilon(1e-12));
    CHECK(bonferroni(0.5, 3) == 1.0);
    CHECK(bonferroni(0.01, 1) == 0.01);
}

TEST_CASE("exact p-values match brute-force enumeration") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> size(1, 12), level(-4, 4);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = size(rng);
        std::vector<double> a(n), b(n);
        // Small integer differences make ties and zeros common.
        for (int i = 0; i < n; ++i) {
            a[i] = level(rng);
            b[i] = level(rng);
        }
        const auto got = wilcoxon_signed_rank(a, b);
        const auto want = brute_force(a, b);
        CHECK(got.w_plus == doctest::Approx(want.w_plus).epsilon(1e-12));
        worst = std::max(worst, std::abs(got.p_value - want.p));
    }
    MESSAGE("max |p - p_brute| " << worst);
    CHECK(worst <= 1e-12);
}

TEST_CASE("normal approximation is close to the exact p for n = 30") {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> noise(0.3, 1.0);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<double> a(30), b(30, 0.0), ranks;
        for (auto& v : a) v = noise(rng);
        std::vector<double> mag(30);
        for (int i = 0; i < 30; ++i) mag[i] = std::abs(a[i]);
        std::vector<std::size_t> order(30);
        for (std::size_t i = 0; i < 30; ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](auto x, auto y) { return mag[x] < mag[y]; });
        std::vector<double> r(30);
        for (std::size_t k = 0; k < 30; ++k) r[order[k]] = static_cast<double>(k + 1);
        double w_plus = 0;
        for (int i = 0; i < 30; ++i) {
            if (a[i] > 0) w_plus += r[i];
        }
        const auto approx = wilcoxon_signed_rank(a, b);
        CHECK_FALSE(approx.exact);
        const double exact = wilcoxon_exact_p(r, w_plus);
        CHECK(approx.w_plus == w_plus);
        CHECK(std::abs(approx.p_value - exact) <= 0.01);
    }
}

TEST_CASE("stratified sampling") {
    std::vector<std::size_t> strata;
    for (int i = 0; i < 60; ++i) strata.push_back(10);
    for (int i = 0; i < 30; ++i) strata.push_back(20);
    for (int i = 0; i < 10; ++i) strata.push_back(30);
    std::shuffle(strata.begin(), strata.end(), std::mt19937_64(3));

    const auto pick = stratified_sample(strata, 20, 5);
    REQUIRE(pick.size() == 20);
    CHECK(std::is_sorted(pick.begin(), pick.end()));
    CHECK(std::adjacent_find(pick.begin(), pick.end()) == pick.end());
    std::map<std::size_t, int> per;
    for (auto i : pick) ++per[strata[i]];
    CHECK(per[10] == 12);
    CHECK(per[20] == 6);
    CHECK(per[30] == 2);

    CHECK(stratified_sample(strata, 20, 5) == pick);
    CHECK(stratified_sample(strata, 20, 6) != pick);
    CHECK(stratified_sample(strata, 100, 5).size() == 100);
    CHECK(stratified_sample(strata, 500, 5).size() == 100);

    // Largest remainder: 7 of (5, 3, 2) gives exact shares 3.5, 2.1, 1.4.
    const std::vector<std::size_t> small{1, 1, 1, 1, 1, 2, 2, 2, 3, 3};
    std::map<std::size_t, int> got;
    for (auto i : stratified_sample(small, 7, 1)) ++got[small[i]];
    CHECK(got[1] == 4);
    CHECK(got[2] == 2);
    CHECK(got[3] == 1);
}
