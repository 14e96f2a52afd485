#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gridflow/dataset.hpp"
#include "gridflow/power_flow.hpp"
#include "support.hpp"

using namespace gridflow;
using testing::two_bus;

namespace {

std::vector<Complex> polar(std::span<const double> v, std::span<const double> th) {
    std::vector<Complex> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(std::polar(v[i], th[i]));
    return out;
}

std::vector<double> masked_mismatch(const Grid& g, const AdmittanceMatrix& y, std::span<const double> v,
                                    std::span<const double> th) {
    std::vector<double> p, q;
    for (const auto& b : g.buses) {
        p.push_back(b.p_set);
        q.push_back(b.q_set);
    }
    const auto mm = compute_mismatch(polar(v, th), y, p, q);
    const auto layout = unknown_layout(bus_types(g));
    std::vector<double> out;
    for (auto i : layout.angle_buses) out.push_back(mm.dp[i]);
    for (auto i : layout.magnitude_buses) out.push_back(mm.dq[i]);
    return out;
}

Grid random_grid(std::size_t n, std::uint64_t seed, Regime regime = Regime::MV) {
    auto rng = make_rng(seed, 99);
    Grid g = sample_topology(n, 0.3, 0.3, rng);
    return sample_parameters(std::move(g), regime, RegimeRanges::defaults(regime), rng);
}

}  // namespace

TEST_CASE("mismatch vanishes for a zero-injection flat profile") {
    const Grid g = two_bus(0.0, 0.0, 0.0, 0.1);
    const auto y = build_ybus(g);
    const std::vector<Complex> v{1.0, 1.0};
    const std::vector<double> zero{0.0, 0.0};
    const auto mm = compute_mismatch(v, y, zero, zero);
    for (int i = 0; i < 2; ++i) {
        CHECK(std::abs(mm.dp[i]) < 1e-15);
        CHECK(std::abs(mm.dq[i]) < 1e-15);
    }
}

TEST_CASE("two-bus power transfer matches the closed form") {
    const Grid g = two_bus(0.0, 0.0, 0.0, 0.1);
    const auto y = build_ybus(g);
    const std::vector<Complex> v{std::polar(1.0, 0.0), std::polar(1.0, -0.05)};
    const std::vector<double> zero{0.0, 0.0};
    const auto mm = compute_mismatch(v, y, zero, zero);
    // Injection at bus 1 is (V1 V2 / x) sin(theta_1 - theta_0); mismatch = 0 - P.
    CHECK(-mm.dp[1] == doctest::Approx(std::sin(-0.05) / 0.1).epsilon(1e-13));
    CHECK(-mm.dp[0] == doctest::Approx(std::sin(0.05) / 0.1).epsilon(1e-13));

    const auto mm2 = compute_mismatch(v, y.scaled(2.0), zero, zero);
    CHECK(mm2.dp[1] == doctest::Approx(2.0 * mm.dp[1]).epsilon(1e-13));
    CHECK(mm2.dq[1] == doctest::Approx(2.0 * mm.dq[1]).epsilon(1e-13));
}

TEST_CASE("jacobian analytic entry on the lossless two-bus system") {
    const Grid g = two_bus(0.0, 0.0, 0.0, 0.1);
    const std::vector<double> v{1.0, 1.0}, th{0.0, 0.0};
    const auto j = jacobian(v, th, build_ybus(g), bus_types(g));
    REQUIRE(j.rows() == 2);
    CHECK(j(0, 0) == doctest::Approx(-10.0).epsilon(1e-12));
}

TEST_CASE("jacobian agrees with central differences on random 6-bus grids") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Grid g = random_grid(6, seed);
        const auto y = build_ybus(g);
        auto rng = make_rng(seed, 7);
        std::vector<double> v, th;
        for (const auto& b : g.buses) {
            v.push_back(b.type == BusType::PQ ? uniform(rng, 0.9, 1.1) : b.v_set);
            th.push_back(b.type == BusType::Slack ? 0.0 : uniform(rng, -0.2, 0.2));
        }
        const auto layout = unknown_layout(bus_types(g));
        const auto j = jacobian(v, th, y, bus_types(g));
        REQUIRE(static_cast<std::size_t>(j.cols()) == layout.size());
        const double h = 1e-6;
        double worst = 0.0, scale = j.cwiseAbs().maxCoeff();
        for (std::size_t c = 0; c < layout.size(); ++c) {
            auto vp = v, vm = v, tp = th, tm = th;
            if (c < layout.angle_buses.size()) {
                tp[layout.angle_buses[c]] += h;
                tm[layout.angle_buses[c]] -= h;
            } else {
                vp[layout.magnitude_buses[c - layout.angle_buses.size()]] += h;
                vm[layout.magnitude_buses[c - layout.angle_buses.size()]] -= h;
            }
            const auto fp = masked_mismatch(g, y, vp, tp);
            const auto fm = masked_mismatch(g, y, vm, tm);
            for (std::size_t r = 0; r < layout.size(); ++r) {
                const double fd = (fp[r] - fm[r]) / (2 * h);
                worst = std::max(worst, std::abs(fd - j(r, c)) / scale);
            }
        }
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("all-PV grid has no magnitude unknowns") {
    Grid g = two_bus(0.1, 0.0, 0.0, 0.1);
    g.buses[1].type = BusType::PV;
    g.buses.push_back({2, BusType::PV, 0.2, 0.0, 1.0, 0.0});
    g.lines.push_back({1, 2, 0.0, 0.1, 0.0, 1.0});
    const auto layout = unknown_layout(bus_types(g));
    CHECK(layout.angle_buses.size() == 2);
    CHECK(layout.magnitude_buses.empty());
    const std::vector<double> v{1, 1, 1}, th{0, 0, 0};
    const auto j = jacobian(v, th, build_ybus(g), bus_types(g));
    CHECK(j.rows() == 2);
    CHECK(j.cols() == 2);
}

TEST_CASE("Newton-Raphson matches the analytic two-bus solution") {
    // P2 = 10 V sin(t) = -0.5 and Q2 = 10 V^2 - 10 V cos(t) = 0 give V = cos(t), sin(2t) = -0.1.
    const Grid g = two_bus(-0.5, 0.0, 0.0, 0.1);
    const auto sol = solve_nr(g, build_ybus(g), flat_init(g));
    REQUIRE(sol.converged);
    const double theta = -0.5 * std::asin(0.1);
    const double v2 = std::sqrt((1.0 + std::sqrt(1.0 - 4.0 * 0.05 * 0.05)) / 2.0);
    CHECK(std::abs(sol.v_mag[1] - v2) <= 1e-8);
    CHECK(std::abs(sol.v_mag[1] - std::cos(theta)) <= 1e-8);
    CHECK(std::abs(sol.theta[1] - theta) <= 1e-8);
    CHECK(sol.v_mag[0] == 1.0);
    CHECK(sol.theta[0] == 0.0);
}

TEST_CASE("zero-injection grid converges immediately to the flat profile") {
    Grid g = two_bus(0.0, 0.0, 0.1, 0.3);
    const auto sol = solve_nr(g, build_ybus(g), flat_init(g));
    CHECK(sol.converged);
    CHECK(sol.iterations <= 1);
    CHECK(sol.v_mag[1] == doctest::Approx(1.0));
    CHECK(sol.theta[1] == doctest::Approx(0.0));
}

TEST_CASE("load beyond the two-bus loadability limit does not converge") {
    // With Q = 0 the transferable power is 5 sin(2t) <= 5 p.u.
    const Grid g = two_bus(-6.0, 0.0, 0.0, 0.1);
    const auto sol = solve_nr(g, build_ybus(g), flat_init(g));
    CHECK_FALSE(sol.converged);
}

TEST_CASE("converged random grids satisfy the tolerance and pin setpoints") {
    int converged = 0;
    for (std::uint64_t seed = 100; seed < 140; ++seed) {
        const Grid g = random_grid(10, seed);
        const auto y = build_ybus(g);
        const auto sol = solve_nr(g, y, flat_init(g));
        if (!sol.converged) continue;
        ++converged;
        std::vector<double> p, q;
        for (const auto& b : g.buses) {
            p.push_back(b.p_set);
            q.push_back(b.q_set);
        }
        const auto mm = compute_mismatch(sol.profile().complex(), y, p, q);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const auto type = g.buses[i].type;
            if (type != BusType::Slack) CHECK(std::abs(mm.dp[i]) <= 1e-8);
            if (type == BusType::PQ) CHECK(std::abs(mm.dq[i]) <= 1e-8);
            if (type != BusType::PQ) CHECK(sol.v_mag[i] == g.buses[i].v_set);
            if (type == BusType::Slack) CHECK(sol.theta[i] == g.buses[i].theta_set);
        }
    }
    CHECK(converged > 0);
}

TEST_CASE("flat initialisation") {
    Grid g = two_bus(0.1, 0.0, 0.0, 0.1);
    g.buses.push_back({2, BusType::PV, 0.1, 0.0, 1.05, 0.0});
    g.lines.push_back({1, 2, 0.0, 0.1, 0.0, 1.0});
    const auto init = flat_init(g);
    CHECK(init.v_mag == std::vector<double>{1.0, 1.0, 1.05});
    CHECK(init.theta == std::vector<double>{0.0, 0.0, 0.0});
}
