#include <doctest.h>

#include <cmath>
#include <numbers>

#include "gridflow/grid.hpp"
#include "support.hpp"

using namespace gridflow;
using testing::two_bus;

namespace {

void check_complex(Complex got, Complex want, double tol = 1e-12) {
    CHECK(got.real() == doctest::Approx(want.real()).epsilon(tol));
    CHECK(got.imag() == doctest::Approx(want.imag()).epsilon(tol));
}

}  // namespace

TEST_CASE("ybus of a lossless two-bus line") {
    const auto y = build_ybus(two_bus(0.0, 0.0, 0.0, 0.1));
    check_complex(y.at(0, 0), {0.0, -10.0});
    check_complex(y.at(0, 1), {0.0, 10.0});
    check_complex(y.at(1, 0), {0.0, 10.0});
    check_complex(y.at(1, 1), {0.0, -10.0});
}

TEST_CASE("ybus with resistance and charging") {
    // 1 / (0.05 + 0.15j) = 2 - 6j
    const auto y = build_ybus(two_bus(0.0, 0.0, 0.05, 0.15, 0.02));
    check_complex(y.at(0, 1), {-2.0, 6.0});
    check_complex(y.at(1, 0), {-2.0, 6.0});
    check_complex(y.at(0, 0), {2.0, -6.0 + 0.01});
    check_complex(y.at(1, 1), {2.0, -6.0 + 0.01});
}

TEST_CASE("symmetric triangle has equal diagonals and off-diagonals") {
    Grid g;
    g.buses = {{0, BusType::Slack, 0, 0, 1, 0}, {1, BusType::PQ, 0, 0, 1, 0}, {2, BusType::PQ, 0, 0, 1, 0}};
    g.lines = {{0, 1, 0.1, 0.3, 0.01, 1}, {1, 2, 0.1, 0.3, 0.01, 1}, {0, 2, 0.1, 0.3, 0.01, 1}};
    const auto y = build_ybus(g);
    CHECK(y.nonzeros() == 3 + 2 * 3);
    for (std::size_t i = 0; i < 3; ++i) {
        check_complex(y.at(i, i), y.at(0, 0));
        for (std::size_t j = 0; j < 3; ++j) {
            if (i != j) check_complex(y.at(i, j), y.at(0, 1));
        }
    }
}

TEST_CASE("parallel lines merge by admittance addition") {
    Grid g = two_bus(0.0, 0.0, 0.0, 0.2);
    g.lines.push_back({1, 0, 0.0, 0.2, 0.0, 1.0});
    const auto y = build_ybus(g);
    check_complex(y.at(0, 1), {0.0, 10.0});
    CHECK(y.off_diagonal().size() == 2);
}

TEST_CASE("zero-impedance line is rejected") {
    CHECK_THROWS_WITH_AS(build_ybus(two_bus(0.0, 0.0, 0.0, 0.0)), doctest::Contains("degenerate line"), std::invalid_argument);
}

TEST_CASE("per-unit conversion") {
    SUBCASE("MV") {
        CHECK(base_impedance(10.0, 10.0) == doctest::Approx(10.0));
        const auto pu = to_per_unit(0.5, 0.3, 10.0, 10.0, 10.0, 10.0);
        CHECK(pu.r == doctest::Approx(0.5).epsilon(1e-14));
        CHECK(pu.x == doctest::Approx(0.3).epsilon(1e-14));
        // omega * C * length * z_base = 314.159... * 1e-8 F/km * 10 km * 10 ohm
        CHECK(pu.b_shunt == doctest::Approx(2.0 * std::numbers::pi * 50.0 * 1e-7 * 10.0).epsilon(1e-12));
    }
    SUBCASE("MV range midpoints") {
        CHECK(to_per_unit(0.55, 0.325, 11.0, 10.5, 10.0, 10.0).r == doctest::Approx(0.5775).epsilon(1e-14));
    }
    SUBCASE("HV") {
        CHECK(base_impedance(100.0, 110.0) == doctest::Approx(121.0));
        CHECK(to_per_unit(0.15, 0.4, 9.0, 50.0, 100.0, 110.0).r == doctest::Approx(7.5 / 121.0).epsilon(1e-14));
    }
    SUBCASE("vanishing length") {
        const auto pu = to_per_unit(0.5, 0.3, 10.0, 0.0, 10.0, 10.0);
        CHECK(pu.r == 0.0);
        CHECK(pu.b_shunt == 0.0);
    }
}

TEST_CASE("node feature layout") {
    Grid g = two_bus(0.3, 0.1, 0.0, 0.1);
    g.buses[0].v_set = 1.02;
    const auto x = node_features(g, flat_init(g));
    REQUIRE(x.size() == 2 * kNodeFeatureDim);
    const std::vector<double> slack(x.begin(), x.begin() + 8);
    const std::vector<double> pq(x.begin() + 8, x.end());
    CHECK(slack == std::vector<double>{0.0, 0.0, 1.0, 0.0, 0.0, 1.02, 1.02, 0.0});
    CHECK(pq == std::vector<double>{0.3, 0.1, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0});

    const auto zero = node_features(two_bus(0.0, 0.0, 0.0, 0.1), flat_init(two_bus(0.0, 0.0, 0.0, 0.1)));
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(zero[i * kNodeFeatureDim] == 0.0);
        CHECK(zero[i * kNodeFeatureDim + 1] == 0.0);
    }
}

TEST_CASE("edge feature layout") {
    const auto pure = edge_features({0, 1, 0.0, 0.1, 0.0, 1.0});
    CHECK(pure[0] == doctest::Approx(0.0));
    CHECK(pure[1] == doctest::Approx(-10.0));
    CHECK(pure[2] == 0.0);
    CHECK(pure[3] == 0.0);

    const auto lossy = edge_features({0, 1, 0.05, 0.15, 0.02, 1.0});
    CHECK(lossy[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(lossy[1] == doctest::Approx(-6.0).epsilon(1e-12));
    CHECK(lossy[2] == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(lossy[3] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    const auto doubled = edge_features({0, 1, 0.1, 0.3, 0.02, 1.0});
    CHECK(doubled[0] == doctest::Approx(lossy[0] / 2).epsilon(1e-12));
    CHECK(doubled[1] == doctest::Approx(lossy[1] / 2).epsilon(1e-12));
    CHECK(doubled[3] == doctest::Approx(lossy[3]).epsilon(1e-12));
}

TEST_CASE("grid json round trip and connectivity") {
    Grid g = two_bus(0.3, -0.1, 0.05, 0.15, 0.02);
    const Grid back = grid_from_json(to_json(g));
    CHECK(back.buses.size() == 2);
    CHECK(back.buses[1].p_set == 0.3);
    CHECK(back.lines[0].b_shunt == 0.02);
    CHECK(is_connected(g));
    g.buses.push_back({2, BusType::PQ, 0, 0, 1, 0});
    CHECK_FALSE(is_connected(g));
}
