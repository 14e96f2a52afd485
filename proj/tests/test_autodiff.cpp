#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "gridflow/autodiff.hpp"
#include "primitive_checks.hpp"

using namespace gridflow::ad;
using namespace testing::primitives;

TEST_CASE("worked examples") {
    Tape tape;
    SUBCASE("uniform softmax") {
        const auto s = softmax(tape.constant({1, 3}, {1, 1, 1}), 1);
        for (double v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0));
    }
    SUBCASE("masked softmax gives exact zeros") {
        const double inf = std::numeric_limits<double>::infinity();
        const std::vector<double> mask{0.0, -inf, 0.0};
        const auto s = softmax(tape.constant({1, 3}, {0, 5, 0}), 1, mask);
        CHECK(s.at(0, 0) == 0.5);
        CHECK(s.at(0, 1) == 0.0);
        CHECK(s.at(0, 2) == 0.5);
    }
    SUBCASE("gradient of sum of squares") {
        const auto x = tape.leaf({1, 3}, {1, 2, 3});
        tape.backward(sum(square(x)));
        const auto g = tape.grad(x);
        CHECK(std::vector<double>(g.begin(), g.end()) == std::vector<double>{2, 4, 6});
    }
    SUBCASE("linear chain") {
        const auto w = tape.leaf({1, 1}, {2});
        const auto x = tape.leaf({1, 1}, {3});
        tape.backward(mul(w, x));
        CHECK(tape.grad(w)[0] == 3.0);
        CHECK(tape.grad(x)[0] == 2.0);
    }
    SUBCASE("frozen leaf gets no gradient") {
        const auto w = tape.leaf({1, 1}, {2}, false);
        const auto x = tape.leaf({1, 1}, {3});
        tape.backward(mul(w, x));
        CHECK_FALSE(tape.has_grad(w));
        CHECK_THROWS(tape.grad(w));
    }
}

TEST_CASE("errors") {
    Tape tape;
    const auto a = tape.leaf({2, 3}, randn(6, 1));
    const auto b = tape.leaf({3, 2}, randn(6, 2));
    CHECK_THROWS_WITH(add(a, b), doctest::Contains("add"));
    CHECK_THROWS_WITH(add(a, b), doctest::Contains("2x3"));
    CHECK_THROWS_WITH(add(a, b), doctest::Contains("3x2"));
    CHECK_THROWS(matmul(a, a));
    CHECK_THROWS(tape.backward(a));
    const std::vector<double> x{1.0};
    CHECK_THROWS(grad_check([](Tape&, const Tensor& t) { return sum(t); }, {1, 1}, x, 0.0));
    CHECK(grad_check([](Tape&, const Tensor& t) { return sum(square(t)); }, {1, 3}, std::vector<double>{1, 2, 3}) <= 1e-9);
}



TEST_CASE("gradient checks of every primitive") {
    const auto checks = all_grad_checks();
    CHECK(checks.size() == 49);
    for (const auto& c : checks) {
        CAPTURE(c.name);
        CHECK(c.rel_error <= 1e-6);
    }
}

TEST_CASE("tanh matches the standard library") {
    Tape tape(false);
    std::vector<double> x;
    for (int i = -400; i <= 400; ++i) x.push_back(i * 0.05);
    const auto y = tanh(tape.constant({1, x.size()}, x));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y.values()[i] - std::tanh(x[i])) <= 1e-15);
}





TEST_CASE("power injection of two buses matches the closed form") {
    auto y = std::make_shared<ComplexSparse>();
    y->n = 2;
    y->row = {0, 0, 1, 1};
    y->col = {0, 1, 0, 1};
    y->g = {0, 0, 0, 0};
    y->b = {-10, 10, 10, -10};
    Tape tape(false);
    const auto s = power_injection(tape.constant({2, 1}, {1.0, 1.0}), tape.constant({2, 1}, {0.0, -0.05}), y);
    CHECK(s.at(1, 0) == doctest::Approx(10 * std::sin(-0.05)).epsilon(1e-13));
    CHECK(s.at(1, 1) == doctest::Approx(10 - 10 * std::cos(0.05)).epsilon(1e-12));
}
