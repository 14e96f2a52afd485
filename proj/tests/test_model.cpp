#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "gridflow/graph_batch.hpp"
#include "gridflow/model.hpp"
#include "support.hpp"

using namespace gridflow;

namespace {

ad::Tensor constant(ad::Tape& t, ad::Shape s, std::vector<double> v) { return t.constant(s, std::move(v)); }

Sample permuted(const Sample& s, const std::vector<std::size_t>& perm) {
    // perm[old] = new
    Grid g = s.grid;
    PFSolution target = s.target;
    for (std::size_t i = 0; i < s.grid.size(); ++i) {
        g.buses[perm[i]] = s.grid.buses[i];
        g.buses[perm[i]].id = perm[i];
        target.v_mag[perm[i]] = s.target.v_mag[i];
        target.theta[perm[i]] = s.target.theta[i];
    }
    for (auto& l : g.lines) {
        l.from = perm[l.from];
        l.to = perm[l.to];
    }
    return make_sample(std::move(g), std::move(target));
}

}  // namespace

TEST_CASE("default parameter count matches the declared shapes") {
    const ModelConfig c;
    const std::size_t d = 8, hi = 32, heads = 2, dh = 4, dx = 8, de = 4;
    const std::size_t encoder = d * (dx + 2) + d;
    const std::size_t attention = heads * 3 * dh * d + d * d + d;
    const std::size_t norms = 2 * 2 * d;
    const std::size_t ffn = hi * d + hi + d * hi + d;
    const std::size_t edge = heads * (hi * de + hi + hi + 1);
    const std::size_t head = hi * d + hi + 2 * hi + 2;
    const std::size_t expected = encoder + c.layers * (attention + norms + ffn + edge) + head;
    const Model m(c, 0);
    CHECK(count_params(m, false) == expected);
    CHECK(expected == 10314);
    CHECK(count_params(m, true) == expected);
    CHECK(count_base_params(m) == expected);

    Model frozen = m;
    for (auto& p : frozen.parameters()) p.frozen = true;
    CHECK(count_params(frozen, true) == 0);
}

TEST_CASE("parameter store") {
    Model m(testing::small_config(), 1);
    CHECK(m.has_parameter(Model::projection_name(1, 0, Projection::Key)));
    CHECK(Model::projection_name(1, 0, Projection::Key) == "layers.1.heads.0.W_K");
    CHECK(Model::is_head_parameter("head.W1"));
    CHECK_FALSE(Model::is_head_parameter("layers.0.ffn.W1"));
    CHECK(Model::is_lora_parameter("layers.0.heads.1.W_Q.lora_A"));
    CHECK_THROWS(m.parameter("nope"));
    CHECK_THROWS(m.add_parameter({"head.W1", {1, 1}, {0.0}, false}));
    m.remove_parameter("head.b2");
    CHECK_FALSE(m.has_parameter("head.b2"));
    CHECK(m.has_parameter("head.W2"));
}

TEST_CASE("edge bias perceptron") {
    ad::Tape tape(false);
    const auto e = constant(tape, {3, 4}, {1, -2, 0.5, 0.25, 1, -2, 0.5, 0.25, 0, 0, 0, 0});
    SUBCASE("zero output layer gives the bias everywhere") {
        EdgeMlp mlp{constant(tape, {2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}), constant(tape, {1, 2}, {0.1, 0.2}),
                    constant(tape, {1, 2}, {0, 0}), constant(tape, {1, 1}, {0.75})};
        for (double v : edge_bias(e, mlp).values()) CHECK(v == 0.75);
    }
    SUBCASE("hand-set weights") {
        EdgeMlp mlp{constant(tape, {2, 4}, {0.1, 0, 0, 0, 0, 0.1, 0, 0}), constant(tape, {1, 2}, {0, 0.05}),
                    constant(tape, {1, 2}, {1, -1}), constant(tape, {1, 1}, {0.5})};
        const auto beta = edge_bias(e, mlp);
        // tanh(0.1) - tanh(-0.2 + 0.05) + 0.5
        const double want = std::tanh(0.1) - std::tanh(-0.15) + 0.5;
        CHECK(beta.at(0, 0) == doctest::Approx(want).epsilon(1e-14));
        CHECK(beta.at(1, 0) == beta.at(0, 0));
        CHECK(beta.at(2, 0) == doctest::Approx(0.5 - std::tanh(0.05)).epsilon(1e-14));
    }
}

TEST_CASE("attention on a three-node path by hand") {
    // h = [[1,0],[0,1],[1,1]], identity projections, one head of width 2.
    // Edges (src -> dst): 1->0, 0->1, 2->1, 1->2 with bias 0.5, self-loops with bias 0.
    ad::Tape tape(false);
    const std::vector<double> h{1, 0, 0, 1, 1, 1};
    std::vector<double> qkv;
    for (int i = 0; i < 3; ++i) {
        for (int block = 0; block < 3; ++block) {
            qkv.push_back(h[2 * i]);
            qkv.push_back(h[2 * i + 1]);
        }
    }
    const auto src = ad::make_index({1, 0, 2, 1, 0, 1, 2});
    const auto dst = ad::make_index({0, 1, 1, 2, 0, 1, 2});
    const auto qkv_t = constant(tape, {3, 6}, qkv);
    const auto bias = constant(tape, {7, 1}, {0.5, 0.5, 0.5, 0.5, 0, 0, 0});
    const auto out = ad::edge_attention(qkv_t, bias, src, dst, 1);
    const auto alpha = ad::attention_weights(qkv_t, bias, src, dst, 1);
    const double r = 1.0 / std::sqrt(2.0);

    // Node 0: from 1 (score 0 + 0.5) and itself (score 1/sqrt2).
    const double a01 = std::exp(0.5) / (std::exp(0.5) + std::exp(r));
    CHECK(alpha[0] == doctest::Approx(a01).epsilon(1e-14));
    CHECK(alpha[4] == doctest::Approx(1 - a01).epsilon(1e-14));
    CHECK(out.at(0, 0) == doctest::Approx(1 - a01).epsilon(1e-14));
    CHECK(out.at(0, 1) == doctest::Approx(a01).epsilon(1e-14));

    // Node 1: from 0 (0 + 0.5), from 2 (1/sqrt2 + 0.5), itself (1/sqrt2).
    const double z1 = std::exp(0.5) + std::exp(r + 0.5) + std::exp(r);
    const double a10 = std::exp(0.5) / z1, a12 = std::exp(r + 0.5) / z1, a11 = std::exp(r) / z1;
    CHECK(alpha[1] == doctest::Approx(a10).epsilon(1e-14));
    CHECK(alpha[2] == doctest::Approx(a12).epsilon(1e-14));
    CHECK(alpha[5] == doctest::Approx(a11).epsilon(1e-14));
    CHECK(out.at(1, 0) == doctest::Approx(a10 + a12).epsilon(1e-14));
    CHECK(out.at(1, 1) == doctest::Approx(a11 + a12).epsilon(1e-14));

    // Node 2: from 1 (1/sqrt2 + 0.5), itself (2/sqrt2).
    const double a21 = std::exp(r + 0.5) / (std::exp(r + 0.5) + std::exp(2 * r));
    CHECK(alpha[3] == doctest::Approx(a21).epsilon(1e-14));
    CHECK(out.at(2, 0) == doctest::Approx(1 - a21).epsilon(1e-14));
    CHECK(out.at(2, 1) == doctest::Approx(1.0).epsilon(1e-14));

    // Attention is directional.
    CHECK(alpha[0] != doctest::Approx(alpha[1]));
}

TEST_CASE("uniform attention and the single-node graph") {
    ad::Tape tape(false);
    // Zero queries and keys: equal scores, so every node averages its in-neighbour values.
    const std::vector<double> qkv{0, 0, 0, 0, 1, 2, 0, 0, 0, 0, 3, 4, 0, 0, 0, 0, 5, 6};
    const auto src = ad::make_index({1, 0, 2, 1, 0, 1, 2});
    const auto dst = ad::make_index({0, 1, 1, 2, 0, 1, 2});
    const auto out = ad::edge_attention(constant(tape, {3, 6}, qkv), constant(tape, {7, 1}, std::vector<double>(7, 0.3)),
                                        src, dst, 1);
    CHECK(out.at(0, 0) == doctest::Approx(2.0));
    CHECK(out.at(1, 1) == doctest::Approx(4.0));
    CHECK(out.at(2, 0) == doctest::Approx(4.0));

    const auto self = ad::make_index({0});
    const auto one = ad::edge_attention(constant(tape, {1, 6}, {0.3, -1, 2, 0.5, 7, 8}), constant(tape, {1, 1}, {0.2}),
                                        self, self, 1);
    CHECK(one.at(0, 0) == 7.0);
    CHECK(one.at(0, 1) == 8.0);
}

TEST_CASE("zero-initialised head leaves the state at its start") {
    const auto ds = testing::tiny_dataset(2, 6, 21);
    const Model m(testing::small_config(2, 4), 3);
    const auto batch = make_batch(ds.samples, std::vector<std::size_t>{0, 1});
    ad::Tape tape(false);
    const BoundModel bound(tape, m);
    const auto traj = forward(tape, m, bound, batch);
    REQUIRE(traj.steps() == 4);
    for (std::size_t t = 0; t <= 4; ++t) {
        for (std::size_t i = 0; i < batch.n_nodes; ++i) {
            CHECK(traj.v_mag[t].at(i, 0) == batch.v_init[i]);
            CHECK(traj.theta[t].at(i, 0) == batch.theta_init[i]);
        }
    }
}

TEST_CASE("slack stays at its setpoint bit for bit") {
    const auto ds = testing::tiny_dataset(3, 7, 22);
    Model m(testing::small_config(2, 5), 4);
    testing::jitter(m, 5, 0.3);
    const auto profiles = predict(m, make_batch(ds.samples, std::vector<std::size_t>{0, 1, 2}));
    bool moved = false;
    for (std::size_t g = 0; g < 3; ++g) {
        const auto& grid = ds.samples[g].grid;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            if (grid.buses[i].type == BusType::Slack) {
                CHECK(profiles[g].v_mag[i] == grid.buses[i].v_set);
                CHECK(profiles[g].theta[i] == grid.buses[i].theta_set);
            } else if (profiles[g].theta[i] != 0.0) {
                moved = true;
            }
        }
    }
    CHECK(moved);
}

TEST_CASE("relabelling buses permutes the prediction") {
    const auto ds = testing::tiny_dataset(4, 9, 23);
    Model m(testing::small_config(3, 4), 6);
    testing::jitter(m, 7, 0.2);
    std::mt19937_64 rng(8);
    for (const auto& s : ds.samples) {
        std::vector<std::size_t> perm(s.grid.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        const auto a = predict(m, make_batch(s)).front();
        const auto b = predict(m, make_batch(permuted(s, perm))).front();
        for (std::size_t i = 0; i < s.grid.size(); ++i) {
            CHECK(std::abs(a.v_mag[i] - b.v_mag[perm[i]]) <= 1e-9);
            CHECK(std::abs(a.theta[i] - b.theta[perm[i]]) <= 1e-9);
        }
    }
}

TEST_CASE("batched and single-graph forward agree") {
    const auto ds = testing::tiny_dataset(3, 6, 24);
    Model m(testing::small_config(2, 3), 9);
    testing::jitter(m, 10, 0.2);
    const auto batched = predict(m, make_batch(ds.samples, std::vector<std::size_t>{0, 1, 2}));
    for (std::size_t g = 0; g < 3; ++g) {
        const auto single = predict(m, make_batch(ds.samples[g])).front();
        for (std::size_t i = 0; i < single.v_mag.size(); ++i) {
            CHECK(std::abs(single.v_mag[i] - batched[g].v_mag[i]) <= 1e-13);
            CHECK(std::abs(single.theta[i] - batched[g].theta[i]) <= 1e-13);
        }
    }
}

TEST_CASE("checkpoint round trip") {
    Model m(testing::small_config(), 11);
    testing::jitter(m, 12);
    m.parameter("head.W1").frozen = true;
    const auto path = std::filesystem::temp_directory_path() / "gridflow_model_roundtrip.json";
    save_model(m, path);
    const Model back = load_model(path);
    REQUIRE(back.parameters().size() == m.parameters().size());
    for (std::size_t i = 0; i < m.parameters().size(); ++i) {
        CHECK(back.parameters()[i].name == m.parameters()[i].name);
        CHECK(back.parameters()[i].values == m.parameters()[i].values);
        CHECK(back.parameters()[i].frozen == m.parameters()[i].frozen);
    }
    CHECK(back.config().layers == 2);
}

TEST_CASE("config validation") {
    ModelConfig c;
    c.heads = 3;
    CHECK_THROWS(c.validate());
    c = ModelConfig{};
    c.steps = 0;
    CHECK_THROWS(c.validate());
}
