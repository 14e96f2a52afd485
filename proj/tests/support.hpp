#pragma once

#include <random>
#include <vector>

#include <algorithm>
#include <cmath>

#include "gridflow/dataset.hpp"
#include "gridflow/graph_batch.hpp"
#include "gridflow/losses.hpp"
#include "gridflow/model.hpp"

namespace testing {

using namespace gridflow;

inline Grid two_bus(double p2, double q2, double r, double x, double b_shunt = 0.0) {
    Grid g;
    g.buses.push_back({0, BusType::Slack, 0.0, 0.0, 1.0, 0.0});
    g.buses.push_back({1, BusType::PQ, p2, q2, 1.0, 0.0});
    g.lines.push_back({0, 1, r, x, b_shunt, 1.0});
    return g;
}

// Small converged samples with a fixed bus count.
inline Dataset tiny_dataset(std::size_t n_samples, std::size_t buses, std::uint64_t seed,
                            Regime regime = Regime::MV) {
    SynthConfig c = SynthConfig::defaults(regime);
    c.n_samples = n_samples;
    c.min_buses = buses;
    c.max_buses = buses;
    c.seed = seed;
    return generate_dataset(c);
}

inline ModelConfig small_config(std::size_t layers = 2, std::size_t steps = 3) {
    ModelConfig c;
    c.layers = layers;
    c.steps = steps;
    return c;
}

// Adds N(0, sigma^2) noise to every trainable value so no path is identically zero.
inline void jitter(Model& model, std::uint64_t seed, double sigma = 0.1) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& p : model.parameters()) {
        for (auto& v : p.values) v += noise(rng);
    }
}

inline double total_loss(const Model& model, const GraphBatch& batch, const LossConfig& loss) {
    ad::Tape tape(false);
    const BoundModel bound(tape, model);
    const auto terms = loss_terms(forward(tape, model, bound, batch), batch, loss);
    double s = 0.0;
    for (double v : terms.total.values()) s += v;
    return s;
}

// Two buses, no lines, a unit shunt conductance at bus 1 (PQ) with active setpoint
// p_set there: the injection at bus 1 is V^2, so dP = p_set - V^2 and dQ = 0.
inline GraphBatch shunt_batch(double p_set = 0.0) {
    GraphBatch b;
    b.n_nodes = 2;
    b.n_graphs = 1;
    b.node_offset = {0, 2};
    b.free_count = {1};
    b.graph_of = ad::make_index({0, 0});
    b.p_set = {0.0, p_set};
    b.q_set = {0.0, 0.0};
    b.free_mask = {0.0, 1.0};
    b.p_mask = {0.0, 1.0};
    b.q_mask = {0.0, 1.0};
    b.v_init = {1.0, 1.0};
    b.theta_init = {0.0, 0.0};
    b.v_target = {1.0, 1.0};
    b.theta_target = {0.0, 0.0};
    auto y = std::make_shared<ad::ComplexSparse>();
    y->n = 2;
    y->row = {1};
    y->col = {1};
    y->g = {1.0};
    y->b = {0.0};
    b.ybus = y;
    return b;
}

inline Trajectory constant_trajectory(ad::Tape& tape, const std::vector<std::vector<double>>& v,
                               const std::vector<std::vector<double>>& theta) {
    Trajectory t;
    for (std::size_t k = 0; k < v.size(); ++k) {
        t.v_mag.push_back(tape.constant({v[k].size(), 1}, v[k]));
        t.theta.push_back(tape.constant({theta[k].size(), 1}, theta[k]));
    }
    return t;
}

inline Trajectory target_trajectory(ad::Tape& tape, const GraphBatch& b, std::size_t steps) {
    std::vector<std::vector<double>> v{b.v_init}, th{b.theta_init};
    for (std::size_t k = 0; k < steps; ++k) {
        v.push_back(b.v_target);
        th.push_back(b.theta_target);
    }
    return constant_trajectory(tape, v, th);
}

struct GradCheck {
    double max_rel = 0.0;   // over all trainable coordinates
    std::size_t coords = 0;
};

/// Central differences of the summed combined loss against the tape gradient,
/// coordinate by coordinate over every trainable parameter. The relative error
/// uses max(|g_ad| + |g_fd|, floor) as denominator so coordinates whose true
/// gradient is exactly zero (for example a bias added to every logit of a
/// softmax) are judged by the absolute error floor * tolerance.
inline GradCheck full_loss_grad_check(const Model& model, const GraphBatch& batch, const LossConfig& loss,
                                      double eps = 1e-5, double floor = 1e-6) {
    ad::Tape tape;
    const BoundModel bound(tape, model);
    const auto terms = loss_terms(forward(tape, model, bound, batch), batch, loss);
    tape.backward(ad::sum(terms.total));
    GradCheck out;
    Model probe = model;
    for (std::size_t k = 0; k < model.parameters().size(); ++k) {
        const auto& p = model.parameters()[k];
        if (p.frozen) continue;
        const auto& t = bound[p.name];
        std::vector<double> g(p.values.size(), 0.0);
        if (tape.has_grad(t)) {
            const auto gs = tape.grad(t);
            g.assign(gs.begin(), gs.end());
        }
        auto& values = probe.parameters()[k].values;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double x = values[i];
            values[i] = x + eps;
            const double up = total_loss(probe, batch, loss);
            values[i] = x - eps;
            const double down = total_loss(probe, batch, loss);
            values[i] = x;
            const double fd = (up - down) / (2 * eps);
            out.max_rel = std::max(out.max_rel, std::abs(fd - g[i]) / std::max(std::abs(fd) + std::abs(g[i]), floor));
            ++out.coords;
        }
    }
    return out;
}

}  // namespace testing
