#include "gridflow/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace gridflow {

void LossConfig::validate() const {
    if (!(lambda_pf >= 0.0)) throw std::invalid_argument("loss config: lambda_pf must be >= 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("loss config: gamma must lie in (0, 1]");
}

nlohmann::json to_json(const LossConfig& c) { return {{"lambda_pf", c.lambda_pf}, {"gamma", c.gamma}}; }

LossConfig loss_config_from_json(const nlohmann::json& j) {
    LossConfig c;
    c.lambda_pf = j.value("lambda_pf", c.lambda_pf);
    c.gamma = j.value("gamma", c.gamma);
    return c;
}

double rmse(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size()) {
        throw std::invalid_argument("rmse: length mismatch (" + std::to_string(pred.size()) + " vs " +
                                    std::to_string(target.size()) + ")");
    }
    if (pred.empty()) throw std::invalid_argument("rmse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
    return std::sqrt(acc / static_cast<double>(pred.size()));
}

double discounted_sum(std::span<const double> residuals, double gamma) {
    const std::size_t steps = residuals.size();
    double acc = 0.0;
    for (std::size_t t = 0; t < steps; ++t) acc += std::pow(gamma, static_cast<double>(steps - 1 - t)) * residuals[t];
    return acc;
}

ad::Tensor step_residual(const ad::Tensor& v_mag, const ad::Tensor& theta, const GraphBatch& batch) {
    auto& tape = v_mag.tape();
    const std::size_t n = batch.n_nodes;
    const auto s = ad::power_injection(v_mag, theta, batch.ybus);
    const auto dp = ad::sub(tape.constant({n, 1}, batch.p_set), ad::slice(s, 1, 0, 1));
    const auto dq = ad::sub(tape.constant({n, 1}, batch.q_set), ad::slice(s, 1, 1, 2));
    const auto per_node = ad::add(ad::mul(ad::square(dp), tape.constant({n, 1}, batch.p_mask)),
                                  ad::mul(ad::square(dq), tape.constant({n, 1}, batch.q_mask)));
    return ad::scatter_add_rows(per_node, batch.graph_of, batch.n_graphs);
}

ad::Tensor discounted_sum(std::span<const ad::Tensor> residuals, double gamma) {
    if (residuals.empty()) throw std::invalid_argument("discounted_sum: no steps");
    const std::size_t steps = residuals.size();
    ad::Tensor acc = residuals.back();
    for (std::size_t t = 0; t + 1 < steps; ++t) {
        acc = ad::add(acc, ad::scale(residuals[t], std::pow(gamma, static_cast<double>(steps - 1 - t))));
    }
    return acc;
}

ad::Tensor physics_loss(const Trajectory& trajectory, const GraphBatch& batch, double gamma) {
    std::vector<ad::Tensor> steps;
    steps.reserve(trajectory.steps());
    for (std::size_t t = 1; t <= trajectory.steps(); ++t) {
        steps.push_back(step_residual(trajectory.v_mag[t], trajectory.theta[t], batch));
    }
    return discounted_sum(steps, gamma);
}

ad::Tensor data_loss(const Trajectory& trajectory, const GraphBatch& batch) {
    auto& tape = trajectory.final_v().tape();
    const std::size_t n = batch.n_nodes;
    const auto mask = tape.constant({n, 1}, batch.free_mask);
    const auto ev = ad::sub(trajectory.final_v(), tape.constant({n, 1}, batch.v_target));
    const auto et = ad::sub(trajectory.final_theta(), tape.constant({n, 1}, batch.theta_target));
    const auto sq = ad::mul(ad::add(ad::square(ev), ad::square(et)), mask);
    std::vector<double> inv_count(batch.n_graphs);
    for (std::size_t g = 0; g < batch.n_graphs; ++g) {
        if (batch.free_count[g] == 0) throw std::invalid_argument("data_loss: graph without non-slack buses");
        inv_count[g] = 1.0 / (2.0 * static_cast<double>(batch.free_count[g]));
    }
    const auto mse = ad::scale_rows(ad::scatter_add_rows(sq, batch.graph_of, batch.n_graphs),
                                    tape.constant({batch.n_graphs, 1}, std::move(inv_count)));
    // The offset keeps the sqrt derivative finite at an exact fit.
    return ad::sqrt(ad::add_scalar(mse, 1e-18));
}

LossTerms loss_terms(const Trajectory& trajectory, const GraphBatch& batch, const LossConfig& config) {
    LossTerms terms;
    terms.data = data_loss(trajectory, batch);
    terms.physics = physics_loss(trajectory, batch, config.gamma);
    terms.total = config.lambda_pf == 0.0 ? terms.data : ad::add(terms.data, ad::scale(terms.physics, config.lambda_pf));
    return terms;
}

}  // namespace gridflow
