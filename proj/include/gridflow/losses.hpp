#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "gridflow/autodiff.hpp"
#include "gridflow/graph_batch.hpp"
#include "gridflow/model.hpp"

namespace gridflow {

struct LossConfig {
    double lambda_pf = 0.01;
    double gamma = 0.9;

    void validate() const;
};

nlohmann::json to_json(const LossConfig& config);
LossConfig loss_config_from_json(const nlohmann::json& j);

// sqrt(mean((pred - target)^2)); throws on length mismatch or empty input.
double rmse(std::span<const double> pred, std::span<const double> target);

// sum_t gamma^(T-1-t) * residuals[t] for t = 0..T-1.
double discounted_sum(std::span<const double> residuals, double gamma);

/// Per-graph squared mismatch norms ||dP||^2 + ||dQ||^2 of one state
/// (n_graphs x 1). dP is counted at PV and PQ buses, dQ at PQ buses only.
ad::Tensor step_residual(const ad::Tensor& v_mag, const ad::Tensor& theta, const GraphBatch& batch);

// Tape counterpart of discounted_sum over per-step tensors of equal shape.
ad::Tensor discounted_sum(std::span<const ad::Tensor> residuals, double gamma);

// Discounted residual over V^(1)..V^(K) of a trajectory, per graph.
ad::Tensor physics_loss(const Trajectory& trajectory, const GraphBatch& batch, double gamma);

// Per-graph RMSE over the stacked non-slack (V, theta) of the final state.
ad::Tensor data_loss(const Trajectory& trajectory, const GraphBatch& batch);

// Per-graph loss columns; total = data + lambda_pf * physics.
struct LossTerms {
    ad::Tensor data;
    ad::Tensor physics;
    ad::Tensor total;
};

LossTerms loss_terms(const Trajectory& trajectory, const GraphBatch& batch, const LossConfig& config);

}  // namespace gridflow
