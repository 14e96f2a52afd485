#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridflow/dataset.hpp"
#include "gridflow/losses.hpp"
#include "gridflow/model.hpp"

namespace gridflow {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 64;
    double lr = 1e-4;
    double weight_decay = 1e-3;
    double t0 = 10.0;      // first restart period, epochs
    double t_mult = 2.0;
    double lr_min = 1e-6;
    std::uint64_t seed = 0;
    // Gradients are computed per fixed-size chunk and summed in chunk order,
    // so results do not depend on the worker count.
    std::size_t chunk_size = 16;

    static TrainConfig desk();
    static TrainConfig paper();
    void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0.0;         // rate at the start of the epoch
    double loss_data = 0.0;  // mean per-sample data loss over the epoch
    double loss_pf = 0.0;    // mean per-sample physics loss over the epoch
    double val_rmse = 0.0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;  // 0 when nothing was trained
    double best_val_rmse = 0.0;
    std::size_t steps = 0;
};

/// Mini-batch AdamW on the trainable parameters with the cosine warm-restart
/// schedule. Batches are reshuffled each epoch from the config seed. After
/// every epoch the validation RMSE is measured; the model left in `model` is
/// the best-validation checkpoint. With no trainable parameters the model is
/// returned untouched.
TrainResult train(Model& model, const std::vector<Sample>& samples, std::span<const std::size_t> train_idx,
                  std::span<const std::size_t> val_idx, const LossConfig& loss, const TrainConfig& config);

struct Evaluation {
    double rmse_all = 0.0;        // stacked non-slack (V, theta[rad])
    double rmse_v = 0.0;
    double rmse_theta_deg = 0.0;
    double l_pf = 0.0;            // mean per-sample physics loss
    std::vector<double> sample_rmse;      // per-sample rmse_all
    std::vector<std::size_t> bus_counts;  // per sample, for stratification
};

Evaluation evaluate(const Model& model, const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                    const LossConfig& loss);

// RMSE of the untrained starting point (flat start) over the same samples.
double flat_start_rmse(const std::vector<Sample>& samples, std::span<const std::size_t> indices);

struct Retention {
    double ratio = 0.0;    // 100 * adapted / base, as printed in the paper's footnote
    double inverse = 0.0;  // 100 * base / adapted
};

Retention retention(double adapted_mv_rmse, double base_mv_rmse);

struct MetricsRecord {
    std::string regime;
    std::string mode;
    double beta = 100.0;
    std::uint64_t seed = 0;
    double rmse_all = 0.0;
    double rmse_v = 0.0;
    double rmse_theta_deg = 0.0;
    double l_pf = 0.0;
    double rho = 0.0;
    double p_reduced = 0.0;
    double r_ret = 0.0;
    double r_ret_inverse = 0.0;
    std::size_t trainable = 0;
    std::size_t base_params = 0;
};

MetricsRecord make_record(const Model& model, const Evaluation& eval, std::string regime, std::string mode,
                          double beta, std::uint64_t seed);
nlohmann::json to_json(const MetricsRecord& record);
std::string metrics_csv_header();
std::string to_csv_row(const MetricsRecord& record);

/// First ceil(beta% * n) entries of a seeded permutation of `train`, sorted.
/// Smaller beta gives a subset of larger beta for the same seed; beta = 100
/// returns `train` itself. Throws if beta is outside (0, 100] or selects
/// no sample.
std::vector<std::size_t> fewshot_subset(std::span<const std::size_t> train, double beta_percent, std::uint64_t seed);

struct ParetoPoint {
    std::string label;
    double rho = 0.0;
    double rmse = 0.0;
    bool optimal = false;
};

// Flags points not dominated in (rho, rmse): <= in both with one strict.
std::vector<ParetoPoint> pareto_front(std::vector<ParetoPoint> points);

}  // namespace gridflow
