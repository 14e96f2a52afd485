#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridflow/adaptation.hpp"
#include "gridflow/dataset.hpp"
#include "gridflow/losses.hpp"
#include "gridflow/model.hpp"
#include "gridflow/stats.hpp"
#include "gridflow/training.hpp"

namespace gridflow {

struct ExperimentConfig {
    SynthConfig mv = SynthConfig::defaults(Regime::MV);
    SynthConfig hv = SynthConfig::defaults(Regime::HV);
    ModelConfig model;
    LossConfig loss;
    TrainConfig source;  // MV pre-training
    TrainConfig adapt;   // HV adaptation
    LoraConfig lora;
    std::vector<AdaptMode> modes{AdaptMode::ZeroShot, AdaptMode::FullFT, AdaptMode::HeadOnly, AdaptMode::LoraOnly,
                                 AdaptMode::LoraPHead};
    std::vector<AdaptMode> fewshot_modes{AdaptMode::FullFT, AdaptMode::LoraPHead};
    std::vector<double> betas{1, 2, 5, 10, 20, 50, 100};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::size_t wilcoxon_n = 500;
    std::uint64_t seed = 0;  // datasets and source model

    static ExperimentConfig desk();
    static ExperimentConfig paper();
    void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
// Missing keys keep the values of `base`.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const ExperimentConfig& base);
// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& j);

// Source model trained on the MV train split (model init seeded by config.seed).
Model train_source(const Dataset& mv, const ExperimentConfig& config, TrainResult* log = nullptr);

struct AdaptRun {
    MetricsRecord record;  // HV test metrics with MV retention filled in
    Evaluation hv_test;
    Evaluation mv_test;
    TrainResult train;
    Model model;
};

/// One adaptation cell: copy the source, attach adapters for Lora modes
/// (seeded by `seed`), set freeze flags, train on the beta-subset of the HV
/// train split with the full HV validation split, then evaluate on both test
/// splits. `base_mv_rmse` is the source model's MV test RMSE.
AdaptRun run_adaptation(const Model& source, const Dataset& hv, const Dataset& mv, double base_mv_rmse, AdaptMode mode,
                        double beta, std::uint64_t seed, const ExperimentConfig& config);

struct ComparisonRow {
    std::string method;
    std::string reference;
    WilcoxonResult test;
    double p_adjusted = 1.0;
};

/// Paired tests of each method's per-sample HV errors against the reference
/// on a bus-count-stratified subsample, Bonferroni-adjusted over the family.
std::vector<ComparisonRow> compare_methods(const std::vector<std::pair<std::string, Evaluation>>& methods,
                                           const std::string& reference, std::size_t n, std::uint64_t seed);

struct PipelineResult {
    double base_mv_rmse = 0.0;
    MetricsRecord source_mv;
    std::vector<MetricsRecord> table;    // modes x seeds at beta = 100
    std::vector<MetricsRecord> fewshot;  // betas x fewshot_modes x seeds
    std::vector<ComparisonRow> stats;
    std::vector<ParetoPoint> pareto;
    std::vector<std::filesystem::path> outputs;
};

using Progress = std::function<void(const std::string&)>;

/// Everything: datasets, source training, the adaptation table, the few-shot
/// sweep, significance tests and Pareto points. Writes CSV, SVG and
/// manifest.json under `out`.
PipelineResult run_pipeline(const ExperimentConfig& config, const std::filesystem::path& out,
                            const Progress& progress = {});

// ---- CSV / manifest helpers ----
void write_text(const std::filesystem::path& path, const std::string& text);
std::string epoch_csv(const std::vector<EpochLog>& log);
std::string metrics_csv(const std::vector<MetricsRecord>& records);
std::string pareto_csv(const std::vector<ParetoPoint>& points);
std::string stats_csv(const std::vector<ComparisonRow>& rows);
std::string errors_csv(const Evaluation& eval);
std::string loss_curve_svg(const std::string& title, const std::vector<std::pair<std::string, std::vector<EpochLog>>>& runs);
std::string fewshot_svg(const std::vector<MetricsRecord>& records);
std::string pareto_svg(const std::vector<ParetoPoint>& points);
void write_manifest(const std::filesystem::path& out, const std::string& command, const nlohmann::json& config,
                    const std::vector<std::filesystem::path>& outputs);

}  // namespace gridflow
