#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "gridflow/grid.hpp"
#include "gridflow/power_flow.hpp"
#include "gridflow/rng.hpp"

namespace gridflow {

struct Range {
    double low = 0.0;
    double high = 0.0;
};

// Physical parameter ranges of one voltage regime, in engineering units.
struct RegimeRanges {
    double s_base_mva = 10.0;
    double v_base_kv = 10.0;
    Range length_km;
    Range r_ohm_per_km;
    Range x_ohm_per_km;
    Range c_nf_per_km;
    Range p_mw;
    Range q_mvar;
    Range v_set{0.9, 1.1};

    static RegimeRanges defaults(Regime regime);
};

struct SynthConfig {
    Regime regime = Regime::MV;
    std::size_t n_samples = 3000;
    std::size_t min_buses = 4;
    std::size_t max_buses = 32;
    double extra_edge_prob = 0.1;
    double pv_fraction = 0.2;
    std::uint64_t seed = 0;
    RegimeRanges ranges = RegimeRanges::defaults(Regime::MV);
    NrOptions nr;
    // Converged solutions outside this band are wrong-branch roots and are discarded.
    Range plausible_v{0.7, 1.3};
    double max_abs_angle = 1.5707963267948966;

    static SynthConfig defaults(Regime regime);
    void validate() const;
};

nlohmann::json to_json(const SynthConfig& config);
SynthConfig synth_config_from_json(const nlohmann::json& j);

struct Sample {
    Grid grid;
    PFSolution target;
    // Derived from grid; recomputed on load.
    AdmittanceMatrix ybus;
    VoltageProfile init;
    std::vector<double> node_x;
    std::vector<std::array<double, kEdgeFeatureDim>> edge_e;
};

Sample make_sample(Grid grid, PFSolution target);

struct Splits {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

struct Dataset {
    SynthConfig config;
    std::vector<Sample> samples;
    Splits splits;
    std::size_t attempts = 0;

    double convergence_rate() const {
        return attempts == 0 ? 0.0 : static_cast<double>(samples.size()) / static_cast<double>(attempts);
    }
};

/// Uniform random spanning tree (Pruefer sequence) plus each non-tree pair
/// with probability extra_edge_prob. Bus 0 is the slack; every other bus is
/// PV with probability pv_fraction. Electrical values are left at zero.
Grid sample_topology(std::size_t n_buses, double extra_edge_prob, double pv_fraction, Rng& rng);

// Draws line and injection parameters from the regime's ranges and converts them to per-unit.
Grid sample_parameters(Grid skeleton, Regime regime, const RegimeRanges& ranges, Rng& rng);

// Seeded 1:1:1 shuffle split.
Splits make_splits(std::size_t n, std::uint64_t seed);

// True when every bus magnitude lies in plausible_v and every |angle| <= max_abs_angle.
bool is_plausible(const PFSolution& solution, const SynthConfig& config);

/// Generates samples until n_samples Newton-Raphson-converged, plausible grids are kept,
/// giving up after 10 * n_samples attempts. Attempt k draws from its own
/// child stream of the seed, so generation is identical at any thread count.
Dataset generate_dataset(const SynthConfig& config);

void save_jsonl(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_jsonl(const std::filesystem::path& path);

}  // namespace gridflow
