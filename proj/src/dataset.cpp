#include "gridflow/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include "gridflow/threading.hpp"

namespace gridflow {

RegimeRanges RegimeRanges::defaults(Regime regime) {
    RegimeRanges r;
    if (regime == Regime::MV) {
        r.s_base_mva = 10.0;
        r.v_base_kv = 10.0;
        r.length_km = {1.0, 20.0};
        r.r_ohm_per_km = {0.5, 0.6};
        r.x_ohm_per_km = {0.30, 0.35};
        r.c_nf_per_km = {8.0, 14.0};
        r.p_mw = {-5.0, 5.0};
        r.q_mvar = {-2.0, 2.0};
    } else {
        r.s_base_mva = 100.0;
        r.v_base_kv = 110.0;
        r.length_km = {1.0, 50.0};
        r.r_ohm_per_km = {0.15, 0.20};
        r.x_ohm_per_km = {0.35, 0.45};
        r.c_nf_per_km = {8.0, 10.0};
        r.p_mw = {-300.0, 300.0};
        r.q_mvar = {-150.0, 150.0};
    }
    return r;
}

SynthConfig SynthConfig::defaults(Regime regime) {
    SynthConfig c;
    c.regime = regime;
    c.n_samples = regime == Regime::MV ? 3000 : 1500;
    c.ranges = RegimeRanges::defaults(regime);
    return c;
}

void SynthConfig::validate() const {
    auto check_range = [](const Range& r, const char* name) {
        if (!(r.low <= r.high)) throw std::invalid_argument(std::string("synth config: range ") + name + " has low > high");
    };
    if (n_samples == 0) throw std::invalid_argument("synth config: n_samples must be positive");
    if (min_buses < 2 || max_buses > 512 || min_buses > max_buses) {
        throw std::invalid_argument("synth config: bus range must satisfy 2 <= min <= max <= 512");
    }
    if (extra_edge_prob < 0.0 || extra_edge_prob > 1.0) throw std::invalid_argument("synth config: extra_edge_prob outside [0,1]");
    if (pv_fraction < 0.0 || pv_fraction > 1.0) throw std::invalid_argument("synth config: pv_fraction outside [0,1]");
    if (!(ranges.s_base_mva > 0.0) || !(ranges.v_base_kv > 0.0)) throw std::invalid_argument("synth config: bases must be positive");
    check_range(ranges.length_km, "length_km");
    check_range(ranges.r_ohm_per_km, "r");
    check_range(ranges.x_ohm_per_km, "x");
    check_range(ranges.c_nf_per_km, "c");
    check_range(ranges.p_mw, "p");
    check_range(ranges.q_mvar, "q");
    check_range(ranges.v_set, "v_set");
    if (ranges.v_set.low < 0.9 || ranges.v_set.high > 1.1) throw std::invalid_argument("synth config: v_set range must lie in [0.9, 1.1]");
    check_range(plausible_v, "plausible_v");
    if (!(max_abs_angle > 0.0)) throw std::invalid_argument("synth config: max_abs_angle must be positive");
    if (!(ranges.x_ohm_per_km.low > 0.0) || !(ranges.length_km.low > 0.0)) {
        throw std::invalid_argument("synth config: reactance and length must be positive");
    }
}

namespace {

nlohmann::json range_json(const Range& r) { return nlohmann::json::array({r.low, r.high}); }
Range range_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

nlohmann::json to_json(const SynthConfig& c) {
    return {{"regime", to_string(c.regime)},
            {"n_samples", c.n_samples},
            {"bus_range", {c.min_buses, c.max_buses}},
            {"extra_edge_prob", c.extra_edge_prob},
            {"pv_fraction", c.pv_fraction},
            {"seed", c.seed},
            {"nr_tolerance", c.nr.tolerance},
            {"nr_max_iterations", c.nr.max_iterations},
            {"plausible_v", range_json(c.plausible_v)},
            {"max_abs_angle", c.max_abs_angle},
            {"ranges",
             {{"s_base_mva", c.ranges.s_base_mva},
              {"v_base_kv", c.ranges.v_base_kv},
              {"length_km", range_json(c.ranges.length_km)},
              {"r_ohm_per_km", range_json(c.ranges.r_ohm_per_km)},
              {"x_ohm_per_km", range_json(c.ranges.x_ohm_per_km)},
              {"c_nf_per_km", range_json(c.ranges.c_nf_per_km)},
              {"p_mw", range_json(c.ranges.p_mw)},
              {"q_mvar", range_json(c.ranges.q_mvar)},
              {"v_set", range_json(c.ranges.v_set)}}}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
    const auto regime = regime_from_string(j.value("regime", std::string("MV")));
    SynthConfig c = SynthConfig::defaults(regime);
    c.n_samples = j.value("n_samples", c.n_samples);
    if (j.contains("bus_range")) {
        c.min_buses = j["bus_range"].at(0).get<std::size_t>();
        c.max_buses = j["bus_range"].at(1).get<std::size_t>();
    }
    c.extra_edge_prob = j.value("extra_edge_prob", c.extra_edge_prob);
    c.pv_fraction = j.value("pv_fraction", c.pv_fraction);
    c.seed = j.value("seed", c.seed);
    c.nr.tolerance = j.value("nr_tolerance", c.nr.tolerance);
    c.nr.max_iterations = j.value("nr_max_iterations", c.nr.max_iterations);
    if (j.contains("plausible_v")) c.plausible_v = range_from(j["plausible_v"]);
    c.max_abs_angle = j.value("max_abs_angle", c.max_abs_angle);
    if (j.contains("ranges")) {
        const auto& r = j["ranges"];
        c.ranges.s_base_mva = r.value("s_base_mva", c.ranges.s_base_mva);
        c.ranges.v_base_kv = r.value("v_base_kv", c.ranges.v_base_kv);
        if (r.contains("length_km")) c.ranges.length_km = range_from(r["length_km"]);
        if (r.contains("r_ohm_per_km")) c.ranges.r_ohm_per_km = range_from(r["r_ohm_per_km"]);
        if (r.contains("x_ohm_per_km")) c.ranges.x_ohm_per_km = range_from(r["x_ohm_per_km"]);
        if (r.contains("c_nf_per_km")) c.ranges.c_nf_per_km = range_from(r["c_nf_per_km"]);
        if (r.contains("p_mw")) c.ranges.p_mw = range_from(r["p_mw"]);
        if (r.contains("q_mvar")) c.ranges.q_mvar = range_from(r["q_mvar"]);
        if (r.contains("v_set")) c.ranges.v_set = range_from(r["v_set"]);
    }
    return c;
}

Sample make_sample(Grid grid, PFSolution target) {
    Sample s;
    s.ybus = build_ybus(grid);
    s.init = flat_init(grid);
    s.node_x = node_features(grid, s.init);
    s.edge_e.reserve(grid.lines.size());
    for (const auto& line : grid.lines) s.edge_e.push_back(edge_features(line));
    s.grid = std::move(grid);
    s.target = std::move(target);
    return s;
}

Grid sample_topology(std::size_t n_buses, double extra_edge_prob, double pv_fraction, Rng& rng) {
    if (n_buses < 2) throw std::invalid_argument("sample_topology: need at least 2 buses");
    Grid grid;
    grid.buses.resize(n_buses);
    std::bernoulli_distribution pv_draw(pv_fraction);
    for (std::size_t i = 0; i < n_buses; ++i) {
        grid.buses[i].id = i;
        grid.buses[i].type = i == 0 ? BusType::Slack : (pv_draw(rng) ? BusType::PV : BusType::PQ);
    }

    // Decode a uniformly random Pruefer sequence into a labelled tree.
    std::vector<std::size_t> code(n_buses - 2);
    std::uniform_int_distribution<std::size_t> label(0, n_buses - 1);
    for (auto& c : code) c = label(rng);
    std::vector<std::size_t> degree(n_buses, 1);
    for (auto c : code) ++degree[c];
    std::set<std::pair<std::size_t, std::size_t>> tree;
    for (auto c : code) {
        std::size_t leaf = 0;
        while (degree[leaf] != 1) ++leaf;
        tree.insert(std::minmax(leaf, c));
        --degree[leaf];
        --degree[c];
    }
    std::size_t u = n_buses, v = n_buses;
    for (std::size_t i = 0; i < n_buses; ++i) {
        if (degree[i] == 1) (u == n_buses ? u : v) = i;
    }
    tree.insert(std::minmax(u, v));

    for (const auto& [a, b] : tree) grid.lines.push_back({a, b, 0.0, 0.0, 0.0, 0.0});
    std::bernoulli_distribution extra(extra_edge_prob);
    for (std::size_t a = 0; a < n_buses; ++a) {
        for (std::size_t b = a + 1; b < n_buses; ++b) {
            if (tree.contains({a, b})) continue;
            if (extra(rng)) grid.lines.push_back({a, b, 0.0, 0.0, 0.0, 0.0});
        }
    }
    return grid;
}

Grid sample_parameters(Grid grid, Regime regime, const RegimeRanges& ranges, Rng& rng) {
    grid.regime = regime;
    grid.s_base = ranges.s_base_mva;
    grid.v_base = ranges.v_base_kv;
    for (auto& line : grid.lines) {
        const double length = uniform(rng, ranges.length_km.low, ranges.length_km.high);
        const double r = uniform(rng, ranges.r_ohm_per_km.low, ranges.r_ohm_per_km.high);
        const double x = uniform(rng, ranges.x_ohm_per_km.low, ranges.x_ohm_per_km.high);
        const double c = uniform(rng, ranges.c_nf_per_km.low, ranges.c_nf_per_km.high);
        const auto pu = to_per_unit(r, x, c, length, ranges.s_base_mva, ranges.v_base_kv);
        line.r = pu.r;
        line.x = pu.x;
        line.b_shunt = pu.b_shunt;
        line.length_km = length;
    }
    for (auto& bus : grid.buses) {
        bus.p_set = 0.0;
        bus.q_set = 0.0;
        bus.theta_set = 0.0;
        bus.v_set = 1.0;
        switch (bus.type) {
            case BusType::Slack:
                bus.v_set = uniform(rng, ranges.v_set.low, ranges.v_set.high);
                break;
            case BusType::PV:
                bus.p_set = uniform(rng, ranges.p_mw.low, ranges.p_mw.high) / ranges.s_base_mva;
                bus.v_set = uniform(rng, ranges.v_set.low, ranges.v_set.high);
                break;
            case BusType::PQ:
                bus.p_set = uniform(rng, ranges.p_mw.low, ranges.p_mw.high) / ranges.s_base_mva;
                bus.q_set = uniform(rng, ranges.q_mvar.low, ranges.q_mvar.high) / ranges.s_base_mva;
                break;
        }
    }
    return grid;
}

Splits make_splits(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(seed, 0x5b117ULL);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t third = n / 3;
    const std::size_t remainder = n - 3 * third;
    const std::size_t n_train = third + (remainder > 0 ? 1 : 0);
    const std::size_t n_val = third + (remainder > 1 ? 1 : 0);
    Splits s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                 order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

bool is_plausible(const PFSolution& solution, const SynthConfig& config) {
    for (std::size_t i = 0; i < solution.v_mag.size(); ++i) {
        if (solution.v_mag[i] < config.plausible_v.low || solution.v_mag[i] > config.plausible_v.high) return false;
        if (std::abs(solution.theta[i]) > config.max_abs_angle) return false;
    }
    return true;
}

namespace {

std::optional<Sample> attempt_sample(const SynthConfig& config, std::size_t attempt) {
    auto rng = make_rng(config.seed, attempt);
    std::uniform_int_distribution<std::size_t> size_draw(config.min_buses, config.max_buses);
    const auto n = size_draw(rng);
    auto grid = sample_topology(n, config.extra_edge_prob, config.pv_fraction, rng);
    grid = sample_parameters(std::move(grid), config.regime, config.ranges, rng);
    if (!is_connected(grid)) return std::nullopt;
    const auto ybus = build_ybus(grid);
    auto solution = solve_nr(grid, ybus, flat_init(grid), config.nr);
    if (!solution.converged || !is_plausible(solution, config)) return std::nullopt;
    return make_sample(std::move(grid), std::move(solution));
}

}  // namespace

Dataset generate_dataset(const SynthConfig& config) {
    config.validate();
    Dataset dataset;
    dataset.config = config;
    const std::size_t budget = 10 * config.n_samples;
    std::size_t next = 0;
    while (dataset.samples.size() < config.n_samples && next < budget) {
        const std::size_t missing = config.n_samples - dataset.samples.size();
        const std::size_t block = std::min(budget - next, std::max<std::size_t>(64, 2 * missing));
        std::vector<std::optional<Sample>> results(block);
        parallel_for(block, [&](std::size_t k) { results[k] = attempt_sample(config, next + k); });
        for (std::size_t k = 0; k < block && dataset.samples.size() < config.n_samples; ++k) {
            dataset.attempts = next + k + 1;
            if (results[k]) dataset.samples.push_back(std::move(*results[k]));
        }
        next += block;
    }
    if (dataset.samples.size() < config.n_samples) {
        std::ostringstream msg;
        msg << "generation budget exhausted: kept " << dataset.samples.size() << " of " << config.n_samples
            << " samples after " << dataset.attempts << " attempts (convergence rate " << dataset.convergence_rate()
            << ")";
        throw std::runtime_error(msg.str());
    }
    dataset.splits = make_splits(dataset.samples.size(), config.seed);
    return dataset;
}

void save_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset file " + path.string());
    nlohmann::json header = {{"format", "gridflow-dataset"},
                             {"version", 1},
                             {"config", to_json(dataset.config)},
                             {"attempts", dataset.attempts},
                             {"n_samples", dataset.samples.size()},
                             {"splits",
                              {{"train", dataset.splits.train},
                               {"val", dataset.splits.val},
                               {"test", dataset.splits.test}}}};
    out << header.dump() << '\n';
    for (const auto& s : dataset.samples) {
        nlohmann::json line = {{"grid", to_json(s.grid)},
                               {"target",
                                {{"v", s.target.v_mag},
                                 {"theta", s.target.theta},
                                 {"iterations", s.target.iterations},
                                 {"max_mismatch", s.target.max_mismatch}}}};
        out << line.dump() << '\n';
    }
    if (!out) throw std::runtime_error("failed writing dataset file " + path.string());
}

Dataset load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset file " + path.string());
    Dataset dataset;
    std::string text;
    std::size_t line_no = 0;
    std::size_t expected = 0;
    while (std::getline(in, text)) {
        ++line_no;
        if (text.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(text);
            if (line_no == 1) {
                if (j.value("format", std::string()) != "gridflow-dataset") throw std::runtime_error("not a gridflow dataset header");
                dataset.config = synth_config_from_json(j.at("config"));
                dataset.attempts = j.value("attempts", std::size_t{0});
                expected = j.at("n_samples").get<std::size_t>();
                const auto& splits = j.at("splits");
                dataset.splits.train = splits.at("train").get<std::vector<std::size_t>>();
                dataset.splits.val = splits.at("val").get<std::vector<std::size_t>>();
                dataset.splits.test = splits.at("test").get<std::vector<std::size_t>>();
                continue;
            }
            auto grid = grid_from_json(j.at("grid"));
            validate(grid);
            const auto& t = j.at("target");
            PFSolution target;
            target.v_mag = t.at("v").get<std::vector<double>>();
            target.theta = t.at("theta").get<std::vector<double>>();
            target.iterations = t.value("iterations", 0);
            target.max_mismatch = t.value("max_mismatch", 0.0);
            target.converged = true;
            if (target.v_mag.size() != grid.size() || target.theta.size() != grid.size()) {
                throw std::runtime_error("target size does not match grid");
            }
            dataset.samples.push_back(make_sample(std::move(grid), std::move(target)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (line_no == 0) throw std::runtime_error(path.string() + ": line 1: missing header");
    if (dataset.samples.size() != expected) {
        throw std::runtime_error(path.string() + ": header declares " + std::to_string(expected) + " samples, found " +
                                 std::to_string(dataset.samples.size()));
    }
    return dataset;
}

}  // namespace gridflow
