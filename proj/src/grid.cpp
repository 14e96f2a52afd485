#include "gridflow/grid.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <queue>
#include <stdexcept>

namespace gridflow {

std::string to_string(BusType type) {
    switch (type) {
        case BusType::Slack: return "slack";
        case BusType::PV: return "pv";
        case BusType::PQ: return "pq";
    }
    return "pq";
}

std::string to_string(Regime regime) { return regime == Regime::MV ? "MV" : "HV"; }

BusType bus_type_from_string(const std::string& text) {
    if (text == "slack") return BusType::Slack;
    if (text == "pv") return BusType::PV;
    if (text == "pq") return BusType::PQ;
    throw std::invalid_argument("unknown bus type '" + text + "'");
}

Regime regime_from_string(const std::string& text) {
    if (text == "MV" || text == "mv") return Regime::MV;
    if (text == "HV" || text == "hv") return Regime::HV;
    throw std::invalid_argument("unknown regime '" + text + "' (expected MV or HV)");
}

Complex Line::series_admittance() const {
    if (r == 0.0 && x == 0.0) {
        throw std::invalid_argument("degenerate line " + std::to_string(from) + "-" + std::to_string(to) +
                                    ": zero impedance");
    }
    return 1.0 / Complex(r, x);
}

std::size_t Grid::slack_index() const {
    for (const auto& bus : buses) {
        if (bus.type == BusType::Slack) return bus.id;
    }
    throw std::invalid_argument("grid has no slack bus");
}

bool is_connected(const Grid& grid) {
    const std::size_t n = grid.size();
    if (n == 0) return false;
    std::vector<std::vector<std::size_t>> adjacency(n);
    for (const auto& line : grid.lines) {
        if (line.from >= n || line.to >= n) return false;
        adjacency[line.from].push_back(line.to);
        adjacency[line.to].push_back(line.from);
    }
    std::vector<bool> seen(n, false);
    std::queue<std::size_t> frontier;
    frontier.push(0);
    seen[0] = true;
    std::size_t visited = 1;
    while (!frontier.empty()) {
        const auto node = frontier.front();
        frontier.pop();
        for (auto next : adjacency[node]) {
            if (!seen[next]) {
                seen[next] = true;
                ++visited;
                frontier.push(next);
            }
        }
    }
    return visited == n;
}

void validate(const Grid& grid) {
    if (grid.buses.empty()) throw std::invalid_argument("grid has no buses");
    if (grid.s_base <= 0.0 || grid.v_base <= 0.0) throw std::invalid_argument("grid bases must be positive");
    std::size_t slack_count = 0;
    for (std::size_t i = 0; i < grid.buses.size(); ++i) {
        const auto& bus = grid.buses[i];
        if (bus.id != i) throw std::invalid_argument("bus ids must equal their index");
        if (bus.type == BusType::Slack) ++slack_count;
        if (bus.type != BusType::PQ && (bus.v_set < 0.9 || bus.v_set > 1.1)) {
            throw std::invalid_argument("bus " + std::to_string(i) + ": v_set outside [0.9, 1.1]");
        }
    }
    if (slack_count != 1) {
        throw std::invalid_argument("grid must have exactly one slack bus, found " + std::to_string(slack_count));
    }
    for (const auto& line : grid.lines) {
        const auto where = "line " + std::to_string(line.from) + "-" + std::to_string(line.to);
        if (line.from >= grid.size() || line.to >= grid.size()) throw std::invalid_argument(where + ": bad endpoint");
        if (line.from == line.to) throw std::invalid_argument(where + ": self loop");
        if (!(line.x > 0.0)) throw std::invalid_argument(where + ": reactance must be positive");
        if (line.r < 0.0 || line.b_shunt < 0.0) throw std::invalid_argument(where + ": negative parameter");
    }
    if (!is_connected(grid)) throw std::invalid_argument("grid is not connected");
}

AdmittanceMatrix::AdmittanceMatrix(std::size_t n, std::vector<Complex> diagonal, std::vector<Entry> off_diagonal)
    : n_(n), diagonal_(std::move(diagonal)), off_diagonal_(std::move(off_diagonal)) {
    std::sort(off_diagonal_.begin(), off_diagonal_.end(),
              [](const Entry& a, const Entry& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
}

Complex AdmittanceMatrix::at(std::size_t row, std::size_t col) const {
    if (row == col) return diagonal_.at(row);
    auto it = std::lower_bound(off_diagonal_.begin(), off_diagonal_.end(), std::pair{row, col},
                               [](const Entry& e, const std::pair<std::size_t, std::size_t>& key) {
                                   return e.row != key.first ? e.row < key.first : e.col < key.second;
                               });
    if (it != off_diagonal_.end() && it->row == row && it->col == col) return it->value;
    return {};
}

std::vector<Complex> AdmittanceMatrix::multiply(std::span<const Complex> v) const {
    if (v.size() != n_) throw std::invalid_argument("admittance multiply: dimension mismatch");
    std::vector<Complex> out(n_);
    for (std::size_t i = 0; i < n_; ++i) out[i] = diagonal_[i] * v[i];
    for (const auto& e : off_diagonal_) out[e.row] += e.value * v[e.col];
    return out;
}

std::vector<std::vector<Complex>> AdmittanceMatrix::dense() const {
    std::vector<std::vector<Complex>> out(n_, std::vector<Complex>(n_));
    for (std::size_t i = 0; i < n_; ++i) out[i][i] = diagonal_[i];
    for (const auto& e : off_diagonal_) out[e.row][e.col] = e.value;
    return out;
}

AdmittanceMatrix AdmittanceMatrix::scaled(double factor) const {
    auto diagonal = diagonal_;
    auto entries = off_diagonal_;
    for (auto& y : diagonal) y *= factor;
    for (auto& e : entries) e.value *= factor;
    return AdmittanceMatrix(n_, std::move(diagonal), std::move(entries));
}

AdmittanceMatrix build_ybus(const Grid& grid) {
    const std::size_t n = grid.size();
    std::vector<Complex> diagonal(n);
    std::map<std::pair<std::size_t, std::size_t>, Complex> coupling;
    for (const auto& line : grid.lines) {
        const Complex y = line.series_admittance();
        const Complex half_shunt(0.0, line.b_shunt / 2.0);
        diagonal[line.from] += y + half_shunt;
        diagonal[line.to] += y + half_shunt;
        coupling[{line.from, line.to}] -= y;
        coupling[{line.to, line.from}] -= y;
    }
    std::vector<AdmittanceMatrix::Entry> entries;
    entries.reserve(coupling.size());
    for (const auto& [key, value] : coupling) entries.push_back({key.first, key.second, value});
    return AdmittanceMatrix(n, std::move(diagonal), std::move(entries));
}

PerUnitLine to_per_unit(double r_ohm_per_km, double x_ohm_per_km, double c_nf_per_km, double length_km,
                        double s_base_mva, double v_base_kv) {
    if (!(s_base_mva > 0.0) || !(v_base_kv > 0.0)) throw std::invalid_argument("per-unit bases must be positive");
    if (length_km < 0.0) throw std::invalid_argument("line length must be non-negative");
    const double z_base = base_impedance(s_base_mva, v_base_kv);
    const double omega = 2.0 * std::numbers::pi * kSystemFrequencyHz;
    return {r_ohm_per_km * length_km / z_base, x_ohm_per_km * length_km / z_base,
            omega * c_nf_per_km * 1e-9 * length_km * z_base};
}

std::vector<Complex> VoltageProfile::complex() const {
    std::vector<Complex> out(v_mag.size());
    for (std::size_t i = 0; i < v_mag.size(); ++i) out[i] = std::polar(v_mag[i], theta[i]);
    return out;
}

std::vector<double> node_features(const Grid& grid, const VoltageProfile& init) {
    const std::size_t n = grid.size();
    if (init.v_mag.size() != n || init.theta.size() != n) {
        throw std::invalid_argument("node_features: initial state size does not match grid");
    }
    std::vector<double> out(n * kNodeFeatureDim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& bus = grid.buses[i];
        double* row = out.data() + i * kNodeFeatureDim;
        row[0] = bus.p_set;
        row[1] = bus.q_set;
        row[2] = bus.type == BusType::Slack ? 1.0 : 0.0;
        row[3] = bus.type == BusType::PV ? 1.0 : 0.0;
        row[4] = bus.type == BusType::PQ ? 1.0 : 0.0;
        row[5] = bus.type == BusType::PQ ? 0.0 : bus.v_set;
        row[6] = init.v_mag[i];
        row[7] = init.theta[i];
    }
    return out;
}

std::array<double, kEdgeFeatureDim> edge_features(const Line& line) {
    if (line.x == 0.0) throw std::invalid_argument("edge_features: zero reactance");
    const Complex y = line.series_admittance();
    return {y.real(), y.imag(), line.b_shunt / 2.0, line.r / line.x};
}

nlohmann::json to_json(const Grid& grid) {
    nlohmann::json buses = nlohmann::json::array();
    for (const auto& bus : grid.buses) {
        buses.push_back({{"type", to_string(bus.type)}, {"p", bus.p_set}, {"q", bus.q_set}, {"v_set", bus.v_set}});
    }
    nlohmann::json lines = nlohmann::json::array();
    for (const auto& line : grid.lines) {
        lines.push_back({{"from", line.from},
                         {"to", line.to},
                         {"r", line.r},
                         {"x", line.x},
                         {"b", line.b_shunt},
                         {"len_km", line.length_km}});
    }
    return {{"s_base", grid.s_base},
            {"v_base", grid.v_base},
            {"regime", to_string(grid.regime)},
            {"buses", std::move(buses)},
            {"lines", std::move(lines)}};
}

Grid grid_from_json(const nlohmann::json& j) {
    Grid grid;
    grid.s_base = j.at("s_base").get<double>();
    grid.v_base = j.at("v_base").get<double>();
    grid.regime = regime_from_string(j.at("regime").get<std::string>());
    std::size_t index = 0;
    for (const auto& b : j.at("buses")) {
        Bus bus;
        bus.id = index++;
        bus.type = bus_type_from_string(b.at("type").get<std::string>());
        bus.p_set = b.at("p").get<double>();
        bus.q_set = b.at("q").get<double>();
        bus.v_set = b.value("v_set", 1.0);
        grid.buses.push_back(bus);
    }
    for (const auto& l : j.at("lines")) {
        grid.lines.push_back({l.at("from").get<std::size_t>(), l.at("to").get<std::size_t>(), l.at("r").get<double>(),
                              l.at("x").get<double>(), l.at("b").get<double>(), l.value("len_km", 0.0)});
    }
    return grid;
}

}  // namespace gridflow
