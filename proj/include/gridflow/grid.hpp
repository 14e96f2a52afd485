#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace gridflow {

using Complex = std::complex<double>;

enum class BusType { Slack, PV, PQ };
enum class Regime { MV, HV };

std::string to_string(BusType type);
std::string to_string(Regime regime);
BusType bus_type_from_string(const std::string& text);
Regime regime_from_string(const std::string& text);

// Nominal system frequency used for shunt capacitance conversion.
inline constexpr double kSystemFrequencyHz = 50.0;

struct Bus {
    std::size_t id = 0;
    BusType type = BusType::PQ;
    double p_set = 0.0;  // p.u. net injection
    double q_set = 0.0;  // p.u.; ignored for PV during solving
    double v_set = 1.0;  // p.u.; meaningful for Slack/PV
    double theta_set = 0.0;
};

// pi-equivalent line; b_shunt is the total charging susceptance, split half per end.
struct Line {
    std::size_t from = 0;
    std::size_t to = 0;
    double r = 0.0;
    double x = 0.0;
    double b_shunt = 0.0;
    double length_km = 0.0;

    Complex series_admittance() const;
};

struct Grid {
    std::vector<Bus> buses;
    std::vector<Line> lines;
    double s_base = 10.0;  // MVA
    double v_base = 10.0;  // kV
    Regime regime = Regime::MV;

    std::size_t size() const { return buses.size(); }
    std::size_t slack_index() const;
};

// Throws std::invalid_argument describing the first violated invariant.
void validate(const Grid& grid);
bool is_connected(const Grid& grid);

/// Bus admittance matrix with only the diagonal and line-coupled
/// off-diagonals stored. Off-diagonal entries are kept in both directions,
/// sorted by (row, col).
class AdmittanceMatrix {
public:
    struct Entry {
        std::size_t row;
        std::size_t col;
        Complex value;
    };

    AdmittanceMatrix() = default;
    AdmittanceMatrix(std::size_t n, std::vector<Complex> diagonal, std::vector<Entry> off_diagonal);

    std::size_t size() const { return n_; }
    std::size_t nonzeros() const { return n_ + off_diagonal_.size(); }
    const Complex& diagonal(std::size_t i) const { return diagonal_[i]; }
    std::span<const Complex> diagonal() const { return diagonal_; }
    std::span<const Entry> off_diagonal() const { return off_diagonal_; }

    Complex at(std::size_t row, std::size_t col) const;
    std::vector<Complex> multiply(std::span<const Complex> v) const;
    std::vector<std::vector<Complex>> dense() const;
    AdmittanceMatrix scaled(double factor) const;

private:
    std::size_t n_ = 0;
    std::vector<Complex> diagonal_;
    std::vector<Entry> off_diagonal_;
};

/// Parallel lines between the same pair are merged by adding admittances.
/// Throws std::invalid_argument("degenerate line ...") when r = x = 0.
AdmittanceMatrix build_ybus(const Grid& grid);

struct PerUnitLine {
    double r = 0.0;
    double x = 0.0;
    double b_shunt = 0.0;
};

PerUnitLine to_per_unit(double r_ohm_per_km, double x_ohm_per_km, double c_nf_per_km, double length_km,
                        double s_base_mva, double v_base_kv);

inline double base_impedance(double s_base_mva, double v_base_kv) { return v_base_kv * v_base_kv / s_base_mva; }

// Complex bus voltages in polar form.
struct VoltageProfile {
    std::vector<double> v_mag;
    std::vector<double> theta;

    std::vector<Complex> complex() const;
};

inline constexpr std::size_t kNodeFeatureDim = 8;
inline constexpr std::size_t kEdgeFeatureDim = 4;

// Row-major N x 8: [p, q, slack, pv, pq, v_setpoint_or_zero, v_init, theta_init]
std::vector<double> node_features(const Grid& grid, const VoltageProfile& init);
// [g, b, b_shunt/2, r/x] with g + jb = 1/(r + jx)
std::array<double, kEdgeFeatureDim> edge_features(const Line& line);

nlohmann::json to_json(const Grid& grid);
Grid grid_from_json(const nlohmann::json& j);

}  // namespace gridflow
