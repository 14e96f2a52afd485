#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gridflow/grid.hpp"

namespace gridflow {

struct PFSolution {
    std::vector<double> v_mag;
    std::vector<double> theta;
    bool converged = false;
    bool singular = false;
    int iterations = 0;
    double max_mismatch = 0.0;

    VoltageProfile profile() const { return {v_mag, theta}; }
};

struct Mismatch {
    std::vector<double> dp;
    std::vector<double> dq;
};

// dP = p_set - Re(V .* conj(Y V)), dQ = q_set - Im(V .* conj(Y V)) for every bus.
Mismatch compute_mismatch(std::span<const Complex> v, const AdmittanceMatrix& ybus, std::span<const double> p_set,
                          std::span<const double> q_set);

// Which buses carry free unknowns: angles for PV+PQ, magnitudes for PQ, both in index order.
struct UnknownLayout {
    std::vector<std::size_t> angle_buses;
    std::vector<std::size_t> magnitude_buses;

    std::size_t size() const { return angle_buses.size() + magnitude_buses.size(); }
};

UnknownLayout unknown_layout(std::span<const BusType> types);
std::vector<BusType> bus_types(const Grid& grid);

/// Jacobian of the masked mismatch vector [dP(angle buses); dQ(magnitude buses)]
/// with respect to [theta(angle buses); V(magnitude buses)]. Because it
/// differentiates the mismatch rather than the computed injection, it is the
/// negative of the textbook power-flow Jacobian.
Eigen::MatrixXd jacobian(std::span<const double> v_mag, std::span<const double> theta,
                         const AdmittanceMatrix& ybus, std::span<const BusType> types);

struct NrOptions {
    double tolerance = 1e-8;
    int max_iterations = 30;
};

/// Polar Newton-Raphson. Slack (V, theta) and PV magnitudes are pinned to
/// their setpoints. Never throws on numerical failure: a singular Jacobian or
/// a non-finite iterate yields converged = false with the best iterate seen.
PFSolution solve_nr(const Grid& grid, const AdmittanceMatrix& ybus, const VoltageProfile& init,
                    const NrOptions& options = {});

// Slack/PV at their setpoints, PQ at 1.0 p.u., all angles zero.
VoltageProfile flat_init(const Grid& grid);

}  // namespace gridflow
