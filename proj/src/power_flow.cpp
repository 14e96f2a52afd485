#include "gridflow/power_flow.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace gridflow {

Mismatch compute_mismatch(std::span<const Complex> v, const AdmittanceMatrix& ybus, std::span<const double> p_set,
                          std::span<const double> q_set) {
    const std::size_t n = ybus.size();
    if (v.size() != n || p_set.size() != n || q_set.size() != n) {
        throw std::invalid_argument("compute_mismatch: dimension mismatch");
    }
    const auto current = ybus.multiply(v);
    Mismatch out{std::vector<double>(n), std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        const Complex s = v[i] * std::conj(current[i]);
        out.dp[i] = p_set[i] - s.real();
        out.dq[i] = q_set[i] - s.imag();
    }
    return out;
}

UnknownLayout unknown_layout(std::span<const BusType> types) {
    UnknownLayout layout;
    for (std::size_t i = 0; i < types.size(); ++i) {
        if (types[i] != BusType::Slack) layout.angle_buses.push_back(i);
        if (types[i] == BusType::PQ) layout.magnitude_buses.push_back(i);
    }
    return layout;
}

std::vector<BusType> bus_types(const Grid& grid) {
    std::vector<BusType> out;
    out.reserve(grid.size());
    for (const auto& bus : grid.buses) out.push_back(bus.type);
    return out;
}

namespace {

struct Injection {
    std::vector<double> p;
    std::vector<double> q;
};

Injection injections(std::span<const double> v_mag, std::span<const double> theta, const AdmittanceMatrix& ybus) {
    const std::size_t n = ybus.size();
    std::vector<Complex> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = std::polar(v_mag[i], theta[i]);
    const auto current = ybus.multiply(v);
    Injection out{std::vector<double>(n), std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i) {
        const Complex s = v[i] * std::conj(current[i]);
        out.p[i] = s.real();
        out.q[i] = s.imag();
    }
    return out;
}

}  // namespace

Eigen::MatrixXd jacobian(std::span<const double> v_mag, std::span<const double> theta,
                         const AdmittanceMatrix& ybus, std::span<const BusType> types) {
    const std::size_t n = ybus.size();
    if (v_mag.size() != n || theta.size() != n || types.size() != n) {
        throw std::invalid_argument("jacobian: dimension mismatch");
    }
    const auto layout = unknown_layout(types);
    const auto n_angle = layout.angle_buses.size();
    const auto dim = layout.size();

    constexpr auto kNone = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> angle_pos(n, kNone), mag_pos(n, kNone);
    for (std::size_t k = 0; k < layout.angle_buses.size(); ++k) angle_pos[layout.angle_buses[k]] = k;
    for (std::size_t k = 0; k < layout.magnitude_buses.size(); ++k) mag_pos[layout.magnitude_buses[k]] = k;

    const auto inj = injections(v_mag, theta, ybus);
    // Textbook dS/dx blocks first, negated at the end.
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    auto put = [&](std::size_t row, std::size_t col, double value) {
        jac(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(col)) += value;
    };

    for (std::size_t i = 0; i < n; ++i) {
        const double g = ybus.diagonal(i).real();
        const double b = ybus.diagonal(i).imag();
        const double vi = v_mag[i];
        if (angle_pos[i] != kNone) {
            const auto row_p = angle_pos[i];
            put(row_p, angle_pos[i], -inj.q[i] - b * vi * vi);
            if (mag_pos[i] != kNone) put(row_p, n_angle + mag_pos[i], inj.p[i] / vi + g * vi);
        }
        if (mag_pos[i] != kNone) {
            const auto row_q = n_angle + mag_pos[i];
            put(row_q, angle_pos[i], inj.p[i] - g * vi * vi);
            put(row_q, n_angle + mag_pos[i], inj.q[i] / vi - b * vi);
        }
    }
    for (const auto& e : ybus.off_diagonal()) {
        const std::size_t i = e.row;
        const std::size_t k = e.col;
        const double g = e.value.real();
        const double b = e.value.imag();
        const double dt = theta[i] - theta[k];
        const double c = std::cos(dt);
        const double s = std::sin(dt);
        const double vi = v_mag[i];
        const double vk = v_mag[k];
        if (angle_pos[i] != kNone) {
            const auto row_p = angle_pos[i];
            if (angle_pos[k] != kNone) put(row_p, angle_pos[k], vi * vk * (g * s - b * c));
            if (mag_pos[k] != kNone) put(row_p, n_angle + mag_pos[k], vi * (g * c + b * s));
        }
        if (mag_pos[i] != kNone) {
            const auto row_q = n_angle + mag_pos[i];
            if (angle_pos[k] != kNone) put(row_q, angle_pos[k], -vi * vk * (g * c + b * s));
            if (mag_pos[k] != kNone) put(row_q, n_angle + mag_pos[k], vi * (g * s - b * c));
        }
    }
    return -jac;
}

VoltageProfile flat_init(const Grid& grid) {
    VoltageProfile init{std::vector<double>(grid.size(), 1.0), std::vector<double>(grid.size(), 0.0)};
    for (const auto& bus : grid.buses) {
        if (bus.type != BusType::PQ) init.v_mag[bus.id] = bus.v_set;
        if (bus.type == BusType::Slack) init.theta[bus.id] = bus.theta_set;
    }
    return init;
}

PFSolution solve_nr(const Grid& grid, const AdmittanceMatrix& ybus, const VoltageProfile& init,
                    const NrOptions& options) {
    const std::size_t n = grid.size();
    if (ybus.size() != n || init.v_mag.size() != n || init.theta.size() != n) {
        throw std::invalid_argument("solve_nr: dimension mismatch");
    }
    const auto types = bus_types(grid);
    const auto layout = unknown_layout(types);
    const auto n_angle = layout.angle_buses.size();

    std::vector<double> p_set(n), q_set(n);
    for (const auto& bus : grid.buses) {
        p_set[bus.id] = bus.p_set;
        q_set[bus.id] = bus.q_set;
    }

    std::vector<double> v_mag = init.v_mag;
    std::vector<double> theta = init.theta;
    for (const auto& bus : grid.buses) {
        if (bus.type != BusType::PQ) v_mag[bus.id] = bus.v_set;
        if (bus.type == BusType::Slack) theta[bus.id] = bus.theta_set;
    }

    PFSolution best;
    best.max_mismatch = std::numeric_limits<double>::infinity();
    Eigen::VectorXd residual(static_cast<Eigen::Index>(layout.size()));

    int performed = 0;
    for (int iter = 0;; ++iter) {
        performed = iter;
        std::vector<Complex> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = std::polar(v_mag[i], theta[i]);
        const auto mis = compute_mismatch(v, ybus, p_set, q_set);
        double norm = 0.0;
        bool finite = true;
        for (std::size_t k = 0; k < n_angle; ++k) {
            const double value = mis.dp[layout.angle_buses[k]];
            residual(static_cast<Eigen::Index>(k)) = value;
            finite = finite && std::isfinite(value);
            norm = std::max(norm, std::abs(value));
        }
        for (std::size_t k = 0; k < layout.magnitude_buses.size(); ++k) {
            const double value = mis.dq[layout.magnitude_buses[k]];
            residual(static_cast<Eigen::Index>(n_angle + k)) = value;
            finite = finite && std::isfinite(value);
            norm = std::max(norm, std::abs(value));
        }
        if (!finite) break;
        if (norm < best.max_mismatch) {
            best.v_mag = v_mag;
            best.theta = theta;
            best.max_mismatch = norm;
            best.iterations = iter;
        }
        if (norm <= options.tolerance) {
            best.converged = true;
            break;
        }
        if (iter >= options.max_iterations) break;

        const Eigen::MatrixXd jac = jacobian(v_mag, theta, ybus, types);
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(jac);
        if (!(lu.rcond() > 1e-14)) {
            best.singular = true;
            break;
        }
        const Eigen::VectorXd step = lu.solve(residual);
        if (!step.allFinite()) {
            best.singular = true;
            break;
        }
        // Newton step on the mismatch: x <- x - J^{-1} f.
        for (std::size_t k = 0; k < n_angle; ++k) theta[layout.angle_buses[k]] -= step(static_cast<Eigen::Index>(k));
        for (std::size_t k = 0; k < layout.magnitude_buses.size(); ++k) {
            v_mag[layout.magnitude_buses[k]] -= step(static_cast<Eigen::Index>(n_angle + k));
        }
    }
    if (best.v_mag.empty()) {
        best.v_mag = v_mag;
        best.theta = theta;
    }
    if (!best.converged) best.iterations = performed;
    return best;
}

}  // namespace gridflow
