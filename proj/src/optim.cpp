#include "gridflow/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gridflow {

void AdamW::step(Model& model, const std::vector<std::vector<double>>& grads, double lr) {
    auto& params = model.parameters();
    if (grads.size() != params.size()) throw std::invalid_argument("adamw: one gradient slot per parameter required");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].frozen) continue;
        if (grads[i].size() != params[i].values.size()) {
            throw std::invalid_argument("adamw: gradient size mismatch for '" + params[i].name + "'");
        }
        for (double g : grads[i]) {
            if (!std::isfinite(g)) throw std::runtime_error("adamw: non-finite gradient for '" + params[i].name + "'");
        }
    }
    if (m_.size() != params.size()) {
        m_.resize(params.size());
        v_.resize(params.size());
    }
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (p.frozen) continue;
        auto& m = m_[i];
        auto& v = v_[i];
        if (m.size() != p.values.size()) {
            m.assign(p.values.size(), 0.0);
            v.assign(p.values.size(), 0.0);
        }
        for (std::size_t k = 0; k < p.values.size(); ++k) {
            const double g = grads[i][k];
            m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g;
            v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g * g;
            p.values[k] *= 1.0 - lr * config_.weight_decay;
            p.values[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
        }
    }
}

double cosine_warm_restart_lr(double epoch, double t0, double t_mult, double lr_max, double lr_min) {
    if (!(t0 > 0.0) || !(t_mult >= 1.0)) throw std::invalid_argument("cosine schedule: need t0 > 0 and t_mult >= 1");
    double t_cur = std::max(0.0, epoch);
    double t_i = t0;
    while (t_cur >= t_i) {
        t_cur -= t_i;
        t_i *= t_mult;
    }
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t_cur / t_i));
}

}  // namespace gridflow
