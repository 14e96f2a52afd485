#pragma once

#include <cstdint>
#include <vector>

#include "gridflow/model.hpp"

namespace gridflow {

struct AdamWConfig {
    double weight_decay = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// AdamW with bias-corrected moments and decoupled weight decay. Moment
/// buffers are aligned with model.parameters(); frozen parameters are skipped
/// entirely and keep their bits.
class AdamW {
public:
    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    /// grads[i] belongs to model.parameters()[i]; entries of frozen parameters
    /// are ignored. Throws std::runtime_error naming the parameter on a
    /// non-finite gradient, before anything is modified.
    void step(Model& model, const std::vector<std::vector<double>>& grads, double lr);

    std::uint64_t steps() const { return t_; }

private:
    AdamWConfig config_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Cosine annealing with warm restarts. `epoch` may be fractional; the first
/// cycle lasts t0 epochs and each following one t_mult times longer.
double cosine_warm_restart_lr(double epoch, double t0, double t_mult, double lr_max, double lr_min);

}  // namespace gridflow
