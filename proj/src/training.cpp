#include "gridflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "gridflow/graph_batch.hpp"
#include "gridflow/optim.hpp"
#include "gridflow/rng.hpp"
#include "gridflow/threading.hpp"

namespace gridflow {

TrainConfig TrainConfig::desk() {
    TrainConfig c;
    // ~470 optimizer steps instead of ~17k; 1e-4 barely leaves the flat start.
    c.lr = 3e-3;
    return c;
}

TrainConfig TrainConfig::paper() {
    TrainConfig c;
    c.epochs = 100;
    c.batch_size = 512;
    return c;
}

void TrainConfig::validate() const {
    if (epochs == 0) throw std::invalid_argument("train config: epochs must be >= 1");
    if (batch_size == 0 || chunk_size == 0) throw std::invalid_argument("train config: batch and chunk sizes must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("train config: weight_decay must be >= 0");
    if (!(t0 > 0.0) || !(t_mult >= 1.0)) throw std::invalid_argument("train config: need t0 > 0 and t_mult >= 1");
    if (!(lr_min >= 0.0) || lr_min > lr) throw std::invalid_argument("train config: need 0 <= lr_min <= lr");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr},         {"weight_decay", c.weight_decay},
            {"t0", c.t0},         {"t_mult", c.t_mult},         {"lr_min", c.lr_min}, {"seed", c.seed},
            {"chunk_size", c.chunk_size}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.t0 = j.value("t0", c.t0);
    c.t_mult = j.value("t_mult", c.t_mult);
    c.lr_min = j.value("lr_min", c.lr_min);
    c.seed = j.value("seed", c.seed);
    c.chunk_size = j.value("chunk_size", c.chunk_size);
    return c;
}

namespace {

struct ChunkGrad {
    std::vector<std::vector<double>> grads;
    double data_sum = 0.0;
    double pf_sum = 0.0;
};

ChunkGrad chunk_gradient(const Model& model, const std::vector<Sample>& samples, std::span<const std::size_t> chunk,
                         const LossConfig& loss, double weight) {
    const auto batch = make_batch(samples, chunk);
    ad::Tape tape;
    const BoundModel bound(tape, model);
    const auto traj = forward(tape, model, bound, batch);
    const auto terms = loss_terms(traj, batch, loss);
    ChunkGrad out;
    for (double v : terms.data.values()) out.data_sum += v;
    for (double v : terms.physics.values()) out.pf_sum += v;
    tape.backward(ad::scale(ad::sum(terms.total), weight));
    const auto& params = model.parameters();
    out.grads.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].frozen) continue;
        const auto& t = bound[params[i].name];
        if (tape.has_grad(t)) {
            const auto g = tape.grad(t);
            out.grads[i].assign(g.begin(), g.end());
        } else {
            out.grads[i].assign(params[i].values.size(), 0.0);
        }
    }
    return out;
}

std::vector<std::span<const std::size_t>> split_chunks(std::span<const std::size_t> items, std::size_t size) {
    std::vector<std::span<const std::size_t>> chunks;
    for (std::size_t begin = 0; begin < items.size(); begin += size) {
        chunks.push_back(items.subspan(begin, std::min(size, items.size() - begin)));
    }
    return chunks;
}

}  // namespace

TrainResult train(Model& model, const std::vector<Sample>& samples, std::span<const std::size_t> train_idx,
                  std::span<const std::size_t> val_idx, const LossConfig& loss, const TrainConfig& config) {
    config.validate();
    loss.validate();
    if (train_idx.empty()) throw std::invalid_argument("train: empty training split");
    if (val_idx.empty()) throw std::invalid_argument("train: empty validation split");
    TrainResult result;
    if (count_params(model, true) == 0) {
        result.best_val_rmse = evaluate(model, samples, val_idx, loss).rmse_all;
        return result;
    }

    AdamW optimizer({config.weight_decay});
    Model best = model;
    result.best_val_rmse = std::numeric_limits<double>::infinity();
    const std::size_t n_batches = (train_idx.size() + config.batch_size - 1) / config.batch_size;
    std::vector<std::size_t> order(train_idx.begin(), train_idx.end());

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        auto rng = make_rng(config.seed, 0x747261696eULL + epoch);
        order.assign(train_idx.begin(), train_idx.end());
        std::shuffle(order.begin(), order.end(), rng);
        EpochLog row;
        row.epoch = epoch + 1;
        row.lr = cosine_warm_restart_lr(static_cast<double>(epoch), config.t0, config.t_mult, config.lr, config.lr_min);
        for (std::size_t b = 0; b < n_batches; ++b) {
            const std::size_t begin = b * config.batch_size;
            const auto batch = std::span<const std::size_t>(order).subspan(begin, std::min(config.batch_size, order.size() - begin));
            const auto chunks = split_chunks(batch, config.chunk_size);
            std::vector<ChunkGrad> parts(chunks.size());
            const double weight = 1.0 / static_cast<double>(batch.size());
            try {
                parallel_for(chunks.size(), [&](std::size_t c) {
                    parts[c] = chunk_gradient(model, samples, chunks[c], loss, weight);
                });
            } catch (const std::exception& e) {
                throw std::runtime_error("epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(b + 1) + ": " +
                                         e.what());
            }
            auto grads = std::move(parts[0].grads);
            row.loss_data += parts[0].data_sum;
            row.loss_pf += parts[0].pf_sum;
            for (std::size_t c = 1; c < parts.size(); ++c) {
                row.loss_data += parts[c].data_sum;
                row.loss_pf += parts[c].pf_sum;
                for (std::size_t i = 0; i < grads.size(); ++i) {
                    for (std::size_t k = 0; k < grads[i].size(); ++k) grads[i][k] += parts[c].grads[i][k];
                }
            }
            const double lr = cosine_warm_restart_lr(static_cast<double>(epoch) + static_cast<double>(b) / n_batches,
                                                     config.t0, config.t_mult, config.lr, config.lr_min);
            try {
                optimizer.step(model, grads, lr);
            } catch (const std::exception& e) {
                throw std::runtime_error("epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(b + 1) + ": " +
                                         e.what());
            }
            ++result.steps;
        }
        row.loss_data /= static_cast<double>(train_idx.size());
        row.loss_pf /= static_cast<double>(train_idx.size());
        row.val_rmse = evaluate(model, samples, val_idx, loss).rmse_all;
        if (row.val_rmse < result.best_val_rmse) {
            result.best_val_rmse = row.val_rmse;
            result.best_epoch = row.epoch;
            best = model;
        }
        result.log.push_back(row);
    }
    model = std::move(best);
    return result;
}

Evaluation evaluate(const Model& model, const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                    const LossConfig& loss) {
    if (indices.empty()) throw std::invalid_argument("evaluate: empty split");
    constexpr std::size_t kChunk = 16;
    const auto chunks = split_chunks(indices, kChunk);
    struct PerSample {
        double sq_v = 0.0, sq_theta = 0.0, pf = 0.0;
        std::size_t free = 0;
    };
    std::vector<PerSample> rows(indices.size());
    parallel_for(chunks.size(), [&](std::size_t c) {
        const auto batch = make_batch(samples, chunks[c]);
        ad::Tape tape(false);
        const BoundModel bound(tape, model);
        const auto traj = forward(tape, model, bound, batch);
        const auto pf = physics_loss(traj, batch, loss.gamma).values();
        const auto v = traj.final_v().values();
        const auto th = traj.final_theta().values();
        for (std::size_t g = 0; g < batch.n_graphs; ++g) {
            auto& row = rows[c * kChunk + g];
            row.pf = pf[g];
            row.free = batch.free_count[g];
            for (std::size_t i = batch.node_offset[g]; i < batch.node_offset[g + 1]; ++i) {
                if (batch.free_mask[i] == 0.0) continue;
                row.sq_v += (v[i] - batch.v_target[i]) * (v[i] - batch.v_target[i]);
                row.sq_theta += (th[i] - batch.theta_target[i]) * (th[i] - batch.theta_target[i]);
            }
        }
    });
    Evaluation eval;
    double sq_v = 0.0, sq_theta = 0.0, pf = 0.0;
    std::size_t free = 0;
    for (std::size_t s = 0; s < rows.size(); ++s) {
        const auto& row = rows[s];
        sq_v += row.sq_v;
        sq_theta += row.sq_theta;
        pf += row.pf;
        free += row.free;
        eval.sample_rmse.push_back(std::sqrt((row.sq_v + row.sq_theta) / (2.0 * static_cast<double>(row.free))));
        eval.bus_counts.push_back(samples[indices[s]].grid.size());
    }
    const double nf = static_cast<double>(free);
    eval.rmse_all = std::sqrt((sq_v + sq_theta) / (2.0 * nf));
    eval.rmse_v = std::sqrt(sq_v / nf);
    eval.rmse_theta_deg = std::sqrt(sq_theta / nf) * 180.0 / std::numbers::pi;
    eval.l_pf = pf / static_cast<double>(rows.size());
    return eval;
}

double flat_start_rmse(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
    std::vector<double> pred, target;
    for (std::size_t idx : indices) {
        const auto& s = samples.at(idx);
        for (std::size_t i = 0; i < s.grid.size(); ++i) {
            if (s.grid.buses[i].type == BusType::Slack) continue;
            pred.push_back(s.init.v_mag[i]);
            pred.push_back(s.init.theta[i]);
            target.push_back(s.target.v_mag[i]);
            target.push_back(s.target.theta[i]);
        }
    }
    return rmse(pred, target);
}

Retention retention(double adapted_mv_rmse, double base_mv_rmse) {
    if (!(base_mv_rmse > 0.0)) throw std::invalid_argument("retention: base MV RMSE must be positive");
    if (!(adapted_mv_rmse > 0.0)) throw std::invalid_argument("retention: adapted MV RMSE must be positive");
    return {100.0 * adapted_mv_rmse / base_mv_rmse, 100.0 * base_mv_rmse / adapted_mv_rmse};
}

MetricsRecord make_record(const Model& model, const Evaluation& eval, std::string regime, std::string mode, double beta,
                          std::uint64_t seed) {
    MetricsRecord r;
    r.regime = std::move(regime);
    r.mode = std::move(mode);
    r.beta = beta;
    r.seed = seed;
    r.rmse_all = eval.rmse_all;
    r.rmse_v = eval.rmse_v;
    r.rmse_theta_deg = eval.rmse_theta_deg;
    r.l_pf = eval.l_pf;
    r.trainable = count_params(model, true);
    r.base_params = count_base_params(model);
    r.rho = static_cast<double>(r.trainable) / static_cast<double>(r.base_params);
    r.p_reduced = 100.0 * (1.0 - r.rho);
    return r;
}

nlohmann::json to_json(const MetricsRecord& r) {
    return {{"regime", r.regime},       {"mode", r.mode},
            {"beta", r.beta},           {"seed", r.seed},
            {"rmse_all", r.rmse_all},   {"rmse_v", r.rmse_v},
            {"rmse_theta_deg", r.rmse_theta_deg}, {"l_pf", r.l_pf},
            {"rho", r.rho},             {"p_reduced", r.p_reduced},
            {"r_ret", r.r_ret},         {"r_ret_inverse", r.r_ret_inverse},
            {"trainable", r.trainable}, {"base_params", r.base_params}};
}

std::string metrics_csv_header() {
    return "regime,mode,beta,seed,rmse_all,rmse_v,rmse_theta_deg,l_pf,rho,p_reduced,r_ret,r_ret_inverse,trainable,base_params";
}

std::string to_csv_row(const MetricsRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%zu",
                  r.regime.c_str(), r.mode.c_str(), r.beta, static_cast<unsigned long long>(r.seed), r.rmse_all, r.rmse_v,
                  r.rmse_theta_deg, r.l_pf, r.rho, r.p_reduced, r.r_ret, r.r_ret_inverse, r.trainable, r.base_params);
    return buf;
}

std::vector<std::size_t> fewshot_subset(std::span<const std::size_t> train, double beta_percent, std::uint64_t seed) {
    if (!(beta_percent > 0.0 && beta_percent <= 100.0)) {
        throw std::invalid_argument("fewshot: beta must lie in (0, 100], got " + std::to_string(beta_percent));
    }
    const auto count = static_cast<std::size_t>(
        std::ceil(beta_percent / 100.0 * static_cast<double>(train.size()) - 1e-9));
    if (count == 0) throw std::invalid_argument("fewshot: beta " + std::to_string(beta_percent) + "% selects no sample");
    std::vector<std::size_t> perm(train.begin(), train.end());
    auto rng = make_rng(seed, 0x6665777368ULL);
    std::shuffle(perm.begin(), perm.end(), rng);
    perm.resize(std::min(count, perm.size()));
    std::sort(perm.begin(), perm.end());
    return perm;
}

std::vector<ParetoPoint> pareto_front(std::vector<ParetoPoint> points) {
    for (auto& p : points) {
        p.optimal = std::none_of(points.begin(), points.end(), [&](const ParetoPoint& q) {
            return q.rho <= p.rho && q.rmse <= p.rmse && (q.rho < p.rho || q.rmse < p.rmse);
        });
    }
    return points;
}

}  // namespace gridflow
