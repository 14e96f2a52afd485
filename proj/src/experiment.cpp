#include "gridflow/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include "gridflow/svg.hpp"

namespace gridflow {

ExperimentConfig ExperimentConfig::desk() {
    ExperimentConfig c;
    c.mv.seed = 1;
    c.hv.seed = 2;
    c.source = TrainConfig::desk();
    c.adapt = TrainConfig::desk();
    c.source.seed = 3;
    return c;
}

ExperimentConfig ExperimentConfig::paper() {
    ExperimentConfig c = desk();
    c.mv.n_samples = 90030;
    c.hv.n_samples = 45030;
    c.model.steps = 40;
    c.source = TrainConfig::paper();
    c.source.seed = 3;
    c.adapt = TrainConfig::paper();
    return c;
}

void ExperimentConfig::validate() const {
    mv.validate();
    hv.validate();
    if (mv.regime != Regime::MV || hv.regime != Regime::HV) throw std::invalid_argument("experiment: mv/hv regimes swapped");
    model.validate();
    loss.validate();
    source.validate();
    adapt.validate();
    lora.validate();
    if (modes.empty()) throw std::invalid_argument("experiment: no adaptation modes");
    if (seeds.empty()) throw std::invalid_argument("experiment: no seeds");
    for (double b : betas) {
        if (!(b > 0.0 && b <= 100.0)) throw std::invalid_argument("experiment: beta values must lie in (0, 100]");
    }
    if (wilcoxon_n == 0) throw std::invalid_argument("experiment: wilcoxon_n must be >= 1");
}

namespace {

nlohmann::json modes_json(const std::vector<AdaptMode>& modes) {
    auto out = nlohmann::json::array();
    for (auto m : modes) out.push_back(to_string(m));
    return out;
}

std::vector<AdaptMode> modes_from(const nlohmann::json& j) {
    std::vector<AdaptMode> out;
    for (const auto& m : j) out.push_back(parse_adapt_mode(m.get<std::string>()));
    return out;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

nlohmann::json to_json(const ExperimentConfig& c) {
    return {{"seed", c.seed},
            {"mv", to_json(c.mv)},
            {"hv", to_json(c.hv)},
            {"model", to_json(c.model)},
            {"loss", to_json(c.loss)},
            {"source", to_json(c.source)},
            {"adapt", to_json(c.adapt)},
            {"lora", {{"rank", c.lora.rank}, {"alpha", c.lora.alpha}, {"sigma", c.lora.sigma}}},
            {"modes", modes_json(c.modes)},
            {"fewshot_modes", modes_json(c.fewshot_modes)},
            {"betas", c.betas},
            {"seeds", c.seeds},
            {"wilcoxon_n", c.wilcoxon_n}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const ExperimentConfig& base) {
    ExperimentConfig c = base;
    auto merged = [](const nlohmann::json& defaults, const nlohmann::json& patch) {
        auto out = defaults;
        out.merge_patch(patch);
        return out;
    };
    c.seed = j.value("seed", c.seed);
    if (j.contains("mv")) c.mv = synth_config_from_json(merged(to_json(c.mv), j["mv"]));
    if (j.contains("hv")) c.hv = synth_config_from_json(merged(to_json(c.hv), j["hv"]));
    if (j.contains("model")) c.model = model_config_from_json(merged(to_json(c.model), j["model"]));
    if (j.contains("loss")) c.loss = loss_config_from_json(merged(to_json(c.loss), j["loss"]));
    if (j.contains("source")) c.source = train_config_from_json(merged(to_json(c.source), j["source"]));
    if (j.contains("adapt")) c.adapt = train_config_from_json(merged(to_json(c.adapt), j["adapt"]));
    if (j.contains("lora")) {
        const auto& l = j["lora"];
        c.lora.rank = l.value("rank", c.lora.rank);
        c.lora.alpha = l.value("alpha", c.lora.alpha);
        c.lora.sigma = l.value("sigma", c.lora.sigma);
    }
    if (j.contains("modes")) c.modes = modes_from(j["modes"]);
    if (j.contains("fewshot_modes")) c.fewshot_modes = modes_from(j["fewshot_modes"]);
    if (j.contains("betas")) c.betas = j["betas"].get<std::vector<double>>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    c.wilcoxon_n = j.value("wilcoxon_n", c.wilcoxon_n);
    return c;
}

std::string config_hash(const nlohmann::json& j) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Model train_source(const Dataset& mv, const ExperimentConfig& config, TrainResult* log) {
    Model model(config.model, config.seed);
    auto result = train(model, mv.samples, mv.splits.train, mv.splits.val, config.loss, config.source);
    if (log) *log = std::move(result);
    return model;
}

AdaptRun run_adaptation(const Model& source, const Dataset& hv, const Dataset& mv, double base_mv_rmse, AdaptMode mode,
                        double beta, std::uint64_t seed, const ExperimentConfig& config) {
    AdaptRun run;
    run.model = source;
    if (uses_lora(mode)) {
        auto rng = make_rng(seed, 0x6c6f7261ULL);
        attach_lora(run.model, config.lora, rng);
    }
    apply_mode(run.model, mode);
    if (mode != AdaptMode::ZeroShot) {
        const auto subset = fewshot_subset(hv.splits.train, beta, seed);
        auto tc = config.adapt;
        tc.seed = child_seed(config.adapt.seed, seed);
        run.train = train(run.model, hv.samples, subset, hv.splits.val, config.loss, tc);
    }
    run.hv_test = evaluate(run.model, hv.samples, hv.splits.test, config.loss);
    run.mv_test = evaluate(run.model, mv.samples, mv.splits.test, config.loss);
    run.record = make_record(run.model, run.hv_test, "HV", to_string(mode), beta, seed);
    const auto ret = retention(run.mv_test.rmse_all, base_mv_rmse);
    run.record.r_ret = ret.ratio;
    run.record.r_ret_inverse = ret.inverse;
    return run;
}

std::vector<ComparisonRow> compare_methods(const std::vector<std::pair<std::string, Evaluation>>& methods,
                                           const std::string& reference, std::size_t n, std::uint64_t seed) {
    const auto ref = std::find_if(methods.begin(), methods.end(), [&](const auto& m) { return m.first == reference; });
    if (ref == methods.end()) throw std::invalid_argument("compare: reference method '" + reference + "' missing");
    const auto picks = stratified_sample(ref->second.bus_counts, n, seed);
    std::vector<double> ref_err;
    for (auto i : picks) ref_err.push_back(ref->second.sample_rmse[i]);
    std::vector<ComparisonRow> rows;
    for (const auto& [name, eval] : methods) {
        if (name == reference) continue;
        if (eval.sample_rmse.size() != ref->second.sample_rmse.size()) {
            throw std::invalid_argument("compare: '" + name + "' was evaluated on a different sample set");
        }
        std::vector<double> err;
        for (auto i : picks) err.push_back(eval.sample_rmse[i]);
        rows.push_back({name, reference, wilcoxon_signed_rank(err, ref_err), 1.0});
    }
    for (auto& row : rows) row.p_adjusted = bonferroni(row.test.p_value, rows.size());
    return rows;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string epoch_csv(const std::vector<EpochLog>& log) {
    std::string out = "epoch,lr,loss_data,loss_pf,val_rmse\n";
    for (const auto& row : log) {
        out += std::to_string(row.epoch) + "," + fmt(row.lr) + "," + fmt(row.loss_data) + "," + fmt(row.loss_pf) + "," +
               fmt(row.val_rmse) + "\n";
    }
    return out;
}

std::string metrics_csv(const std::vector<MetricsRecord>& records) {
    std::string out = metrics_csv_header() + "\n";
    for (const auto& r : records) out += to_csv_row(r) + "\n";
    return out;
}

std::string pareto_csv(const std::vector<ParetoPoint>& points) {
    std::string out = "label,rho,rmse_all,pareto_optimal\n";
    for (const auto& p : points) out += p.label + "," + fmt(p.rho) + "," + fmt(p.rmse) + "," + (p.optimal ? "1" : "0") + "\n";
    return out;
}

std::string stats_csv(const std::vector<ComparisonRow>& rows) {
    std::string out = "method,reference,n,w_plus,w_minus,statistic,p_value,exact,p_bonferroni\n";
    for (const auto& r : rows) {
        out += r.method + "," + r.reference + "," + std::to_string(r.test.n) + "," + fmt(r.test.w_plus) + "," +
               fmt(r.test.w_minus) + "," + fmt(r.test.statistic) + "," + fmt(r.test.p_value) + "," +
               (r.test.exact ? "1" : "0") + "," + fmt(r.p_adjusted) + "\n";
    }
    return out;
}

std::string errors_csv(const Evaluation& eval) {
    std::string out = "sample,buses,rmse_all\n";
    for (std::size_t i = 0; i < eval.sample_rmse.size(); ++i) {
        out += std::to_string(i) + "," + std::to_string(eval.bus_counts[i]) + "," + fmt(eval.sample_rmse[i]) + "\n";
    }
    return out;
}

std::string loss_curve_svg(const std::string& title, const std::vector<std::pair<std::string, std::vector<EpochLog>>>& runs) {
    std::vector<svg::Series> series;
    for (const auto& [label, log] : runs) {
        svg::Series s{label, {}, {}, {}, {}};
        for (const auto& row : log) {
            s.x.push_back(static_cast<double>(row.epoch));
            s.y.push_back(row.loss_pf);
        }
        series.push_back(std::move(s));
    }
    return svg::line_chart({title, "epoch", "physics loss L_PF", false, true}, series);
}

std::string fewshot_svg(const std::vector<MetricsRecord>& records) {
    std::map<std::string, std::map<double, std::vector<double>>> grouped;
    for (const auto& r : records) grouped[r.mode][r.beta].push_back(r.rmse_all);
    std::vector<svg::Series> series;
    for (const auto& [mode, by_beta] : grouped) {
        svg::Series s{mode, {}, {}, {}, {}};
        for (const auto& [beta, values] : by_beta) {
            double sum = 0.0;
            for (double v : values) sum += v;
            s.x.push_back(beta);
            s.y.push_back(sum / static_cast<double>(values.size()));
            s.lower.push_back(*std::min_element(values.begin(), values.end()));
            s.upper.push_back(*std::max_element(values.begin(), values.end()));
        }
        series.push_back(std::move(s));
    }
    return svg::line_chart({"Few-shot HV adaptation", "labelled target fraction beta (%)", "HV test RMSE", true, true}, series);
}

std::string pareto_svg(const std::vector<ParetoPoint>& points) {
    std::vector<svg::Point> pts;
    for (const auto& p : points) pts.push_back({p.label, std::max(p.rho, 1e-4), p.rmse, p.optimal});
    return svg::scatter({"RMSE vs trainable fraction", "trainable fraction rho", "HV test RMSE", true, true}, pts);
}

void write_manifest(const std::filesystem::path& out, const std::string& command, const nlohmann::json& config,
                    const std::vector<std::filesystem::path>& outputs) {
    auto files = nlohmann::json::array();
    for (const auto& p : outputs) files.push_back(std::filesystem::relative(p, out).generic_string());
    const nlohmann::json manifest{{"tool", "gridflow"},
                                  {"version", "1.0.0"},
                                  {"command", command},
                                  {"config_hash", config_hash(config)},
                                  {"config", config},
                                  {"outputs", files}};
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
}

PipelineResult run_pipeline(const ExperimentConfig& config, const std::filesystem::path& out, const Progress& progress) {
    config.validate();
    auto say = [&](const std::string& msg) {
        if (progress) progress(msg);
    };
    PipelineResult result;
    auto emit = [&](const std::string& name, const std::string& text) {
        write_text(out / name, text);
        result.outputs.push_back(out / name);
    };

    say("generating MV dataset");
    const auto mv = generate_dataset(config.mv);
    say("generating HV dataset");
    const auto hv = generate_dataset(config.hv);
    emit("datasets.csv", "regime,samples,attempts,convergence_rate\nMV," + std::to_string(mv.samples.size()) + "," +
                             std::to_string(mv.attempts) + "," + fmt(mv.convergence_rate()) + "\nHV," +
                             std::to_string(hv.samples.size()) + "," + std::to_string(hv.attempts) + "," +
                             fmt(hv.convergence_rate()) + "\n");

    say("training source model on MV");
    TrainResult source_log;
    const Model source = train_source(mv, config, &source_log);
    emit("source_epochs.csv", epoch_csv(source_log.log));
    const auto source_mv = evaluate(source, mv.samples, mv.splits.test, config.loss);
    result.base_mv_rmse = source_mv.rmse_all;
    result.source_mv = make_record(source, source_mv, "MV", "source", 100.0, config.seed);
    result.source_mv.r_ret = 100.0;
    result.source_mv.r_ret_inverse = 100.0;

    std::map<std::pair<std::string, std::uint64_t>, MetricsRecord> full_runs;
    std::vector<std::pair<std::string, Evaluation>> first_seed_evals;
    std::vector<std::pair<std::string, std::vector<EpochLog>>> curves;
    for (auto seed : config.seeds) {
        for (auto mode : config.modes) {
            say("adapting: " + to_string(mode) + ", seed " + std::to_string(seed));
            auto run = run_adaptation(source, hv, mv, result.base_mv_rmse, mode, 100.0, seed, config);
            if (mode != AdaptMode::ZeroShot) {
                emit("adapt_" + to_string(mode) + "_s" + std::to_string(seed) + ".csv", epoch_csv(run.train.log));
            }
            if (seed == config.seeds.front()) {
                first_seed_evals.emplace_back(to_string(mode), run.hv_test);
                if (mode != AdaptMode::ZeroShot) curves.emplace_back(to_string(mode), run.train.log);
            }
            full_runs[{to_string(mode), seed}] = run.record;
            result.table.push_back(run.record);
        }
    }
    auto table = result.table;
    table.insert(table.begin(), result.source_mv);
    emit("table.csv", metrics_csv(table));
    emit("physics_loss.svg", loss_curve_svg("Physics loss during HV adaptation", curves));

    for (double beta : config.betas) {
        for (auto mode : config.fewshot_modes) {
            for (auto seed : config.seeds) {
                const auto cached = full_runs.find({to_string(mode), seed});
                if (beta == 100.0 && cached != full_runs.end()) {
                    result.fewshot.push_back(cached->second);
                    continue;
                }
                say("few-shot: beta " + fmt(beta) + "%, " + to_string(mode) + ", seed " + std::to_string(seed));
                result.fewshot.push_back(run_adaptation(source, hv, mv, result.base_mv_rmse, mode, beta, seed, config).record);
            }
        }
    }
    if (!result.fewshot.empty()) {
        emit("fewshot.csv", metrics_csv(result.fewshot));
        emit("fewshot.svg", fewshot_svg(result.fewshot));
    }

    const bool has_full = std::any_of(config.modes.begin(), config.modes.end(), [](AdaptMode m) { return m == AdaptMode::FullFT; });
    if (has_full && first_seed_evals.size() > 1) {
        std::vector<std::pair<std::string, Evaluation>> compared;
        for (const auto& entry : first_seed_evals) {
            if (entry.first != to_string(AdaptMode::ZeroShot)) compared.push_back(entry);
        }
        if (compared.size() > 1) {
            result.stats = compare_methods(compared, to_string(AdaptMode::FullFT), config.wilcoxon_n, config.seed);
            emit("stats.csv", stats_csv(result.stats));
        }
    }

    std::map<std::string, std::pair<double, std::vector<double>>> per_mode;
    for (const auto& r : result.table) {
        per_mode[r.mode].first = r.rho;
        per_mode[r.mode].second.push_back(r.rmse_all);
    }
    std::vector<ParetoPoint> points;
    for (auto mode : config.modes) {
        const auto& [rho, values] = per_mode[to_string(mode)];
        double sum = 0.0;
        for (double v : values) sum += v;
        points.push_back({to_string(mode), rho, sum / static_cast<double>(values.size()), false});
    }
    result.pareto = pareto_front(points);
    emit("pareto.csv", pareto_csv(result.pareto));
    emit("pareto.svg", pareto_svg(result.pareto));

    write_manifest(out, "report", to_json(config), result.outputs);
    result.outputs.push_back(out / "manifest.json");
    return result;
}

}  // namespace gridflow
