#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gridflow/experiment.hpp"
#include "gridflow/svg.hpp"
#include "gridflow/threading.hpp"

namespace fs = std::filesystem;
using namespace gridflow;

namespace {

struct Common {
    std::string config_path;
    std::string out = "out";
    bool paper_scale = false;
    bool desk_scale = false;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

struct Overrides {
    std::size_t epochs = 0;
    std::size_t rank = 0;
    double alpha = 0.0;
};

ExperimentConfig load_config(const Common& c, const Overrides& o) {
    ExperimentConfig cfg = c.paper_scale ? ExperimentConfig::paper() : ExperimentConfig::desk();
    if (!c.config_path.empty()) {
        std::ifstream in(c.config_path);
        if (!in) throw std::runtime_error("cannot open config file " + c.config_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("malformed config " + c.config_path + ": " + e.what());
        }
        cfg = experiment_config_from_json(j, cfg);
    }
    if (c.seed_given) cfg.seed = c.seed;
    if (o.epochs > 0) {
        cfg.source.epochs = o.epochs;
        cfg.adapt.epochs = o.epochs;
    }
    if (o.rank > 0) cfg.lora.rank = o.rank;
    if (o.alpha > 0.0) cfg.lora.alpha = o.alpha;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config_path, "JSON experiment config; flags override its values")->check(CLI::ExistingFile);
    app->add_option("--out", c.out, "output directory");
    app->add_option("--seed", c.seed, "experiment seed")->each([&c](const std::string&) { c.seed_given = true; });
    auto* desk = app->add_flag("--desk-scale", c.desk_scale, "desk-scale presets (default)");
    auto* paper = app->add_flag("--paper-scale", c.paper_scale, "paper-scale presets");
    desk->excludes(paper);
}

void add_epochs(CLI::App* app, Overrides& o) {
    app->add_option("--epochs", o.epochs, "training epochs")->check(CLI::PositiveNumber);
}

void add_lora(CLI::App* app, Overrides& o) {
    app->add_option("--rank", o.rank, "LoRA rank r")->check(CLI::PositiveNumber);
    app->add_option("--alpha", o.alpha, "LoRA scaling alpha")->check(CLI::PositiveNumber);
}

Regime parse_regime(const std::string& s) {
    if (s == "mv") return Regime::MV;
    if (s == "hv") return Regime::HV;
    throw std::invalid_argument("unknown regime '" + s + "' (expected mv or hv)");
}

Dataset read_dataset(const std::string& path) {
    if (!fs::exists(path)) throw std::runtime_error("dataset not found: " + path + " (run `gridflow generate` first)");
    return load_jsonl(path);
}

Model read_model(const std::string& path) {
    if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path + " (run `gridflow train-source` first)");
    return load_model(path);
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> parts;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, sep)) parts.push_back(item);
    return parts;
}

// Rows of a CSV file as column-name -> value maps.
std::vector<std::map<std::string, std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
    const auto header = split(line, ',');
    std::vector<std::map<std::string, std::string>> rows;
    std::size_t number = 1;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        const auto cells = split(line, ',');
        if (cells.size() != header.size()) throw std::runtime_error(path + ": line " + std::to_string(number) + " has wrong column count");
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < header.size(); ++i) row[header[i]] = cells[i];
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<double> column(const std::vector<std::map<std::string, std::string>>& rows, const std::string& name,
                           const std::string& path) {
    std::vector<double> values;
    for (const auto& row : rows) {
        const auto it = row.find(name);
        if (it == row.end()) throw std::runtime_error(path + ": missing column " + name);
        values.push_back(std::stod(it->second));
    }
    return values;
}

class Outputs {
public:
    explicit Outputs(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }
    void write(const std::string& name, const std::string& text) {
        write_text(dir_ / name, text);
        files_.push_back(dir_ / name);
    }
    void finish(const std::string& command, const nlohmann::json& config) {
        write_manifest(dir_, command, config, files_);
    }
    const fs::path& dir() const { return dir_; }

private:
    fs::path dir_;
    std::vector<fs::path> files_;
};

std::string epoch_svg(const std::string& title, const std::vector<EpochLog>& log) {
    return loss_curve_svg(title, {{"L_PF", log}});
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gridflow: physics-informed attention GNN power flow with LoRA domain adaptation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "gridflow 1.0.0");
    app.footer("Environment: GRIDFLOW_THREADS caps worker threads.");

    // generate
    Common gen_c;
    std::string gen_regime = "mv";
    std::size_t gen_n = 0;
    auto* gen = app.add_subcommand("generate", "synthesize a dataset with Newton-Raphson targets");
    add_common(gen, gen_c);
    gen->add_option("--regime", gen_regime, "mv or hv")->check(CLI::IsMember({"mv", "hv"}));
    gen->add_option("--n", gen_n, "number of kept samples")->check(CLI::PositiveNumber);

    // train-source
    Common ts_c;
    Overrides ts_o;
    std::string ts_data;
    auto* ts = app.add_subcommand("train-source", "train the source model on an MV dataset");
    add_common(ts, ts_c);
    add_epochs(ts, ts_o);
    ts->add_option("--data", ts_data, "MV dataset (JSONL)")->required();

    // adapt
    Common ad_c;
    Overrides ad_o;
    std::string ad_source, ad_hv, ad_mv, ad_mode = "lora_phead";
    double ad_beta = 100.0;
    auto* adapt = app.add_subcommand("adapt", "adapt a source checkpoint to HV data");
    add_common(adapt, ad_c);
    add_epochs(adapt, ad_o);
    add_lora(adapt, ad_o);
    adapt->add_option("--source", ad_source, "source checkpoint")->required();
    adapt->add_option("--data", ad_hv, "HV dataset (JSONL)")->required();
    adapt->add_option("--mv-data", ad_mv, "MV dataset for retention (JSONL)")->required();
    adapt->add_option("--mode", ad_mode, "zeroshot, full_ft, head_only, lora_only or lora_phead");
    adapt->add_option("--beta", ad_beta, "percent of the HV train split used")->check(CLI::Range(0.0, 100.0));

    // eval
    Common ev_c;
    std::string ev_model, ev_data, ev_split = "test", ev_mode = "model";
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    add_common(ev, ev_c);
    ev->add_option("--model", ev_model, "checkpoint")->required();
    ev->add_option("--data", ev_data, "dataset (JSONL)")->required();
    ev->add_option("--split", ev_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    ev->add_option("--mode", ev_mode, "label written to the mode column");

    // fewshot
    Common fs_c;
    Overrides fs_o;
    std::string fs_source, fs_hv, fs_mv;
    std::vector<double> fs_betas;
    std::vector<std::string> fs_modes;
    auto* few = app.add_subcommand("fewshot", "sweep the labeled HV fraction beta");
    add_common(few, fs_c);
    add_epochs(few, fs_o);
    add_lora(few, fs_o);
    few->add_option("--source", fs_source, "source checkpoint")->required();
    few->add_option("--data", fs_hv, "HV dataset (JSONL)")->required();
    few->add_option("--mv-data", fs_mv, "MV dataset for retention (JSONL)")->required();
    few->add_option("--beta", fs_betas, "beta values in percent (repeatable)");
    few->add_option("--mode", fs_modes, "adaptation modes (repeatable)");

    // pareto
    Common pa_c;
    std::vector<std::string> pa_records;
    auto* pareto = app.add_subcommand("pareto", "Pareto points (rho, RMSE) from metrics CSV files");
    add_common(pareto, pa_c);
    pareto->add_option("records", pa_records, "metrics CSV files")->required()->check(CLI::ExistingFile);

    // stats
    Common st_c;
    std::string st_a, st_b;
    std::size_t st_n = 500, st_m = 3;
    auto* stats = app.add_subcommand("stats", "paired Wilcoxon signed-rank test between two error dumps");
    add_common(stats, st_c);
    stats->add_option("--a", st_a, "errors CSV of the method")->required()->check(CLI::ExistingFile);
    stats->add_option("--b", st_b, "errors CSV of the reference")->required()->check(CLI::ExistingFile);
    stats->add_option("--n", st_n, "stratified sample size")->check(CLI::PositiveNumber);
    stats->add_option("--comparisons", st_m, "Bonferroni family size")->check(CLI::PositiveNumber);

    // report
    Common rp_c;
    Overrides rp_o;
    auto* report = app.add_subcommand("report", "full pipeline: datasets, source, table, few-shot, stats, Pareto");
    add_common(report, rp_c);
    add_epochs(report, rp_o);
    add_lora(report, rp_o);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            auto cfg = load_config(gen_c, {});
            const Regime regime = parse_regime(gen_regime);
            SynthConfig synth = regime == Regime::MV ? cfg.mv : cfg.hv;
            if (gen_n > 0) synth.n_samples = gen_n;
            if (gen_c.seed_given) synth.seed = gen_c.seed;
            const auto ds = generate_dataset(synth);
            Outputs out(gen_c.out);
            const std::string name = gen_regime + ".jsonl";
            save_jsonl(ds, out.dir() / name);
            out.write(gen_regime + "_summary.csv", "samples,attempts,convergence_rate,train,val,test\n" +
                                                       std::to_string(ds.samples.size()) + "," + std::to_string(ds.attempts) +
                                                       "," + std::to_string(ds.convergence_rate()) + "," +
                                                       std::to_string(ds.splits.train.size()) + "," +
                                                       std::to_string(ds.splits.val.size()) + "," +
                                                       std::to_string(ds.splits.test.size()) + "\n");
            std::vector<fs::path> files{out.dir() / name, out.dir() / (gen_regime + "_summary.csv")};
            write_manifest(out.dir(), "generate", to_json(synth), files);
            std::printf("%zu %s samples (%zu/%zu/%zu), convergence rate %.3f\n", ds.samples.size(),
                        gen_regime.c_str(), ds.splits.train.size(), ds.splits.val.size(), ds.splits.test.size(),
                        ds.convergence_rate());
        } else if (ts->parsed()) {
            const auto cfg = load_config(ts_c, ts_o);
            const auto mv = read_dataset(ts_data);
            TrainResult log;
            const Model model = train_source(mv, cfg, &log);
            Outputs out(ts_c.out);
            save_model(model, out.dir() / "source.json");
            out.write("source_epochs.csv", epoch_csv(log.log));
            out.write("source_loss.svg", epoch_svg("Physics loss during source training", log.log));
            const auto eval = evaluate(model, mv.samples, mv.splits.test, cfg.loss);
            out.write("source_metrics.csv", metrics_csv({make_record(model, eval, "MV", "source", 100.0, cfg.seed)}));
            std::vector<fs::path> files{out.dir() / "source.json", out.dir() / "source_epochs.csv",
                                        out.dir() / "source_loss.svg", out.dir() / "source_metrics.csv"};
            write_manifest(out.dir(), "train-source", to_json(cfg), files);
            std::printf("best epoch %zu, val RMSE %.6g, MV test RMSE %.6g\n", log.best_epoch, log.best_val_rmse, eval.rmse_all);
        } else if (adapt->parsed()) {
            const auto cfg = load_config(ad_c, ad_o);
            const AdaptMode mode = parse_adapt_mode(ad_mode);
            const Model source = read_model(ad_source);
            const auto hv = read_dataset(ad_hv);
            const auto mv = read_dataset(ad_mv);
            const double base = evaluate(source, mv.samples, mv.splits.test, cfg.loss).rmse_all;
            const std::uint64_t seed = ad_c.seed_given ? ad_c.seed : cfg.seeds.front();
            const auto run = run_adaptation(source, hv, mv, base, mode, ad_beta, seed, cfg);
            Outputs out(ad_c.out);
            const std::string stem = "adapt_" + ad_mode;
            std::vector<fs::path> files;
            save_model(run.model, out.dir() / (stem + ".json"));
            files.push_back(out.dir() / (stem + ".json"));
            for (const auto& [name, text] :
                 std::vector<std::pair<std::string, std::string>>{{stem + "_epochs.csv", epoch_csv(run.train.log)},
                                                                  {stem + "_metrics.csv", metrics_csv({run.record})},
                                                                  {stem + "_errors.csv", errors_csv(run.hv_test)},
                                                                  {stem + "_loss.svg", epoch_svg("Physics loss: " + ad_mode, run.train.log)}}) {
                write_text(out.dir() / name, text);
                files.push_back(out.dir() / name);
            }
            write_manifest(out.dir(), "adapt", to_json(cfg), files);
            std::printf("%s: HV RMSE %.6g, L_PF %.6g, trainable %zu (%.2f%%), retention %.2f%%\n", ad_mode.c_str(),
                        run.record.rmse_all, run.record.l_pf, run.record.trainable, 100.0 * run.record.rho, run.record.r_ret);
        } else if (ev->parsed()) {
            const auto cfg = load_config(ev_c, {});
            const Model model = read_model(ev_model);
            const auto ds = read_dataset(ev_data);
            const auto& idx = ev_split == "train" ? ds.splits.train : ev_split == "val" ? ds.splits.val : ds.splits.test;
            const auto eval = evaluate(model, ds.samples, idx, cfg.loss);
            const std::string regime = ds.config.regime == Regime::MV ? "MV" : "HV";
            Outputs out(ev_c.out);
            out.write("eval_metrics.csv", metrics_csv({make_record(model, eval, regime, ev_mode, 100.0, cfg.seed)}));
            out.write("eval_errors.csv", errors_csv(eval));
            out.finish("eval", to_json(cfg));
            std::printf("%s %s: RMSE_all %.6g, RMSE_V %.6g, RMSE_theta %.6g deg, L_PF %.6g\n", regime.c_str(),
                        ev_split.c_str(), eval.rmse_all, eval.rmse_v, eval.rmse_theta_deg, eval.l_pf);
        } else if (few->parsed()) {
            auto cfg = load_config(fs_c, fs_o);
            if (!fs_betas.empty()) cfg.betas = fs_betas;
            if (!fs_modes.empty()) {
                cfg.fewshot_modes.clear();
                for (const auto& m : fs_modes) cfg.fewshot_modes.push_back(parse_adapt_mode(m));
            }
            cfg.validate();
            const Model source = read_model(fs_source);
            const auto hv = read_dataset(fs_hv);
            const auto mv = read_dataset(fs_mv);
            const double base = evaluate(source, mv.samples, mv.splits.test, cfg.loss).rmse_all;
            std::vector<MetricsRecord> records;
            for (double beta : cfg.betas) {
                for (auto mode : cfg.fewshot_modes) {
                    for (auto seed : cfg.seeds) {
                        std::fprintf(stderr, "few-shot: beta %g%%, %s, seed %llu\n", beta, to_string(mode).c_str(),
                                     static_cast<unsigned long long>(seed));
                        records.push_back(run_adaptation(source, hv, mv, base, mode, beta, seed, cfg).record);
                    }
                }
            }
            Outputs out(fs_c.out);
            out.write("fewshot.csv", metrics_csv(records));
            out.write("fewshot.svg", fewshot_svg(records));
            out.finish("fewshot", to_json(cfg));
            std::printf("%zu few-shot runs written to %s\n", records.size(), out.dir().string().c_str());
        } else if (pareto->parsed()) {
            std::map<std::string, std::pair<double, std::vector<double>>> per_label;
            std::vector<std::string> order;
            for (const auto& path : pa_records) {
                const auto rows = read_csv(path);
                const auto rho = column(rows, "rho", path);
                const auto rmse = column(rows, "rmse_all", path);
                for (std::size_t i = 0; i < rows.size(); ++i) {
                    const auto& row = rows[i];
                    if (row.at("regime") != "HV") continue;
                    std::string label = row.at("mode");
                    if (std::stod(row.at("beta")) != 100.0) label += "@" + row.at("beta");
                    if (!per_label.count(label)) order.push_back(label);
                    per_label[label].first = rho[i];
                    per_label[label].second.push_back(rmse[i]);
                }
            }
            if (order.empty()) throw std::runtime_error("no HV records found in the given files");
            std::vector<ParetoPoint> points;
            for (const auto& label : order) {
                const auto& [rho, values] = per_label[label];
                double sum = 0.0;
                for (double v : values) sum += v;
                points.push_back({label, rho, sum / static_cast<double>(values.size()), false});
            }
            points = pareto_front(points);
            Outputs out(pa_c.out);
            out.write("pareto.csv", pareto_csv(points));
            out.write("pareto.svg", pareto_svg(points));
            out.finish("pareto", nlohmann::json{{"records", pa_records}});
            for (const auto& p : points) std::printf("%-16s rho %.4f rmse %.6g %s\n", p.label.c_str(), p.rho, p.rmse, p.optimal ? "optimal" : "dominated");
        } else if (stats->parsed()) {
            const auto a_rows = read_csv(st_a);
            const auto b_rows = read_csv(st_b);
            const auto a = column(a_rows, "rmse_all", st_a);
            const auto b = column(b_rows, "rmse_all", st_b);
            const auto buses = column(a_rows, "buses", st_a);
            if (a.size() != b.size()) throw std::runtime_error("error dumps differ in length; evaluate both on the same split");
            std::vector<std::size_t> strata(buses.begin(), buses.end());
            const auto picked = stratified_sample(strata, st_n, st_c.seed);
            std::vector<double> pa, pb;
            for (auto i : picked) {
                pa.push_back(a[i]);
                pb.push_back(b[i]);
            }
            const auto res = wilcoxon_signed_rank(pa, pb);
            ComparisonRow row{st_a, st_b, res, bonferroni(res.p_value, st_m)};
            Outputs out(st_c.out);
            out.write("stats.csv", stats_csv({row}));
            out.finish("stats", nlohmann::json{{"a", st_a}, {"b", st_b}, {"n", st_n}, {"comparisons", st_m}, {"seed", st_c.seed}});
            std::printf("n %zu W+ %.6g W- %.6g p %.6g p_bonferroni %.6g (%s)\n", res.n, res.w_plus, res.w_minus, res.p_value,
                        row.p_adjusted, res.exact ? "exact" : "normal approximation");
        } else if (report->parsed()) {
            const auto cfg = load_config(rp_c, rp_o);
            fs::create_directories(rp_c.out);
            const auto result = run_pipeline(cfg, rp_c.out, [](const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); });
            std::printf("source MV test RMSE %.6g\n", result.base_mv_rmse);
            for (const auto& r : result.table) {
                std::printf("%-10s seed %llu HV RMSE %.6g L_PF %.6g rho %.4f\n", r.mode.c_str(),
                            static_cast<unsigned long long>(r.seed), r.rmse_all, r.l_pf, r.rho);
            }
            std::printf("%zu files written to %s\n", result.outputs.size(), rp_c.out.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
