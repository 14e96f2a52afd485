#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <set>

#include "gridflow/adaptation.hpp"
#include "gridflow/graph_batch.hpp"
#include "gridflow/optim.hpp"
#include "gridflow/training.hpp"
#include "support.hpp"

using namespace gridflow;

namespace {

Model scalar_model(double w) {
    Model m;
    m.add_parameter({"w", {1, 1}, {w}, false});
    return m;
}

TrainConfig quick(std::size_t epochs) {
    TrainConfig c = TrainConfig::desk();
    c.epochs = epochs;
    c.batch_size = 8;
    c.t0 = 2.0;
    return c;
}

}  // namespace

TEST_CASE("AdamW single steps") {
    SUBCASE("zero gradient, no decay") {
        Model m = scalar_model(1.5);
        AdamW opt({0.0});
        opt.step(m, {{0.0}}, 0.1);
        CHECK(m.parameter("w").values[0] == 1.5);
    }
    SUBCASE("unit gradient moves by lr") {
        // m_hat = g, v_hat = g^2, so the first step is lr * g / (|g| + eps).
        Model m = scalar_model(1.0);
        AdamW opt({0.0});
        opt.step(m, {{1.0}}, 0.1);
        CHECK(m.parameter("w").values[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
    }
    SUBCASE("pure decoupled decay") {
        Model m = scalar_model(2.0);
        AdamW opt({0.5});
        opt.step(m, {{0.0}}, 0.1);
        CHECK(m.parameter("w").values[0] == 2.0 * (1.0 - 0.1 * 0.5));
    }
    SUBCASE("non-finite gradient names the parameter and changes nothing") {
        Model m = scalar_model(1.0);
        m.add_parameter({"v", {1, 2}, {3.0, 4.0}, false});
        AdamW opt;
        CHECK_THROWS_WITH(opt.step(m, {{1.0}, {std::numeric_limits<double>::quiet_NaN(), 0.0}}, 0.1), doctest::Contains("v"));
        CHECK(m.parameter("w").values[0] == 1.0);
        CHECK(opt.steps() == 0);
    }
}

TEST_CASE("cosine annealing with warm restarts") {
    const double hi = 1e-3, lo = 1e-6;
    CHECK(cosine_warm_restart_lr(0.0, 10, 2, hi, lo) == hi);
    CHECK(cosine_warm_restart_lr(5.0, 10, 2, hi, lo) == doctest::Approx((hi + lo) / 2).epsilon(1e-14));
    CHECK(cosine_warm_restart_lr(10.0, 10, 2, hi, lo) == hi);
    CHECK(cosine_warm_restart_lr(20.0, 10, 2, hi, lo) == doctest::Approx((hi + lo) / 2).epsilon(1e-14));
    CHECK(cosine_warm_restart_lr(30.0, 10, 2, hi, lo) == hi);
    CHECK(cosine_warm_restart_lr(9.999, 10, 2, hi, lo) < 1.1 * lo + 1e-9);
    CHECK(cosine_warm_restart_lr(5.0, 10, 1, hi, lo) == doctest::Approx((hi + lo) / 2).epsilon(1e-14));
}

TEST_CASE("training runs") {
    const auto ds = testing::tiny_dataset(30, 5, 61);
    const ModelConfig mc = testing::small_config(2, 3);

    SUBCASE("nothing trainable leaves the model unchanged") {
        Model m(mc, 1);
        apply_mode(m, AdaptMode::ZeroShot);
        const Model before = m;
        const auto res = train(m, ds.samples, ds.splits.train, ds.splits.val, LossConfig{}, quick(3));
        CHECK(res.log.empty());
        CHECK(res.best_epoch == 0);
        for (std::size_t i = 0; i < m.parameters().size(); ++i) CHECK(m.parameters()[i].values == before.parameters()[i].values);
    }
    SUBCASE("identical seeds give identical logs and models") {
        Model a(mc, 2), b(mc, 2);
        const auto ra = train(a, ds.samples, ds.splits.train, ds.splits.val, LossConfig{}, quick(4));
        const auto rb = train(b, ds.samples, ds.splits.train, ds.splits.val, LossConfig{}, quick(4));
        REQUIRE(ra.log.size() == 4);
        for (std::size_t e = 0; e < 4; ++e) {
            CHECK(ra.log[e].loss_data == rb.log[e].loss_data);
            CHECK(ra.log[e].loss_pf == rb.log[e].loss_pf);
            CHECK(ra.log[e].val_rmse == rb.log[e].val_rmse);
        }
        for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameters()[i].values == b.parameters()[i].values);
    }
    SUBCASE("the kept checkpoint is the best validation epoch") {
        Model m(mc, 3);
        const auto res = train(m, ds.samples, ds.splits.train, ds.splits.val, LossConfig{}, quick(6));
        double best = std::numeric_limits<double>::infinity();
        for (const auto& row : res.log) best = std::min(best, row.val_rmse);
        CHECK(res.best_val_rmse == best);
        CHECK(res.best_val_rmse <= res.log.back().val_rmse);
        CHECK(res.log[res.best_epoch - 1].val_rmse == best);
        CHECK(evaluate(m, ds.samples, ds.splits.val, LossConfig{}).rmse_all == doctest::Approx(best).epsilon(1e-12));
        CHECK(res.steps == 6 * 2);
    }
    SUBCASE("worker count does not change the result") {
        TrainConfig c = quick(2);
        c.chunk_size = 3;
        Model a(mc, 4), b(mc, 4);
        setenv("GRIDFLOW_THREADS", "1", 1);
        const auto ra = train(a, ds.samples, ds.splits.train, ds.splits.val, LossConfig{}, c);
        setenv("GRIDFLOW_THREADS", "3", 1);
        const auto rb = train(b, ds.samples, ds.splits.train, ds.splits.val, LossConfig{}, c);
        unsetenv("GRIDFLOW_THREADS");
        CHECK(ra.log.back().val_rmse == rb.log.back().val_rmse);
    }
}

TEST_CASE("a single sample is memorised by full fine-tuning") {
    const auto ds = testing::tiny_dataset(3, 4, 62);
    const std::vector<std::size_t> one{ds.splits.train.front()};
    Model m(testing::small_config(2, 3), 5);
    TrainConfig c = TrainConfig::desk();
    c.epochs = 1500;
    c.batch_size = 1;
    c.t0 = 1500.0;
    LossConfig loss;
    const auto res = train(m, ds.samples, one, one, loss, c);
    MESSAGE("one-sample train RMSE " << res.best_val_rmse << " (flat start " << flat_start_rmse(ds.samples, one) << ")");
    CHECK(res.best_val_rmse <= 1e-4);
}

TEST_CASE("evaluation") {
    SUBCASE("exact predictions give zero error") {
        // A zero-injection grid is solved by the flat start, which a zero head reproduces.
        Grid g = testing::two_bus(0.0, 0.0, 0.1, 0.3);
        g.buses.push_back({2, BusType::PQ, 0.0, 0.0, 1.0, 0.0});
        g.lines.push_back({1, 2, 0.1, 0.3, 0.0, 1.0});
        const auto sol = solve_nr(g, build_ybus(g), flat_init(g));
        const std::vector<Sample> samples{make_sample(g, sol)};
        const Model m(testing::small_config(), 1);
        const auto e = evaluate(m, samples, std::vector<std::size_t>{0}, LossConfig{});
        CHECK(e.rmse_all == 0.0);
        CHECK(e.rmse_v == 0.0);
        CHECK(e.rmse_theta_deg == 0.0);
    }
    SUBCASE("componentwise metrics and degrees") {
        const auto ds = testing::tiny_dataset(4, 6, 63);
        Model m(testing::small_config(), 2);
        testing::jitter(m, 3, 0.1);
        const std::vector<std::size_t> idx{0, 1, 2, 3};
        const auto e = evaluate(m, ds.samples, idx, LossConfig{});
        const auto pred = predict(m, make_batch(ds.samples, idx));
        std::vector<double> pv, tv, pt, tt, pa, ta;
        for (std::size_t g = 0; g < 4; ++g) {
            const auto& s = ds.samples[g];
            for (std::size_t i = 0; i < s.grid.size(); ++i) {
                if (s.grid.buses[i].type == BusType::Slack) continue;
                pv.push_back(pred[g].v_mag[i]);
                tv.push_back(s.target.v_mag[i]);
                pt.push_back(pred[g].theta[i]);
                tt.push_back(s.target.theta[i]);
                pa.insert(pa.end(), {pred[g].v_mag[i], pred[g].theta[i]});
                ta.insert(ta.end(), {s.target.v_mag[i], s.target.theta[i]});
            }
        }
        CHECK(e.rmse_v == doctest::Approx(rmse(pv, tv)).epsilon(1e-12));
        CHECK(e.rmse_theta_deg == doctest::Approx(rmse(pt, tt) * 180.0 / std::numbers::pi).epsilon(1e-12));
        CHECK(e.rmse_all == doctest::Approx(rmse(pa, ta)).epsilon(1e-12));
        CHECK(e.sample_rmse.size() == 4);
        CHECK(e.bus_counts[0] == 6);
    }
}

TEST_CASE("retention") {
    CHECK(retention(0.02, 0.02).ratio == 100.0);
    CHECK(retention(0.02, 0.02).inverse == 100.0);
    CHECK(retention(0.04, 0.02).ratio == 2.0 * retention(0.02, 0.02).ratio);
    CHECK(retention(0.04, 0.02).inverse == 50.0);
    CHECK_THROWS(retention(0.0, 0.02));
    CHECK_THROWS(retention(0.02, 0.0));
}

TEST_CASE("few-shot subsets") {
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < 500; ++i) train.push_back(3 * i);
    CHECK(fewshot_subset(train, 100, 1) == train);
    CHECK(fewshot_subset(train, 2, 1).size() == 10);
    CHECK(fewshot_subset(train, 10, 1).size() == 50);
    CHECK(fewshot_subset(train, 1, 1).size() == 5);
    CHECK(fewshot_subset(std::vector<std::size_t>{1, 2, 3}, 50, 1).size() == 2);
    const auto small = fewshot_subset(train, 2, 7);
    const auto mid = fewshot_subset(train, 10, 7);
    const auto large = fewshot_subset(train, 50, 7);
    const std::set<std::size_t> m(mid.begin(), mid.end()), l(large.begin(), large.end());
    for (auto i : small) CHECK(m.count(i) == 1);
    for (auto i : mid) CHECK(l.count(i) == 1);
    CHECK(fewshot_subset(train, 10, 7) == mid);
    CHECK(fewshot_subset(train, 10, 8) != mid);
    CHECK_THROWS(fewshot_subset(train, 0, 1));
    CHECK_THROWS(fewshot_subset(train, 101, 1));
    CHECK_THROWS(fewshot_subset(std::vector<std::size_t>{1, 2}, 1e-12, 1));
}

TEST_CASE("Pareto dominance") {
    const auto single = pareto_front({{"a", 0.5, 0.1, false}});
    CHECK(single[0].optimal);
    const auto three = pareto_front({{"full", 1.0, 1e-3, false}, {"lp", 0.15, 1.1e-3, false}, {"lo", 0.03, 4e-3, false}});
    for (const auto& p : three) CHECK(p.optimal);
    const auto dominated = pareto_front({{"good", 0.1, 1e-3, false}, {"bad", 0.2, 2e-3, false}});
    CHECK(dominated[0].optimal);
    CHECK_FALSE(dominated[1].optimal);
    const auto tie = pareto_front({{"x", 0.1, 1e-3, false}, {"y", 0.1, 1e-3, false}});
    CHECK(tie[0].optimal);
    CHECK(tie[1].optimal);
}

TEST_CASE("metrics rows") {
    MetricsRecord r;
    r.regime = "HV";
    r.mode = "lora_phead";
    r.rmse_all = 0.5;
    const auto header = metrics_csv_header();
    const auto row = to_csv_row(r);
    CHECK(std::count(header.begin(), header.end(), ',') == std::count(row.begin(), row.end(), ','));
    CHECK(row.rfind("HV,lora_phead,", 0) == 0);
    CHECK(to_json(r)["rmse_all"] == 0.5);
}
