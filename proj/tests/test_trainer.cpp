#include <catch2/catch.hpp>

#include <cstdio>

#include "cats/trainer.hpp"

using namespace cats;

namespace {

GenConfig data_cfg(std::uint64_t seed, std::size_t hw_side = 6, std::size_t L = 1) {
    GenConfig g;
    g.h = g.w = hw_side;
    g.levels = L;
    g.channels = 8;
    g.keypoints = 8;
    g.lattice = 3;
    g.seed = seed;
    return g;
}

AggregatorConfig model_cfg(const GenConfig& g) {
    AggregatorConfig a;
    a.hw = g.h * g.w;
    a.p = (a.hw + 8) % 2 == 0 ? 8 : 9;  // keep (hw+p) even for 2 heads
    a.levels = g.levels;
    a.heads = 2;
    a.depth = 1;
    a.mlp_ratio = 1.0;
    a.level_channels.assign(g.levels, g.channels);
    return a;
}

TrainConfig train_cfg(std::size_t steps, std::uint64_t seed = 5) {
    TrainConfig t;
    t.lr_aggregator = 3e-4;
    t.weight_decay = 0.05;
    t.batch_size = 2;
    t.max_steps = steps;
    t.seed = seed;
    t.tau = 0.05;
    return t;
}

}  // namespace

TEST_CASE("adamw first step moves a scalar by about lr", "[trainer]") {
    TrainConfig cfg = train_cfg(1);
    cfg.weight_decay = 0.0;
    std::vector<Tensor> params{Tensor::from({1}, {2.0}, true)};
    params[0].grad()[0] = 0.7;  // any positive gradient
    AdamWState state = AdamWState::init(params);
    adamw_step(params, state, cfg, 1e-2);
    // mhat/sqrt(vhat) == sign(g) at t=1, so the step is lr up to eps rounding
    REQUIRE(params[0].values()[0] == Approx(2.0 - 1e-2).epsilon(1e-6));
}

TEST_CASE("adamw with zero gradient is a pure decoupled shrink", "[trainer]") {
    TrainConfig cfg = train_cfg(1);
    cfg.weight_decay = 0.1;
    std::vector<Tensor> params{Tensor::from({3}, {1.0, -2.0, 0.5}, true)};
    params[0].ensure_grad();
    AdamWState state = AdamWState::init(params);
    adamw_step(params, state, cfg, 1e-2);
    REQUIRE(params[0].values()[0] == 1.0 * (1.0 - 1e-2 * 0.1));
    REQUIRE(params[0].values()[1] == -2.0 * (1.0 - 1e-2 * 0.1));
    REQUIRE(params[0].values()[2] == 0.5 * (1.0 - 1e-2 * 0.1));
}

TEST_CASE("adamw trajectory matches a scalar reference on a quadratic", "[trainer][oracle]") {
    TrainConfig cfg = train_cfg(1);
    cfg.weight_decay = 0.01;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    const double lr = 0.05;

    std::vector<Tensor> params{Tensor::from({1}, {1.5}, true)};
    AdamWState state = AdamWState::init(params);

    double theta = 1.5, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
        const double g = 2.0 * theta;  // d/dx of x^2
        params[0].zero_grad();
        params[0].grad()[0] = real(2.0 * params[0].values()[0]);
        adamw_step(params, state, cfg, lr);

        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mhat = m / (1.0 - std::pow(0.9, t));
        const double vhat = v / (1.0 - std::pow(0.999, t));
        theta = theta - lr * mhat / (std::sqrt(vhat) + 1e-8) - lr * 0.01 * theta;
        REQUIRE(params[0].values()[0] == Approx(theta).margin(1e-12));
    }
}

TEST_CASE("adamw rejects mismatched state", "[trainer]") {
    TrainConfig cfg = train_cfg(1);
    std::vector<Tensor> params{Tensor::from({2}, {1.0, 2.0}, true)};
    AdamWState state = AdamWState::init({Tensor::zeros({3})});
    params[0].ensure_grad();
    REQUIRE_THROWS_AS(adamw_step(params, state, cfg, 1e-3), UsageError);
}

TEST_CASE("zero-step training returns the zero-init checkpoint", "[trainer]") {
    GenConfig g = data_cfg(3);
    std::vector<SyntheticPair> data{generate_pair(g)};
    TrainResult r = train(data, train_cfg(0), model_cfg(g));
    REQUIRE(r.checkpoint.step == 0);
    REQUIRE(r.log.empty());
    for (real v : r.checkpoint.params.out_proj.w.values()) REQUIRE(v == 0.0);

    // residual identity: the untrained model scores exactly like WTA
    EvalMetrics model = evaluate(r.checkpoint, data, 0.05);
    EvalMetrics wta = wta_baseline_set(data, 0.05);
    REQUIRE(model.aepe == wta.aepe);
    REQUIRE(model.pck10 == wta.pck10);
}

TEST_CASE("a short overfit run reduces the loss", "[trainer]") {
    GenConfig g = data_cfg(7);
    std::vector<SyntheticPair> data{generate_pair(g)};
    TrainConfig t = train_cfg(40);
    t.batch_size = 1;
    TrainResult r = train(data, t, model_cfg(g));
    REQUIRE(r.log.size() == 40);
    REQUIRE(r.log.back().loss < r.log.front().loss * 0.9);
    for (const TrainLogRow& row : r.log) REQUIRE(std::isfinite(row.loss));
}

TEST_CASE("training is deterministic in the seed", "[trainer]") {
    GenConfig g = data_cfg(11);
    std::vector<SyntheticPair> data{generate_pair(g), generate_pair(data_cfg(12))};
    TrainConfig t = train_cfg(8, 77);
    TrainResult a = train(data, t, model_cfg(g));
    TrainResult b = train(data, t, model_cfg(g));
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) REQUIRE(a.log[i].loss == b.log[i].loss);
}

TEST_CASE("checkpoint save/load round-trips bit-exactly", "[trainer]") {
    GenConfig g = data_cfg(13);
    std::vector<SyntheticPair> data{generate_pair(g)};
    TrainConfig t = train_cfg(5);
    TrainResult r = train(data, t, model_cfg(g));
    const std::string path = "checkpoint_roundtrip_test.cats";
    save_checkpoint(r.checkpoint, path);
    Checkpoint loaded = load_checkpoint(path);
    REQUIRE(loaded.step == r.checkpoint.step);
    REQUIRE(loaded.rng.state == r.checkpoint.rng.state);
    const auto a = r.checkpoint.params.named();
    const auto b = loaded.params.named();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].first == b[i].first);
        REQUIRE(a[i].second.values() == b[i].second.values());
    }
    for (std::size_t i = 0; i < r.checkpoint.opt.m.size(); ++i) {
        REQUIRE(r.checkpoint.opt.m[i].values() == loaded.opt.m[i].values());
        REQUIRE(r.checkpoint.opt.v[i].values() == loaded.opt.v[i].values());
    }
    std::remove(path.c_str());
}

TEST_CASE("resumed training matches the uninterrupted run", "[trainer]") {
    GenConfig g = data_cfg(17);
    std::vector<SyntheticPair> data{generate_pair(g), generate_pair(data_cfg(18))};
    AggregatorConfig acfg = model_cfg(g);

    TrainConfig t_full = train_cfg(12, 99);
    TrainResult full = train(data, t_full, acfg);

    // same schedule, interrupted at step 6
    TrainResult half = train(data, t_full, acfg, nullptr, std::nullopt, 6);
    REQUIRE(half.checkpoint.step == 6);
    const std::string path = "checkpoint_resume_test.cats";
    save_checkpoint(half.checkpoint, path);
    Checkpoint mid = load_checkpoint(path);
    TrainResult rest = train(data, t_full, acfg, nullptr, std::move(mid));

    REQUIRE(rest.checkpoint.step == full.checkpoint.step);
    const auto a = full.checkpoint.params.named();
    const auto b = rest.checkpoint.params.named();
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i].second.values() == b[i].second.values());
    // the resumed log holds steps 7..12 and must equal the tail of the full log
    REQUIRE(rest.log.size() == 6);
    for (std::size_t i = 0; i < rest.log.size(); ++i) {
        REQUIRE(rest.log[i].step == full.log[i + 6].step);
        REQUIRE(rest.log[i].loss == full.log[i + 6].loss);
    }
    std::remove(path.c_str());
}

TEST_CASE("resume rejects a mismatched config", "[trainer]") {
    GenConfig g = data_cfg(19);
    std::vector<SyntheticPair> data{generate_pair(g)};
    AggregatorConfig acfg = model_cfg(g);
    TrainResult r = train(data, train_cfg(1), acfg);
    AggregatorConfig other = acfg;
    other.heads = 1;
    REQUIRE_THROWS_AS(train(data, train_cfg(2), other, nullptr, std::move(r.checkpoint)),
                      ConfigError);
}

TEST_CASE("evaluation is repeatable and never mutates parameters", "[trainer]") {
    GenConfig g = data_cfg(23);
    std::vector<SyntheticPair> data{generate_pair(g), generate_pair(data_cfg(24))};
    TrainResult r = train(data, train_cfg(3), model_cfg(g));
    std::vector<std::vector<real>> before;
    for (const auto& [name, t] : r.checkpoint.params.named()) before.push_back(t.values());
    EvalMetrics m1 = evaluate(r.checkpoint, data, 0.05);
    EvalMetrics m2 = evaluate(r.checkpoint, data, 0.05);
    REQUIRE(m1.aepe == m2.aepe);
    REQUIRE(m1.pck05 == m2.pck05);
    REQUIRE(m1.pck10 == m2.pck10);
    REQUIRE(m1.pck15 == m2.pck15);
    const auto named = r.checkpoint.params.named();
    for (std::size_t i = 0; i < named.size(); ++i) REQUIRE(named[i].second.values() == before[i]);
}

TEST_CASE("milestone schedule multiplies the learning rate", "[trainer]") {
    TrainConfig t = train_cfg(100);
    REQUIRE(t.lr_at_step(0) == Approx(3e-4));
    REQUIRE(t.lr_at_step(49) == Approx(3e-4));
    REQUIRE(t.lr_at_step(50) == Approx(1.5e-4));
    REQUIRE(t.lr_at_step(75) == Approx(0.75e-4));

    t.lr_milestones = {{10, 0.1}, {5, 0.1}};
    REQUIRE_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("metric log format", "[trainer]") {
    std::vector<TrainLogRow> log(2);
    log[0].step = 1;
    log[0].loss = 0.5;
    log[1].step = 2;
    log[1].loss = 0.25;
    log[1].has_eval = true;
    log[1].eval = {0.125, 0.5, 0.75, 1.0};
    const std::string path = "metric_log_test.csv";
    save_metric_log(log, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    REQUIRE(line == "step,loss,aepe,pck05,pck10,pck15");
    std::getline(in, line);
    REQUIRE(line == "1,0.5,,,,");
    std::getline(in, line);
    REQUIRE(line == "2,0.25,0.125,0.5,0.75,1");
    std::remove(path.c_str());
}
