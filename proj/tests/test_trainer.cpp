#include <gtest/gtest.h>

#include "dpi/trainer.hpp"
#include "oracles.hpp"

using namespace dpi;

namespace {

TaskData noiseless_task(const ModelSpec& spec, BlockRange block, std::uint64_t seed, std::size_t n = 64) {
    TaskSpec t;
    t.task_id = "A";
    t.family = TaskFamily::block_regression;
    t.block = block;
    t.seed = seed;
    t.noise_std = 0;
    t.n_train = n;
    return generate_task(t, spec);
}

TrainingConfig sgd(double lr) {
    TrainingConfig c;
    c.optimizer = OptimizerKind::sgd;
    c.lr = lr;
    c.seed = 5;
    return c;
}

}  // namespace

TEST(OptimizerStep, SgdExamples) {
    auto cfg = sgd(0.1);
    std::vector<double> g{1, -2};
    ParamVector theta({0, 0});
    auto st = OptimizerState::fresh(2, cfg.optimizer);
    optimizer_step(st, theta, g, FreezeMask{{1, 1}}, cfg);
    EXPECT_EQ(theta, ParamVector({-0.1, 0.2}));
    ParamVector theta2({0, 0});
    optimizer_step(st, theta2, g, FreezeMask{{0, 1}}, cfg);
    EXPECT_EQ(theta2, ParamVector({0.0, 0.2}));
}

TEST(OptimizerStep, AdamFirstStepAnalytic) {
    TrainingConfig cfg;
    cfg.lr = 0.01;
    ParamVector theta({1.0, 1.0});
    auto st = OptimizerState::fresh(2, cfg.optimizer);
    std::vector<double> g{0.5, -3.0};
    optimizer_step(st, theta, g, FreezeMask::all_trainable(2), cfg);
    // m_hat = g, v_hat = g^2 after one step
    EXPECT_NEAR(theta[0], 1.0 - 0.01 * 0.5 / (0.5 + 1e-8), 1e-15);
    EXPECT_NEAR(theta[1], 1.0 + 0.01 * 3.0 / (3.0 + 1e-8), 1e-15);
}

TEST(OptimizerStep, AdamFrozenCoordinateBitUnchangedOver100Steps) {
    TrainingConfig cfg;
    cfg.lr = 0.05;
    Rng rng(3);
    ParamVector theta({0.3, -0.7, 1.1});
    auto st = OptimizerState::fresh(3, cfg.optimizer);
    FreezeMask mask{{1, 0, 1}};
    const double before = theta[1];
    for (int s = 0; s < 100; ++s) {
        std::vector<double> g{rng.normal(), rng.normal(), rng.normal()};
        optimizer_step(st, theta, g, mask, cfg);
    }
    EXPECT_EQ(std::bit_cast<std::uint64_t>(theta[1]), std::bit_cast<std::uint64_t>(before));
    EXPECT_EQ(std::bit_cast<std::uint64_t>(st.m[1]), 0u);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(st.v[1]), 0u);
    EXPECT_NE(theta[0], 0.3);
}

TEST(OptimizerStep, RejectsBadInputWithoutSideEffects) {
    auto cfg = sgd(0.1);
    ParamVector theta({1, 2});
    auto st = OptimizerState::fresh(2, cfg.optimizer);
    std::vector<double> g{1, std::nan("")};
    try {
        optimizer_step(st, theta, g, FreezeMask::all_trainable(2), cfg);
        FAIL();
    } catch (const NumericError& e) {
        EXPECT_EQ(e.coordinate, 1);
    }
    EXPECT_EQ(theta, ParamVector({1, 2}));
    std::vector<double> short_g{1};
    EXPECT_THROW(optimizer_step(st, theta, short_g, FreezeMask::all_trainable(2), cfg), DimensionError);
}

TEST(TrainingConfig, Validation) {
    TrainingConfig c;
    c.lr = 0;
    EXPECT_THROW(validate(c), ConfigError);
    c = {};
    c.beta1 = 1.0;
    EXPECT_THROW(validate(c), ConfigError);
    c = {};
    c.eps = 0;
    EXPECT_THROW(validate(c), ConfigError);
    c = {};
    c.batch_size = 0;
    EXPECT_THROW(validate(c), ConfigError);
}

TEST(Probe, ZeroEpochsReturnsTheta0) {
    ModelSpec spec{ModelKind::linear, 8, 0, 2, Activation::tanh};
    auto d = noiseless_task(spec, {0, 4}, 1);
    auto theta0 = init_params(spec, 1);
    auto cfg = sgd(0.1);
    cfg.epochs_probe = 0;
    auto out = probe_finetune(spec, theta0, d, cfg);
    EXPECT_EQ(out, theta0);
    const auto mag = delta_magnitude(out, theta0);
    for (double m : mag.values()) EXPECT_EQ(m, 0.0);
}

// Full-batch SGD for one epoch is one step: delta == lr * |analytic gradient|.
TEST(Probe, OneFullBatchEpochMatchesAnalyticGradient) {
    ModelSpec spec{ModelKind::linear, 6, 0, 2, Activation::tanh};
    auto d = noiseless_task(spec, {0, 3}, 2, 32);
    auto theta0 = init_params(spec, 4);
    auto cfg = sgd(0.2);
    cfg.epochs_probe = 1;
    cfg.batch_size = 32;
    auto mags = delta_magnitude(probe_finetune(spec, theta0, d, cfg), theta0);
    // closed form of the MSE gradient for a linear model
    const std::size_t n = 32, in = 6, o = 2;
    std::vector<double> g(in * o + o, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t r = 0; r < o; ++r) {
            double y = theta0[in * o + r];
            for (std::size_t c = 0; c < in; ++c) y += theta0[r * in + c] * d.train.inputs(s, c);
            const double e = 2.0 * (y - d.train.targets(s, r)) / double(n * o);
            for (std::size_t c = 0; c < in; ++c) g[r * in + c] += e * d.train.inputs(s, c);
            g[in * o + r] += e;
        }
    }
    for (std::size_t j = 0; j < g.size(); ++j) EXPECT_NEAR(mags[j], 0.2 * std::abs(g[j]), 1e-13);
}

TEST(Probe, DeterministicAndPure) {
    ModelSpec spec{ModelKind::mlp1, 8, 5, 2, Activation::tanh};
    auto d = noiseless_task(spec, {0, 4}, 3);
    auto theta0 = init_params(spec, 2);
    const auto copy = theta0;
    TrainingConfig cfg;
    cfg.seed = 9;
    auto a = probe_finetune(spec, theta0, d, cfg);
    auto b = probe_finetune(spec, theta0, d, cfg);
    EXPECT_EQ(a, b);
    EXPECT_EQ(theta0, copy);
    EXPECT_FALSE(a == theta0);
}

TEST(TrainStage, AllFrozenIsIdentity) {
    ModelSpec spec{ModelKind::linear, 8, 0, 2, Activation::tanh};
    auto d = noiseless_task(spec, {0, 4}, 1);
    auto theta = init_params(spec, 1);
    const TaskData* tasks[] = {&d};
    auto out = train_stage_with_state(spec, theta, tasks, FreezeMask{std::vector<std::uint8_t>(theta.dim(), 0)}, TrainingConfig{});
    EXPECT_EQ(out.params, theta);
    for (double m : out.state.m) EXPECT_EQ(m, 0.0);
}

TEST(TrainStage, SingleTaskEqualsProbeWithStageEpochs) {
    ModelSpec spec{ModelKind::linear, 8, 0, 2, Activation::tanh};
    auto d = noiseless_task(spec, {0, 4}, 1);
    auto theta = init_params(spec, 1);
    TrainingConfig cfg;
    cfg.epochs_stage = 4;
    auto probe_cfg = cfg;
    probe_cfg.epochs_probe = 4;
    const TaskData* tasks[] = {&d};
    EXPECT_EQ(train_stage(spec, theta, tasks, FreezeMask::all_trainable(theta.dim()), cfg),
              probe_finetune(spec, theta, d, probe_cfg));
}

TEST(TrainStage, FrozenRegionInvariantOnMixedSuite) {
    auto suite = make_benchmark_suite(SuiteProfile::mixed, 5, 40, 2);
    auto data = generate_suite_data(suite);
    auto theta = init_params(suite.model, 1);
    Rng rng(4);
    std::vector<std::size_t> frozen;
    for (std::size_t j = 0; j < theta.dim(); ++j) {
        if (rng.uniform() < 0.3) frozen.push_back(j);
    }
    auto mask = mask_from_frozen(frozen, theta.dim());
    std::vector<const TaskData*> tasks;
    for (const auto& d : data) tasks.push_back(&d);
    TrainingConfig cfg;
    cfg.lr = 0.05;
    auto out = train_stage_with_state(suite.model, theta, tasks, mask, cfg);
    for (auto j : frozen) {
        EXPECT_EQ(std::bit_cast<std::uint64_t>(out.params[j]), std::bit_cast<std::uint64_t>(theta[j]));
        EXPECT_EQ(out.state.m[j], 0.0);
        EXPECT_EQ(out.state.v[j], 0.0);
    }
}

TEST(TrainStage, SgdLossNonIncreasingOnNoiselessLinearSuite) {
    SuiteOptions opts;
    opts.noise_std = 0;
    auto suite = make_benchmark_suite(SuiteProfile::disjoint, 3, 12, 6, opts);
    auto data = generate_suite_data(suite);
    std::vector<const TaskData*> tasks;
    for (const auto& d : data) tasks.push_back(&d);
    auto cfg = sgd(1e-2);
    cfg.epochs_stage = 1;
    auto theta = init_params(suite.model, 2);
    auto stage_loss = [&](const ParamVector& p) {
        double s = 0;
        for (const auto& d : data) s += loss(suite.model, p, d.train);
        return s;
    };
    double prev = stage_loss(theta);
    for (int epoch = 0; epoch < 10; ++epoch) {
        cfg.seed = epoch;
        theta = train_stage(suite.model, theta, tasks, FreezeMask::all_trainable(theta.dim()), cfg);
        const double cur = stage_loss(theta);
        EXPECT_LE(cur, prev) << epoch;
        prev = cur;
    }
}

TEST(TrainStage, DeterministicInterleavingAndLog) {
    auto suite = make_benchmark_suite(SuiteProfile::mixed, 3, 20, 1);
    auto data = generate_suite_data(suite);
    std::vector<const TaskData*> tasks;
    for (const auto& d : data) tasks.push_back(&d);
    auto theta = init_params(suite.model, 1);
    TrainingConfig cfg;
    cfg.epochs_stage = 2;
    TrainingLog l1, l2;
    auto a = train_stage_with_state(suite.model, theta, tasks, FreezeMask::all_trainable(theta.dim()), cfg, 1, &l1);
    auto b = train_stage_with_state(suite.model, theta, tasks, FreezeMask::all_trainable(theta.dim()), cfg, 1, &l2);
    EXPECT_EQ(a.params, b.params);
    EXPECT_EQ(l1.to_csv(), l2.to_csv());
    // ceil(768 / 32) steps per epoch
    EXPECT_EQ(l1.rows.size(), 2u * 24);
    EXPECT_EQ(l1.to_csv().substr(0, 23), "step,stage,task_id,loss");
}

TEST(TrainStage, DivergenceRaisesNumericError) {
    ModelSpec spec{ModelKind::linear, 8, 0, 2, Activation::tanh};
    auto d = noiseless_task(spec, {0, 4}, 1);
    const TaskData* tasks[] = {&d};
    auto cfg = sgd(1e200);
    EXPECT_THROW(train_stage(spec, init_params(spec, 1), tasks, FreezeMask::all_trainable(18), cfg), NumericError);
}
