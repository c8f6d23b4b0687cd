#include <gtest/gtest.h>

#include "dpi/isolation.hpp"
#include "dpi/tasks.hpp"
#include "dpi/trainer.hpp"
#include "oracles.hpp"

using namespace dpi;

namespace {
TaskSpec block_task(std::string id, TaskFamily fam, BlockRange block, std::uint64_t seed) {
    TaskSpec t;
    t.task_id = std::move(id);
    t.family = fam;
    t.block = block;
    t.seed = seed;
    t.noise_std = 0;
    return t;
}
}  // namespace

TEST(GenerateTask, NoiselessRegressionIsExact) {
    auto t = block_task("A", TaskFamily::block_regression, {0, 4}, 1);
    ModelSpec spec{ModelKind::linear, 10, 0, 2, Activation::tanh};
    auto d = generate_task(t, spec);
    auto w = generating_weights(t, 2);
    for (std::size_t s = 0; s < d.eval.size(); ++s) {
        for (std::size_t r = 0; r < 2; ++r) {
            double y = 0;
            for (std::size_t c = 0; c < 4; ++c) y += w(r, c) * d.eval.inputs(s, c);
            EXPECT_NEAR(d.eval.targets(s, r), y, 1e-14);
        }
        for (std::size_t c = 4; c < 10; ++c) EXPECT_EQ(d.eval.inputs(s, c), 0.0);
    }
    EXPECT_LT(loss(spec, generating_params(t, 10, 2), d.eval), 1e-28);
}

TEST(GenerateTask, ClassificationLabelsFollowGeneratingModel) {
    auto t = block_task("C", TaskFamily::block_classification, {2, 6}, 4);
    ModelSpec spec{ModelKind::linear, 8, 0, 3, Activation::tanh};
    auto d = generate_task(t, spec);
    auto logits = predict(spec, generating_params(t, 8, 3), d.eval.inputs);
    for (std::size_t s = 0; s < d.eval.size(); ++s) {
        auto row = logits.row(s);
        EXPECT_EQ(d.eval.labels[s], static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
}

TEST(GenerateTask, Deterministic) {
    auto t = block_task("A", TaskFamily::block_regression, {0, 4}, 1);
    t.noise_std = 0.1;
    ModelSpec spec{ModelKind::linear, 8, 0, 2, Activation::tanh};
    auto a = generate_task(t, spec), b = generate_task(t, spec);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.eval, b.eval);
    t.seed = 2;
    EXPECT_FALSE(generate_task(t, spec).train == a.train);
}

TEST(GenerateTask, BlockOutOfRange) {
    auto t = block_task("A", TaskFamily::block_regression, {6, 10}, 1);
    ModelSpec spec{ModelKind::linear, 8, 0, 2, Activation::tanh};
    EXPECT_THROW(generate_task(t, spec), ConfigError);
    t.block = {3, 3};
    EXPECT_THROW(generate_task(t, spec), ConfigError);
}

// Probe of a linear model on a [0,4) task: >= 90% of |delta| mass on weights fed by features 0..3.
TEST(GenerateTask, ProbeMassConcentratesOnBlock) {
    auto t = block_task("A", TaskFamily::block_regression, {0, 4}, 6);
    ModelSpec spec{ModelKind::linear, 16, 0, 2, Activation::tanh};
    auto d = generate_task(t, spec);
    TrainingConfig cfg;
    cfg.optimizer = OptimizerKind::sgd;
    cfg.lr = 0.05;
    cfg.seed = 1;
    auto theta0 = init_params(spec, 3);
    auto mags = delta_magnitude(probe_finetune(spec, theta0, d, cfg), theta0);
    double total = 0, in_block = 0;
    for (std::size_t j = 0; j < mags.dim(); ++j) {
        total += mags[j];
        if (j < 2 * 16 && j % 16 < 4) in_block += mags[j];
    }
    EXPECT_GE(in_block / total, 0.9);
}

TEST(Suites, DisjointAndOverlappingLayouts) {
    auto s = make_benchmark_suite(SuiteProfile::disjoint, 3, 12, 1);
    ASSERT_EQ(s.tasks.size(), 3u);
    EXPECT_EQ(s.tasks[0].block, (BlockRange{0, 4}));
    EXPECT_EQ(s.tasks[1].block, (BlockRange{4, 8}));
    EXPECT_EQ(s.tasks[2].block, (BlockRange{8, 12}));
    EXPECT_EQ(s.expected_grouping.size(), 3u);
    auto o = make_benchmark_suite(SuiteProfile::overlapping, 2, 8, 1);
    EXPECT_EQ(o.tasks[0].block, (BlockRange{0, 4}));
    EXPECT_EQ(o.tasks[1].block, (BlockRange{0, 4}));
    EXPECT_EQ(o.expected_grouping, (std::vector<std::vector<std::string>>{{"A", "B"}}));
    EXPECT_THROW(make_benchmark_suite(SuiteProfile::disjoint, 3, 10, 1), ConfigError);
}

TEST(Suites, MixedLayoutAndRecoveredGrouping) {
    SuiteOptions opts;
    opts.noise_std = 0;
    auto s = make_benchmark_suite(SuiteProfile::mixed, 4, 30, 3, opts);
    EXPECT_EQ(s.tasks[0].block, s.tasks[1].block);
    EXPECT_EQ(s.tasks[2].block, (BlockRange{10, 20}));
    EXPECT_EQ(s.tasks[3].block, (BlockRange{20, 30}));
    const std::vector<std::vector<std::string>> truth{{"A", "B"}, {"C"}, {"D"}};
    EXPECT_EQ(s.expected_grouping, truth);

    // full probe pipeline against the recorded ground truth
    auto data = generate_suite_data(s);
    auto theta0 = init_params(s.model, 1);
    TrainingConfig cfg;
    cfg.optimizer = OptimizerKind::sgd;
    cfg.lr = 0.05;
    std::vector<CoreRegion> regions;
    for (const auto& d : data) {
        regions.push_back(top_k_region(delta_magnitude(probe_finetune(s.model, theta0, d, cfg), theta0), 5, d.spec.task_id));
    }
    auto groups = build_grouping(similarity_matrix(regions), 0.1);
    EXPECT_EQ(groups, truth);
}

TEST(Suites, DeterministicFingerprint) {
    auto a = make_benchmark_suite(SuiteProfile::mixed, 5, 40, 42);
    auto b = make_benchmark_suite(SuiteProfile::mixed, 5, 40, 42);
    EXPECT_EQ(a, b);
    EXPECT_EQ(suite_fingerprint(a), suite_fingerprint(b));
    EXPECT_NE(suite_fingerprint(a), suite_fingerprint(make_benchmark_suite(SuiteProfile::mixed, 5, 40, 43)));
    EXPECT_EQ(generate_suite_data(a)[2].train, generate_suite_data(b)[2].train);
}

TEST(Suites, GroundTruthMatchesBlocks) {
    for (auto prof : {SuiteProfile::disjoint, SuiteProfile::overlapping, SuiteProfile::mixed, SuiteProfile::adversarial}) {
        auto s = make_benchmark_suite(prof, 5, 40, 7);
        for (const auto& g : s.expected_grouping) {
            for (const auto& id : g) EXPECT_EQ(s.tasks[s.index_of(id)].block, s.tasks[s.index_of(g[0])].block);
        }
    }
}

TEST(Suites, AdversarialShape) {
    auto s = make_adversarial_suite(1);
    EXPECT_EQ(s.tasks.size(), 5u);
    EXPECT_EQ(param_count(s.model), 2004u);
    EXPECT_EQ(s.expected_grouping, (std::vector<std::vector<std::string>>{{"A", "B"}, {"C", "D"}, {"E"}}));
}

// Gradient of a noiseless linear block task is exactly zero outside its block
// weights (biases aside).
TEST(Suites, OracleSparsityOnDisjointSuite) {
    SuiteOptions opts;
    opts.noise_std = 0;
    auto s = make_benchmark_suite(SuiteProfile::disjoint, 4, 20, 5, opts);
    auto theta = init_params(s.model, 9);
    const auto in = s.input_dim, o = s.model.output_dim;
    for (const auto& d : generate_suite_data(s)) {
        auto g = grad(s.model, theta, d.train);
        for (std::size_t r = 0; r < o; ++r) {
            for (std::size_t c = 0; c < in; ++c) {
                if (c < d.spec.block.begin || c >= d.spec.block.end) EXPECT_EQ(g[r * in + c], 0.0);
            }
        }
    }
}

TEST(Suites, BatchCsv) {
    auto t = block_task("A", TaskFamily::block_classification, {0, 2}, 1);
    t.n_eval = 3;
    ModelSpec spec{ModelKind::linear, 3, 0, 2, Activation::tanh};
    auto csv = batch_to_csv(generate_task(t, spec).eval);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "x0,x1,x2,label");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}
