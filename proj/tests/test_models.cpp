#include <gtest/gtest.h>

#include "dpi/models.hpp"
#include "dpi/tasks.hpp"
#include "oracles.hpp"

using namespace dpi;

namespace {

ModelSpec random_spec(ModelKind kind, Rng& rng) {
    ModelSpec s;
    s.kind = kind;
    s.input_dim = 1 + rng.below(6);
    s.output_dim = 2 + rng.below(3);
    s.hidden_dim = kind == ModelKind::linear ? 0 : 1 + rng.below(5);
    s.activation = rng.below(2) ? Activation::tanh : Activation::relu;
    return s;
}

ParamVector random_theta(const ModelSpec& spec, Rng& rng) {
    std::vector<double> v(param_count(spec));
    for (auto& x : v) x = rng.normal();
    return ParamVector(std::move(v));
}

double max_rel_error(const std::vector<double>& g, const std::vector<double>& fd) {
    double worst = 0;
    for (std::size_t j = 0; j < g.size(); ++j) worst = std::max(worst, std::abs(g[j] - fd[j]) / (1 + std::abs(fd[j])));
    return worst;
}

}  // namespace

TEST(ModelSpec, ParamCount) {
    EXPECT_EQ(param_count({ModelKind::linear, 3, 0, 2, Activation::tanh}), 8u);
    EXPECT_EQ(param_count({ModelKind::mlp1, 3, 4, 2, Activation::tanh}), 3u * 4 + 4 + 4 * 2 + 2);
    EXPECT_EQ(param_count({ModelKind::attn_toy, 3, 4, 2, Activation::tanh}), 2u * 3 * 4 + 4 + 4 * 2 + 2);
    EXPECT_THROW(param_count({ModelKind::mlp1, 3, 0, 2, Activation::tanh}), ConfigError);
    EXPECT_THROW(param_count({ModelKind::linear, 0, 0, 2, Activation::tanh}), ConfigError);
}

TEST(ModelSpec, HashStable) {
    ModelSpec a{ModelKind::mlp1, 3, 4, 2, Activation::relu};
    ModelSpec b = a;
    EXPECT_EQ(spec_hash(a), spec_hash(b));
    b.hidden_dim = 5;
    EXPECT_NE(spec_hash(a), spec_hash(b));
}

TEST(InitParams, DeterministicZeroBiasAndSized) {
    ModelSpec lin{ModelKind::linear, 3, 0, 2, Activation::tanh};
    EXPECT_EQ(init_params(lin, 7), init_params(lin, 7));
    EXPECT_FALSE(init_params(lin, 7) == init_params(lin, 8));
    for (auto kind : {ModelKind::linear, ModelKind::mlp1, ModelKind::attn_toy}) {
        ModelSpec s{kind, 5, 3, 2, Activation::tanh};
        auto p = init_params(s, 1);
        EXPECT_EQ(p.dim(), param_count(s));
        for (const auto& block : layout(s).blocks) {
            const double bound = block.is_bias() ? 0.0 : 1.0 / std::sqrt(double(block.fan_in));
            for (std::size_t i = 0; i < block.size(); ++i) {
                if (block.is_bias()) {
                    EXPECT_EQ(p[block.offset + i], 0.0);
                } else {
                    EXPECT_LE(std::abs(p[block.offset + i]), bound);
                }
            }
        }
    }
}

TEST(Loss, GeneratingWeightsGiveZeroMse) {
    TaskSpec t;
    t.task_id = "A";
    t.family = TaskFamily::block_regression;
    t.block = {0, 4};
    t.seed = 3;
    t.noise_std = 0;
    ModelSpec spec{ModelKind::linear, 8, 0, 2, Activation::tanh};
    auto data = generate_task(t, spec);
    EXPECT_LT(loss(spec, generating_params(t, 8, 2), data.eval), 1e-28);
    EXPECT_LT(loss(spec, generating_params(t, 8, 2), data.train), 1e-28);
}

TEST(Loss, UniformTwoClassCrossEntropy) {
    ModelSpec spec{ModelKind::linear, 3, 0, 2, Activation::tanh};
    Rng rng(1);
    auto b = oracle::random_batch(spec, Objective::classification, 10, rng);
    EXPECT_NEAR(loss(spec, ParamVector::zeros(8), b), std::log(2.0), 1e-15);
}

TEST(Loss, MatchesStraightLineOracle) {
    Rng rng(21);
    for (auto kind : {ModelKind::linear, ModelKind::mlp1, ModelKind::attn_toy}) {
        for (int t = 0; t < 30; ++t) {
            auto spec = random_spec(kind, rng);
            auto theta = random_theta(spec, rng);
            auto obj = t % 2 ? Objective::regression : Objective::classification;
            auto b = oracle::random_batch(spec, obj, 1 + rng.below(8), rng);
            const double ours = loss(spec, theta, b);
            const double ref = oracle::loss(spec, {theta.values().begin(), theta.values().end()}, b);
            EXPECT_NEAR(ours, ref, 1e-12 * (1 + ref));
            auto y = predict(spec, theta, b.inputs);
            auto yo = oracle::forward(spec, {theta.values().begin(), theta.values().end()},
                                      {b.inputs.row(0).begin(), b.inputs.row(0).end()});
            for (std::size_t r = 0; r < spec.output_dim; ++r) EXPECT_NEAR(y(0, r), yo[r], 1e-12 * (1 + std::abs(yo[r])));
        }
    }
}

TEST(Loss, DeterministicAndBatchChecked) {
    ModelSpec spec{ModelKind::attn_toy, 4, 3, 2, Activation::tanh};
    Rng rng(4);
    auto theta = random_theta(spec, rng);
    auto b = oracle::random_batch(spec, Objective::regression, 5, rng);
    auto a1 = loss_and_grad(spec, theta.values(), b);
    auto a2 = loss_and_grad(spec, theta.values(), b);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a1.loss), std::bit_cast<std::uint64_t>(a2.loss));
    EXPECT_TRUE(bit_identical(a1.grad, a2.grad));
    ModelSpec other = spec;
    other.input_dim = 5;
    EXPECT_THROW(loss(other, init_params(other, 1), b), DimensionError);
    EXPECT_THROW(loss(spec, ParamVector::zeros(3), b), DimensionError);
}

TEST(Grad, ZeroAtMseMinimum) {
    TaskSpec t;
    t.task_id = "A";
    t.family = TaskFamily::block_regression;
    t.block = {2, 6};
    t.seed = 5;
    t.noise_std = 0;
    ModelSpec spec{ModelKind::linear, 8, 0, 3, Activation::tanh};
    auto data = generate_task(t, spec);
    for (double g : grad(spec, generating_params(t, 8, 3), data.train)) EXPECT_NEAR(g, 0.0, 1e-14);
}

// 100 random (spec, theta, batch) triples per model kind.
TEST(Grad, MatchesCentralDifferences) {
    Rng rng(1234);
    for (auto kind : {ModelKind::linear, ModelKind::mlp1, ModelKind::attn_toy}) {
        double worst = 0;
        for (int t = 0; t < 100; ++t) {
            auto spec = random_spec(kind, rng);
            auto theta = random_theta(spec, rng);
            auto b = oracle::random_batch(spec, t % 2 ? Objective::regression : Objective::classification,
                                          1 + rng.below(6), rng);
            worst = std::max(worst, max_rel_error(grad(spec, theta, b), finite_diff_grad(spec, theta, b, 1e-5)));
        }
        EXPECT_LT(worst, 1e-6) << to_string(kind);
    }
}

TEST(Grad, LinearBlockSparsity) {
    TaskSpec t;
    t.task_id = "A";
    t.family = TaskFamily::block_regression;
    t.block = {4, 8};
    t.seed = 9;
    t.noise_std = 0;
    ModelSpec spec{ModelKind::linear, 12, 0, 3, Activation::tanh};
    auto data = generate_task(t, spec);
    auto g = grad(spec, init_params(spec, 2), data.train);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 12; ++c) {
            if (c < 4 || c >= 8) EXPECT_EQ(g[r * 12 + c], 0.0) << r << "," << c;
        }
    }
}

TEST(FiniteDiff, Analytic) {
    auto sq = [](std::span<const double> p) { return p[0] * p[0]; };
    std::vector<double> x{3.0};
    EXPECT_NEAR(finite_diff_grad(sq, x, 1e-5)[0], 6.0, 1e-8);
    auto konst = [](std::span<const double>) { return 4.2; };
    std::vector<double> y{1.0, 2.0};
    for (double g : finite_diff_grad(konst, y, 1e-5)) EXPECT_EQ(g, 0.0);
    EXPECT_THROW(finite_diff_grad(sq, x, 0.0), ConfigError);
}

TEST(Loss, NonFiniteOutputRaisesNumericError) {
    ModelSpec spec{ModelKind::linear, 1, 0, 1, Activation::tanh};
    Batch b;
    b.inputs = Matrix(1, 1);
    b.inputs(0, 0) = 1e300;
    b.targets = Matrix(1, 1);
    EXPECT_THROW(loss(spec, ParamVector({1e300, 0.0}), b), NumericError);
}
