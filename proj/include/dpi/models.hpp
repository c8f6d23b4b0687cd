#pragma once

// Tiny differentiable models over a flat ParamVector, with hand-derived
// gradients and a central-difference oracle.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpi/error.hpp"
#include "dpi/param_core.hpp"
#include "dpi/random.hpp"

namespace dpi {

enum class ModelKind { linear, mlp1, attn_toy };
enum class Activation { tanh, relu };

inline const char* to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::linear: return "linear";
        case ModelKind::mlp1: return "mlp1";
        case ModelKind::attn_toy: return "attn_toy";
    }
    return "?";
}

inline const char* to_string(Activation act) { return act == Activation::tanh ? "tanh" : "relu"; }

inline std::optional<ModelKind> parse_model_kind(std::string_view s) {
    if (s == "linear") return ModelKind::linear;
    if (s == "mlp1") return ModelKind::mlp1;
    if (s == "attn_toy") return ModelKind::attn_toy;
    return std::nullopt;
}

inline std::optional<Activation> parse_activation(std::string_view s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    return std::nullopt;
}

struct ModelSpec {
    ModelKind kind = ModelKind::linear;
    std::size_t input_dim = 1;
    std::size_t hidden_dim = 0;  // mlp1 and attn_toy only
    std::size_t output_dim = 1;
    Activation activation = Activation::tanh;  // mlp1 only

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline void validate(const ModelSpec& spec) {
    if (spec.input_dim == 0) throw ConfigError("model.input_dim must be positive");
    if (spec.output_dim == 0) throw ConfigError("model.output_dim must be positive");
    if (spec.kind != ModelKind::linear && spec.hidden_dim == 0) {
        throw ConfigError("model.hidden_dim must be positive for " + std::string(to_string(spec.kind)));
    }
}

/// Canonical text form; fields irrelevant to the kind are omitted so that
/// equivalent specs hash equal.
inline std::string canonical_string(const ModelSpec& spec) {
    std::string s = std::string("kind=") + to_string(spec.kind) + ";in=" + std::to_string(spec.input_dim);
    if (spec.kind != ModelKind::linear) s += ";hidden=" + std::to_string(spec.hidden_dim);
    s += ";out=" + std::to_string(spec.output_dim);
    if (spec.kind == ModelKind::mlp1) s += std::string(";act=") + to_string(spec.activation);
    return s;
}

inline std::uint64_t spec_hash(const ModelSpec& spec) {
    Fnv1a fnv;
    fnv.update(canonical_string(spec));
    return fnv.digest();
}

/// Offsets of each parameter block inside the flat vector.
///   linear:   W[out x in], b[out]
///   mlp1:     W1[hidden x in], b1[hidden], W2[out x hidden], b2[out]
///   attn_toy: E[hidden x in], Wq[hidden x in], bq[hidden], Wo[out x hidden], bo[out]
struct ParamLayout {
    struct Block {
        std::size_t offset = 0;
        std::size_t rows = 0;
        std::size_t cols = 0;  // 1 for bias vectors
        std::size_t fan_in = 0;  // 0 marks a bias block
        [[nodiscard]] std::size_t size() const { return rows * cols; }
        [[nodiscard]] bool is_bias() const { return fan_in == 0; }
    };
    std::vector<Block> blocks;
    std::size_t total = 0;
};

inline ParamLayout layout(const ModelSpec& spec) {
    validate(spec);
    ParamLayout out;
    auto add = [&](std::size_t rows, std::size_t cols, std::size_t fan_in) {
        out.blocks.push_back({out.total, rows, cols, fan_in});
        out.total += rows * cols;
    };
    const auto in = spec.input_dim, h = spec.hidden_dim, o = spec.output_dim;
    switch (spec.kind) {
        case ModelKind::linear:
            add(o, in, in);
            add(o, 1, 0);
            break;
        case ModelKind::mlp1:
            add(h, in, in);
            add(h, 1, 0);
            add(o, h, h);
            add(o, 1, 0);
            break;
        case ModelKind::attn_toy:
            add(h, in, in);
            add(h, in, in);
            add(h, 1, 0);
            add(o, h, h);
            add(o, 1, 0);
            break;
    }
    return out;
}

inline std::size_t param_count(const ModelSpec& spec) { return layout(spec).total; }

/// Weights uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)), biases exactly zero.
inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
    const auto lay = layout(spec);
    std::vector<double> values(lay.total, 0.0);
    Rng rng(seed);
    for (const auto& block : lay.blocks) {
        if (block.is_bias()) continue;
        const double s = 1.0 / std::sqrt(static_cast<double>(block.fan_in));
        for (std::size_t i = 0; i < block.size(); ++i) values[block.offset + i] = rng.uniform(-s, s);
    }
    return ParamVector(std::move(values));
}

// ---------------------------------------------------------------------------

/// Row-major dense matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    [[nodiscard]] std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    [[nodiscard]] std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    friend bool operator==(const Matrix&, const Matrix&) = default;
};

enum class Objective { regression, classification };

struct Batch {
    Matrix inputs;                     // N x input_dim
    Matrix targets;                    // N x output_dim, regression only
    std::vector<std::size_t> labels;   // N, classification only
    Objective objective = Objective::regression;
    std::string task_id;

    [[nodiscard]] std::size_t size() const { return inputs.rows; }
    friend bool operator==(const Batch&, const Batch&) = default;
};

inline void check_batch(const ModelSpec& spec, const Batch& batch) {
    if (batch.inputs.cols != spec.input_dim) throw DimensionError("batch input width does not match model.input_dim");
    if (batch.size() == 0) throw DimensionError("empty batch");
    if (batch.objective == Objective::regression) {
        if (batch.targets.rows != batch.size() || batch.targets.cols != spec.output_dim) {
            throw DimensionError("regression targets must be N x output_dim");
        }
    } else {
        if (batch.labels.size() != batch.size()) throw DimensionError("label count does not match batch size");
        for (auto l : batch.labels) {
            if (l >= spec.output_dim) throw DimensionError("class label exceeds output_dim");
        }
    }
}

namespace detail {

inline double activate(Activation act, double z) { return act == Activation::tanh ? std::tanh(z) : (z > 0.0 ? z : 0.0); }

/// Derivative expressed through the pre-activation.
inline double activate_grad(Activation act, double z) {
    if (act == Activation::tanh) {
        const double t = std::tanh(z);
        return 1.0 - t * t;
    }
    return z > 0.0 ? 1.0 : 0.0;
}

/// Forward and (optionally) backward pass for one sample. `dloss_dy` is the
/// caller-supplied output gradient callback: it receives y and returns dL/dy
/// for this sample while accumulating the loss.
class SampleEvaluator {
public:
    SampleEvaluator(const ModelSpec& spec, std::span<const double> params)
        : spec_(spec), lay_(layout(spec)), p_(params) {
        y_.resize(spec.output_dim);
        dy_.resize(spec.output_dim);
        if (spec.kind != ModelKind::linear) {
            z_.resize(spec.hidden_dim);
            a_.resize(spec.hidden_dim);
            dh_.resize(spec.hidden_dim);
        }
        if (spec.kind == ModelKind::attn_toy) {
            q_.resize(spec.hidden_dim);
            scores_.resize(spec.input_dim);
            alpha_.resize(spec.input_dim);
            dalpha_.resize(spec.input_dim);
            dq_.resize(spec.hidden_dim);
        }
    }

    std::span<const double> forward(std::span<const double> x) {
        const auto in = spec_.input_dim, h = spec_.hidden_dim, o = spec_.output_dim;
        switch (spec_.kind) {
            case ModelKind::linear: {
                const double* W = p_.data() + lay_.blocks[0].offset;
                const double* b = p_.data() + lay_.blocks[1].offset;
                for (std::size_t r = 0; r < o; ++r) {
                    double s = b[r];
                    for (std::size_t c = 0; c < in; ++c) s += W[r * in + c] * x[c];
                    y_[r] = s;
                }
                break;
            }
            case ModelKind::mlp1: {
                const double* W1 = p_.data() + lay_.blocks[0].offset;
                const double* b1 = p_.data() + lay_.blocks[1].offset;
                const double* W2 = p_.data() + lay_.blocks[2].offset;
                const double* b2 = p_.data() + lay_.blocks[3].offset;
                for (std::size_t r = 0; r < h; ++r) {
                    double s = b1[r];
                    for (std::size_t c = 0; c < in; ++c) s += W1[r * in + c] * x[c];
                    z_[r] = s;
                    a_[r] = activate(spec_.activation, s);
                }
                for (std::size_t r = 0; r < o; ++r) {
                    double s = b2[r];
                    for (std::size_t c = 0; c < h; ++c) s += W2[r * h + c] * a_[c];
                    y_[r] = s;
                }
                break;
            }
            case ModelKind::attn_toy: {
                // Token i carries the value vector v_i = x_i * E[:, i].
                const double* E = p_.data() + lay_.blocks[0].offset;
                const double* Wq = p_.data() + lay_.blocks[1].offset;
                const double* bq = p_.data() + lay_.blocks[2].offset;
                const double* Wo = p_.data() + lay_.blocks[3].offset;
                const double* bo = p_.data() + lay_.blocks[4].offset;
                const double scale = 1.0 / std::sqrt(static_cast<double>(h));
                for (std::size_t r = 0; r < h; ++r) {
                    double s = bq[r];
                    for (std::size_t c = 0; c < in; ++c) s += Wq[r * in + c] * x[c];
                    q_[r] = s;
                }
                double max_score = -INFINITY;
                for (std::size_t i = 0; i < in; ++i) {
                    double qe = 0.0;
                    for (std::size_t r = 0; r < h; ++r) qe += q_[r] * E[r * in + i];
                    scores_[i] = x[i] * qe * scale;
                    max_score = std::max(max_score, scores_[i]);
                }
                double denom = 0.0;
                for (std::size_t i = 0; i < in; ++i) {
                    alpha_[i] = std::exp(scores_[i] - max_score);
                    denom += alpha_[i];
                }
                for (std::size_t i = 0; i < in; ++i) alpha_[i] /= denom;
                for (std::size_t r = 0; r < h; ++r) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < in; ++i) s += alpha_[i] * x[i] * E[r * in + i];
                    a_[r] = s;  // context vector
                }
                for (std::size_t r = 0; r < o; ++r) {
                    double s = bo[r];
                    for (std::size_t c = 0; c < h; ++c) s += Wo[r * h + c] * a_[c];
                    y_[r] = s;
                }
                break;
            }
        }
        return y_;
    }

    /// Accumulates dL/dtheta into `grad` given dL/dy for the last forward() input x.
    void backward(std::span<const double> x, std::span<const double> dy, std::span<double> grad) {
        const auto in = spec_.input_dim, h = spec_.hidden_dim, o = spec_.output_dim;
        switch (spec_.kind) {
            case ModelKind::linear: {
                double* gW = grad.data() + lay_.blocks[0].offset;
                double* gb = grad.data() + lay_.blocks[1].offset;
                for (std::size_t r = 0; r < o; ++r) {
                    gb[r] += dy[r];
                    for (std::size_t c = 0; c < in; ++c) gW[r * in + c] += dy[r] * x[c];
                }
                break;
            }
            case ModelKind::mlp1: {
                const double* W2 = p_.data() + lay_.blocks[2].offset;
                double* gW1 = grad.data() + lay_.blocks[0].offset;
                double* gb1 = grad.data() + lay_.blocks[1].offset;
                double* gW2 = grad.data() + lay_.blocks[2].offset;
                double* gb2 = grad.data() + lay_.blocks[3].offset;
                std::fill(dh_.begin(), dh_.end(), 0.0);
                for (std::size_t r = 0; r < o; ++r) {
                    gb2[r] += dy[r];
                    for (std::size_t c = 0; c < h; ++c) {
                        gW2[r * h + c] += dy[r] * a_[c];
                        dh_[c] += W2[r * h + c] * dy[r];
                    }
                }
                for (std::size_t r = 0; r < h; ++r) {
                    const double dz = dh_[r] * activate_grad(spec_.activation, z_[r]);
                    gb1[r] += dz;
                    for (std::size_t c = 0; c < in; ++c) gW1[r * in + c] += dz * x[c];
                }
                break;
            }
            case ModelKind::attn_toy: {
                const double* E = p_.data() + lay_.blocks[0].offset;
                const double* Wo = p_.data() + lay_.blocks[3].offset;
                double* gE = grad.data() + lay_.blocks[0].offset;
                double* gWq = grad.data() + lay_.blocks[1].offset;
                double* gbq = grad.data() + lay_.blocks[2].offset;
                double* gWo = grad.data() + lay_.blocks[3].offset;
                double* gbo = grad.data() + lay_.blocks[4].offset;
                const double scale = 1.0 / std::sqrt(static_cast<double>(h));

                // dc = Wo^T dy
                std::fill(dh_.begin(), dh_.end(), 0.0);
                for (std::size_t r = 0; r < o; ++r) {
                    gbo[r] += dy[r];
                    for (std::size_t c = 0; c < h; ++c) {
                        gWo[r * h + c] += dy[r] * a_[c];
                        dh_[c] += Wo[r * h + c] * dy[r];
                    }
                }
                // Through the softmax weights.
                double weighted = 0.0;
                for (std::size_t i = 0; i < in; ++i) {
                    double d = 0.0;
                    for (std::size_t r = 0; r < h; ++r) d += dh_[r] * x[i] * E[r * in + i];
                    dalpha_[i] = d;
                    weighted += alpha_[i] * d;
                }
                std::fill(dq_.begin(), dq_.end(), 0.0);
                for (std::size_t i = 0; i < in; ++i) {
                    const double ds = alpha_[i] * (dalpha_[i] - weighted);
                    // s_i = x_i * (q . E[:, i]) * scale
                    for (std::size_t r = 0; r < h; ++r) {
                        dq_[r] += ds * x[i] * E[r * in + i] * scale;
                        // E[:, i] enters via the value vector and via the score.
                        gE[r * in + i] += alpha_[i] * x[i] * dh_[r] + ds * x[i] * q_[r] * scale;
                    }
                }
                for (std::size_t r = 0; r < h; ++r) {
                    gbq[r] += dq_[r];
                    for (std::size_t c = 0; c < in; ++c) gWq[r * in + c] += dq_[r] * x[c];
                }
                break;
            }
        }
    }

private:
    const ModelSpec& spec_;
    ParamLayout lay_;
    std::span<const double> p_;
    std::vector<double> y_, dy_, z_, a_, dh_, q_, scores_, alpha_, dalpha_, dq_;
};

}  // namespace detail

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

/// Mean squared error over samples and outputs, or mean softmax cross-entropy.
/// When `want_grad` is false the returned grad is empty.
inline LossAndGrad loss_and_grad(const ModelSpec& spec, std::span<const double> params, const Batch& batch,
                                 bool want_grad = true) {
    if (params.size() != param_count(spec)) throw DimensionError("parameter count does not match model spec");
    check_batch(spec, batch);

    const std::size_t n = batch.size(), o = spec.output_dim;
    detail::SampleEvaluator eval(spec, params);
    LossAndGrad out;
    if (want_grad) out.grad.assign(params.size(), 0.0);
    std::vector<double> dy(o);
    double total = 0.0;

    for (std::size_t s = 0; s < n; ++s) {
        const auto x = batch.inputs.row(s);
        const auto y = eval.forward(x);
        for (std::size_t r = 0; r < o; ++r) {
            if (!std::isfinite(y[r])) {
                throw NumericError("non-finite model output at sample " + std::to_string(s) + ", output " +
                                       std::to_string(r),
                                   static_cast<long long>(s * o + r));
            }
        }
        if (batch.objective == Objective::regression) {
            const double norm = 1.0 / static_cast<double>(n * o);
            for (std::size_t r = 0; r < o; ++r) {
                const double e = y[r] - batch.targets(s, r);
                total += e * e * norm;
                dy[r] = 2.0 * e * norm;
            }
        } else {
            const double norm = 1.0 / static_cast<double>(n);
            double mx = y[0];
            for (std::size_t r = 1; r < o; ++r) mx = std::max(mx, y[r]);
            double denom = 0.0;
            for (std::size_t r = 0; r < o; ++r) denom += std::exp(y[r] - mx);
            const double log_denom = std::log(denom) + mx;
            const auto label = batch.labels[s];
            total += (log_denom - y[label]) * norm;
            for (std::size_t r = 0; r < o; ++r) {
                dy[r] = (std::exp(y[r] - log_denom) - (r == label ? 1.0 : 0.0)) * norm;
            }
        }
        if (want_grad) eval.backward(x, dy, out.grad);
    }
    if (!std::isfinite(total)) throw NumericError("non-finite loss");
    // Cross-entropy of a confident correct prediction can round to -0 or tiny negatives.
    out.loss = std::max(total, 0.0);
    if (want_grad) {
        for (std::size_t j = 0; j < out.grad.size(); ++j) {
            if (!std::isfinite(out.grad[j])) {
                throw NumericError("non-finite gradient at coordinate " + std::to_string(j), static_cast<long long>(j));
            }
        }
    }
    return out;
}

inline double loss(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
    return loss_and_grad(spec, params.values(), batch, false).loss;
}

inline std::vector<double> grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
    return loss_and_grad(spec, params.values(), batch, true).grad;
}

/// Central differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time.
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::span<const double> params, double h) {
    if (!(h > 0.0)) throw ConfigError("finite-difference step h must be positive");
    std::vector<double> probe(params.begin(), params.end());
    std::vector<double> out(params.size());
    for (std::size_t j = 0; j < params.size(); ++j) {
        const double orig = probe[j];
        probe[j] = orig + h;
        const double up = f(probe);
        probe[j] = orig - h;
        const double down = f(probe);
        probe[j] = orig;
        out[j] = (up - down) / (2.0 * h);
    }
    return out;
}

inline std::vector<double> finite_diff_grad(const ModelSpec& spec, const ParamVector& params, const Batch& batch,
                                            double h) {
    return finite_diff_grad(
        [&](std::span<const double> p) { return loss_and_grad(spec, p, batch, false).loss; }, params.values(), h);
}

/// Model outputs for every row of `inputs` (N x output_dim).
inline Matrix predict(const ModelSpec& spec, const ParamVector& params, const Matrix& inputs) {
    if (params.dim() != param_count(spec)) throw DimensionError("parameter count does not match model spec");
    if (inputs.cols != spec.input_dim) throw DimensionError("input width does not match model.input_dim");
    detail::SampleEvaluator eval(spec, params.values());
    Matrix out(inputs.rows, spec.output_dim);
    for (std::size_t s = 0; s < inputs.rows; ++s) {
        const auto y = eval.forward(inputs.row(s));
        for (std::size_t r = 0; r < spec.output_dim; ++r) {
            if (!std::isfinite(y[r])) {
                throw NumericError("non-finite model output at sample " + std::to_string(s),
                                   static_cast<long long>(s * spec.output_dim + r));
            }
            out(s, r) = y[r];
        }
    }
    return out;
}

}  // namespace dpi
