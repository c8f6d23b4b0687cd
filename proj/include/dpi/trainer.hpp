#pragma once

// Mask-aware optimizers and the probe / stage training loops. This is the only
// module that writes into a ParamVector.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dpi/error.hpp"
#include "dpi/models.hpp"
#include "dpi/param_core.hpp"
#include "dpi/random.hpp"
#include "dpi/tasks.hpp"

namespace dpi {

enum class OptimizerKind { sgd, adam };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline std::optional<OptimizerKind> parse_optimizer(std::string_view s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    return std::nullopt;
}

struct TrainingConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t batch_size = 32;
    std::size_t epochs_probe = 3;
    std::size_t epochs_stage = 10;
    std::uint64_t seed = 0;

    friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

inline void validate(const TrainingConfig& cfg) {
    if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw ConfigError("lr must be positive");
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
    if (!(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
    if (!(cfg.eps > 0.0)) throw ConfigError("eps must be positive");
    if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
}

struct OptimizerState {
    std::uint64_t step_count = 0;
    std::vector<double> m;  // adam first moments
    std::vector<double> v;  // adam second moments

    static OptimizerState fresh(std::size_t dim, OptimizerKind kind) {
        OptimizerState s;
        if (kind == OptimizerKind::adam) {
            s.m.assign(dim, 0.0);
            s.v.assign(dim, 0.0);
        }
        return s;
    }
};

/// One masked optimizer step, in place. Frozen coordinates see neither a
/// parameter change nor a moment update. The gradient is validated before
/// anything is written, so a rejected step leaves state and params untouched.
inline void optimizer_step(OptimizerState& state, ParamVector& params, std::span<const double> grad_vec,
                           const FreezeMask& mask, const TrainingConfig& cfg) {
    const std::size_t dim = params.dim();
    if (grad_vec.size() != dim || mask.dim() != dim) throw DimensionError("optimizer_step: length mismatch");
    for (std::size_t j = 0; j < dim; ++j) {
        if (!std::isfinite(grad_vec[j])) {
            throw NumericError("optimizer_step: non-finite gradient at coordinate " + std::to_string(j),
                               static_cast<long long>(j));
        }
    }
    auto theta = params.mutable_values();
    if (cfg.optimizer == OptimizerKind::sgd) {
        for (std::size_t j = 0; j < dim; ++j) {
            if (mask.bits[j]) theta[j] -= cfg.lr * grad_vec[j];
        }
        ++state.step_count;
        return;
    }

    if (state.m.size() != dim || state.v.size() != dim) {
        throw DimensionError("optimizer_step: adam state does not match parameter count");
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t j = 0; j < dim; ++j) {
        if (!mask.bits[j]) continue;
        const double g = grad_vec[j];
        state.m[j] = cfg.beta1 * state.m[j] + (1.0 - cfg.beta1) * g;
        state.v[j] = cfg.beta2 * state.v[j] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m[j] / bc1;
        const double v_hat = state.v[j] / bc2;
        theta[j] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

// ---------------------------------------------------------------------------

struct TrainingLogRow {
    std::size_t step = 0;
    std::size_t stage = 0;  // 0 marks probe fine-tuning
    std::string task_id;
    double loss = 0.0;
};

struct TrainingLog {
    std::vector<TrainingLogRow> rows;

    [[nodiscard]] std::string to_csv() const {
        std::ostringstream out;
        out << "step,stage,task_id,loss\n";
        for (const auto& r : rows) out << r.step << ',' << r.stage << ',' << r.task_id << ',' << format_double(r.loss) << '\n';
        return out.str();
    }
};

struct TrainOutcome {
    ParamVector params;
    OptimizerState state;
};

namespace detail {

/// Per-task cursor over a reshuffled permutation of the task's training rows.
struct SampleCursor {
    std::vector<std::size_t> order;
    std::size_t pos = 0;
};

inline Batch gather_rows(const Batch& src, std::span<const std::size_t> rows) {
    Batch b;
    b.task_id = src.task_id;
    b.objective = src.objective;
    b.inputs = Matrix(rows.size(), src.inputs.cols);
    if (src.objective == Objective::regression) {
        b.targets = Matrix(rows.size(), src.targets.cols);
    } else {
        b.labels.resize(rows.size());
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto in = src.inputs.row(rows[i]);
        std::copy(in.begin(), in.end(), b.inputs.row(i).begin());
        if (src.objective == Objective::regression) {
            const auto t = src.targets.row(rows[i]);
            std::copy(t.begin(), t.end(), b.targets.row(i).begin());
        } else {
            b.labels[i] = src.labels[rows[i]];
        }
    }
    return b;
}

}  // namespace detail

struct LoopOptions {
    std::size_t epochs = 0;
    std::size_t stage = 0;
    TrainingLog* log = nullptr;
    /// Step counter offset for the log, so that consecutive stages number steps globally.
    std::size_t first_step = 0;
};

/// Shared training loop. An epoch is ceil(total rows / batch_size) steps; each
/// step draws a task uniformly with the seeded generator and takes the next
/// batch_size rows of that task's running permutation.
inline TrainOutcome train_loop(const ModelSpec& spec, const ParamVector& theta, std::span<const TaskData* const> tasks,
                               const FreezeMask& mask, const TrainingConfig& cfg, const LoopOptions& opts) {
    validate(cfg);
    if (tasks.empty()) throw ConfigError("training needs at least one task");
    if (theta.dim() != param_count(spec)) throw DimensionError("parameter count does not match model spec");
    if (mask.dim() != theta.dim()) throw DimensionError("mask length does not match parameter count");

    TrainOutcome out{theta, OptimizerState::fresh(theta.dim(), cfg.optimizer)};
    if (opts.epochs == 0) return out;

    Rng rng(cfg.seed);
    std::size_t total_rows = 0;
    std::vector<detail::SampleCursor> cursors(tasks.size());
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto n = tasks[t]->train.size();
        total_rows += n;
        cursors[t].order.resize(n);
        std::iota(cursors[t].order.begin(), cursors[t].order.end(), std::size_t{0});
        rng.shuffle(cursors[t].order);
    }
    const std::size_t steps_per_epoch = (total_rows + cfg.batch_size - 1) / cfg.batch_size;
    std::vector<std::size_t> rows;
    std::size_t step = opts.first_step;

    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
            const auto t = static_cast<std::size_t>(rng.below(tasks.size()));
            const Batch& source = tasks[t]->train;
            auto& cursor = cursors[t];
            const std::size_t take = std::min(cfg.batch_size, source.size());
            rows.clear();
            while (rows.size() < take) {
                if (cursor.pos == cursor.order.size()) {
                    rng.shuffle(cursor.order);
                    cursor.pos = 0;
                }
                rows.push_back(cursor.order[cursor.pos++]);
            }
            const Batch batch = detail::gather_rows(source, rows);

            LossAndGrad lg;
            try {
                lg = loss_and_grad(spec, out.params.values(), batch, true);
            } catch (const NumericError& e) {
                throw NumericError("training diverged at step " + std::to_string(step) + " (stage " +
                                       std::to_string(opts.stage) + ", task " + source.task_id + "): " + e.what(),
                                   e.coordinate);
            }
            if (opts.log) opts.log->rows.push_back({step, opts.stage, source.task_id, lg.loss});
            optimizer_step(out.state, out.params, lg.grad, mask, cfg);
        }
    }
    out.params.check_finite();
    return out;
}

/// Short unmasked fine-tuning of a copy of theta0 on one task for
/// cfg.epochs_probe epochs.
inline ParamVector probe_finetune(const ModelSpec& spec, const ParamVector& theta0, const TaskData& task,
                                  const TrainingConfig& cfg, TrainingLog* log = nullptr) {
    const TaskData* tasks[] = {&task};
    return train_loop(spec, theta0, tasks, FreezeMask::all_trainable(theta0.dim()), cfg,
                      LoopOptions{cfg.epochs_probe, 0, log, 0})
        .params;
}

/// cfg.epochs_stage epochs over the uniform mixture of the stage's tasks,
/// every step masked. Returns the optimizer state as well, for inspection.
inline TrainOutcome train_stage_with_state(const ModelSpec& spec, const ParamVector& theta,
                                           std::span<const TaskData* const> tasks, const FreezeMask& mask,
                                           const TrainingConfig& cfg, std::size_t stage = 1,
                                           TrainingLog* log = nullptr, std::size_t first_step = 0) {
    return train_loop(spec, theta, tasks, mask, cfg, LoopOptions{cfg.epochs_stage, stage, log, first_step});
}

inline ParamVector train_stage(const ModelSpec& spec, const ParamVector& theta, std::span<const TaskData* const> tasks,
                               const FreezeMask& mask, const TrainingConfig& cfg) {
    return train_stage_with_state(spec, theta, tasks, mask, cfg).params;
}

}  // namespace dpi
