#pragma once

// Synthetic tasks whose ground-truth parameter usage is known. Every task
// reads only the input features inside its block; features outside the block
// are zero, so a linear model's gradient vanishes exactly on the weight columns
// fed by other blocks.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dpi/error.hpp"
#include "dpi/models.hpp"
#include "dpi/random.hpp"

namespace dpi {

enum class TaskFamily { block_regression, block_classification, shared_block_pair };

inline const char* to_string(TaskFamily f) {
    switch (f) {
        case TaskFamily::block_regression: return "block_regression";
        case TaskFamily::block_classification: return "block_classification";
        case TaskFamily::shared_block_pair: return "shared_block_pair";
    }
    return "?";
}

inline std::optional<TaskFamily> parse_task_family(std::string_view s) {
    if (s == "block_regression") return TaskFamily::block_regression;
    if (s == "block_classification") return TaskFamily::block_classification;
    if (s == "shared_block_pair") return TaskFamily::shared_block_pair;
    return std::nullopt;
}

inline Objective objective_of(TaskFamily f) {
    return f == TaskFamily::block_classification ? Objective::classification : Objective::regression;
}

/// Half-open feature range [begin, end).
struct BlockRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    [[nodiscard]] std::size_t width() const { return end - begin; }
    friend bool operator==(const BlockRange&, const BlockRange&) = default;
};

struct TaskSpec {
    std::string task_id;
    TaskFamily family = TaskFamily::block_regression;
    BlockRange block;
    std::uint64_t seed = 0;
    std::size_t n_train = 256;
    std::size_t n_eval = 256;
    double noise_std = 0.05;
    /// Multiplies the generating weights; lets a suite mix tasks of different loss scales.
    double target_scale = 1.0;
    /// shared_block_pair only: tasks with the same shared_seed draw a common
    /// weight component and differ by a task-specific part of relative size
    /// `variation` in [0, 1].
    std::uint64_t shared_seed = 0;
    double variation = 0.3;
    /// Magnitude of a constant added to every target (regression) or logit
    /// (classification), along a +-1 direction drawn from offset_seed.
    double target_offset = 0.0;
    std::uint64_t offset_seed = 0;
    /// Optional feature range read by the task in addition to `block`, with
    /// task-specific weights of scale common_scale. Width 0 disables it.
    BlockRange common;
    double common_scale = 0.0;
    /// Standard deviation of the in-block input features.
    double input_scale = 1.0;

    friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

enum class SuiteProfile { disjoint, overlapping, mixed, adversarial };

inline const char* to_string(SuiteProfile p) {
    switch (p) {
        case SuiteProfile::disjoint: return "disjoint";
        case SuiteProfile::overlapping: return "overlapping";
        case SuiteProfile::mixed: return "mixed";
        case SuiteProfile::adversarial: return "adversarial";
    }
    return "?";
}

inline std::optional<SuiteProfile> parse_suite_profile(std::string_view s) {
    if (s == "disjoint") return SuiteProfile::disjoint;
    if (s == "overlapping") return SuiteProfile::overlapping;
    if (s == "mixed") return SuiteProfile::mixed;
    if (s == "adversarial") return SuiteProfile::adversarial;
    return std::nullopt;
}

struct TaskSuite {
    std::vector<TaskSpec> tasks;
    std::size_t input_dim = 0;
    ModelSpec model;
    std::string profile;
    /// Tasks that share an input block, in suite order. This is the grouping
    /// a correct core-region analysis should recover.
    std::vector<std::vector<std::string>> expected_grouping;

    [[nodiscard]] std::size_t index_of(const std::string& task_id) const {
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            if (tasks[i].task_id == task_id) return i;
        }
        throw ConfigError("unknown task id '" + task_id + "'");
    }
    friend bool operator==(const TaskSuite&, const TaskSuite&) = default;
};

inline void validate(const TaskSpec& task, std::size_t input_dim) {
    if (task.task_id.empty()) throw ConfigError("task id must not be empty");
    if (task.block.begin >= task.block.end || task.block.end > input_dim) {
        throw ConfigError("task '" + task.task_id + "': block [" + std::to_string(task.block.begin) + "," +
                          std::to_string(task.block.end) + ") is not a nonempty range inside [0," +
                          std::to_string(input_dim) + ")");
    }
    if (task.n_train == 0 || task.n_eval == 0) throw ConfigError("task '" + task.task_id + "': n_train and n_eval must be positive");
    if (!(task.noise_std >= 0.0)) throw ConfigError("task '" + task.task_id + "': noise_std must be >= 0");
    if (!(task.target_scale > 0.0)) throw ConfigError("task '" + task.task_id + "': target_scale must be > 0");
    if (task.common.width() > 0) {
        if (task.common.end > input_dim) throw ConfigError("task '" + task.task_id + "': common block out of range");
        if (task.common.end > task.block.begin && task.common.begin < task.block.end) {
            throw ConfigError("task '" + task.task_id + "': common block overlaps the task block");
        }
    }
    if (!(task.common_scale >= 0.0)) throw ConfigError("task '" + task.task_id + "': common_scale must be >= 0");
    if (!std::isfinite(task.target_offset)) throw ConfigError("task '" + task.task_id + "': target_offset must be finite");
    if (!(task.variation >= 0.0 && task.variation <= 1.0)) {
        throw ConfigError("task '" + task.task_id + "': variation must lie in [0, 1]");
    }
}

inline void validate(const TaskSuite& suite) {
    validate(suite.model);
    if (suite.tasks.empty()) throw ConfigError("suite has no tasks");
    if (suite.model.input_dim != suite.input_dim) throw ConfigError("suite input_dim does not match model.input_dim");
    for (std::size_t i = 0; i < suite.tasks.size(); ++i) {
        validate(suite.tasks[i], suite.input_dim);
        if (suite.tasks[i].task_id.find_first_of(" \t\r\n,") != std::string::npos) {
            throw ConfigError("task id '" + suite.tasks[i].task_id + "' contains whitespace or a comma");
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (suite.tasks[i].task_id == suite.tasks[j].task_id) {
                throw ConfigError("duplicate task id '" + suite.tasks[i].task_id + "'");
            }
        }
        if (objective_of(suite.tasks[i].family) == Objective::classification && suite.model.output_dim < 2) {
            throw ConfigError("classification tasks need model.output_dim >= 2");
        }
    }
}

/// Canonical text of a suite; two suites with the same text generate the same data.
inline std::string canonical_string(const TaskSuite& suite) {
    std::ostringstream out;
    out << "model{" << canonical_string(suite.model) << "};input_dim=" << suite.input_dim;
    for (const auto& t : suite.tasks) {
        out << ";task{" << t.task_id << ',' << to_string(t.family) << ',' << t.block.begin << ',' << t.block.end << ','
            << t.seed << ',' << t.n_train << ',' << t.n_eval << ',' << format_double(t.noise_std) << ','
            << format_double(t.target_scale) << ',' << format_double(t.target_offset) << ',' << t.offset_seed << ',' << format_double(t.input_scale)
            << ',' << t.common.begin << ',' << t.common.end << ',' << format_double(t.common_scale);
        if (t.shared_seed != 0) out << ',' << t.shared_seed << ',' << format_double(t.variation);
        out << '}';
    }
    return out.str();
}

inline std::string suite_fingerprint(const TaskSuite& suite) {
    Fnv1a fnv;
    fnv.update(canonical_string(suite));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv.digest()));
    return buf;
}

/// Hidden generating weights (output_dim x block width) of a task.
inline Matrix generating_weights(const TaskSpec& task, std::size_t output_dim) {
    Rng rng(splitmix64(task.seed ^ 0x5eedf00dULL));
    Matrix w(output_dim, task.block.width());
    const double s = task.target_scale / std::sqrt(static_cast<double>(task.block.width()));
    if (task.shared_seed != 0) {
        Rng shared(splitmix64(task.shared_seed ^ 0x5a4edULL));
        const double own = task.variation;
        const double common = std::sqrt(1.0 - own * own);
        for (auto& v : w.data) v = s * (common * shared.normal() + own * rng.normal());
    } else {
        for (auto& v : w.data) v = s * rng.normal();
    }
    return w;
}

/// Task-specific weights (output_dim x common width) on the common features.
inline Matrix common_weights(const TaskSpec& task, std::size_t output_dim) {
    Matrix w(output_dim, task.common.width());
    if (w.data.empty()) return w;
    Rng rng(splitmix64(task.seed ^ 0xc0770aULL));
    const double s = task.common_scale / std::sqrt(static_cast<double>(task.common.width()));
    for (auto& v : w.data) v = s * rng.normal();
    return w;
}

/// Constant added to the generating function's outputs.
inline std::vector<double> generating_offset(const TaskSpec& task, std::size_t output_dim) {
    std::vector<double> out(output_dim, 0.0);
    if (task.target_offset == 0.0) return out;
    Rng rng(splitmix64(task.offset_seed ^ 0x0ff5e7ULL));
    for (auto& v : out) v = (rng.next_u64() & 1) ? task.target_offset : -task.target_offset;
    return out;
}

/// Parameters of a linear model (input_dim -> output_dim) that reproduce the
/// task's noiseless targets (regression) or its class decisions (classification).
inline ParamVector generating_params(const TaskSpec& task, std::size_t input_dim, std::size_t output_dim) {
    validate(task, input_dim);
    const auto w = generating_weights(task, output_dim);
    const auto cw = common_weights(task, output_dim);
    const auto offset = generating_offset(task, output_dim);
    std::vector<double> values(input_dim * output_dim + output_dim, 0.0);
    for (std::size_t r = 0; r < output_dim; ++r) {
        for (std::size_t c = 0; c < task.block.width(); ++c) values[r * input_dim + task.block.begin + c] = w(r, c);
        for (std::size_t c = 0; c < task.common.width(); ++c) values[r * input_dim + task.common.begin + c] = cw(r, c);
        values[input_dim * output_dim + r] = offset[r];
    }
    return ParamVector(std::move(values));
}

struct TaskData {
    TaskSpec spec;
    Batch train;
    Batch eval;
};

namespace detail {
inline Batch draw_batch(const TaskSpec& task, const Matrix& w, std::size_t input_dim, std::size_t output_dim,
                        std::size_t n, double noise_std, Rng& rng) {
    Batch b;
    b.task_id = task.task_id;
    b.objective = objective_of(task.family);
    b.inputs = Matrix(n, input_dim);
    if (b.objective == Objective::regression) {
        b.targets = Matrix(n, output_dim);
    } else {
        b.labels.resize(n);
    }
    std::vector<double> f(output_dim);
    const auto offset = generating_offset(task, output_dim);
    const auto cw = common_weights(task, output_dim);
    for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t c = task.block.begin; c < task.block.end; ++c) b.inputs(s, c) = task.input_scale * rng.normal();
        for (std::size_t c = task.common.begin; c < task.common.end; ++c) b.inputs(s, c) = task.input_scale * rng.normal();
        for (std::size_t r = 0; r < output_dim; ++r) {
            double v = offset[r];
            for (std::size_t c = 0; c < task.block.width(); ++c) v += w(r, c) * b.inputs(s, task.block.begin + c);
            for (std::size_t c = 0; c < task.common.width(); ++c) v += cw(r, c) * b.inputs(s, task.common.begin + c);
            f[r] = v;
        }
        if (b.objective == Objective::regression) {
            for (std::size_t r = 0; r < output_dim; ++r) {
                b.targets(s, r) = noise_std > 0.0 ? f[r] + noise_std * rng.normal() : f[r];
            }
        } else {
            if (noise_std > 0.0) {
                for (auto& v : f) v += noise_std * rng.normal();
            }
            b.labels[s] = static_cast<std::size_t>(std::max_element(f.begin(), f.end()) - f.begin());
        }
    }
    return b;
}
}  // namespace detail

/// Train data carries the task's label noise; eval data is noiseless so that
/// eval metrics measure recovery of the generating function.
inline TaskData generate_task(const TaskSpec& task, const ModelSpec& model) {
    validate(task, model.input_dim);
    if (objective_of(task.family) == Objective::classification && model.output_dim < 2) {
        throw ConfigError("classification tasks need model.output_dim >= 2");
    }
    const auto w = generating_weights(task, model.output_dim);
    Rng train_rng(splitmix64(task.seed ^ 0x7a11ULL));
    Rng eval_rng(splitmix64(task.seed ^ 0xe7a1ULL));
    TaskData out;
    out.spec = task;
    out.train = detail::draw_batch(task, w, model.input_dim, model.output_dim, task.n_train, task.noise_std, train_rng);
    out.eval = detail::draw_batch(task, w, model.input_dim, model.output_dim, task.n_eval, 0.0, eval_rng);
    return out;
}

inline std::vector<TaskData> generate_suite_data(const TaskSuite& suite) {
    validate(suite);
    std::vector<TaskData> out;
    out.reserve(suite.tasks.size());
    for (const auto& t : suite.tasks) out.push_back(generate_task(t, suite.model));
    return out;
}

/// CSV dump of a batch: x0..x{d-1}, then y0..y{o-1} or label.
inline std::string batch_to_csv(const Batch& b) {
    std::ostringstream out;
    for (std::size_t c = 0; c < b.inputs.cols; ++c) out << (c ? "," : "") << 'x' << c;
    if (b.objective == Objective::regression) {
        for (std::size_t r = 0; r < b.targets.cols; ++r) out << ",y" << r;
    } else {
        out << ",label";
    }
    out << '\n';
    for (std::size_t s = 0; s < b.size(); ++s) {
        for (std::size_t c = 0; c < b.inputs.cols; ++c) out << (c ? "," : "") << format_double(b.inputs(s, c));
        if (b.objective == Objective::regression) {
            for (std::size_t r = 0; r < b.targets.cols; ++r) out << ',' << format_double(b.targets(s, r));
        } else {
            out << ',' << b.labels[s];
        }
        out << '\n';
    }
    return out.str();
}

inline std::string default_task_id(std::size_t i) {
    if (i < 26) return std::string(1, static_cast<char>('A' + i));
    return "T" + std::to_string(i);
}

struct SuiteOptions {
    /// When unset, a linear model over input_dim with 4 outputs.
    std::optional<ModelSpec> model;
    /// When unset, 256 (1024 for the adversarial suite).
    std::optional<std::size_t> n_train;
    std::size_t n_eval = 256;
    double noise_std = 0.05;
};

/// Groups of task ids that share a block, ordered by first member.
inline std::vector<std::vector<std::string>> grouping_from_blocks(const std::vector<TaskSpec>& tasks) {
    std::vector<std::vector<std::string>> groups;
    std::vector<BlockRange> keys;
    for (const auto& t : tasks) {
        auto it = std::find(keys.begin(), keys.end(), t.block);
        if (it == keys.end()) {
            keys.push_back(t.block);
            groups.push_back({t.task_id});
        } else {
            groups[static_cast<std::size_t>(it - keys.begin())].push_back(t.task_id);
        }
    }
    return groups;
}

/// Block layouts:
///   disjoint     task i on block i, blocks of width input_dim / n_tasks
///   overlapping  every task on block 0 (width input_dim / n_tasks), different targets
///   mixed        tasks A and B share block 0, every later task gets its own block;
///                width input_dim / (n_tasks - 1); later tasks alternate
///                classification / regression
///   adversarial  see make_adversarial_suite
inline TaskSuite make_benchmark_suite(SuiteProfile profile, std::size_t n_tasks, std::size_t input_dim,
                                      std::uint64_t seed, const SuiteOptions& opts = {});

/// Five-task linear benchmark with conflicting shared parameters. Every task
/// reads a 50-wide common feature block with its own weights, and each input
/// domain adds its own +-3 constant to the outputs, which only the shared bias
/// can absorb. A,B (regression) share block [50,200), C,D (classification)
/// share [200,350), E (regression) owns [350,500). Same-block tasks share 91%
/// of their generating weights. D = 500*4 + 4 = 2004.
inline TaskSuite make_adversarial_suite(std::uint64_t seed, const SuiteOptions& opts = {});

inline TaskSuite make_benchmark_suite(SuiteProfile profile, std::size_t n_tasks, std::size_t input_dim,
                                      std::uint64_t seed, const SuiteOptions& opts) {
    if (profile == SuiteProfile::adversarial) return make_adversarial_suite(seed, opts);
    if (n_tasks < 2) throw ConfigError("a benchmark suite needs at least 2 tasks");
    const std::size_t n_blocks =
        profile == SuiteProfile::disjoint ? n_tasks : (profile == SuiteProfile::mixed ? n_tasks - 1 : n_tasks);
    const std::size_t width = input_dim / n_blocks;
    if (width == 0 || (profile != SuiteProfile::overlapping && input_dim % n_blocks != 0)) {
        throw ConfigError("input_dim " + std::to_string(input_dim) + " cannot be split into " +
                          std::to_string(n_blocks) + " equal blocks");
    }

    TaskSuite suite;
    suite.input_dim = input_dim;
    suite.model = opts.model.value_or(ModelSpec{ModelKind::linear, input_dim, 0, 4, Activation::tanh});
    suite.model.input_dim = input_dim;
    suite.profile = to_string(profile);

    for (std::size_t i = 0; i < n_tasks; ++i) {
        TaskSpec t;
        t.task_id = default_task_id(i);
        t.seed = splitmix64(seed + i);
        t.n_train = opts.n_train.value_or(256);
        t.n_eval = opts.n_eval;
        t.noise_std = opts.noise_std;
        std::size_t block = 0;
        switch (profile) {
            case SuiteProfile::disjoint:
                block = i;
                t.family = TaskFamily::block_regression;
                break;
            case SuiteProfile::overlapping:
                block = 0;
                t.family = TaskFamily::shared_block_pair;
                break;
            case SuiteProfile::mixed:
                block = i < 2 ? 0 : i - 1;
                t.family = i < 2 ? TaskFamily::shared_block_pair
                                 : (i % 2 == 0 ? TaskFamily::block_classification : TaskFamily::block_regression);
                break;
            case SuiteProfile::adversarial: break;
        }
        t.block = {block * width, (block + 1) * width};
        if (t.family == TaskFamily::shared_block_pair) t.shared_seed = splitmix64(seed ^ 0x5ea7ULL);
        suite.tasks.push_back(std::move(t));
    }
    suite.expected_grouping = grouping_from_blocks(suite.tasks);
    validate(suite);
    return suite;
}

inline TaskSuite make_adversarial_suite(std::uint64_t seed, const SuiteOptions& opts) {
    constexpr std::size_t common_width = 50;
    constexpr std::size_t block_width = 150;
    constexpr std::size_t input_dim = common_width + 3 * block_width;
    TaskSuite suite;
    suite.input_dim = input_dim;
    suite.model = opts.model.value_or(ModelSpec{ModelKind::linear, input_dim, 0, 4, Activation::tanh});
    suite.model.input_dim = input_dim;
    suite.profile = to_string(SuiteProfile::adversarial);
    const std::size_t blocks[] = {0, 0, 1, 1, 2};
    const TaskFamily families[] = {TaskFamily::shared_block_pair, TaskFamily::shared_block_pair,
                                   TaskFamily::block_classification, TaskFamily::block_classification,
                                   TaskFamily::block_regression};
    for (std::size_t i = 0; i < 5; ++i) {
        const std::size_t b = blocks[i];
        TaskSpec t;
        t.task_id = default_task_id(i);
        t.seed = splitmix64(seed + i);
        t.family = families[i];
        t.block = {common_width + b * block_width, common_width + (b + 1) * block_width};
        t.n_train = opts.n_train.value_or(1024);
        t.n_eval = opts.n_eval;
        t.noise_std = opts.noise_std;
        if (b < 2) t.shared_seed = splitmix64(seed * 31 + b + 7);
        t.target_offset = 3.0;
        t.offset_seed = splitmix64(seed * 131 + b);
        t.common = {0, common_width};
        t.common_scale = 0.5;
        suite.tasks.push_back(std::move(t));
    }
    suite.expected_grouping = grouping_from_blocks(suite.tasks);
    validate(suite);
    return suite;
}

}  // namespace dpi
