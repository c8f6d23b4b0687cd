#pragma once

// End-to-end pipelines: dynamic parameter isolation, the three baselines, and
// the core-percentage sweep.

#include <future>
#include <optional>
#include <string>
#include <vector>

#include "dpi/error.hpp"
#include "dpi/evalreport.hpp"
#include "dpi/isolation.hpp"
#include "dpi/models.hpp"
#include "dpi/param_core.hpp"
#include "dpi/tasks.hpp"
#include "dpi/trainer.hpp"

namespace dpi {

enum class Method { dpi, full_multitask, random_stages, heuristic_stages };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::dpi: return "dpi";
        case Method::full_multitask: return "full_multitask";
        case Method::random_stages: return "random_stages";
        case Method::heuristic_stages: return "heuristic_stages";
    }
    return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
    if (s == "dpi") return Method::dpi;
    if (s == "full_multitask") return Method::full_multitask;
    if (s == "random_stages") return Method::random_stages;
    if (s == "heuristic_stages") return Method::heuristic_stages;
    return std::nullopt;
}

struct RunConfig {
    TaskSuite suite;
    TrainingConfig training;
    /// Probe fine-tuning reuses `training` except for the optimizer and lr.
    OptimizerKind probe_optimizer = OptimizerKind::sgd;
    double probe_lr = 0.05;
    double p = 1.0;
    double tau = 0.1;
    Method method = Method::dpi;
    std::size_t stages_k = 3;  // random_stages only
    std::uint64_t seed = 42;
    bool parallel = true;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline void validate(const RunConfig& cfg) {
    validate(cfg.suite);
    validate(cfg.training);
    if (!(cfg.probe_lr > 0.0)) throw ConfigError("probe_lr must be positive");
    core_region_size(cfg.p, 1);  // range check only
    if (!(cfg.tau >= 0.0 && cfg.tau <= 1.0)) throw ConfigError("tau must lie in [0, 1], got " + format_double(cfg.tau));
    if (cfg.method == Method::random_stages && (cfg.stages_k == 0 || cfg.stages_k > cfg.suite.tasks.size())) {
        throw ConfigError("stages_k must lie in [1, n_tasks] for random_stages");
    }
}

inline TrainingConfig probe_config(const RunConfig& cfg) {
    TrainingConfig probe = cfg.training;
    probe.optimizer = cfg.probe_optimizer;
    probe.lr = cfg.probe_lr;
    return probe;
}

// Seed derivation. Each consumer gets its own stream so that changing one
// phase never perturbs another.
inline std::uint64_t init_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x1417ULL); }
inline std::uint64_t probe_seed(std::uint64_t seed, std::size_t task_index) {
    return splitmix64(splitmix64(seed ^ 0x9b0beULL) + task_index);
}
inline std::uint64_t stage_seed(std::uint64_t seed, std::size_t stage) {
    return splitmix64(splitmix64(seed ^ 0x57a6eULL) + stage);
}
inline std::uint64_t partition_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x9a27ULL); }

inline ParamVector initial_params(const RunConfig& cfg) { return init_params(cfg.suite.model, init_seed(cfg.seed)); }

struct RunResult {
    Method method = Method::dpi;
    std::string label;
    ParamVector initial_params;
    ParamVector final_params;
    std::vector<std::vector<std::string>> stages;
    std::optional<GroupingPlan> plan;             // dpi only
    std::vector<ParamVector> probe_params;        // dpi only, suite order
    std::vector<FreezeMask> masks;                // one per stage
    std::vector<Checkpoint> checkpoints;          // [0] = initial, [k] = after stage k
    std::vector<OptimizerState> stage_states;     // optimizer state at the end of each stage
    MetricsTimeline timeline;
    TrainingLog log;
};

inline RunSummary summarize(const RunResult& result, const RunConfig& cfg) {
    RunSummary s;
    s.method = to_string(result.method);
    s.label = result.label;
    s.seed = cfg.seed;
    s.p = result.method == Method::dpi ? cfg.p : 0.0;
    s.tau = result.method == Method::dpi ? cfg.tau : 0.0;
    s.suite_fingerprint = suite_fingerprint(cfg.suite);
    s.stages = result.stages;
    s.timeline = result.timeline;
    return s;
}

// ---------------------------------------------------------------------------

/// Probe fine-tuning of every task from theta0. Tasks run concurrently when
/// cfg.parallel is set; each owns its copy of theta0 and its own seed, so the
/// results do not depend on the schedule.
inline std::vector<ParamVector> probe_all(const RunConfig& cfg, const std::vector<TaskData>& data,
                                          const ParamVector& theta0) {
    const auto base = probe_config(cfg);
    auto probe_one = [&](std::size_t i) {
        auto tc = base;
        tc.seed = probe_seed(cfg.seed, i);
        return probe_finetune(cfg.suite.model, theta0, data[i], tc);
    };
    std::vector<ParamVector> out;
    if (!cfg.parallel || data.size() < 2) {
        for (std::size_t i = 0; i < data.size(); ++i) out.push_back(probe_one(i));
        return out;
    }
    std::vector<std::future<ParamVector>> futures;
    for (std::size_t i = 0; i < data.size(); ++i) futures.push_back(std::async(std::launch::async, probe_one, i));
    for (auto& f : futures) out.push_back(f.get());
    return out;
}

inline std::vector<CoreRegion> regions_from_probes(const TaskSuite& suite, const ParamVector& theta0,
                                                   const std::vector<ParamVector>& probes, double p) {
    std::vector<CoreRegion> regions;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        regions.push_back(top_k_region(delta_magnitude(probes[i], theta0), p, suite.tasks[i].task_id));
    }
    return regions;
}

namespace detail {

inline std::vector<TaskMetric> evaluate_all(const RunConfig& cfg, const std::vector<TaskData>& data,
                                            const ParamVector& params, std::size_t boundary) {
    std::vector<TaskMetric> out;
    for (const auto& d : data) out.push_back(evaluate(params, cfg.suite.model, d.eval, boundary));
    return out;
}

/// Runs the stages in order. `frozen_for_stage(k)` gives the frozen indices of
/// stage k (1-based); baselines pass an empty set.
template <typename FrozenFn>
void execute_stages(const RunConfig& cfg, const std::vector<TaskData>& data, RunResult& result,
                    FrozenFn&& frozen_for_stage) {
    const auto& suite = cfg.suite;
    const auto spec_hash_value = spec_hash(suite.model);
    const std::size_t dim = result.initial_params.dim();

    result.timeline.task_ids.clear();
    for (const auto& t : suite.tasks) result.timeline.task_ids.push_back(t.task_id);
    result.timeline.trained_in_stage.assign(suite.tasks.size(), 0);
    result.timeline.at.push_back(evaluate_all(cfg, data, result.initial_params, 0));
    result.checkpoints.push_back(Checkpoint{result.initial_params, {spec_hash_value, cfg.seed, 0}});

    ParamVector theta = result.initial_params;
    std::size_t step = 0;
    for (std::size_t k = 1; k <= result.stages.size(); ++k) {
        const auto& stage = result.stages[k - 1];
        std::vector<const TaskData*> members;
        for (const auto& id : stage) {
            const auto i = suite.index_of(id);
            if (result.timeline.trained_in_stage[i] != 0) throw ConfigError("task '" + id + "' scheduled twice");
            result.timeline.trained_in_stage[i] = k;
            members.push_back(&data[i]);
        }
        const std::vector<std::size_t> frozen = frozen_for_stage(k);
        auto mask = mask_from_frozen(frozen, dim);
        const double trainable = dim ? static_cast<double>(mask.trainable_count()) / static_cast<double>(dim) : 1.0;
        if (trainable < 0.1) {
            warn("stage " + std::to_string(k) + ": only " + format_double(100.0 * trainable) +
                 "% of parameters remain trainable");
        }

        auto tc = cfg.training;
        tc.seed = stage_seed(cfg.seed, k);
        auto outcome = train_stage_with_state(suite.model, theta, members, mask, tc, k, &result.log, step);
        if (!result.log.rows.empty()) step = result.log.rows.back().step + 1;
        theta = std::move(outcome.params);

        result.masks.push_back(std::move(mask));
        result.stage_states.push_back(std::move(outcome.state));
        result.checkpoints.push_back(Checkpoint{theta, {spec_hash_value, cfg.seed, static_cast<std::uint32_t>(k)}});
        result.timeline.at.push_back(evaluate_all(cfg, data, theta, k));
    }
    for (std::size_t i = 0; i < suite.tasks.size(); ++i) {
        if (result.timeline.trained_in_stage[i] == 0) {
            throw ConfigError("task '" + suite.tasks[i].task_id + "' is not scheduled in any stage");
        }
    }
    result.final_params = std::move(theta);
}

}  // namespace detail

/// Stages 2 and 3 of the method given precomputed probe results.
inline RunResult run_dpi_from_probes(const RunConfig& cfg, const std::vector<TaskData>& data,
                                     const ParamVector& theta0, const std::vector<ParamVector>& probes) {
    RunResult result;
    result.method = Method::dpi;
    result.label = "dpi";
    result.initial_params = theta0;
    result.probe_params = probes;

    auto regions = regions_from_probes(cfg.suite, theta0, probes, cfg.p);
    auto plan = plan_from_regions(regions, cfg.tau);
    plan.percent = cfg.p;
    if (auto problem = verify_plan(plan); !problem.empty()) {
        throw ConfigError("grouping plan violates its invariants: " + problem);
    }
    result.stages = plan.stages;
    result.plan = std::move(plan);
    detail::execute_stages(cfg, data, result, [&](std::size_t k) { return frozen_set(*result.plan, k).indices; });
    return result;
}

inline RunResult run_dpi(const RunConfig& cfg) {
    validate(cfg);
    const auto data = generate_suite_data(cfg.suite);
    const auto theta0 = initial_params(cfg);
    return run_dpi_from_probes(cfg, data, theta0, probe_all(cfg, data, theta0));
}

namespace detail {
inline RunResult run_unmasked(const RunConfig& cfg, Method method, std::string label,
                              std::vector<std::vector<std::string>> stages) {
    validate(cfg);
    const auto data = generate_suite_data(cfg.suite);
    RunResult result;
    result.method = method;
    result.label = std::move(label);
    result.initial_params = initial_params(cfg);
    result.stages = std::move(stages);
    execute_stages(cfg, data, result, [](std::size_t) { return std::vector<std::size_t>{}; });
    return result;
}

inline std::vector<std::string> all_task_ids(const TaskSuite& suite) {
    std::vector<std::string> ids;
    for (const auto& t : suite.tasks) ids.push_back(t.task_id);
    return ids;
}
}  // namespace detail

inline RunResult run_full_multitask(const RunConfig& cfg) {
    return detail::run_unmasked(cfg, Method::full_multitask, "full_multitask", {detail::all_task_ids(cfg.suite)});
}

/// Seeded shuffle of the task positions, dealt round-robin into K groups;
/// members of a group keep suite order.
inline std::vector<std::vector<std::string>> random_partition(const TaskSuite& suite, std::size_t k,
                                                              std::uint64_t seed) {
    const std::size_t n = suite.tasks.size();
    if (k == 0 || k > n) {
        throw ConfigError("random_stages: K=" + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(partition_seed(seed));
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> groups(k);
    for (std::size_t i = 0; i < n; ++i) groups[i % k].push_back(order[i]);
    std::vector<std::vector<std::string>> out;
    for (auto& g : groups) {
        std::sort(g.begin(), g.end());
        auto& ids = out.emplace_back();
        for (auto i : g) ids.push_back(suite.tasks[i].task_id);
    }
    return out;
}

inline RunResult run_random_stages(const RunConfig& cfg, std::size_t k) {
    auto c = cfg;
    c.stages_k = k;
    c.method = Method::random_stages;
    validate(c);
    return detail::run_unmasked(c, Method::random_stages, "random_stages(K=" + std::to_string(k) + ")",
                                random_partition(cfg.suite, k, cfg.seed));
}

/// Regression tasks first, then classification tasks; one stage when the suite
/// has only one kind.
inline std::vector<std::vector<std::string>> family_partition(const TaskSuite& suite) {
    std::vector<std::vector<std::string>> out(2);
    for (const auto& t : suite.tasks) out[objective_of(t.family) == Objective::regression ? 0 : 1].push_back(t.task_id);
    std::erase_if(out, [](const auto& g) { return g.empty(); });
    return out;
}

inline RunResult run_heuristic_stages(const RunConfig& cfg) {
    return detail::run_unmasked(cfg, Method::heuristic_stages, "heuristic_stages", family_partition(cfg.suite));
}

inline RunResult run(const RunConfig& cfg) {
    switch (cfg.method) {
        case Method::dpi: return run_dpi(cfg);
        case Method::full_multitask: return run_full_multitask(cfg);
        case Method::random_stages: return run_random_stages(cfg, cfg.stages_k);
        case Method::heuristic_stages: return run_heuristic_stages(cfg);
    }
    throw ConfigError("unknown method");
}

struct AblationPoint {
    double p = 0.0;
    RunResult result;
};

/// One DPI run per p with identical seeds and tau; probing happens once and is
/// shared by every point of the sweep.
inline std::vector<AblationPoint> ablate_p(const RunConfig& cfg, const std::vector<double>& p_values) {
    if (p_values.empty()) throw ConfigError("ablate_p: empty p list");
    for (double p : p_values) core_region_size(p, 1);
    validate(cfg);
    const auto data = generate_suite_data(cfg.suite);
    const auto theta0 = initial_params(cfg);
    const auto probes = probe_all(cfg, data, theta0);

    std::vector<AblationPoint> out(p_values.size());
    auto one = [&](std::size_t i) {
        auto c = cfg;
        c.p = p_values[i];
        auto r = run_dpi_from_probes(c, data, theta0, probes);
        r.label = "dpi(p=" + format_double(p_values[i]) + ")";
        return AblationPoint{p_values[i], std::move(r)};
    };
    if (cfg.parallel && p_values.size() > 1) {
        std::vector<std::future<AblationPoint>> futures;
        for (std::size_t i = 0; i < p_values.size(); ++i) futures.push_back(std::async(std::launch::async, one, i));
        for (std::size_t i = 0; i < p_values.size(); ++i) out[i] = futures[i].get();
    } else {
        for (std::size_t i = 0; i < p_values.size(); ++i) out[i] = one(i);
    }
    return out;
}

}  // namespace dpi
