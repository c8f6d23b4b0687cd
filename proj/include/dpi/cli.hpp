#pragma once

// Run configuration files, run directories and the probe / run / ablate /
// report commands. The executable in tools/ is a thin argument parser over
// these functions.
//
// Config format: '#' comments, "[section]" headers, "key = value" lines.
//
//   [suite]     profile (required), n_tasks, input_dim, seed, n_train, n_eval, noise_std
//   [model]     kind, hidden_dim, output_dim, activation
//   [training]  optimizer, lr, beta1, beta2, eps, batch_size, epochs_probe, epochs_stage,
//               probe_optimizer, probe_lr
//   [method]    name (required), p, tau, k
//   [run]       seed (required), output_dir (required), parallel

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dpi/error.hpp"
#include "dpi/evalreport.hpp"
#include "dpi/isolation.hpp"
#include "dpi/param_core.hpp"
#include "dpi/scheduler.hpp"

namespace dpi {

struct CliConfig {
    SuiteProfile profile = SuiteProfile::mixed;
    std::size_t n_tasks = 5;
    std::size_t input_dim = 40;
    std::optional<std::uint64_t> suite_seed;  // unset: run seed
    std::optional<std::size_t> n_train;
    std::size_t n_eval = 256;
    double noise_std = 0.05;

    ModelKind model_kind = ModelKind::linear;
    std::size_t hidden_dim = 0;
    std::size_t output_dim = 4;
    Activation activation = Activation::tanh;

    TrainingConfig training;
    OptimizerKind probe_optimizer = OptimizerKind::sgd;
    double probe_lr = 0.05;

    Method method = Method::dpi;
    double p = 1.0;
    double tau = 0.1;
    std::size_t k = 3;

    std::uint64_t seed = 42;
    std::string output_dir;
    bool parallel = true;

    friend bool operator==(const CliConfig&, const CliConfig&) = default;
};

/// "section.key" -> raw value.
using ConfigEntries = std::map<std::string, std::string>;

namespace detail {

inline const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "suite.profile",       "suite.n_tasks",       "suite.input_dim",     "suite.seed",
        "suite.n_train",       "suite.n_eval",        "suite.noise_std",     "model.kind",
        "model.hidden_dim",    "model.output_dim",    "model.activation",    "training.optimizer",
        "training.lr",         "training.beta1",      "training.beta2",      "training.eps",
        "training.batch_size", "training.epochs_probe", "training.epochs_stage", "training.probe_optimizer",
        "training.probe_lr",   "method.name",         "method.p",            "method.tau",
        "method.k",            "run.seed",            "run.output_dir",      "run.parallel"};
    return keys;
}

inline const std::vector<std::string>& required_keys() {
    static const std::vector<std::string> keys = {"suite.profile", "method.name", "run.seed", "run.output_dir"};
    return keys;
}

inline bool is_known_key(const std::string& key) {
    const auto& k = known_keys();
    return std::find(k.begin(), k.end(), key) != k.end();
}

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline double get_double(const ConfigEntries& e, const std::string& key, double fallback) {
    auto it = e.find(key);
    if (it == e.end()) return fallback;
    auto v = parse_double(it->second);
    if (!v) throw ConfigError(key + ": expected a number, got '" + it->second + "'");
    return *v;
}

template <typename Int>
Int get_int(const ConfigEntries& e, const std::string& key, Int fallback) {
    auto it = e.find(key);
    if (it == e.end()) return fallback;
    auto v = parse_integer<Int>(it->second);
    if (!v) throw ConfigError(key + ": expected a non-negative integer, got '" + it->second + "'");
    return *v;
}

template <typename Enum, typename Parser>
Enum get_enum(const ConfigEntries& e, const std::string& key, Enum fallback, Parser parse) {
    auto it = e.find(key);
    if (it == e.end()) return fallback;
    auto v = parse(it->second);
    if (!v) throw ConfigError(key + ": unknown value '" + it->second + "'");
    return *v;
}

inline bool get_bool(const ConfigEntries& e, const std::string& key, bool fallback) {
    auto it = e.find(key);
    if (it == e.end()) return fallback;
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError(key + ": expected true or false, got '" + it->second + "'");
}

}  // namespace detail

/// Parses config text into entries. Unknown sections or keys and duplicate keys
/// are rejected; `source` prefixes line numbers in messages.
inline ConfigEntries parse_config_entries(std::string_view text, const std::string& source = "config") {
    ConfigEntries out;
    std::string section;
    std::size_t line_no = 0;
    for (auto raw : detail::split_lines(text)) {
        ++line_no;
        const auto hash = raw.find('#');
        const std::string line = detail::trim(raw.substr(0, hash));
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(line_no) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "malformed section header");
            section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        if (section.empty()) throw ConfigError(where + "key outside of any section");
        const std::string key = section + "." + detail::trim(std::string_view(line).substr(0, eq));
        const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
        if (!detail::is_known_key(key)) throw ConfigError(where + "unknown key '" + key + "'");
        if (!out.emplace(key, value).second) throw ConfigError(where + "duplicate key '" + key + "'");
    }
    return out;
}

/// Parses "section.key=value" overrides, as given on the command line.
inline ConfigEntries parse_overrides(const std::vector<std::string>& items) {
    ConfigEntries out;
    for (const auto& item : items) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + item + "' is not of the form section.key=value");
        const std::string key = detail::trim(std::string_view(item).substr(0, eq));
        if (!detail::is_known_key(key)) throw ConfigError("unknown key '" + key + "'");
        out[key] = detail::trim(std::string_view(item).substr(eq + 1));
    }
    return out;
}

/// Builds a config from entries; `overrides` win over `entries`.
inline CliConfig config_from_entries(ConfigEntries entries, const ConfigEntries& overrides = {}) {
    for (const auto& [k, v] : overrides) {
        if (!detail::is_known_key(k)) throw ConfigError("unknown key '" + k + "'");
        entries[k] = v;
    }
    for (const auto& key : detail::required_keys()) {
        if (!entries.count(key)) throw ConfigError("missing required key '" + key + "'");
    }
    using namespace detail;
    CliConfig c;
    c.profile = get_enum(entries, "suite.profile", c.profile, parse_suite_profile);
    c.n_tasks = get_int(entries, "suite.n_tasks", c.n_tasks);
    c.input_dim = get_int(entries, "suite.input_dim", c.input_dim);
    if (entries.count("suite.seed")) c.suite_seed = get_int<std::uint64_t>(entries, "suite.seed", 0);
    if (entries.count("suite.n_train")) c.n_train = get_int<std::size_t>(entries, "suite.n_train", 0);
    c.n_eval = get_int(entries, "suite.n_eval", c.n_eval);
    c.noise_std = get_double(entries, "suite.noise_std", c.noise_std);

    c.model_kind = get_enum(entries, "model.kind", c.model_kind, parse_model_kind);
    c.hidden_dim = get_int(entries, "model.hidden_dim", c.hidden_dim);
    c.output_dim = get_int(entries, "model.output_dim", c.output_dim);
    c.activation = get_enum(entries, "model.activation", c.activation, parse_activation);

    auto& t = c.training;
    t.optimizer = get_enum(entries, "training.optimizer", t.optimizer, parse_optimizer);
    t.lr = get_double(entries, "training.lr", t.lr);
    t.beta1 = get_double(entries, "training.beta1", t.beta1);
    t.beta2 = get_double(entries, "training.beta2", t.beta2);
    t.eps = get_double(entries, "training.eps", t.eps);
    t.batch_size = get_int(entries, "training.batch_size", t.batch_size);
    t.epochs_probe = get_int(entries, "training.epochs_probe", t.epochs_probe);
    t.epochs_stage = get_int(entries, "training.epochs_stage", t.epochs_stage);
    c.probe_optimizer = get_enum(entries, "training.probe_optimizer", c.probe_optimizer, parse_optimizer);
    c.probe_lr = get_double(entries, "training.probe_lr", c.probe_lr);

    c.method = get_enum(entries, "method.name", c.method, parse_method);
    c.p = get_double(entries, "method.p", c.p);
    c.tau = get_double(entries, "method.tau", c.tau);
    c.k = get_int(entries, "method.k", c.k);

    c.seed = get_int(entries, "run.seed", c.seed);
    c.output_dir = entries.at("run.output_dir");
    if (c.output_dir.empty()) throw ConfigError("run.output_dir must not be empty");
    c.parallel = get_bool(entries, "run.parallel", c.parallel);

    if (!(c.p > 0.0 && c.p <= 100.0)) throw ConfigError("method.p must lie in (0, 100], got " + format_double(c.p));
    if (!(c.tau >= 0.0 && c.tau <= 1.0)) throw ConfigError("method.tau must lie in [0, 1], got " + format_double(c.tau));
    if (!(c.noise_std >= 0.0)) throw ConfigError("suite.noise_std must be >= 0");
    return c;
}

inline CliConfig parse_config(std::string_view text, const ConfigEntries& overrides = {},
                              const std::string& source = "config") {
    return config_from_entries(parse_config_entries(text, source), overrides);
}

inline CliConfig load_config(const std::filesystem::path& path, const ConfigEntries& overrides = {}) {
    std::string text;
    try {
        text = read_text_file(path);
    } catch (const IoError& e) {
        throw ConfigError(e.what());
    }
    return parse_config(text, overrides, path.string());
}

/// Every key written explicitly, so the snapshot does not depend on defaults.
inline std::string config_to_text(const CliConfig& c) {
    std::ostringstream out;
    out << "[suite]\n"
        << "profile = " << to_string(c.profile) << "\n"
        << "n_tasks = " << c.n_tasks << "\n"
        << "input_dim = " << c.input_dim << "\n";
    if (c.suite_seed) out << "seed = " << *c.suite_seed << "\n";
    if (c.n_train) out << "n_train = " << *c.n_train << "\n";
    out << "n_eval = " << c.n_eval << "\n"
        << "noise_std = " << format_double(c.noise_std) << "\n\n"
        << "[model]\n"
        << "kind = " << to_string(c.model_kind) << "\n"
        << "hidden_dim = " << c.hidden_dim << "\n"
        << "output_dim = " << c.output_dim << "\n"
        << "activation = " << to_string(c.activation) << "\n\n"
        << "[training]\n"
        << "optimizer = " << to_string(c.training.optimizer) << "\n"
        << "lr = " << format_double(c.training.lr) << "\n"
        << "beta1 = " << format_double(c.training.beta1) << "\n"
        << "beta2 = " << format_double(c.training.beta2) << "\n"
        << "eps = " << format_double(c.training.eps) << "\n"
        << "batch_size = " << c.training.batch_size << "\n"
        << "epochs_probe = " << c.training.epochs_probe << "\n"
        << "epochs_stage = " << c.training.epochs_stage << "\n"
        << "probe_optimizer = " << to_string(c.probe_optimizer) << "\n"
        << "probe_lr = " << format_double(c.probe_lr) << "\n\n"
        << "[method]\n"
        << "name = " << to_string(c.method) << "\n"
        << "p = " << format_double(c.p) << "\n"
        << "tau = " << format_double(c.tau) << "\n"
        << "k = " << c.k << "\n\n"
        << "[run]\n"
        << "seed = " << c.seed << "\n"
        << "output_dir = " << c.output_dir << "\n"
        << "parallel = " << (c.parallel ? "true" : "false") << "\n";
    return out.str();
}

inline TaskSuite build_suite(const CliConfig& c) {
    SuiteOptions opts;
    opts.model = ModelSpec{c.model_kind, c.input_dim, c.hidden_dim, c.output_dim, c.activation};
    opts.n_train = c.n_train;
    opts.n_eval = c.n_eval;
    opts.noise_std = c.noise_std;
    return make_benchmark_suite(c.profile, c.n_tasks, c.input_dim, c.suite_seed.value_or(c.seed), opts);
}

inline RunConfig to_run_config(const CliConfig& c) {
    RunConfig r;
    r.suite = build_suite(c);
    r.training = c.training;
    r.probe_optimizer = c.probe_optimizer;
    r.probe_lr = c.probe_lr;
    r.p = c.p;
    r.tau = c.tau;
    r.method = c.method;
    r.stages_k = c.k;
    r.seed = c.seed;
    r.parallel = c.parallel;
    validate(r);
    return r;
}

// ---------------------------------------------------------------------------
// Run directories.

/// Creates `dir` for a new run. An existing non-empty directory is an error
/// unless `overwrite`, in which case its contents are removed.
inline void prepare_run_dir(const std::filesystem::path& dir, bool overwrite) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (fs::exists(dir, ec)) {
        if (!fs::is_directory(dir, ec)) throw ConfigError("output_dir '" + dir.string() + "' is not a directory");
        if (!fs::is_empty(dir, ec)) {
            if (!overwrite) {
                throw ConfigError("output_dir '" + dir.string() + "' is not empty (pass --overwrite to replace it)");
            }
            for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path(), ec);
        }
    }
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

inline std::string similarity_csv(const SimilarityMatrix& s) {
    std::ostringstream out;
    out << "task_id";
    for (const auto& id : s.task_ids) out << ',' << id;
    out << '\n';
    for (std::size_t i = 0; i < s.size(); ++i) {
        out << s.task_ids[i];
        for (std::size_t j = 0; j < s.size(); ++j) out << ',' << format_double(s(i, j));
        out << '\n';
    }
    return out.str();
}

/// regions/<task>.txt, similarity.csv and plan.json.
inline void write_plan_files(const GroupingPlan& plan, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "regions");
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& r : plan.regions) {
        const std::string rel = "regions/" + r.task_id + ".txt";
        write_text_file(dir / rel, region_to_text(r));
        files.emplace_back(r.task_id, rel);
    }
    write_text_file(dir / "similarity.csv", similarity_csv(plan.similarity));
    write_text_file(dir / "plan.json", plan_to_json(plan, files).dump(2) + "\n");
}

inline void write_run_dir(const RunResult& result, const RunConfig& cfg, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (result.plan) write_plan_files(*result.plan, dir);
    fs::create_directories(dir / "checkpoints");
    for (std::size_t k = 0; k < result.checkpoints.size(); ++k) {
        save_checkpoint(result.checkpoints[k], dir / "checkpoints" / ("stage_" + std::to_string(k) + ".ckpt"));
    }
    fs::create_directories(dir / "masks");
    for (std::size_t k = 0; k < result.masks.size(); ++k) {
        write_text_file(dir / "masks" / ("stage_" + std::to_string(k + 1) + ".txt"), mask_to_text(result.masks[k]));
    }
    write_text_file(dir / "metrics.csv", metrics_csv(result.timeline));
    write_text_file(dir / "train_log.csv", result.log.to_csv());
    emit_report({summarize(result, cfg)}, dir);
}

// ---------------------------------------------------------------------------
// Commands. Each returns an exit code: 0 success, 2 configuration or usage
// error, 3 numeric failure. Messages go to `err`.

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

struct CommandOptions {
    bool overwrite = false;
};

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
    try {
        fn();
        return kExitOk;
    } catch (const NumericError& e) {
        err << "error: numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}

inline int cmd_probe(const CliConfig& config, const CommandOptions& opts = {}, std::ostream& out = std::cout,
                     std::ostream& err = std::cerr) {
    return guarded(err, [&] {
        const auto cfg = to_run_config(config);
        const std::filesystem::path dir = config.output_dir;
        prepare_run_dir(dir, opts.overwrite);
        write_text_file(dir / "config.ini", config_to_text(config));
        const auto data = generate_suite_data(cfg.suite);
        const auto theta0 = initial_params(cfg);
        const auto probes = probe_all(cfg, data, theta0);
        auto plan = plan_from_regions(regions_from_probes(cfg.suite, theta0, probes, cfg.p), cfg.tau);
        plan.percent = cfg.p;
        write_plan_files(plan, dir);
        out << "plan: " << plan.stages.size() << " stage(s):";
        for (const auto& g : plan.stages) {
            out << " {";
            for (std::size_t i = 0; i < g.size(); ++i) out << (i ? "," : "") << g[i];
            out << "}";
        }
        out << "\n";
    });
}

inline int cmd_run(const CliConfig& config, const CommandOptions& opts = {}, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
    return guarded(err, [&] {
        const auto cfg = to_run_config(config);
        const std::filesystem::path dir = config.output_dir;
        prepare_run_dir(dir, opts.overwrite);
        write_text_file(dir / "config.ini", config_to_text(config));
        const auto result = run(cfg);
        write_run_dir(result, cfg, dir);
        const auto row = score_row(summarize(result, cfg));
        out << row.label << ": avg_norm " << format_double(row.avg_norm) << ", mean forgetting "
            << format_double(row.mean_forgetting) << "\n";
    });
}

/// Parses a comma-separated p list such as "0.1,0.5,1".
inline std::vector<double> parse_p_list(std::string_view text) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto comma = text.find(',', start);
        const std::string item = detail::trim(text.substr(start, comma == std::string_view::npos ? text.npos : comma - start));
        auto v = parse_double(item);
        if (!v) throw ConfigError("p list: '" + item + "' is not a number");
        out.push_back(*v);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

inline int cmd_ablate(const CliConfig& config, const std::vector<double>& p_values, const CommandOptions& opts = {},
                      std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return guarded(err, [&] {
        auto cfg = to_run_config(config);
        cfg.method = Method::dpi;
        if (p_values.empty()) throw ConfigError("p list is empty");
        for (double p : p_values) {
            if (!(p > 0.0 && p <= 100.0)) throw ConfigError("p list: p must lie in (0, 100], got " + format_double(p));
        }
        const std::filesystem::path dir = config.output_dir;
        prepare_run_dir(dir, opts.overwrite);
        write_text_file(dir / "config.ini", config_to_text(config));
        const auto points = ablate_p(cfg, p_values);
        std::vector<RunSummary> runs;
        std::vector<SweepPoint> sweep;
        for (const auto& pt : points) {
            auto c = cfg;
            c.p = pt.p;
            auto s = summarize(pt.result, c);
            runs.push_back(s);
            sweep.push_back({pt.p, std::move(s)});
        }
        emit_report(runs, dir, sweep);
        for (const auto& s : sweep) out << "p=" << format_double(s.p) << ": avg_norm " << format_double(score_row(s.run).avg_norm) << "\n";
    });
}

/// Merges the reports of `run_dirs` into one report in `out_dir` (when
/// non-empty) and prints the scoreboard CSV.
inline int cmd_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out_dir,
                      const CommandOptions& opts = {}, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    return guarded(err, [&] {
        if (run_dirs.empty()) throw ConfigError("report needs at least one run directory");
        std::vector<RunSummary> runs;
        for (const auto& d : run_dirs) {
            if (!std::filesystem::exists(d / "report.json")) {
                throw ConfigError("'" + d.string() + "' is not a run directory (no report.json)");
            }
            for (auto& r : read_report(d / "report.json").runs) runs.push_back(std::move(r));
        }
        const auto board = build_scoreboard(runs);
        if (!out_dir.empty()) {
            prepare_run_dir(out_dir, opts.overwrite);
            emit_report(runs, out_dir);
        }
        out << scoreboard_csv(board);
    });
}

}  // namespace dpi
