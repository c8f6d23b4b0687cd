#pragma once

// Metrics, 0-10 normalized scores, forgetting, and report files.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dpi/error.hpp"
#include "dpi/models.hpp"
#include "dpi/param_core.hpp"

#include <json.hpp>

namespace dpi {

/// Eval loss (regression) or accuracy in [0, 1] (classification), measured at
/// a stage boundary: 0 is before any training, k is after stage k.
struct TaskMetric {
    std::string task_id;
    Objective objective = Objective::regression;
    double raw = 0.0;
    std::size_t measured_at = 0;
    friend bool operator==(const TaskMetric&, const TaskMetric&) = default;
};

inline TaskMetric evaluate(const ParamVector& params, const ModelSpec& spec, const Batch& eval,
                           std::size_t measured_at = 0) {
    check_batch(spec, eval);
    TaskMetric m{eval.task_id, eval.objective, 0.0, measured_at};
    if (eval.objective == Objective::regression) {
        m.raw = loss(spec, params, eval);
        return m;
    }
    const auto logits = predict(spec, params, eval.inputs);
    std::size_t correct = 0;
    for (std::size_t s = 0; s < eval.size(); ++s) {
        const auto row = logits.row(s);
        const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (pred == eval.labels[s]) ++correct;
    }
    m.raw = static_cast<double>(correct) / static_cast<double>(eval.size());
    return m;
}

/// Classification: 10 * accuracy. Regression: 10 * max(0, 1 - loss / loss_ref)
/// with loss_ref the untrained model's loss; a task with loss_ref == 0 scores 10
/// when loss is 0 and 0 otherwise.
inline double normalize_score(const TaskMetric& metric, const TaskMetric& reference) {
    if (metric.task_id != reference.task_id || metric.objective != reference.objective) {
        throw ConfigError("normalize_score: reference metric belongs to a different task");
    }
    double score = 0.0;
    if (metric.objective == Objective::classification) {
        score = 10.0 * metric.raw;
    } else if (reference.raw == 0.0) {
        score = metric.raw == 0.0 ? 10.0 : 0.0;
    } else {
        score = 10.0 * std::max(0.0, 1.0 - metric.raw / reference.raw);
    }
    return std::clamp(score, 0.0, 10.0);
}

/// Metrics for every task at every stage boundary 0..K.
struct MetricsTimeline {
    std::vector<std::string> task_ids;
    /// 1-based stage in which each task was trained.
    std::vector<std::size_t> trained_in_stage;
    /// at[b][i]: metric of task i after boundary b.
    std::vector<std::vector<TaskMetric>> at;

    [[nodiscard]] std::size_t final_boundary() const { return at.empty() ? 0 : at.size() - 1; }

    [[nodiscard]] std::size_t position(const std::string& task_id) const {
        for (std::size_t i = 0; i < task_ids.size(); ++i) {
            if (task_ids[i] == task_id) return i;
        }
        throw ConfigError("timeline has no task '" + task_id + "'");
    }

    [[nodiscard]] double score(std::size_t boundary, std::size_t i) const {
        return normalize_score(at.at(boundary).at(i), at.at(0).at(i));
    }

    [[nodiscard]] std::vector<double> final_scores() const {
        std::vector<double> out;
        for (std::size_t i = 0; i < task_ids.size(); ++i) out.push_back(score(final_boundary(), i));
        return out;
    }

    /// Every (task, boundary) pair is present and labelled consistently.
    [[nodiscard]] bool complete() const {
        if (at.empty() || trained_in_stage.size() != task_ids.size()) return false;
        for (std::size_t b = 0; b < at.size(); ++b) {
            if (at[b].size() != task_ids.size()) return false;
            for (std::size_t i = 0; i < task_ids.size(); ++i) {
                if (at[b][i].task_id != task_ids[i] || at[b][i].measured_at != b) return false;
            }
        }
        return true;
    }
    friend bool operator==(const MetricsTimeline&, const MetricsTimeline&) = default;
};

/// Best normalized score at or after the task's own stage, minus its final score.
inline double forgetting(const MetricsTimeline& timeline, const std::string& task_id) {
    const auto i = timeline.position(task_id);
    const auto own = timeline.trained_in_stage.at(i);
    if (own == 0 || own > timeline.final_boundary()) {
        throw ConfigError("forgetting: task '" + task_id + "' was never trained");
    }
    double best = timeline.score(own, i);
    for (std::size_t b = own + 1; b <= timeline.final_boundary(); ++b) best = std::max(best, timeline.score(b, i));
    return best - timeline.score(timeline.final_boundary(), i);
}

inline double mean(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------
// Run summaries and the scoreboard.

/// Everything the report needs from one run.
struct RunSummary {
    std::string method;        // dpi, full_multitask, random_stages, heuristic_stages
    std::string label;         // row label, e.g. "random_stages(K=3)" or "dpi(p=0.5)"
    std::uint64_t seed = 0;
    double p = 0.0;
    double tau = 0.0;
    std::string suite_fingerprint;
    std::vector<std::vector<std::string>> stages;
    MetricsTimeline timeline;
    friend bool operator==(const RunSummary&, const RunSummary&) = default;
};

inline int method_rank(const std::string& method) {
    static const char* order[] = {"dpi", "full_multitask", "random_stages", "heuristic_stages"};
    for (int i = 0; i < 4; ++i) {
        if (method == order[i]) return i;
    }
    return 4;
}

struct ScoreRow {
    std::string method;
    std::string label;
    std::vector<double> scores;
    double avg_norm = 0.0;
    std::vector<double> forgetting;
    double mean_forgetting = 0.0;
    friend bool operator==(const ScoreRow&, const ScoreRow&) = default;
};

struct Scoreboard {
    std::vector<std::string> task_ids;
    std::vector<ScoreRow> rows;
    friend bool operator==(const Scoreboard&, const Scoreboard&) = default;
};

inline ScoreRow score_row(const RunSummary& run) {
    ScoreRow row;
    row.method = run.method;
    row.label = run.label.empty() ? run.method : run.label;
    row.scores = run.timeline.final_scores();
    row.avg_norm = mean(row.scores);
    for (const auto& id : run.timeline.task_ids) row.forgetting.push_back(forgetting(run.timeline, id));
    row.mean_forgetting = mean(row.forgetting);
    return row;
}

/// Rows in the fixed method order dpi, full_multitask, random_stages,
/// heuristic_stages; runs of the same method keep their input order.
inline Scoreboard build_scoreboard(const std::vector<RunSummary>& runs) {
    if (runs.empty()) throw ConfigError("scoreboard needs at least one run");
    Scoreboard board;
    board.task_ids = runs.front().timeline.task_ids;
    std::vector<const RunSummary*> sorted;
    for (const auto& r : runs) {
        if (r.timeline.task_ids != board.task_ids) throw ConfigError("runs cover different task sets");
        if (r.suite_fingerprint != runs.front().suite_fingerprint) throw ConfigError("runs come from different suites");
        sorted.push_back(&r);
    }
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const RunSummary* a, const RunSummary* b) { return method_rank(a->method) < method_rank(b->method); });
    for (const auto* r : sorted) board.rows.push_back(score_row(*r));
    return board;
}

// ---------------------------------------------------------------------------
// JSON.

inline constexpr int kReportSchemaVersion = 1;

inline nlohmann::json to_json(const MetricsTimeline& t) {
    nlohmann::json j;
    j["task_ids"] = t.task_ids;
    j["trained_in_stage"] = t.trained_in_stage;
    auto& entries = j["metrics"] = nlohmann::json::array();
    for (const auto& row : t.at) {
        for (const auto& m : row) {
            entries.push_back({{"boundary", m.measured_at},
                               {"task_id", m.task_id},
                               {"objective", m.objective == Objective::regression ? "regression" : "classification"},
                               {"raw", m.raw}});
        }
    }
    return j;
}

inline MetricsTimeline timeline_from_json(const nlohmann::json& j) {
    MetricsTimeline t;
    t.task_ids = j.at("task_ids").get<std::vector<std::string>>();
    t.trained_in_stage = j.at("trained_in_stage").get<std::vector<std::size_t>>();
    for (const auto& e : j.at("metrics")) {
        TaskMetric m;
        m.measured_at = e.at("boundary").get<std::size_t>();
        m.task_id = e.at("task_id").get<std::string>();
        const auto obj = e.at("objective").get<std::string>();
        if (obj != "regression" && obj != "classification") {
            throw FormatError(ErrorCode::format_parse, "unknown objective '" + obj + "'");
        }
        m.objective = obj == "regression" ? Objective::regression : Objective::classification;
        m.raw = e.at("raw").get<double>();
        if (t.at.size() <= m.measured_at) t.at.resize(m.measured_at + 1);
        t.at[m.measured_at].push_back(std::move(m));
    }
    if (!t.complete()) throw FormatError(ErrorCode::format_parse, "metrics timeline is incomplete");
    return t;
}

inline nlohmann::json to_json(const ScoreRow& r) {
    return {{"method", r.method},       {"label", r.label},
            {"scores", r.scores},       {"avg_norm", r.avg_norm},
            {"forgetting", r.forgetting}, {"mean_forgetting", r.mean_forgetting}};
}

inline nlohmann::json to_json(const Scoreboard& b) {
    nlohmann::json j;
    j["task_ids"] = b.task_ids;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : b.rows) j["rows"].push_back(to_json(r));
    return j;
}

inline Scoreboard scoreboard_from_json(const nlohmann::json& j) {
    Scoreboard b;
    b.task_ids = j.at("task_ids").get<std::vector<std::string>>();
    for (const auto& e : j.at("rows")) {
        ScoreRow r;
        r.method = e.at("method").get<std::string>();
        r.label = e.at("label").get<std::string>();
        r.scores = e.at("scores").get<std::vector<double>>();
        r.avg_norm = e.at("avg_norm").get<double>();
        r.forgetting = e.at("forgetting").get<std::vector<double>>();
        r.mean_forgetting = e.at("mean_forgetting").get<double>();
        b.rows.push_back(std::move(r));
    }
    return b;
}

inline nlohmann::json to_json(const RunSummary& r) {
    return {{"method", r.method},
            {"label", r.label},
            {"seed", r.seed},
            {"p", r.p},
            {"tau", r.tau},
            {"suite_fingerprint", r.suite_fingerprint},
            {"stages", r.stages},
            {"timeline", to_json(r.timeline)}};
}

inline RunSummary run_summary_from_json(const nlohmann::json& j) {
    RunSummary r;
    r.method = j.at("method").get<std::string>();
    r.label = j.at("label").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.p = j.at("p").get<double>();
    r.tau = j.at("tau").get<double>();
    r.suite_fingerprint = j.at("suite_fingerprint").get<std::string>();
    r.stages = j.at("stages").get<std::vector<std::vector<std::string>>>();
    r.timeline = timeline_from_json(j.at("timeline"));
    return r;
}

/// report.json: the runs it was built from plus the derived scoreboard.
inline nlohmann::json report_json(const std::vector<RunSummary>& runs) {
    nlohmann::json j;
    j["schema"] = "dpi-report";
    j["schema_version"] = kReportSchemaVersion;
    j["runs"] = nlohmann::json::array();
    for (const auto& r : runs) j["runs"].push_back(to_json(r));
    j["scoreboard"] = to_json(build_scoreboard(runs));
    return j;
}

struct ParsedReport {
    std::vector<RunSummary> runs;
    Scoreboard scoreboard;
};

inline ParsedReport parse_report(const nlohmann::json& j) {
    try {
        if (j.at("schema").get<std::string>() != "dpi-report") throw FormatError(ErrorCode::format_magic, "not a report file");
        if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
            throw FormatError(ErrorCode::format_version, "unsupported report schema_version");
        }
        ParsedReport out;
        for (const auto& r : j.at("runs")) out.runs.push_back(run_summary_from_json(r));
        out.scoreboard = scoreboard_from_json(j.at("scoreboard"));
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(ErrorCode::format_parse, std::string("malformed report: ") + e.what());
    }
}

inline ParsedReport read_report(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(ErrorCode::format_parse, "report '" + path.string() + "' is not JSON: " + e.what());
    }
    return parse_report(j);
}

// ---------------------------------------------------------------------------
// CSV.
//
// scoreboard.csv:
//   table,label,method,<task ids...>,summary
//   score,dpi,dpi,<scores...>,<avg_norm>
//   forgetting,dpi,dpi,<forgetting...>,<mean_forgetting>

inline std::string scoreboard_csv(const Scoreboard& b) {
    std::ostringstream out;
    out << "table,label,method";
    for (const auto& id : b.task_ids) out << ',' << id;
    out << ",summary\n";
    for (const char* table : {"score", "forgetting"}) {
        const bool score = std::string_view(table) == "score";
        for (const auto& r : b.rows) {
            out << table << ',' << r.label << ',' << r.method;
            for (double v : score ? r.scores : r.forgetting) out << ',' << format_double(v);
            out << ',' << format_double(score ? r.avg_norm : r.mean_forgetting) << '\n';
        }
    }
    return out.str();
}

namespace detail {
inline std::vector<std::string> split_csv(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto comma = line.find(',', start);
        out.emplace_back(line.substr(start, comma == std::string_view::npos ? line.size() - start : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
    return out;
}

inline double csv_number(const std::string& s) {
    auto v = parse_double(s);
    if (!v) throw FormatError(ErrorCode::format_parse, "bad number '" + s + "' in CSV");
    return *v;
}
}  // namespace detail

inline Scoreboard scoreboard_from_csv(std::string_view text) {
    const auto lines = detail::split_lines(text);
    if (lines.empty()) throw FormatError(ErrorCode::format_truncated, "empty scoreboard CSV");
    const auto header = detail::split_csv(lines[0]);
    if (header.size() < 4 || header[0] != "table" || header.back() != "summary") {
        throw FormatError(ErrorCode::format_parse, "unexpected scoreboard header");
    }
    Scoreboard b;
    b.task_ids.assign(header.begin() + 3, header.end() - 1);
    const std::size_t width = header.size();
    std::size_t forgetting_row = 0;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        if (lines[li].empty()) continue;
        const auto f = detail::split_csv(lines[li]);
        if (f.size() != width) throw FormatError(ErrorCode::format_parse, "scoreboard row has wrong width");
        std::vector<double> vals;
        for (std::size_t c = 3; c + 1 < width; ++c) vals.push_back(detail::csv_number(f[c]));
        const double summary = detail::csv_number(f.back());
        if (f[0] == "score") {
            b.rows.push_back(ScoreRow{f[2], f[1], std::move(vals), summary, {}, 0.0});
        } else if (f[0] == "forgetting") {
            if (forgetting_row >= b.rows.size() || b.rows[forgetting_row].label != f[1]) {
                throw FormatError(ErrorCode::format_parse, "forgetting row without a matching score row");
            }
            b.rows[forgetting_row].forgetting = std::move(vals);
            b.rows[forgetting_row].mean_forgetting = summary;
            ++forgetting_row;
        } else {
            throw FormatError(ErrorCode::format_parse, "unknown scoreboard table '" + f[0] + "'");
        }
    }
    if (forgetting_row != b.rows.size()) throw FormatError(ErrorCode::format_truncated, "scoreboard is missing forgetting rows");
    return b;
}

/// One point of a p sweep.
struct SweepPoint {
    double p = 0.0;
    RunSummary run;
};

/// ablation_p.csv: p,task_id,score,avg_norm (one row per p and task).
inline std::string ablation_csv(const std::vector<SweepPoint>& sweep) {
    std::ostringstream out;
    out << "p,task_id,score,avg_norm\n";
    for (const auto& pt : sweep) {
        const auto row = score_row(pt.run);
        for (std::size_t i = 0; i < row.scores.size(); ++i) {
            out << format_double(pt.p) << ',' << pt.run.timeline.task_ids[i] << ',' << format_double(row.scores[i])
                << ',' << format_double(row.avg_norm) << '\n';
        }
    }
    return out.str();
}

struct AblationRow {
    double p = 0.0;
    std::string task_id;
    double score = 0.0;
    double avg_norm = 0.0;
};

inline std::vector<AblationRow> ablation_from_csv(std::string_view text) {
    const auto lines = detail::split_lines(text);
    if (lines.empty() || detail::split_csv(lines[0]) != std::vector<std::string>{"p", "task_id", "score", "avg_norm"}) {
        throw FormatError(ErrorCode::format_parse, "unexpected ablation CSV header");
    }
    std::vector<AblationRow> out;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        if (lines[li].empty()) continue;
        const auto f = detail::split_csv(lines[li]);
        if (f.size() != 4) throw FormatError(ErrorCode::format_parse, "ablation row has wrong width");
        out.push_back({detail::csv_number(f[0]), f[1], detail::csv_number(f[2]), detail::csv_number(f[3])});
    }
    return out;
}

/// metrics.csv: boundary,task_id,raw,score
inline std::string metrics_csv(const MetricsTimeline& t) {
    std::ostringstream out;
    out << "boundary,task_id,raw,score\n";
    for (std::size_t b = 0; b < t.at.size(); ++b) {
        for (std::size_t i = 0; i < t.task_ids.size(); ++i) {
            out << b << ',' << t.task_ids[i] << ',' << format_double(t.at[b][i].raw) << ','
                << format_double(t.score(b, i)) << '\n';
        }
    }
    return out.str();
}

/// Writes report.json and scoreboard.csv into `dir`, plus ablation_p.csv when a
/// sweep is given.
inline void emit_report(const std::vector<RunSummary>& runs, const std::filesystem::path& dir,
                        const std::vector<SweepPoint>& sweep = {}) {
    if (runs.empty()) throw ConfigError("emit_report needs at least one run");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    write_text_file(dir / "report.json", report_json(runs).dump(2) + "\n");
    write_text_file(dir / "scoreboard.csv", scoreboard_csv(build_scoreboard(runs)));
    if (!sweep.empty()) write_text_file(dir / "ablation_p.csv", ablation_csv(sweep));
}

}  // namespace dpi
