#pragma once

// Core-region overlap, threshold grouping, stage ordering and frozen sets.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "dpi/error.hpp"
#include "dpi/models.hpp"
#include "dpi/param_core.hpp"

#include <json.hpp>

namespace dpi {

/// |A ∩ B| / |A ∪ B| over sorted index sets.
inline double jaccard(const CoreRegion& ci, const CoreRegion& cj) {
    if (ci.dim != cj.dim) throw DimensionError("jaccard: regions over different parameter counts");
    if (ci.indices.empty() && cj.indices.empty()) throw ConfigError("jaccard: undefined for two empty regions");
    std::size_t inter = 0;
    auto a = ci.indices.begin(), b = cj.indices.begin();
    while (a != ci.indices.end() && b != cj.indices.end()) {
        if (*a < *b) {
            ++a;
        } else if (*b < *a) {
            ++b;
        } else {
            ++inter;
            ++a;
            ++b;
        }
    }
    const std::size_t uni = ci.indices.size() + cj.indices.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

struct SimilarityMatrix {
    std::vector<std::string> task_ids;
    Matrix values;

    [[nodiscard]] std::size_t size() const { return task_ids.size(); }
    double operator()(std::size_t i, std::size_t j) const { return values(i, j); }
    friend bool operator==(const SimilarityMatrix&, const SimilarityMatrix&) = default;
};

inline SimilarityMatrix similarity_matrix(const std::vector<CoreRegion>& regions) {
    if (regions.empty()) throw ConfigError("similarity_matrix: no regions");
    const std::size_t n = regions.size();
    SimilarityMatrix s;
    s.values = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        if (regions[i].dim != regions[0].dim) throw DimensionError("similarity_matrix: regions over different D");
        s.task_ids.push_back(regions[i].task_id);
        s.values(i, i) = 1.0;
        for (std::size_t j = 0; j < i; ++j) {
            const double v = jaccard(regions[i], regions[j]);
            s.values(i, j) = v;
            s.values(j, i) = v;
        }
    }
    return s;
}

/// Union-find with path compression; the root of a set is its smallest member.
class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }

    std::size_t find(std::size_t x) {
        std::size_t root = x;
        while (parent_[root] != root) root = parent_[root];
        while (parent_[x] != root) {
            auto next = parent_[x];
            parent_[x] = root;
            x = next;
        }
        return root;
    }

    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (b < a) std::swap(a, b);
        parent_[b] = a;
    }

private:
    std::vector<std::size_t> parent_;
};

/// Connected components of the graph with an edge (i, j) whenever
/// S(i, j) >= tau. Components and their members are listed by position in S.
inline std::vector<std::vector<std::size_t>> threshold_components(const SimilarityMatrix& s, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1], got " + format_double(tau));
    const std::size_t n = s.size();
    DisjointSets sets(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (s(i, j) >= tau) sets.unite(i, j);
        }
    }
    std::vector<std::vector<std::size_t>> comps;
    std::vector<std::size_t> slot(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto root = sets.find(i);
        if (slot[root] == n) {
            slot[root] = comps.size();
            comps.emplace_back();
        }
        comps[slot[root]].push_back(i);
    }
    return comps;
}

inline std::vector<std::vector<std::string>> build_grouping(const SimilarityMatrix& s, double tau) {
    std::vector<std::vector<std::string>> out;
    for (const auto& comp : threshold_components(s, tau)) {
        auto& group = out.emplace_back();
        for (auto i : comp) group.push_back(s.task_ids[i]);
    }
    return out;
}

struct GroupingPlan {
    std::vector<std::vector<std::string>> stages;
    double tau = 0.0;
    double percent = 0.0;
    std::vector<CoreRegion> regions;  // one per task, in suite order
    SimilarityMatrix similarity;

    [[nodiscard]] std::size_t stage_count() const { return stages.size(); }

    [[nodiscard]] const CoreRegion& region_of(const std::string& task_id) const {
        for (const auto& r : regions) {
            if (r.task_id == task_id) return r;
        }
        throw ConfigError("plan has no region for task '" + task_id + "'");
    }
    friend bool operator==(const GroupingPlan&, const GroupingPlan&) = default;
};

namespace detail {
inline std::vector<std::size_t> union_of(const std::vector<const CoreRegion*>& regions) {
    std::vector<std::size_t> out;
    for (const auto* r : regions) {
        std::vector<std::size_t> merged;
        merged.reserve(out.size() + r->indices.size());
        std::set_union(out.begin(), out.end(), r->indices.begin(), r->indices.end(), std::back_inserter(merged));
        out = std::move(merged);
    }
    return out;
}

inline std::size_t position_of(const std::vector<CoreRegion>& regions, const std::string& id) {
    for (std::size_t i = 0; i < regions.size(); ++i) {
        if (regions[i].task_id == id) return i;
    }
    throw ConfigError("no core region for task '" + id + "'");
}
}  // namespace detail

/// Stages ordered by descending size of the group's core-region union; ties
/// go to the group holding the earliest task.
inline GroupingPlan order_stages(const std::vector<std::vector<std::string>>& groups,
                                 const std::vector<CoreRegion>& regions) {
    std::vector<std::size_t> seen(regions.size(), 0);
    struct Keyed {
        std::vector<std::string> members;
        std::size_t footprint;
        std::size_t first;
    };
    std::vector<Keyed> keyed;
    for (const auto& g : groups) {
        if (g.empty()) throw ConfigError("order_stages: empty group");
        std::vector<const CoreRegion*> rs;
        std::size_t first = regions.size();
        for (const auto& id : g) {
            const auto pos = detail::position_of(regions, id);
            ++seen[pos];
            rs.push_back(&regions[pos]);
            first = std::min(first, pos);
        }
        keyed.push_back({g, detail::union_of(rs).size(), first});
    }
    for (std::size_t i = 0; i < seen.size(); ++i) {
        if (seen[i] != 1) throw ConfigError("order_stages: groups do not partition the tasks (task '" + regions[i].task_id + "')");
    }
    std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
        if (a.footprint != b.footprint) return a.footprint > b.footprint;
        return a.first < b.first;
    });
    GroupingPlan plan;
    plan.regions = regions;
    for (auto& k : keyed) plan.stages.push_back(std::move(k.members));
    if (!regions.empty()) plan.percent = regions.front().percent;
    return plan;
}

/// Full stage-1/2 analysis: similarity, threshold components, ordering.
inline GroupingPlan plan_from_regions(const std::vector<CoreRegion>& regions, double tau) {
    auto sim = similarity_matrix(regions);
    auto plan = order_stages(build_grouping(sim, tau), regions);
    plan.tau = tau;
    plan.similarity = std::move(sim);
    return plan;
}

struct FrozenSet {
    std::vector<std::size_t> indices;
    std::size_t stage_index = 1;
};

/// Union of the core regions of every task trained before stage k (1-based).
/// k == K + 1 gives the set frozen after the last stage.
inline FrozenSet frozen_set(const GroupingPlan& plan, std::size_t k) {
    if (k < 1 || k > plan.stage_count() + 1) {
        throw ConfigError("frozen_set: stage index " + std::to_string(k) + " outside [1, " +
                          std::to_string(plan.stage_count() + 1) + "]");
    }
    std::vector<const CoreRegion*> rs;
    for (std::size_t l = 0; l + 1 < k; ++l) {
        for (const auto& id : plan.stages[l]) rs.push_back(&plan.region_of(id));
    }
    return FrozenSet{detail::union_of(rs), k};
}

/// Post-hoc check of the plan invariants: stages partition the tasks, each stage
/// is connected under S >= tau, and no edge crosses stages. Returns a
/// description of the first violation, or an empty string.
inline std::string verify_plan(const GroupingPlan& plan) {
    const auto& s = plan.similarity;
    const std::size_t n = s.size();
    std::vector<std::size_t> stage_of(n, SIZE_MAX);
    auto pos = [&](const std::string& id) -> std::size_t {
        for (std::size_t i = 0; i < n; ++i) {
            if (s.task_ids[i] == id) return i;
        }
        return SIZE_MAX;
    };
    for (std::size_t k = 0; k < plan.stages.size(); ++k) {
        for (const auto& id : plan.stages[k]) {
            const auto i = pos(id);
            if (i == SIZE_MAX) return "stage lists unknown task '" + id + "'";
            if (stage_of[i] != SIZE_MAX) return "task '" + id + "' appears in two stages";
            stage_of[i] = k;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (stage_of[i] == SIZE_MAX) return "task '" + s.task_ids[i] + "' is in no stage";
        for (std::size_t j = 0; j < n; ++j) {
            if (i != j && stage_of[i] != stage_of[j] && s(i, j) >= plan.tau) {
                return "edge " + s.task_ids[i] + "-" + s.task_ids[j] + " crosses stages";
            }
        }
    }
    for (const auto& stage : plan.stages) {
        // Breadth-first search restricted to the stage.
        std::vector<std::size_t> members;
        for (const auto& id : stage) members.push_back(pos(id));
        std::vector<bool> reached(members.size(), false);
        std::vector<std::size_t> frontier{0};
        reached[0] = true;
        while (!frontier.empty()) {
            const auto a = frontier.back();
            frontier.pop_back();
            for (std::size_t b = 0; b < members.size(); ++b) {
                if (!reached[b] && s(members[a], members[b]) >= plan.tau) {
                    reached[b] = true;
                    frontier.push_back(b);
                }
            }
        }
        if (std::find(reached.begin(), reached.end(), false) != reached.end()) {
            return "stage starting with '" + stage.front() + "' is not connected";
        }
    }
    return {};
}

// ---------------------------------------------------------------------------
// Plan file (JSON).

inline constexpr int kPlanSchemaVersion = 1;

/// `region_files` maps task ids to the region file path recorded in the plan;
/// tasks without an entry get no file reference.
inline nlohmann::json plan_to_json(const GroupingPlan& plan,
                                   const std::vector<std::pair<std::string, std::string>>& region_files = {}) {
    nlohmann::json j;
    j["schema"] = "dpi-plan";
    j["schema_version"] = kPlanSchemaVersion;
    j["tau"] = plan.tau;
    j["p"] = plan.percent;
    j["stages"] = plan.stages;
    j["similarity"]["task_ids"] = plan.similarity.task_ids;
    auto& rows = j["similarity"]["values"] = nlohmann::json::array();
    for (std::size_t i = 0; i < plan.similarity.size(); ++i) {
        auto row = plan.similarity.values.row(i);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    auto& regions = j["regions"] = nlohmann::json::array();
    for (const auto& r : plan.regions) {
        nlohmann::json e{{"task", r.task_id}, {"dim", r.dim}, {"size", r.size()}, {"p", r.percent}};
        for (const auto& [id, file] : region_files) {
            if (id == r.task_id) e["file"] = file;
        }
        e["indices"] = r.indices;
        regions.push_back(std::move(e));
    }
    return j;
}

inline GroupingPlan plan_from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema").get<std::string>() != "dpi-plan") throw FormatError(ErrorCode::format_magic, "not a plan file");
        if (j.at("schema_version").get<int>() != kPlanSchemaVersion) {
            throw FormatError(ErrorCode::format_version, "unsupported plan schema_version");
        }
        GroupingPlan plan;
        plan.tau = j.at("tau").get<double>();
        plan.percent = j.at("p").get<double>();
        plan.stages = j.at("stages").get<std::vector<std::vector<std::string>>>();
        plan.similarity.task_ids = j.at("similarity").at("task_ids").get<std::vector<std::string>>();
        const auto rows = j.at("similarity").at("values").get<std::vector<std::vector<double>>>();
        const auto n = plan.similarity.task_ids.size();
        if (rows.size() != n) throw FormatError(ErrorCode::format_parse, "similarity matrix has wrong row count");
        plan.similarity.values = Matrix(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            if (rows[i].size() != n) throw FormatError(ErrorCode::format_parse, "similarity matrix is not square");
            for (std::size_t k = 0; k < n; ++k) plan.similarity.values(i, k) = rows[i][k];
        }
        for (const auto& e : j.at("regions")) {
            CoreRegion r;
            r.task_id = e.at("task").get<std::string>();
            r.dim = e.at("dim").get<std::size_t>();
            r.percent = e.at("p").get<double>();
            r.indices = e.at("indices").get<std::vector<std::size_t>>();
            plan.regions.push_back(std::move(r));
        }
        return plan;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(ErrorCode::format_parse, std::string("malformed plan file: ") + e.what());
    }
}

}  // namespace dpi
