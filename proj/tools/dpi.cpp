#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpi/cli.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> method;
    std::optional<double> p;
    std::optional<double> tau;
    bool overwrite = false;

    void attach(CLI::App* cmd) {
        cmd->add_option("config", config_path, "run configuration file")->required();
        cmd->add_option("--set", sets, "override a config key, as section.key=value (repeatable)");
        cmd->add_option("--seed", seed, "run.seed");
        cmd->add_option("--out", out, "run.output_dir");
        cmd->add_option("--method", method, "method.name");
        cmd->add_option("--p", p, "method.p");
        cmd->add_option("--tau", tau, "method.tau");
        cmd->add_flag("--overwrite", overwrite, "replace a non-empty output directory");
    }

    dpi::CliConfig load() const {
        auto overrides = dpi::parse_overrides(sets);
        if (seed) overrides["run.seed"] = std::to_string(*seed);
        if (out) overrides["run.output_dir"] = *out;
        if (method) overrides["method.name"] = *method;
        if (p) overrides["method.p"] = dpi::format_double(*p);
        if (tau) overrides["method.tau"] = dpi::format_double(*tau);
        return dpi::load_config(config_path, overrides);
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic parameter isolation for multi-task training"};
    app.require_subcommand(1);

    CommonFlags probe_flags, run_flags, ablate_flags;
    auto* probe = app.add_subcommand("probe", "probe every task and write the grouping plan");
    probe_flags.attach(probe);
    auto* run = app.add_subcommand("run", "run the configured method and write a run directory");
    run_flags.attach(run);
    auto* ablate = app.add_subcommand("ablate", "sweep the core-region percentage p");
    ablate_flags.attach(ablate);
    std::string p_list = "0.1,0.5,1,5,10";
    ablate->add_option("--p-list", p_list, "comma-separated p values")->capture_default_str();

    auto* report = app.add_subcommand("report", "merge run directories into one scoreboard");
    std::vector<std::string> run_dirs;
    std::string report_out;
    bool report_overwrite = false;
    report->add_option("run_dirs", run_dirs, "run directories")->required();
    report->add_option("--out", report_out, "write report.json and scoreboard.csv here");
    report->add_flag("--overwrite", report_overwrite, "replace a non-empty output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : dpi::kExitConfig;
    }

    auto with_config = [](const CommonFlags& flags, auto&& fn) {
        dpi::CliConfig config;
        try {
            config = flags.load();
        } catch (const dpi::Error& e) {
            std::cerr << "error: " << e.what() << "\n";
            return dpi::kExitConfig;
        }
        return fn(config, dpi::CommandOptions{flags.overwrite});
    };

    if (*probe) {
        return with_config(probe_flags, [](const auto& c, const auto& o) { return dpi::cmd_probe(c, o); });
    }
    if (*run) {
        return with_config(run_flags, [](const auto& c, const auto& o) { return dpi::cmd_run(c, o); });
    }
    if (*ablate) {
        std::vector<double> ps;
        try {
            ps = dpi::parse_p_list(p_list);
        } catch (const dpi::Error& e) {
            std::cerr << "error: " << e.what() << "\n";
            return dpi::kExitConfig;
        }
        return with_config(ablate_flags, [&](const auto& c, const auto& o) { return dpi::cmd_ablate(c, ps, o); });
    }
    std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
    return dpi::cmd_report(dirs, report_out, dpi::CommandOptions{report_overwrite});
}
