#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dpi/cli.hpp"
#include "oracles.hpp"

using namespace dpi;

namespace {

std::string base_config(const std::string& profile, const std::filesystem::path& out, const std::string& method = "dpi",
                        std::size_t n_tasks = 4, std::size_t input_dim = 24) {
    std::ostringstream s;
    s << "# test config\n[suite]\nprofile = " << profile << "\nn_tasks = " << n_tasks << "\ninput_dim = " << input_dim
      << "\nn_train = 96\nn_eval = 48\nnoise_std = 0\n\n[training]\nepochs_stage = 2\nlr = 0.01\n\n[method]\nname = "
      << method << "\np = 5\n\n[run]\nseed = 42\noutput_dir = " << out.string() << "\n";
    return s.str();
}

CliConfig config(const std::string& profile, const std::filesystem::path& out, const std::string& method = "dpi",
                 std::size_t n_tasks = 4, std::size_t input_dim = 24) {
    return parse_config(base_config(profile, out, method, n_tasks, input_dim));
}

std::size_t plan_stages(const std::filesystem::path& dir) {
    return plan_from_json(nlohmann::json::parse(read_text_file(dir / "plan.json"))).stages.size();
}

int run_binary(const std::string& args) {
    const std::string cmd = std::string(DPI_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, ParsesSectionsAndDefaults) {
    auto c = config("mixed", "/tmp/x");
    EXPECT_EQ(c.profile, SuiteProfile::mixed);
    EXPECT_EQ(c.n_tasks, 4u);
    EXPECT_EQ(c.n_train, 96u);
    EXPECT_EQ(c.training.epochs_stage, 2u);
    EXPECT_EQ(c.training.epochs_probe, 3u);
    EXPECT_EQ(c.p, 5.0);
    EXPECT_EQ(c.tau, 0.1);
    EXPECT_EQ(c.output_dir, "/tmp/x");
}

TEST(Config, RejectsUnknownAndReportsMissing) {
    try {
        parse_config(base_config("mixed", "/tmp/x") + "[method]\nbogus = 1\n");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("method.bogus"), std::string::npos);
    }
    try {
        parse_config("[suite]\nprofile = mixed\n[run]\nseed = 1\noutput_dir = x\n");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("method.name"), std::string::npos);
    }
    EXPECT_THROW(parse_config("profile = mixed\n"), ConfigError);
    EXPECT_THROW(parse_config(base_config("mixed", "x") + "[suite]\nprofile = disjoint\n"), ConfigError);
    EXPECT_THROW(parse_config(base_config("nope", "x")), ConfigError);
    EXPECT_THROW(parse_config(base_config("mixed", "x"), {{"training.lr", "fast"}}), ConfigError);
    try {
        parse_config(base_config("mixed", "x"), {{"method.tau", "1.5"}});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("tau"), std::string::npos);
    }
}

TEST(Config, FlagsWin) {
    auto c = parse_config(base_config("mixed", "x"), parse_overrides({"method.p=0.5", "run.seed=7"}));
    EXPECT_EQ(c.p, 0.5);
    EXPECT_EQ(c.seed, 7u);
    EXPECT_THROW(parse_overrides({"nokey"}), ConfigError);
    EXPECT_THROW(parse_overrides({"run.nope=1"}), ConfigError);
}

TEST(Config, SnapshotRoundTrip) {
    auto c = config("adversarial", "/tmp/y", "random_stages");
    c.k = 2;
    c.suite_seed = 9;
    c.training.lr = 0.1 + 0.2;
    c.parallel = false;
    EXPECT_EQ(parse_config(config_to_text(c)), c);
    c.n_train.reset();
    c.suite_seed.reset();
    EXPECT_EQ(parse_config(config_to_text(c)), c);
}

TEST(Commands, ProbeGroupings) {
    auto d1 = oracle::temp_dir("probe_disjoint"), d2 = oracle::temp_dir("probe_overlap");
    std::ostringstream out, err;
    EXPECT_EQ(cmd_probe(config("disjoint", d1), {}, out, err), kExitOk) << err.str();
    EXPECT_EQ(plan_stages(d1), 4u);
    EXPECT_TRUE(std::filesystem::exists(d1 / "regions" / "A.txt"));
    EXPECT_TRUE(std::filesystem::exists(d1 / "similarity.csv"));
    EXPECT_EQ(cmd_probe(config("overlapping", d2), {}, out, err), kExitOk) << err.str();
    EXPECT_EQ(plan_stages(d2), 1u);
    std::filesystem::remove_all(d1);
    std::filesystem::remove_all(d2);
}

TEST(Commands, RunDirectoryAndDeterminism) {
    auto a = oracle::temp_dir("run_a"), b = oracle::temp_dir("run_b");
    std::ostringstream out, err;
    ASSERT_EQ(cmd_run(config("mixed", a), {}, out, err), kExitOk) << err.str();
    ASSERT_EQ(cmd_run(config("mixed", b), {}, out, err), kExitOk) << err.str();
    EXPECT_EQ(read_text_file(a / "report.json"), read_text_file(b / "report.json"));
    for (const char* f : {"config.ini", "plan.json", "metrics.csv", "train_log.csv", "scoreboard.csv",
                          "checkpoints/stage_0.ckpt", "masks/stage_1.txt"}) {
        EXPECT_TRUE(std::filesystem::exists(a / f)) << f;
    }
    // snapshot parses back to the same configuration
    EXPECT_EQ(load_config(a / "config.ini"), config("mixed", a));
    // final checkpoint loads with the model's spec hash
    auto cfg = to_run_config(config("mixed", a));
    auto plan = plan_from_json(nlohmann::json::parse(read_text_file(a / "plan.json")));
    auto last = load_checkpoint(a / "checkpoints" / ("stage_" + std::to_string(plan.stages.size()) + ".ckpt"),
                                spec_hash(cfg.suite.model));
    EXPECT_EQ(last.meta.stage_index, plan.stages.size());

    // append-only
    EXPECT_EQ(cmd_run(config("mixed", a), {}, out, err), kExitConfig);
    EXPECT_EQ(cmd_run(config("mixed", a), {true}, out, err), kExitOk);
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST(Commands, RandomK1MatchesFullMultitask) {
    auto a = oracle::temp_dir("run_k1"), b = oracle::temp_dir("run_full");
    std::ostringstream out, err;
    auto c1 = config("mixed", a, "random_stages");
    c1.k = 1;
    ASSERT_EQ(cmd_run(c1, {}, out, err), kExitOk) << err.str();
    ASSERT_EQ(cmd_run(config("mixed", b, "full_multitask"), {}, out, err), kExitOk) << err.str();
    auto ra = read_report(a / "report.json").runs.at(0), rb = read_report(b / "report.json").runs.at(0);
    EXPECT_EQ(ra.timeline.at.back(), rb.timeline.at.back());
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST(Commands, AblateShapes) {
    auto a = oracle::temp_dir("abl1"), b = oracle::temp_dir("abl5");
    std::ostringstream out, err;
    ASSERT_EQ(cmd_ablate(config("mixed", a), {1.0}, {}, out, err), kExitOk) << err.str();
    auto rows = ablation_from_csv(read_text_file(a / "ablation_p.csv"));
    EXPECT_EQ(rows.size(), 4u);
    for (const auto& r : rows) EXPECT_EQ(r.p, 1.0);
    ASSERT_EQ(cmd_ablate(config("mixed", b), parse_p_list("0.1,0.5,1,5,10"), {}, out, err), kExitOk) << err.str();
    rows = ablation_from_csv(read_text_file(b / "ablation_p.csv"));
    EXPECT_EQ(rows.size(), 5u * 4);
    for (const auto& id : {"A", "B", "C", "D"}) {
        EXPECT_EQ(std::count_if(rows.begin(), rows.end(), [&](const auto& r) { return r.task_id == id; }), 5);
    }
    EXPECT_EQ(cmd_ablate(config("mixed", oracle::temp_dir("abl_bad")), {0.0}, {}, out, err), kExitConfig);
    EXPECT_THROW(parse_p_list("1,x"), ConfigError);
    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST(Commands, Report) {
    auto a = oracle::temp_dir("rep_dpi"), b = oracle::temp_dir("rep_full"), c = oracle::temp_dir("rep_other");
    auto m1 = oracle::temp_dir("rep_merged1"), m2 = oracle::temp_dir("rep_merged2");
    std::ostringstream out, err;
    ASSERT_EQ(cmd_run(config("mixed", a), {}, out, err), kExitOk);
    ASSERT_EQ(cmd_run(config("mixed", b, "full_multitask"), {}, out, err), kExitOk);
    ASSERT_EQ(cmd_run(config("disjoint", c), {}, out, err), kExitOk);

    EXPECT_EQ(cmd_report({a}, m1, {}, out, err), kExitOk);
    EXPECT_EQ(read_text_file(m1 / "report.json"), read_text_file(a / "report.json"));
    EXPECT_EQ(cmd_report({a, b}, m2, {}, out, err), kExitOk);
    EXPECT_EQ(read_report(m2 / "report.json").scoreboard.rows.size(), 2u);
    EXPECT_EQ(cmd_report({a, c}, "", {}, out, err), kExitConfig);
    EXPECT_EQ(cmd_report({oracle::temp_dir("rep_missing")}, "", {}, out, err), kExitConfig);
    for (const auto& d : {a, b, c, m1, m2}) std::filesystem::remove_all(d);
}

TEST(Commands, ExitCodes) {
    std::ostringstream out, err;
    auto bad_tau = config("mixed", oracle::temp_dir("tau"));
    bad_tau.tau = 1.5;
    EXPECT_EQ(cmd_probe(bad_tau, {}, out, err), kExitConfig);
    EXPECT_NE(err.str().find("tau"), std::string::npos);
    auto diverge = config("mixed", oracle::temp_dir("diverge"));
    diverge.training.lr = 1e200;
    diverge.training.optimizer = OptimizerKind::sgd;
    diverge.method = Method::full_multitask;
    EXPECT_EQ(cmd_run(diverge, {}, out, err), kExitNumeric);
    std::filesystem::remove_all(oracle::temp_dir("diverge"));
}

TEST(Binary, ExitCodeContract) {
    auto dir = oracle::temp_dir("bin");
    std::filesystem::create_directories(dir);
    const auto cfg_path = dir / "run.ini";
    {
        std::ofstream f(cfg_path);
        f << base_config("mixed", dir / "out");
    }
    const auto p = cfg_path.string();
    EXPECT_EQ(run_binary("run " + p), 0);
    EXPECT_EQ(run_binary("run " + p), 2);
    EXPECT_EQ(run_binary("run " + p + " --overwrite"), 0);
    EXPECT_EQ(run_binary("probe " + p + " --tau 1.5 --out " + (dir / "t").string()), 2);
    EXPECT_EQ(run_binary("run " + p + " --set training.lr=1e200 --set training.optimizer=sgd --out " + (dir / "n").string()), 3);
    EXPECT_EQ(run_binary("run " + (dir / "missing.ini").string()), 2);
    EXPECT_EQ(run_binary("frobnicate"), 2);
    EXPECT_EQ(run_binary("report " + (dir / "out").string()), 0);
    std::filesystem::remove_all(dir);
}
