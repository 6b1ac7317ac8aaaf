#include <gtest/gtest.h>

#include <dafkit/cli_runner.hpp>

#include <cstdlib>
#include <sys/wait.h>

using namespace dafkit;

namespace {

ExperimentConfig config_for(const std::string& system, const std::string& pipeline) {
    ExperimentConfig c;
    c.system = recipe_for_name(system);
    c.pipeline = pipeline;
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("dafkit_cli_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

int run_binary(const std::string& args) {
    std::string cmd = std::string(DAFKIT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(Catalog, ListsTheSystemsWithAnchors) {
    auto cat = list_systems();
    EXPECT_GE(cat.size(), 4u);
    for (const auto& e : cat) {
        EXPECT_FALSE(e.anchor.empty()) << e.name;
        EXPECT_NO_THROW(make_system(e.recipe)) << e.name;
    }
    auto j = catalog_json();
    ASSERT_TRUE(j.is_array());
    EXPECT_EQ(j.size(), cat.size());
    EXPECT_EQ(j[0]["name"], cat[0].name);
}

TEST(Run, CertifySkewReportsRates) {
    RunResult r = run(config_for("skew", "certify-ph"));
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_NEAR(r.summary["rates"]["lambda"].get<double>(), 0.3858, 1e-3);
    EXPECT_EQ(r.summary["verdict"], "partially-hyperbolic");
    ASSERT_EQ(r.tables.size(), 1u);
    EXPECT_EQ(r.tables[0].rows.size(), 4u);
}

TEST(Run, DafDetectOnSkewIsNotCenterFixing) {
    RunResult r = run(config_for("skew", "daf-detect"));
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_EQ(r.summary["verdict"], "not-center-fixing");
}

TEST(Run, DafDetectOnSuspensionFindsTauOne) {
    RunResult r = run(config_for("suspension", "daf-detect"));
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_EQ(r.summary["verdict"], "daf-candidate");
    EXPECT_NEAR(r.summary["tau"]["min"].get<double>(), 1.0, 1e-6);
}

TEST(Run, LeafConjugacyResidual) {
    RunResult r = run(config_for("suspension", "leaf-conjugacy"));
    EXPECT_EQ(r.exit_code, 0);
    EXPECT_LT(r.summary["report"]["semi_conjugacy_sup"].get<double>(), 1e-8);
    EXPECT_TRUE(r.summary["h_within_delta"].get<bool>());
}

TEST(Run, ExitCodes) {
    EXPECT_EQ(run(config_for("skew", "no-such-pipeline")).exit_code, exit_code::usage);

    ExperimentConfig bad = config_for("skew", "certify-ph");
    bad.delta = -1;
    RunResult r = run(bad);
    EXPECT_EQ(r.exit_code, exit_code::invalid_input);
    EXPECT_EQ(r.summary["error"]["kind"], "invalid-input");

    ExperimentConfig id = config_for("skew", "certify-ph");
    id.system = {{"name", "identity"}, {"params", nlohmann::json::object()}};
    EXPECT_EQ(run(id).exit_code, exit_code::model_violation);

    ExperimentConfig tiny = config_for("suspension", "plaque-expansivity");
    tiny.params["node_budget"] = 10;
    EXPECT_EQ(run(tiny).exit_code, exit_code::inconclusive);
}

TEST(Run, NonPositiveToleranceIsInvalid) {
    ExperimentConfig c = config_for("skew", "certify-ph");
    c.params["tangency_tol"] = 0;
    EXPECT_EQ(run(c).exit_code, exit_code::invalid_input);
}

TEST(Run, SummaryEmbedsConfigSeedAndVersion) {
    ExperimentConfig c = config_for("suspension", "qi-check");
    c.seed = 42;
    c.params["samples"] = 2;
    RunResult r = run(c);
    EXPECT_EQ(r.summary["seed"], 42);
    EXPECT_EQ(r.summary["version"], version_string);
    EXPECT_EQ(r.summary["config"]["system"]["name"], "suspension");
    EXPECT_EQ(r.summary["config"]["params_resolved"]["samples"], 2);
    EXPECT_EQ(r.summary["config"]["params_resolved"]["l"], 0.5);
}

TEST(Run, UnusedParametersAreReported) {
    ExperimentConfig c = config_for("skew", "certify-ph");
    c.params["colour"] = "blue";
    RunResult r = run(c);
    ASSERT_TRUE(r.summary.contains("unused_params"));
    EXPECT_EQ(r.summary["unused_params"][0], "colour");
}

TEST(Artifacts, BitwiseReproducible) {
    ExperimentConfig c = config_for("suspension", "daf-detect");
    c.seed = 9;
    auto a = scratch("repro_a"), b = scratch("repro_b");
    write_artifacts(run(c), a.string());
    write_artifacts(run(c), b.string());
    for (const char* f : {"summary.json", "tau.csv"}) {
        std::string x = slurp(a / f), y = slurp(b / f);
        EXPECT_FALSE(x.empty()) << f;
        EXPECT_EQ(x, y) << f;
    }
}

TEST(Artifacts, CsvHasHeaderAndLfOnly) {
    auto dir = scratch("csv");
    write_artifacts(run(config_for("skew", "certify-ph")), dir.string());
    std::string csv = slurp(dir / "cones.csv");
    EXPECT_EQ(csv.rfind("kind,pass,worst_margin,worst_expansion,iterate,grid\n", 0), 0u);
    EXPECT_EQ(csv.find('\r'), std::string::npos);
    EXPECT_EQ(csv.back(), '\n');
}

TEST(Artifacts, SummaryKeysAreSorted) {
    auto dir = scratch("sorted");
    write_artifacts(run(config_for("skew", "certify-ph")), dir.string());
    auto j = nlohmann::json::parse(slurp(dir / "summary.json"));
    std::string prev;
    for (const auto& [k, v] : j.items()) {
        EXPECT_LT(prev, k);
        prev = k;
    }
}

TEST(Config, FlatKeysBecomeParams) {
    nlohmann::json j = {{"system", "hhu"}, {"pipeline", "certify-ph"}, {"grid", 4}, {"iterate", 3}};
    ExperimentConfig c = apply_config(j);
    EXPECT_EQ(c.system["name"], "hhu");
    EXPECT_EQ(c.grid, 4);
    EXPECT_EQ(c.params["iterate"], 3);
    EXPECT_THROW(apply_config({{"grid", "many"}}), Error);
}

TEST(Binary, ExitCodesAndPrecedence) {
    auto out = scratch("bin");
    std::string o = " --out " + out.string();
    EXPECT_EQ(run_binary("--pipeline nope" + o), 64);
    EXPECT_EQ(run_binary("--bogus-flag"), 64);
    EXPECT_EQ(run_binary("--system skew --pipeline certify-ph --delta -1" + o), 4);
    EXPECT_EQ(run_binary("--system nowhere --pipeline certify-ph" + o), 4);
    EXPECT_EQ(run_binary("list-systems --json"), 0);

    // The config asks for grid 32 on the skew product; the flag wins.
    std::string cfg = std::string(DAFKIT_CONFIG_DIR) + "/certify_skew.json";
    EXPECT_EQ(run_binary("--config " + cfg + " --grid 4" + o), 0);
    auto j = nlohmann::json::parse(slurp(out / "summary.json"));
    EXPECT_EQ(j["config"]["grid"], 4);
    EXPECT_EQ(j["config"]["system"]["name"], "skew");
    EXPECT_EQ(j["cones"][0]["grid"], 4);
}
