#include <iostream>

#include <CLI11.hpp>

#include <dafkit/cli_runner.hpp>

using namespace dafkit;

namespace {

int list_catalog(bool json) {
    if (json) {
        std::cout << catalog_json().dump(2) << '\n';
        return 0;
    }
    for (const auto& e : list_systems())
        std::cout << e.name << "  [" << e.anchor << "]  " << e.description << "\n    " << e.recipe.dump() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Numerical toolkit for partially hyperbolic maps with compact center leaves"};
    app.set_version_flag("--version", version_string);

    std::string system, pipeline, out, config;
    double delta = 0;
    int grid = 0, budget = 0;
    std::uint64_t seed = 0;
    bool json = false;

    auto* opt_system = app.add_option("--system", system, "catalog name or JSON recipe file");
    auto* opt_pipeline = app.add_option("--pipeline", pipeline, "pipeline to run");
    auto* opt_out = app.add_option("--out", out, "artifact directory");
    auto* opt_delta = app.add_option("--delta", delta, "scale override");
    auto* opt_grid = app.add_option("--grid", grid, "grid resolution");
    auto* opt_budget = app.add_option("--budget", budget, "iteration budget (0: pipeline default)");
    auto* opt_seed = app.add_option("--seed", seed, "seed for sampled points");
    app.add_option("--config", config, "flat JSON config; flags take precedence")->check(CLI::ExistingFile);
    app.add_flag("--json", json, "print the summary (or catalog) as JSON");
    auto* list = app.add_subcommand("list-systems", "print the system catalog")->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_code::usage;
    }

    if (list->parsed()) return list_catalog(json);

    ExperimentConfig cfg;
    try {
        if (!config.empty()) cfg = load_config(config, cfg);
        if (opt_system->count()) cfg.system = resolve_system(system);
        if (opt_pipeline->count()) cfg.pipeline = pipeline;
        if (opt_out->count()) cfg.out = out;
        if (opt_delta->count()) cfg.delta = delta;
        if (opt_grid->count()) cfg.grid = grid;
        if (opt_budget->count()) cfg.budget = budget;
        if (opt_seed->count()) cfg.seed = seed;
    } catch (const Error& e) {
        std::cerr << e.what() << '\n';
        return exit_code_for(e.kind());
    }

    if (!is_pipeline(cfg.pipeline)) {
        std::cerr << "unknown pipeline '" << cfg.pipeline << "'; expected one of:";
        for (const auto& p : pipeline_names()) std::cerr << ' ' << p;
        std::cerr << '\n';
        return exit_code::usage;
    }

    RunResult r = run(cfg);
    try {
        write_artifacts(r, cfg.out);
    } catch (const Error& e) {
        std::cerr << e.what() << '\n';
        return exit_code::invalid_input;
    }
    if (json) {
        std::cout << r.summary.dump(2) << '\n';
    } else {
        std::cout << cfg.pipeline << ": " << r.summary.value("verdict", r.summary["status"].get<std::string>())
                  << " (exit " << r.exit_code << ", artifacts in " << cfg.out << ")\n";
        if (r.summary.contains("error")) std::cerr << r.summary["error"]["message"].get<std::string>() << '\n';
    }
    return r.exit_code;
}
