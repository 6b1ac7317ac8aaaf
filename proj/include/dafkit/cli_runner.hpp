#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <locale>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conjugacy.hpp"
#include "daf_toolkit.hpp"

namespace dafkit {

inline constexpr const char* version_string = "dafkit 0.1.0";

inline const std::vector<std::string>& pipeline_names() {
    static const std::vector<std::string> names = {
        "certify-ph",         "continue-foliation", "leaf-conjugacy",   "daf-detect",
        "plaque-expansivity", "integrability-probe", "find-compact-leaf", "qi-check"};
    return names;
}

inline bool is_pipeline(const std::string& name) {
    for (const auto& p : pipeline_names())
        if (p == name) return true;
    return false;
}

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int model_violation = 2;
inline constexpr int inconclusive = 3;
inline constexpr int invalid_input = 4;
inline constexpr int usage = 64;
} // namespace exit_code

/// Scientific verdicts map to 2 and 3, operational failures to 4.
inline int exit_code_for(ErrorKind k) {
    switch (k) {
    case ErrorKind::invalid_input: return exit_code::invalid_input;
    case ErrorKind::model_violation:
    case ErrorKind::not_partially_hyperbolic:
    case ErrorKind::certification: return exit_code::model_violation;
    default: return exit_code::inconclusive;
    }
}

inline const char* status_for(int code) {
    switch (code) {
    case exit_code::ok: return "complete";
    case exit_code::model_violation: return "model-violation";
    case exit_code::inconclusive: return "inconclusive";
    case exit_code::invalid_input: return "invalid-input";
    default: return "usage-error";
    }
}

struct ExperimentConfig {
    nlohmann::json system = recipe_for_name("suspension");
    std::string pipeline;
    std::string out = "dafkit-out";
    std::optional<double> delta;
    int grid = 8;
    int budget = 0;  ///< 0 picks the pipeline default
    std::uint64_t seed = 1;
    nlohmann::json params = nlohmann::json::object();  ///< pipeline specific keys

    void validate() const {
        require(system.is_object() && system.contains("name"), "system recipe needs a name");
        require(!delta || (std::isfinite(*delta) && *delta > 0), "delta must be positive");
        require(grid >= 2, "grid must be at least 2");
        require(budget >= 0, "budget must be non-negative");
        require(params.is_object(), "params must be an object");
        for (const auto& [k, v] : params.items())
            if (k.find("tol") != std::string::npos)
                require(v.is_number() && v.get<double>() > 0, "tolerance " + k + " must be positive");
    }
};

inline nlohmann::json to_json_value(const ExperimentConfig& c) {
    nlohmann::json j = {{"system", c.system}, {"pipeline", c.pipeline}, {"out", c.out},
                        {"grid", c.grid},     {"budget", c.budget},     {"seed", c.seed},
                        {"params", c.params}};
    j["delta"] = c.delta ? nlohmann::json(*c.delta) : nlohmann::json(nullptr);
    return j;
}

/// A name from the catalog, or a path to a JSON recipe.
inline nlohmann::json resolve_system(const nlohmann::json& spec) {
    if (spec.is_object()) return spec;
    require(spec.is_string(), "system must be a name, a file or a recipe");
    std::string s = spec.get<std::string>();
    std::error_code ec;
    if (std::filesystem::is_regular_file(s, ec)) {
        std::ifstream in(s);
        try {
            return nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::invalid_input, "cannot parse system file " + s + ": " + e.what());
        }
    }
    return recipe_for_name(s);
}

/// Applies a flat JSON object on top of `base`. Unknown keys become params.
inline ExperimentConfig apply_config(const nlohmann::json& j, ExperimentConfig base = {}) {
    require(j.is_object(), "config must be a JSON object");
    try {
        for (const auto& [k, v] : j.items()) {
            if (k == "system") base.system = resolve_system(v);
            else if (k == "pipeline") base.pipeline = v.get<std::string>();
            else if (k == "out") base.out = v.get<std::string>();
            else if (k == "delta") base.delta = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
            else if (k == "grid") base.grid = v.get<int>();
            else if (k == "budget") base.budget = v.get<int>();
            else if (k == "seed") base.seed = v.get<std::uint64_t>();
            else if (k == "params") base.params.update(v);
            else base.params[k] = v;
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_input, std::string("bad config value: ") + e.what());
    }
    return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::invalid_input, "cannot open config " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_input, "cannot parse config " + path + ": " + e.what());
    }
    return apply_config(j, std::move(base));
}

struct CsvTable {
    std::string name;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    template <class... T>
    void add(const T&... cells) {
        rows.push_back({format(cells)...});
    }

    static std::string format(double v) {
        std::ostringstream os;
        os.imbue(std::locale::classic());
        os << std::setprecision(17) << v;
        return os.str();
    }
    static std::string format(int v) { return std::to_string(v); }
    static std::string format(long v) { return std::to_string(v); }
    static std::string format(size_t v) { return std::to_string(v); }
    static std::string format(bool v) { return v ? "1" : "0"; }
    static std::string format(const std::string& v) { return v; }
    static std::string format(const char* v) { return v; }
};

inline void write_csv(const CsvTable& t, std::ostream& os) {
    auto line = [&](const std::vector<std::string>& cells) {
        for (size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
        os << '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
}

struct RunResult {
    int exit_code = exit_code::ok;
    nlohmann::json summary;
    std::vector<CsvTable> tables;
};

namespace detail {

/// Reads pipeline parameters and remembers the values actually used.
class ParamReader {
public:
    explicit ParamReader(const nlohmann::json& given) : given_(given) {}

    double num(const std::string& key, double def) {
        double v = def;
        if (given_.contains(key)) {
            const auto& j = given_.at(key);
            require(j.is_number(), "parameter " + key + " must be a number");
            v = j.get<double>();
        }
        used_[key] = v;
        return v;
    }
    int integer(const std::string& key, int def) {
        int v = def;
        if (given_.contains(key)) {
            const auto& j = given_.at(key);
            require(j.is_number_integer(), "parameter " + key + " must be an integer");
            v = j.get<int>();
        }
        used_[key] = v;
        return v;
    }
    std::string str(const std::string& key, const std::string& def) {
        std::string v = def;
        if (given_.contains(key)) {
            require(given_.at(key).is_string(), "parameter " + key + " must be a string");
            v = given_.at(key).get<std::string>();
        }
        used_[key] = v;
        return v;
    }
    ChartPoint point(const std::string& key, const ChartPoint& def) {
        ChartPoint p = def;
        if (given_.contains(key)) {
            const auto& j = given_.at(key);
            require(j.is_array() && j.size() == 3, "parameter " + key + " must be [x, y, theta]");
            for (int i = 0; i < 3; ++i) {
                require(j[i].is_number(), "parameter " + key + " must be numeric");
                p(i) = j[i].get<double>();
            }
        }
        used_[key] = point_to_json(p);
        return p;
    }
    nlohmann::json raw(const std::string& key) {
        if (!given_.contains(key)) return nullptr;
        used_[key] = given_.at(key);
        return given_.at(key);
    }

    const nlohmann::json& used() const { return used_; }
    std::vector<std::string> unused() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : given_.items())
            if (!used_.contains(k)) out.push_back(k);
        return out;
    }

private:
    nlohmann::json given_;
    nlohmann::json used_ = nlohmann::json::object();
};

struct PipelineContext {
    const ExperimentConfig& cfg;
    DynamicalSystem f;
    ParamReader params;
    double delta(double def) const { return cfg.delta.value_or(def); }
    int budget(int def) const { return cfg.budget > 0 ? cfg.budget : def; }
};

inline std::vector<ChartPoint> random_samples(const ManifoldDescriptor& m, int count, std::uint64_t seed) {
    require(count >= 1, "sample count must be positive");
    std::mt19937_64 rng(seed);
    // Raw draws mapped by hand: the distribution classes are not portable.
    auto u = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
    std::vector<ChartPoint> out;
    for (int i = 0; i < count; ++i) {
        double x = u(), y = u(), th = u();
        out.push_back(normalize(m, Vec3(x, y, th * m.period)));
    }
    return out;
}

inline void add_point_cells(std::vector<std::string>& row, const Vec3& p) {
    for (int i = 0; i < 3; ++i) row.push_back(CsvTable::format(p(i)));
}

inline CsvTable points_table(const std::string& name, const std::string& label, const std::vector<Vec3>& pts) {
    CsvTable t{name, {label, "index", "x", "y", "theta"}, {}};
    for (size_t i = 0; i < pts.size(); ++i) {
        std::vector<std::string> row = {label, CsvTable::format(i)};
        add_point_cells(row, pts[i]);
        t.rows.push_back(row);
    }
    return t;
}

inline int default_iterate(const DynamicalSystem& f) {
    return has_tangent_tori(f.recipe()) ? 3 : 1;
}

inline RunResult run_certify(PipelineContext& c) {
    int n_iter = c.params.integer("iterate", default_iterate(c.f));
    double alpha = c.params.num("alpha", 1.0);
    PHCertificate cert = certify_partial_hyperbolicity(c.f, n_iter, c.cfg.grid, alpha);
    RunResult r;
    nlohmann::json cones = nlohmann::json::array();
    CsvTable t{"cones", {"kind", "pass", "worst_margin", "worst_expansion", "iterate", "grid"}, {}};
    for (const auto& k : cert.cones) {
        cones.push_back(to_json_value(k));
        t.add(to_string(k.kind), k.pass, k.worst_margin, k.worst_expansion, k.iterate, k.grid);
    }
    r.summary = {{"verdict", cert.pass ? "partially-hyperbolic" : "certification-failed"},
                 {"cones", cones},
                 {"rates", {{"lambda", cert.rates.lambda}, {"kappa", cert.rates.kappa}, {"grid", cert.rates.grid}}}};
    r.tables.push_back(std::move(t));
    r.exit_code = cert.pass ? exit_code::ok : exit_code::model_violation;
    return r;
}

inline DynamicalSystem partner_system(PipelineContext& c) {
    nlohmann::json g = c.params.raw("g");
    if (!g.is_null()) return make_system(resolve_system(g));
    std::string kind = c.params.str("kind", "translation-bump");
    double eps = c.params.num("epsilon", 1e-4);
    return perturb(c.f, perturbation_kind_from_string(kind), eps).system;
}

inline ContinuationResult run_continuation(PipelineContext& c, const DynamicalSystem& g, bool refine) {
    ChartPoint x = c.params.point("point", ChartPoint(0, 0, 0.25));
    GraphTransformOptions opt;
    opt.center_step = c.params.num("center_step", 1.0 / 256);
    opt.transverse_half = c.params.integer("transverse_half", 6);
    opt.max_iter = c.budget(opt.max_iter);
    Rates rates = estimate_rates(c.f, 8, 16);
    RateReport rr = derive_scale_cascade(c.delta(0.1), rates, c.f, g);
    return continuation_leaf(c.f, g, x, rr, opt, refine);
}

inline RunResult run_continue(PipelineContext& c) {
    DynamicalSystem g = partner_system(c);
    ContinuationResult res = run_continuation(c, g, true);
    RunResult r;
    r.summary = {{"verdict", "continued"},
                 {"g", g.recipe()},
                 {"rates", to_json_value(res.rates)},
                 {"cert_cu", to_json_value(res.cert_cu)},
                 {"cert_cs", to_json_value(res.cert_cs)},
                 {"tangency", res.tangency},
                 {"equivariance", res.equivariance},
                 {"displacement", res.displacement},
                 {"grid_change", res.grid_change},
                 {"tiers", res.leaves.size()}};
    CsvTable t{"leaf", {"tier", "t", "x", "y", "theta"}, {}};
    for (size_t i = 0; i < res.leaves.size(); ++i) {
        const LeafArc& a = res.leaves[i].arc;
        for (size_t k = 0; k < a.size(); ++k) {
            std::vector<std::string> row = {CsvTable::format(i), CsvTable::format(a.t[k])};
            add_point_cells(row, a.chart(k));
            t.rows.push_back(row);
        }
    }
    r.tables.push_back(std::move(t));
    return r;
}

inline RunResult run_conjugacy(PipelineContext& c) {
    DynamicalSystem g = partner_system(c);
    ContinuationResult res = run_continuation(c, g, false);
    double pitch = c.params.num("pitch", 0.005);
    LeafConjugacy lc = build_leaf_conjugacy(c.f, g, res, pitch);
    const ConjugacyReport& rep = lc.report;
    RunResult r;
    r.summary = {{"verdict", "conjugacy-built"},
                 {"g", g.recipe()},
                 {"rates", to_json_value(res.rates)},
                 {"report", to_json_value(rep)},
                 {"equivariance", res.equivariance},
                 {"h_within_delta", rep.h_to_identity_sup < res.rates.delta},
                 {"dpsi_in_range", rep.dpsi_min > 0.5 && rep.dpsi_max < 2.0}};
    CsvTable t{"h", {"leaf", "t", "x", "y", "theta", "hx", "hy", "htheta"}, {}};
    for (const auto& s : sample_h(lc.leaves, pitch)) {
        std::vector<std::string> row = {CsvTable::format(s.leaf), CsvTable::format(s.t)};
        add_point_cells(row, s.x);
        add_point_cells(row, s.hx);
        t.rows.push_back(row);
    }
    r.tables.push_back(std::move(t));
    return r;
}

inline RunResult run_daf_detect(PipelineContext& c) {
    int count = c.params.integer("samples", 8);
    double budget = c.params.num("search_budget", 3.0);
    auto samples = random_samples(c.f.manifold(), count, c.cfg.seed);
    CenterContext ctx = center_context(c.f);
    DisplacementReport disp = center_displacement(ctx, c.f, samples, budget);
    RunResult r;
    r.summary = {{"displacement", to_json_value(disp)}};
    if (disp.verdict != "center-fixing") {
        r.summary["verdict"] = disp.verdict;
        CsvTable t{"displacement", {"x", "y", "theta", "found", "plus", "minus"}, {}};
        for (const auto& loc : disp.located) {
            std::vector<std::string> row;
            add_point_cells(row, loc.x);
            row.push_back(CsvTable::format(loc.found()));
            row.push_back(loc.plus ? CsvTable::format(*loc.plus) : "");
            row.push_back(loc.minus ? CsvTable::format(*loc.minus) : "");
            t.rows.push_back(row);
        }
        r.tables.push_back(std::move(t));
        return r;
    }
    TauField tau = recover_tau(ctx, c.f, samples, budget);
    FloorVerdict floor = tau_floor_check(tau, c.delta(0.05));
    r.summary["tau"] = to_json_value(tau);
    r.summary["floor"] = to_json_value(floor);
    r.summary["verdict"] = floor.pass ? "daf-candidate" : "tau-below-floor";
    CsvTable t{"tau", {"x", "y", "theta", "tau", "leaf_length", "winding"}, {}};
    for (const auto& s : tau.samples) {
        std::vector<std::string> row;
        add_point_cells(row, s.x);
        row.push_back(CsvTable::format(s.tau));
        row.push_back(CsvTable::format(s.leaf_length));
        row.push_back(CsvTable::format(s.winding));
        t.rows.push_back(row);
    }
    r.tables.push_back(std::move(t));
    return r;
}

inline RunResult run_expansivity(PipelineContext& c) {
    PlaqueExpansivityOptions opt;
    opt.seed_resolution = c.params.integer("seed_resolution", opt.seed_resolution);
    opt.jumps = c.params.integer("jumps", opt.jumps);
    opt.node_budget = static_cast<long>(c.params.num("node_budget", static_cast<double>(opt.node_budget)));
    ChartPoint x = c.params.point("point", ChartPoint(0.1234567, 0.7654321, 0.15));
    Foliations fol = foliations(c.f);
    ExpansivityVerdict v = plaque_expansivity_test(c.f, fol, c.delta(0.01), c.budget(15), {x}, opt);
    RunResult r;
    r.summary = {{"verdict", v.verdict}, {"expansivity", to_json_value(v)}};
    CsvTable t{"witness", {"n", "x", "y", "theta", "yx", "yy", "ytheta", "jump_x", "jump_y", "separation"}, {}};
    if (v.witness) {
        const auto& w = *v.witness;
        for (size_t i = 0; i < w.x.size(); ++i) {
            std::vector<std::string> row = {CsvTable::format(w.n0 + static_cast<int>(i))};
            add_point_cells(row, w.x[i]);
            add_point_cells(row, w.y[i]);
            row.push_back(CsvTable::format(w.jump_x[i]));
            row.push_back(CsvTable::format(w.jump_y[i]));
            row.push_back(CsvTable::format(w.separation[i]));
            t.rows.push_back(row);
        }
    }
    r.tables.push_back(std::move(t));
    if (v.verdict == "inconclusive") r.exit_code = exit_code::inconclusive;
    return r;
}

inline RunResult run_integrability(PipelineContext& c) {
    IntegrabilityOptions opt;
    opt.arc = c.params.num("arc", opt.arc);
    opt.tangency_tol = c.params.num("tangency_tol", opt.tangency_tol);
    ChartPoint x = c.params.point("point", ChartPoint(0.3, 0.4, 0.0));
    IntegrabilityReport rep = unique_integrability_probe(center_context(c.f), x, opt);
    RunResult r;
    nlohmann::json j = to_json_value(rep);
    j.erase("curve_a");
    j.erase("curve_b");
    r.summary = {{"verdict", rep.verdict}, {"probe", j}};
    CsvTable t = points_table("curves", "curve", {});
    for (const auto& [label, pts] : {std::pair{"a", &rep.curve_a}, std::pair{"b", &rep.curve_b}})
        for (size_t i = 0; i < pts->size(); ++i) {
            std::vector<std::string> row = {label, CsvTable::format(i)};
            add_point_cells(row, (*pts)[i]);
            t.rows.push_back(row);
        }
    r.tables.push_back(std::move(t));
    return r;
}

inline RunResult run_compact_leaf(PipelineContext& c) {
    CompactLeafOptions opt;
    opt.k_budget = c.budget(opt.k_budget);
    opt.search_radius = c.params.num("search_radius", opt.search_radius);
    ChartPoint x = c.params.point("point", ChartPoint(0.02, 0.03, 0.5));
    CompactLeafResult res = find_compact_periodic_center_leaf(c.f, foliations(c.f), x, opt);
    RunResult r;
    nlohmann::json j = to_json_value(res);
    j.erase("leaf");
    r.summary = {{"verdict", res.verdict}, {"search", j}};
    std::vector<Vec3> pts(res.leaf.begin(), res.leaf.end());
    CsvTable t = points_table("leaf", "leaf", pts);
    r.tables.push_back(std::move(t));
    if (res.verdict != "found") r.exit_code = exit_code::inconclusive;
    return r;
}

inline RunResult run_qi(PipelineContext& c) {
    int count = c.params.integer("samples", 4);
    double l = c.params.num("l", 0.5);
    auto samples = random_samples(c.f.manifold(), count, c.cfg.seed);
    Foliations fol = foliations(c.f);
    QiReport q = qi_check(c.f, *fol.c, samples, l, c.budget(20));
    RunResult r;
    r.summary = {{"verdict", q.verdict}, {"qi", to_json_value(q)}};
    CsvTable t{"lengths", {"n", "max_length", "min_length"}, {}};
    for (size_t i = 0; i < q.n.size(); ++i) t.add(q.n[i], q.max_length[i], q.min_length[i]);
    r.tables.push_back(std::move(t));
    return r;
}

} // namespace detail

/// Runs one pipeline. Library errors become exit codes with the evidence in the summary.
inline RunResult run(const ExperimentConfig& cfg) {
    RunResult r;
    nlohmann::json used;
    std::vector<std::string> unused;
    if (!is_pipeline(cfg.pipeline)) {
        r.exit_code = exit_code::usage;
        r.summary = {{"error", {{"kind", "usage"}, {"message", "unknown pipeline '" + cfg.pipeline + "'"}}}};
    } else {
        try {
            cfg.validate();
            detail::PipelineContext c{cfg, make_system(cfg.system), detail::ParamReader(cfg.params)};
            const std::string& p = cfg.pipeline;
            if (p == "certify-ph") r = detail::run_certify(c);
            else if (p == "continue-foliation") r = detail::run_continue(c);
            else if (p == "leaf-conjugacy") r = detail::run_conjugacy(c);
            else if (p == "daf-detect") r = detail::run_daf_detect(c);
            else if (p == "plaque-expansivity") r = detail::run_expansivity(c);
            else if (p == "integrability-probe") r = detail::run_integrability(c);
            else if (p == "find-compact-leaf") r = detail::run_compact_leaf(c);
            else r = detail::run_qi(c);
            used = c.params.used();
            unused = c.params.unused();
        } catch (const Error& e) {
            r = RunResult{};
            r.exit_code = exit_code_for(e.kind());
            r.summary = {{"error", {{"kind", to_string(e.kind())}, {"message", e.what()},
                                    {"evidence", e.evidence()}}}};
        }
    }
    r.summary["status"] = status_for(r.exit_code);
    r.summary["exit_code"] = r.exit_code;
    r.summary["pipeline"] = cfg.pipeline;
    r.summary["version"] = version_string;
    r.summary["seed"] = cfg.seed;
    nlohmann::json resolved = to_json_value(cfg);
    if (!used.is_null()) resolved["params_resolved"] = used;
    r.summary["config"] = resolved;
    if (!unused.empty()) r.summary["unused_params"] = unused;
    return r;
}

/// summary.json plus one CSV per table.
inline void write_artifacts(const RunResult& r, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorKind::invalid_input, "cannot create output directory " + dir);
    auto open = [&](const std::string& name) {
        std::ofstream os(std::filesystem::path(dir) / name, std::ios::binary);
        if (!os) fail(ErrorKind::invalid_input, "cannot write " + name + " in " + dir);
        return os;
    };
    {
        auto os = open("summary.json");
        os << r.summary.dump(2) << '\n';
    }
    for (const auto& t : r.tables) {
        auto os = open(t.name + ".csv");
        write_csv(t, os);
    }
}

inline nlohmann::json catalog_json() {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : list_systems())
        out.push_back({{"name", e.name}, {"anchor", e.anchor}, {"description", e.description}, {"recipe", e.recipe}});
    return out;
}

} // namespace dafkit
