#include "qbsde/experiment.hpp"
#include "qbsde/errors.hpp"
#include "qbsde/parallel.hpp"
#include "qbsde/rng.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace qbsde {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& pipeline_names() {
    static const std::vector<std::string> names{"audit", "genapprox", "forward", "bsde",
                                                "pde",   "rate",      "ldp",     "full"};
    return names;
}

namespace {

/// Walks a JSON object, tracking the field path for error messages and
/// rejecting keys nobody asked for.
class Reader {
public:
    Reader(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
        if (!doc_.is_object()) fail("", "expected an object");
    }

    bool has(const std::string& key) { return seen(key), doc_.contains(key); }

    double number(const std::string& key, double fallback) {
        if (!has(key)) return fallback;
        if (!doc_[key].is_number()) fail(key, "expected a number");
        return doc_[key].get<double>();
    }
    std::int64_t integer(const std::string& key, std::int64_t fallback) {
        if (!has(key)) return fallback;
        if (!doc_[key].is_number_integer()) fail(key, "expected an integer");
        return doc_[key].get<std::int64_t>();
    }
    std::uint64_t unsigned_integer(const std::string& key, std::uint64_t fallback) {
        if (!has(key)) return fallback;
        const json& v = doc_[key];
        if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
            fail(key, "expected a nonnegative integer");
        }
        return doc_[key].get<std::uint64_t>();
    }
    std::string string(const std::string& key, const std::string& fallback) {
        if (!has(key)) return fallback;
        if (!doc_[key].is_string()) fail(key, "expected a string");
        return doc_[key].get<std::string>();
    }
    std::vector<double> numbers(const std::string& key, std::vector<double> fallback) {
        if (!has(key)) return fallback;
        const json& v = doc_[key];
        if (!v.is_array()) fail(key, "expected an array of numbers");
        std::vector<double> out;
        for (const auto& e : v) {
            if (!e.is_number()) fail(key, "expected an array of numbers");
            out.push_back(e.get<double>());
        }
        return out;
    }
    Reader child(const std::string& key) {
        seen(key);
        return Reader(doc_[key], field(key));
    }
    const json& raw(const std::string& key) { return seen(key), doc_[key]; }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    [[noreturn]] void fail(const std::string& key, const std::string& what) const {
        const std::string where = key.empty() ? (path_.empty() ? "config" : path_) : field(key);
        throw ConfigError(where + ": " + what);
    }

    /// Throws on keys that were never asked for.
    void finish() const {
        for (const auto& [key, value] : doc_.items()) {
            if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) fail(key, "unknown field");
        }
    }

private:
    void seen(const std::string& key) { seen_.push_back(key); }
    const json& doc_;
    std::string path_;
    std::vector<std::string> seen_;
};

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string short_fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

void ExperimentConfig::validate() const {
    const auto fail = [](const std::string& field, const std::string& what) {
        throw ConfigError(field + ": " + what);
    };
    const auto& names = pipeline_names();
    if (std::find(names.begin(), names.end(), pipeline) == names.end()) {
        fail("pipeline", "unknown pipeline '" + pipeline + "'");
    }
    ModelCatalogEntry entry;
    try {
        entry = find_model(model.name, model.overrides);
    } catch (const ConfigError& e) {
        fail("model", e.what());
    }
    const int m = entry.coefficients.dims.m;
    if (grid.steps < 1) fail("grid.N", "must be positive");
    if (!(grid.t0 >= 0.0 && grid.t0 < entry.coefficients.horizon_T)) fail("grid.t0", "must lie in [0, T)");
    if (static_cast<int>(lattice.x_lo.size()) != m) fail("lattice.x_lo", "needs one entry per state dimension");
    if (static_cast<int>(lattice.x_hi.size()) != m) fail("lattice.x_hi", "needs one entry per state dimension");
    for (int k = 0; k < m; ++k) {
        if (!(lattice.x_lo[k] <= lattice.x_hi[k])) fail("lattice.x_hi", "must not be below x_lo");
    }
    if (!(lattice.h > 0.0)) fail("lattice.h", "must be positive");
    if (lattice.pde_refine < 1) fail("lattice.pde_refine", "must be positive");
    if (ladder.empty()) fail("ladder.n_values", "must not be empty");
    for (std::size_t k = 0; k < ladder.size(); ++k) {
        if (!(ladder[k] > 0.0)) fail("ladder.n_values", "must be positive");
        if (k > 0 && !(ladder[k] > ladder[k - 1])) fail("ladder.n_values", "must be increasing");
    }
    if (mc.paths < 2) fail("mc.paths", "must be at least 2");
    if (!(mc.tilt_below > 0.0)) fail("mc.tilt_below", "must be positive");
    if (epsilons.empty()) fail("epsilons", "must not be empty");
    for (double e : epsilons) {
        if (!(e > 0.0 && e <= 1.0)) fail("epsilons", "entries must lie in (0, 1]");
    }
    if (!x0.empty() && static_cast<int>(x0.size()) != m) fail("x0", "needs one entry per state dimension");
    if (lsmc_degree < 0) fail("lsmc.degree", "must be nonnegative");
    if (optimizer_restarts < 1) fail("optimizer.restarts", "must be positive");
    if (audit_samples < 1) fail("audit.samples", "must be positive");
    if (genapprox_samples < 1) fail("genapprox.samples", "must be positive");
    if (output_dir.empty()) fail("output_dir", "must not be empty");
    const bool needs_event = pipeline == "rate" || pipeline == "ldp" || pipeline == "full";
    if (needs_event && !event) fail("event", "required by pipeline '" + pipeline + "'");
    if (event) {
        try {
            event->validate();
        } catch (const ConfigError& e) {
            fail("event", e.what());
        }
    }
}

json ExperimentConfig::to_json() const {
    json doc{{"pipeline", pipeline},
             {"model", {{"name", model.name}, {"overrides", model.overrides}}},
             {"grid", {{"t0", grid.t0}, {"N", grid.steps}}},
             {"lattice",
              {{"x_lo", lattice.x_lo},
               {"x_hi", lattice.x_hi},
               {"h", lattice.h},
               {"pde_refine", lattice.pde_refine},
               {"boundary", qbsde::to_string(lattice.boundary)}}},
             {"ladder", {{"n_values", ladder}}},
             {"mc", {{"paths", mc.paths}, {"seed", mc.seed}, {"tilt_below", mc.tilt_below}}},
             {"epsilons", epsilons},
             {"x0", x0},
             {"lsmc", {{"degree", lsmc_degree}}},
             {"optimizer", {{"restarts", optimizer_restarts}}},
             {"audit", {{"samples", audit_samples}}},
             {"genapprox", {{"samples", genapprox_samples}}},
             {"output_dir", output_dir}};
    if (event) doc["event"] = event->to_json();
    return doc;
}

ExperimentConfig ExperimentConfig::from_json(const json& doc) {
    ExperimentConfig c;
    Reader r(doc, "");
    c.pipeline = r.string("pipeline", c.pipeline);
    if (r.has("model")) {
        if (r.raw("model").is_string()) {
            c.model.name = r.raw("model").get<std::string>();
        } else {
            Reader m = r.child("model");
            c.model.name = m.string("name", c.model.name);
            if (m.has("overrides")) {
                Reader o = m.child("overrides");
                for (const auto& [key, value] : m.raw("overrides").items()) {
                    c.model.overrides[key] = o.number(key, 0.0);
                }
                o.finish();
            }
            m.finish();
        }
    }
    if (r.has("grid")) {
        Reader g = r.child("grid");
        c.grid.t0 = g.number("t0", c.grid.t0);
        c.grid.steps = static_cast<int>(g.integer("N", c.grid.steps));
        g.finish();
    }
    if (r.has("lattice")) {
        Reader l = r.child("lattice");
        c.lattice.x_lo = l.numbers("x_lo", c.lattice.x_lo);
        c.lattice.x_hi = l.numbers("x_hi", c.lattice.x_hi);
        c.lattice.h = l.number("h", c.lattice.h);
        c.lattice.pde_refine = static_cast<int>(l.integer("pde_refine", c.lattice.pde_refine));
        if (l.has("boundary")) {
            try {
                c.lattice.boundary = boundary_mode_from_string(l.string("boundary", ""));
            } catch (const ConfigError& e) {
                l.fail("boundary", e.what());
            }
        }
        l.finish();
    }
    if (r.has("ladder")) {
        Reader l = r.child("ladder");
        c.ladder = l.numbers("n_values", c.ladder);
        l.finish();
    }
    if (r.has("mc")) {
        Reader m = r.child("mc");
        c.mc.paths = static_cast<std::size_t>(m.unsigned_integer("paths", c.mc.paths));
        c.mc.seed = m.unsigned_integer("seed", c.mc.seed);
        c.mc.tilt_below = m.number("tilt_below", c.mc.tilt_below);
        m.finish();
    }
    c.epsilons = r.numbers("epsilons", c.epsilons);
    if (r.has("event")) {
        try {
            c.event = EventSpec::from_json(r.raw("event"));
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("event.") + e.what());
        } catch (const json::exception& e) {
            throw ConfigError(std::string("event: ") + e.what());
        }
    }
    c.x0 = r.numbers("x0", c.x0);
    if (r.has("lsmc")) {
        Reader l = r.child("lsmc");
        c.lsmc_degree = static_cast<int>(l.integer("degree", c.lsmc_degree));
        l.finish();
    }
    if (r.has("optimizer")) {
        Reader o = r.child("optimizer");
        c.optimizer_restarts = static_cast<int>(o.integer("restarts", c.optimizer_restarts));
        o.finish();
    }
    if (r.has("audit")) {
        Reader a = r.child("audit");
        c.audit_samples = static_cast<std::size_t>(a.unsigned_integer("samples", c.audit_samples));
        a.finish();
    }
    if (r.has("genapprox")) {
        Reader a = r.child("genapprox");
        c.genapprox_samples = static_cast<std::size_t>(a.unsigned_integer("samples", c.genapprox_samples));
        a.finish();
    }
    c.output_dir = r.string("output_dir", c.output_dir);
    r.finish();
    c.validate();
    return c;
}

std::string config_hash(const ExperimentConfig& config) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config.to_json().dump())));
    return buf;
}

std::vector<std::string> RunManifest::files() const {
    std::vector<std::string> out;
    for (const auto& s : stages) out.insert(out.end(), s.files.begin(), s.files.end());
    return out;
}

bool RunManifest::all_passed() const { return exit_code() == kExitPass; }

int RunManifest::exit_code() const {
    int code = kExitPass;
    for (const auto& s : stages) {
        if (s.status == "config-error") code = std::max(code, int(kExitConfig));
        if (s.status == "runtime-error") code = std::max(code, int(kExitRuntime));
        for (const auto& c : s.checks) {
            if (c.testable && !c.passed) code = std::max(code, int(kExitCheckFailure));
        }
    }
    return code;
}

json RunManifest::to_json() const {
    json st = json::array();
    for (const auto& s : stages) {
        json checks = json::array();
        for (const auto& c : s.checks) {
            checks.push_back({{"name", c.name}, {"passed", c.passed}, {"testable", c.testable}, {"value", c.value}});
        }
        st.push_back({{"name", s.name},
                      {"seconds", s.seconds},
                      {"status", s.status},
                      {"error", s.error},
                      {"seed", s.seed},
                      {"checks", checks},
                      {"files", s.files}});
    }
    return {{"config_hash", config_hash},
            {"tool_version", tool_version},
            {"pipeline", pipeline},
            {"seed", seed},
            {"workers", workers},
            {"stages", st},
            {"files", files()},
            {"exit_code", exit_code()}};
}

RunManifest RunManifest::from_json(const json& doc) {
    RunManifest m;
    m.config_hash = doc.at("config_hash").get<std::string>();
    m.tool_version = doc.at("tool_version").get<std::string>();
    m.pipeline = doc.at("pipeline").get<std::string>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.workers = doc.at("workers").get<int>();
    for (const auto& s : doc.at("stages")) {
        StageRecord r;
        r.name = s.at("name").get<std::string>();
        r.seconds = s.at("seconds").get<double>();
        r.status = s.at("status").get<std::string>();
        r.error = s.at("error").get<std::string>();
        r.seed = s.at("seed").get<std::uint64_t>();
        r.files = s.at("files").get<std::vector<std::string>>();
        for (const auto& c : s.at("checks")) {
            r.checks.push_back({c.at("name").get<std::string>(), c.at("passed").get<bool>(),
                                c.at("testable").get<bool>(), c.at("value").get<std::string>()});
        }
        m.stages.push_back(std::move(r));
    }
    return m;
}

namespace {

/// Shared state of one run: the model, derived objects, and the writer.
class Pipeline {
public:
    explicit Pipeline(const ExperimentConfig& config)
        : config_(config), entry_(find_model(config.model.name, config.model.overrides)),
          coeffs_(entry_.coefficients), dir_(config.output_dir) {
        x0_ = config.x0.empty() ? std::vector<double>(static_cast<std::size_t>(coeffs_.dims.m), 0.0) : config.x0;
        lsmc_.degree = config.lsmc_degree;
        fs::create_directories(dir_);
    }

    void audit(StageRecord& rec) {
        const AuditReport report = audit_assumptions(coeffs_, config_.audit_samples, entry_.audit_box, rec.seed);
        write_json(rec, "audit.json", report.to_json());
        if (report.hard_failure) rec.checks.push_back({"coefficients finite", false, true, *report.hard_failure});
        for (const auto& claim : entry_.claims) {
            double worst = 0.0;
            for (const auto& c : report.checks) {
                if (c.assumption == claim) worst = std::max(worst, c.max_ratio);
            }
            rec.checks.push_back({"assumption " + claim, report.passed(claim), true,
                                  "max ratio " + short_fmt(worst)});
        }
    }

    void genapprox(StageRecord& rec) {
        const GeneratorLadder& lad = ladder();
        const PropertyReport report = ladder_properties_check(lad, config_.genapprox_samples, rec.seed);
        write_json(rec, "genapprox.json", report.to_json());
        for (const auto& c : report.checks) {
            rec.checks.push_back({"ladder " + c.property, c.passed(), true,
                                  std::to_string(c.violations) + " of " + std::to_string(c.samples)});
        }
        const double last_gap = report.witnesses.empty() || report.witnesses[0].gaps.empty()
                                    ? 0.0 : report.witnesses[0].gaps.back();
        rec.checks.push_back({"ladder convergence witnesses", report.witnesses_decreasing(), true,
                              "last gap " + short_fmt(last_gap)});
        if (coeffs_.dims.d == 1) {
            std::vector<double> z;
            for (int k = 0; k <= 40; ++k) z.push_back(-2.0 + 0.1 * k);
            write_file(rec, "genapprox_eval.csv",
                       [&](std::ostream& out) { genapprox_eval_csv(config_, config_.grid.t0, 0.0, z, out); });
        }
    }

    void forward(StageRecord& rec) {
        const TimeGrid grid = main_grid();
        const BrownianBatch noise = BrownianBatch::generate(grid, config_.mc.paths, coeffs_.dims.d, rec.seed);
        const SamplePathBatch phi = euler_ode(coeffs_, grid.t0(), x0_, grid);
        std::vector<double> log_eps, log_gap;
        std::ostringstream csv;
        csv << "eps,gap,stderr\n";
        for (double eps : config_.epsilons) {
            const SamplePathBatch x = simulate_sde(coeffs_, grid.t0(), x0_, eps, grid, noise);
            const MeanEstimate gap = perturbation_gap(x, phi);
            csv << fmt(eps) << "," << fmt(gap.mean) << "," << fmt(gap.std_error) << "\n";
            if (gap.mean > 0.0) {
                log_eps.push_back(std::log(eps));
                log_gap.push_back(std::log(gap.mean));
            }
            if (eps == config_.epsilons.back()) {
                SamplePathBatch head(grid, std::min<std::size_t>(16, x.paths), x.width, x.label, x.seed);
                std::copy_n(x.values.begin(), head.values.size(), head.values.begin());
                write_file(rec, "forward_paths.csv", [&](std::ostream& out) { write_csv(head, out); });
            }
        }
        write_text(rec, "forward_gaps.csv", csv.str());
        slope_check(rec, "forward small-noise slope", log_eps, log_gap);
    }

    void bsde(StageRecord& rec) {
        const TimeGrid grid = main_grid();
        const BrownianBatch noise = BrownianBatch::generate(grid, config_.mc.paths, coeffs_.dims.d, rec.seed);
        const SamplePathBatch x = simulate_sde(coeffs_, grid.t0(), x0_, 1.0, grid, noise);

        const LadderSolution lad = monotone_ladder_solve(coeffs_, ladder(), x, noise, lsmc_);
        std::ostringstream csv;
        csv << "n,node,time,mean_y,se_y\n";
        for (std::size_t k = 0; k < lad.n_values.size(); ++k) {
            for (int i = 0; i <= grid.steps(); ++i) {
                const MeanEstimate e = lad.solutions[k].node_mean(i);
                csv << fmt(lad.n_values[k]) << "," << i << "," << fmt(grid.node(i)) << "," << fmt(e.mean) << ","
                    << fmt(e.std_error) << "\n";
            }
        }
        write_text(rec, "bsde_ladder.csv", csv.str());
        write_json(rec, "bsde_ladder.json", lad.to_json());
        rec.checks.push_back({"ladder monotone in n", lad.monotone(), true,
                              "worst z " + short_fmt(lad.worst_z_score)});

        const BsdeSolution base = solve_bsde_lsmc(coeffs_, coeffs_.generator_f, x, noise, lsmc_);
        write_file(rec, "bsde.csv", [&](std::ostream& out) { write_csv(base, out); });
        write_json(rec, "bsde_meta.json", base.scheme_meta.to_json());
        if (coeffs_.dims.m == 1 && !entry_.analytic_facts.empty()) {
            const AnalyticFact& fact = entry_.analytic_facts.front();
            const double oracle = fact.formula(coeffs_.horizon_T - grid.t0(), x0_[0]);
            const double allowed = std::max({3.0 * base.y0_std_error, 0.02 * std::abs(oracle), 1e-12});
            rec.checks.push_back({"bsde y0 vs " + fact.name, std::abs(base.y0 - oracle) <= allowed, true,
                                  "gap " + short_fmt(std::abs(base.y0 - oracle)) + " allowed " + short_fmt(allowed)});
        }

        const std::vector<double>& n = ladder().n_values();
        const double rung = n[n.size() / 2];
        const SmallNoiseTable small = small_noise_backward_gap(coeffs_, ladder().rung(rung), config_.epsilons,
                                                               grid.t0(), x0_, grid, config_.mc.paths,
                                                               splitmix64(rec.seed), lsmc_);
        std::ostringstream sn;
        sn << "eps,gap,stderr\n";
        std::vector<double> log_eps, log_gap;
        for (const auto& row : small.rows) {
            sn << fmt(row.epsilon) << "," << fmt(row.gap.mean) << "," << fmt(row.gap.std_error) << "\n";
            if (row.gap.mean > 0.0) {
                log_eps.push_back(std::log(row.epsilon));
                log_gap.push_back(std::log(row.gap.mean));
            }
        }
        write_text(rec, "bsde_small_noise.csv", sn.str());
        json meta = small.to_json();
        meta["rung"] = rung;
        write_json(rec, "bsde_small_noise.json", meta);
        slope_check(rec, "backward small-noise slope", log_eps, log_gap);
    }

    void pde(StageRecord& rec) {
        const SpaceLattice lat = lattice(1.0);
        const TimeGrid grid = pde_grid();
        const PdeSolution u = solve_semilinear(coeffs_, coeffs_.generator_f, 1.0, lat, grid);
        write_file(rec, "pde_slice.csv", [&](std::ostream& out) { write_slice_csv(u, 0, out); });
        write_json(rec, "pde.json", u.summary());
        rec.checks.push_back({"pde boundary within bound", u.boundary_flags == 0, true,
                              std::to_string(u.boundary_flags) + " flagged"});

        std::vector<std::pair<double, std::vector<double>>> points;
        const int m = coeffs_.dims.m;
        for (double w : {0.0, 0.5, 1.0}) {
            std::vector<double> x(static_cast<std::size_t>(m));
            for (int k = 0; k < m; ++k) x[k] = config_.lattice.x_lo[k] + w * (config_.lattice.x_hi[k] - config_.lattice.x_lo[k]);
            points.emplace_back(grid.t0(), x);
        }
        FeynmanKacConfig fk;
        fk.paths = config_.mc.paths;
        fk.steps = config_.grid.steps;
        fk.seed = rec.seed;
        fk.lsmc = lsmc_;
        const FeynmanKacReport report = feynman_kac_crosscheck(u, coeffs_, coeffs_.generator_f, points, fk);
        write_json(rec, "feynman_kac.json", report.to_json());
        const auto& worst = report.points[report.worst];
        rec.checks.push_back({"pde vs lsmc", report.passed(), true,
                              "worst gap " + short_fmt(std::abs(worst.pde - worst.lsmc)) + " allowed " +
                                  short_fmt(worst.allowed)});

        if (m == 1 && !entry_.analytic_facts.empty()) {
            const AnalyticFact& fact = entry_.analytic_facts.front();
            double err = 0.0;
            for (std::size_t j = 0; j < lat.size(); ++j) {
                const double x = lat.coordinate(0, static_cast<int>(j));
                if (x < config_.lattice.x_lo[0] || x > config_.lattice.x_hi[0]) continue;
                err = std::max(err, std::abs(u.node_value(0, j) - fact.formula(coeffs_.horizon_T - grid.t0(), x)));
            }
            rec.checks.push_back({"pde vs " + fact.name, err <= 5e-3, true, "sup error " + short_fmt(err)});
        }

        CompactBox box{grid.t0(), grid.t0() + 0.5 * (coeffs_.horizon_T - grid.t0()), config_.lattice.x_lo,
                       config_.lattice.x_hi};
        const UniformConvergenceReport conv = ladder_uniform_convergence(coeffs_, ladder(), 1.0, lat, grid, box);
        write_json(rec, "pde_ladder.json", conv.to_json());
        rec.checks.push_back({"pde ladder uniform convergence", conv.passed(), true,
                              "decay exponent " + short_fmt(conv.decay_exponent)});
    }

    void rate(StageRecord& rec) {
        const TimeGrid grid = main_grid();
        OptimizerConfig opt;
        opt.restarts = config_.optimizer_restarts;
        opt.seed = rec.seed;
        const EventSpec& event = *config_.event;
        const F0Source source = f0_source();
        rate_int_ = rate_backward(coeffs_, x0_, event.interior(), source, grid, opt);
        rate_cl_ = rate_backward(coeffs_, x0_, event.closure(), source, grid, opt);
        write_json(rec, "rate.json", {{"event", event.to_json()},
                                      {"interior", rate_int_->to_json()},
                                      {"closure", rate_cl_->to_json()}});
        write_file(rec, "rate_control.csv", [&](std::ostream& out) { write_csv(rate_cl_->optimal_control, out); });
        const auto describe = [](const RateResult& r) {
            return r.infinite ? std::string("infeasible") : "rate " + short_fmt(r.rate);
        };
        rec.checks.push_back({"rate closure solved", rate_cl_->converged, true, describe(*rate_cl_)});
        rec.checks.push_back({"rate interior solved", rate_int_->converged, true, describe(*rate_int_)});
        const bool ordered = rate_int_->infinite || (!rate_cl_->infinite && rate_cl_->rate <= rate_int_->rate + 1e-6);
        rec.checks.push_back({"rate closure <= interior", ordered, true, ""});
    }

    void ldp(StageRecord& rec) {
        if (!rate_int_ || !rate_cl_) throw ConfigError("ldp: the rate stage did not produce rates");
        const EventSpec& event = *config_.event;
        McConfig mc;
        mc.paths = config_.mc.paths;
        mc.steps = config_.grid.steps;
        mc.pde_refine = config_.lattice.pde_refine;
        mc.lattice_h = config_.lattice.h;
        mc.tilt_below = config_.mc.tilt_below;
        mc.seed = rec.seed;
        if (!rate_cl_->infinite && rate_cl_->rate > 0.0) {
            mc.tilts.push_back(rate_cl_->optimal_control);
            if (event.kind == EventKind::SupExceedance) {
                // Exceedance is two-sided: mix in the mirrored control.
                std::vector<double> mirrored = rate_cl_->optimal_control.vdot();
                for (double& v : mirrored) v = -v;
                mc.tilts.emplace_back(rate_cl_->optimal_control.grid(), coeffs_.dims.d, mirrored);
            }
        }
        const McTable table = mc_tail_estimate(coeffs_, coeffs_.generator_f, config_.grid.t0, x0_, event,
                                               config_.epsilons, mc);
        const LdpGapReport report = ldp_gap_report(*rate_int_, *rate_cl_, table);
        write_file(rec, "ldp.csv", [&](std::ostream& out) { write_csv(report, out); });
        json doc = report.to_json();
        doc["mc"] = table.to_json();
        write_json(rec, "ldp.json", doc);
        const std::string at = report.reliable_epsilon ? "at eps " + short_fmt(*report.reliable_epsilon) : "no uncensored cell";
        rec.checks.push_back({"ldp sandwich", report.sandwich_holds, report.testable(), at});
        rec.checks.push_back({"ldp trend nonincreasing", report.trend_nonincreasing, report.testable(), ""});
    }

private:
    TimeGrid main_grid() const { return TimeGrid(config_.grid.t0, coeffs_.horizon_T, config_.grid.steps); }
    TimeGrid pde_grid() const {
        return TimeGrid(config_.grid.t0, coeffs_.horizon_T, config_.grid.steps * config_.lattice.pde_refine);
    }
    SpaceLattice lattice(double eps) const {
        return SpaceLattice::around(coeffs_, config_.lattice.x_lo, config_.lattice.x_hi, eps, config_.lattice.h,
                                    config_.lattice.boundary);
    }
    const GeneratorLadder& ladder() {
        if (!ladder_) ladder_.emplace(coeffs_, config_.ladder);
        return *ladder_;
    }
    F0Source f0_source() {
        if (config_.event->kind == EventKind::TerminalInterval || coeffs_.dims.m > 2) {
            return F0Source::characteristics(coeffs_, coeffs_.generator_f);
        }
        std::vector<double> lo = config_.lattice.x_lo, hi = config_.lattice.x_hi;
        for (std::size_t k = 0; k < lo.size(); ++k) {
            lo[k] = std::min(lo[k], x0_[k]);
            hi[k] = std::max(hi[k], x0_[k]);
        }
        const SpaceLattice lat = SpaceLattice::around(coeffs_, lo, hi, 0.0, config_.lattice.h, config_.lattice.boundary);
        return F0Source::lattice(
            std::make_shared<const PdeSolution>(solve_first_order(coeffs_, coeffs_.generator_f, pde_grid(), lat)));
    }

    void slope_check(StageRecord& rec, const std::string& name, const std::vector<double>& log_eps,
                     const std::vector<double>& log_gap) {
        if (log_eps.size() < 2) {
            rec.checks.push_back({name, false, false, "fewer than two positive gaps"});
            return;
        }
        const LineFit fit = fit_line(log_eps, log_gap);
        rec.checks.push_back({name, fit.slope >= 1.8 && fit.slope <= 2.2, true, "slope " + short_fmt(fit.slope)});
    }

    void write_file(StageRecord& rec, const std::string& name, const std::function<void(std::ostream&)>& body) {
        std::ofstream out(dir_ / name, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + (dir_ / name).string());
        body(out);
        rec.files.push_back(name);
    }
    void write_text(StageRecord& rec, const std::string& name, const std::string& text) {
        write_file(rec, name, [&](std::ostream& out) { out << text; });
    }
    void write_json(StageRecord& rec, const std::string& name, const json& doc) {
        write_text(rec, name, doc.dump(2) + "\n");
    }

    const ExperimentConfig& config_;
    ModelCatalogEntry entry_;
    const CoefficientSet& coeffs_;
    fs::path dir_;
    std::vector<double> x0_;
    LsmcConfig lsmc_;
    std::optional<GeneratorLadder> ladder_;
    std::optional<RateResult> rate_int_, rate_cl_;
};

std::vector<std::string> stages_of(const std::string& pipeline) {
    if (pipeline == "full") return {"audit", "genapprox", "forward", "bsde", "pde", "rate", "ldp"};
    if (pipeline == "ldp") return {"rate", "ldp"};
    return {pipeline};
}

std::uint64_t stage_seed(std::uint64_t seed, const std::string& stage) { return splitmix64(seed ^ fnv1a(stage)); }

}  // namespace

RunManifest run(const ExperimentConfig& config) {
    config.validate();
    RunManifest manifest;
    manifest.config_hash = config_hash(config);
    manifest.pipeline = config.pipeline;
    manifest.seed = config.mc.seed;
    manifest.workers = worker_count();
    Pipeline pipe(config);
    const std::map<std::string, void (Pipeline::*)(StageRecord&)> table{
        {"audit", &Pipeline::audit}, {"genapprox", &Pipeline::genapprox}, {"forward", &Pipeline::forward},
        {"bsde", &Pipeline::bsde},   {"pde", &Pipeline::pde},             {"rate", &Pipeline::rate},
        {"ldp", &Pipeline::ldp}};
    for (const auto& name : stages_of(config.pipeline)) {
        StageRecord rec;
        rec.name = name;
        rec.seed = stage_seed(config.mc.seed, name);
        const auto start = std::chrono::steady_clock::now();
        try {
            (pipe.*table.at(name))(rec);
        } catch (const ConfigError& e) {
            rec.status = "config-error";
            rec.error = e.what();
        } catch (const std::exception& e) {
            rec.status = "runtime-error";
            rec.error = e.what();
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        manifest.stages.push_back(std::move(rec));
    }
    std::ofstream out(fs::path(config.output_dir) / "manifest.json", std::ios::binary);
    out << manifest.to_json().dump(2) << "\n";
    return manifest;
}

void genapprox_eval_csv(const ExperimentConfig& config, double t, double y, const std::vector<double>& z_values,
                        std::ostream& out) {
    const ModelCatalogEntry entry = find_model(config.model.name, config.model.overrides);
    if (entry.coefficients.dims.d != 1) throw ConfigError("genapprox eval: needs d = 1");
    const GeneratorLadder ladder(entry.coefficients, config.ladder);
    out << "n,z,f_n,f\n";
    for (double n : ladder.n_values()) {
        for (double z : z_values) {
            const double zz[1] = {z};
            out << fmt(n) << "," << fmt(z) << "," << fmt(inf_convolution(ladder, n, t, y, zz)) << ","
                << fmt(entry.coefficients.generator_f(t, y, zz)) << "\n";
        }
    }
}

}  // namespace qbsde
