#include "qbsde/ldp.hpp"
#include "qbsde/errors.hpp"
#include "qbsde/parallel.hpp"
#include "qbsde/rng.hpp"

#include <ceres/ceres.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace qbsde {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}
}  // namespace

ControlPath::ControlPath(TimeGrid grid, int dims, std::vector<double> vdot)
    : grid_(grid), dims_(dims), vdot_(std::move(vdot)) {
    if (dims_ < 1) throw ConfigError("ControlPath: dims must be positive");
    if (vdot_.size() != static_cast<std::size_t>(grid_.steps()) * dims_) {
        throw ConfigError("ControlPath: vdot must have N x d entries");
    }
    double s = 0.0;
    for (double v : vdot_) {
        if (!std::isfinite(v)) throw ConfigError("ControlPath: non-finite vdot");
        s += v * v;
    }
    action_ = 0.5 * s * grid_.delta();
}

ControlPath ControlPath::zero(const TimeGrid& grid, int dims) {
    return ControlPath(grid, dims, std::vector<double>(static_cast<std::size_t>(grid.steps()) * dims, 0.0));
}

ControlPath ControlPath::constant(const TimeGrid& grid, std::vector<double> c) {
    const int d = static_cast<int>(c.size());
    std::vector<double> v(static_cast<std::size_t>(grid.steps()) * d);
    for (int i = 0; i < grid.steps(); ++i) {
        for (int j = 0; j < d; ++j) v[static_cast<std::size_t>(i) * d + j] = c[j];
    }
    return ControlPath(grid, d, std::move(v));
}

std::vector<double> ControlPath::v() const {
    std::vector<double> out(static_cast<std::size_t>(grid_.steps() + 1) * dims_, 0.0);
    for (int i = 0; i < grid_.steps(); ++i) {
        for (int j = 0; j < dims_; ++j) {
            out[static_cast<std::size_t>(i + 1) * dims_ + j] =
                out[static_cast<std::size_t>(i) * dims_ + j] + vdot(i, j) * grid_.delta();
        }
    }
    return out;
}

void write_csv(const ControlPath& control, std::ostream& out) {
    out << "node";
    for (int j = 0; j < control.dims(); ++j) out << ",vdot" << j;
    out << "\n";
    for (int i = 0; i < control.grid().steps(); ++i) {
        out << i;
        for (int j = 0; j < control.dims(); ++j) out << "," << fmt(control.vdot(i, j));
        out << "\n";
    }
}

std::string to_string(EventKind kind) {
    switch (kind) {
        case EventKind::TerminalInterval: return "terminal-interval";
        case EventKind::SupBall: return "sup-ball";
        case EventKind::SupExceedance: return "sup-exceedance";
    }
    return "unknown";
}

void EventSpec::validate() const {
    if (kind == EventKind::TerminalInterval) {
        if (std::isnan(a) || std::isnan(b) || a > b) throw ConfigError("EventSpec: need a <= b");
    } else if (!(delta > 0.0) || !std::isfinite(delta)) {
        throw ConfigError("EventSpec: delta must be positive for ball kinds");
    }
    if (!(margin >= 0.0)) throw ConfigError("EventSpec: margin must be nonnegative");
    if (component < 0) throw ConfigError("EventSpec: component must be nonnegative");
}

EventSpec EventSpec::interior() const {
    EventSpec e = *this;
    e.closed = false;
    switch (kind) {
        case EventKind::TerminalInterval: e.a += margin; e.b -= margin; break;
        case EventKind::SupBall: e.delta -= margin; break;
        case EventKind::SupExceedance: e.delta += margin; break;
    }
    return e;
}

EventSpec EventSpec::closure() const {
    EventSpec e = *this;
    e.closed = true;
    switch (kind) {
        case EventKind::TerminalInterval: e.a -= margin; e.b += margin; break;
        case EventKind::SupBall: e.delta += margin; break;
        case EventKind::SupExceedance: e.delta = std::max(e.delta - margin, 0.0); break;
    }
    return e;
}

bool EventSpec::is_empty() const {
    if (kind == EventKind::TerminalInterval) return a > b;
    if (kind == EventKind::SupBall) return delta < 0.0 || (!closed && delta <= 0.0);
    return false;
}

bool EventSpec::contains(std::span<const double> path) const {
    if (is_empty()) return false;
    if (kind == EventKind::TerminalInterval) {
        const double v = path.back();
        return closed ? (v >= a && v <= b) : (v > a && v < b);
    }
    double sup = 0.0;
    for (std::size_t i = 0; i < path.size(); ++i) {
        const double r = reference.empty() ? 0.0 : reference[i];
        sup = std::max(sup, std::abs(path[i] - r));
    }
    if (kind == EventKind::SupBall) return closed ? sup <= delta : sup < delta;
    return closed ? sup >= delta : sup > delta;
}

namespace {
nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }
double from_json_bound(const nlohmann::json& doc, const char* key, double fallback) {
    if (!doc.contains(key) || doc[key].is_null()) return fallback;
    if (!doc[key].is_number()) throw ConfigError(std::string("event.") + key + ": expected a number or null");
    return doc[key].get<double>();
}
}  // namespace

nlohmann::json EventSpec::to_json() const {
    nlohmann::json doc{{"kind", to_string(kind)}, {"closed", closed}, {"margin", margin}, {"component", component}};
    if (kind == EventKind::TerminalInterval) {
        doc["a"] = finite_or_null(a);  // null encodes an unbounded side
        doc["b"] = finite_or_null(b);
    } else {
        doc["delta"] = delta;
        if (!reference.empty()) doc["reference"] = reference;
    }
    return doc;
}

EventSpec EventSpec::from_json(const nlohmann::json& doc) {
    if (!doc.is_object() || !doc.contains("kind") || !doc["kind"].is_string()) {
        throw ConfigError("event: expected an object with a string 'kind'");
    }
    EventSpec e;
    const std::string kind = doc["kind"];
    if (kind == "terminal-interval") {
        e.kind = EventKind::TerminalInterval;
        e.a = from_json_bound(doc, "a", -INFINITY);
        e.b = from_json_bound(doc, "b", INFINITY);
    } else if (kind == "sup-ball" || kind == "sup-exceedance") {
        e.kind = kind == "sup-ball" ? EventKind::SupBall : EventKind::SupExceedance;
        e.delta = from_json_bound(doc, "delta", kNaN);
        if (doc.contains("reference")) e.reference = doc["reference"].get<std::vector<double>>();
    } else {
        throw ConfigError("event.kind: unknown kind '" + kind + "'");
    }
    if (doc.contains("closed")) e.closed = doc["closed"].get<bool>();
    if (doc.contains("margin")) e.margin = doc["margin"].get<double>();
    if (doc.contains("component")) e.component = doc["component"].get<int>();
    e.validate();
    return e;
}

F0Source F0Source::lattice(std::shared_ptr<const PdeSolution> u0) {
    if (!u0) throw ConfigError("F0Source: null lattice solution");
    F0Source s;
    s.u0_ = std::move(u0);
    return s;
}

F0Source F0Source::characteristics(CoefficientSet coeffs, GeneratorFn generator) {
    F0Source s;
    s.coeffs_ = std::make_shared<const CoefficientSet>(std::move(coeffs));
    s.generator_ = std::move(generator);
    return s;
}

double F0Source::value(const TimeGrid& grid, int i, std::span<const double> x) const {
    const double s = grid.node(i);
    if (u0_) {
        // Controls explored by the optimizer may leave the box; read the nearest boundary value.
        const SpaceLattice& lat = u0_->lattice;
        double xc[2];
        for (int k = 0; k < lat.dims(); ++k) xc[k] = std::clamp(x[k], lat.lo(k), lat.hi(k));
        return u0_->value_at(s, std::span<const double>(xc, static_cast<std::size_t>(lat.dims())));
    }
    if (i == grid.steps()) return coeffs_->terminal_g(x);
    return characteristic_value(*coeffs_, generator_, s, x, grid.steps() - i);
}

namespace {

/// Controlled RK4 with sigma cached at the stage times of one grid.
class PathMap {
public:
    PathMap(const CoefficientSet& coeffs, const TimeGrid& grid) : coeffs_(coeffs), grid_(grid) {
        const int N = grid.steps();
        const double h = grid.delta();
        sig_.reserve(static_cast<std::size_t>(3 * N));
        for (int i = 0; i < N; ++i) {
            for (double s : {grid.node(i), grid.node(i) + 0.5 * h, grid.node(i + 1)}) {
                sig_.push_back(coeffs.vol_sigma(s));
            }
        }
    }

    /// Writes (N+1) x m states.
    void run(std::span<const double> x, const double* vdot, std::vector<double>& out) const {
        const int m = coeffs_.dims.m, d = coeffs_.dims.d, N = grid_.steps();
        const double h = grid_.delta();
        out.resize(static_cast<std::size_t>(N + 1) * m);
        std::copy(x.begin(), x.end(), out.begin());
        double k[4][8], tmp[8], push[3][8];
        if (m > 8) throw ConfigError("controlled_ode: m > 8 unsupported");
        for (int i = 0; i < N; ++i) {
            const double s = grid_.node(i);
            const double* cur = out.data() + static_cast<std::size_t>(i) * m;
            double* next = out.data() + static_cast<std::size_t>(i + 1) * m;
            for (int q = 0; q < 3; ++q) {
                const Eigen::MatrixXd& S = sig_[static_cast<std::size_t>(3 * i + q)];
                for (int r = 0; r < m; ++r) {
                    double acc = 0.0;
                    for (int c = 0; c < d; ++c) acc += S(r, c) * vdot[static_cast<std::size_t>(i) * d + c];
                    push[q][r] = acc;
                }
            }
            const auto stage = [&](double time, const double* y, int q, double* kout) {
                coeffs_.drift_b(time, std::span<const double>(y, m), std::span<double>(kout, m));
                for (int r = 0; r < m; ++r) kout[r] += push[q][r];
            };
            stage(s, cur, 0, k[0]);
            for (int r = 0; r < m; ++r) tmp[r] = cur[r] + 0.5 * h * k[0][r];
            stage(s + 0.5 * h, tmp, 1, k[1]);
            for (int r = 0; r < m; ++r) tmp[r] = cur[r] + 0.5 * h * k[1][r];
            stage(s + 0.5 * h, tmp, 1, k[2]);
            for (int r = 0; r < m; ++r) tmp[r] = cur[r] + h * k[2][r];
            stage(s + h, tmp, 2, k[3]);
            for (int r = 0; r < m; ++r) next[r] = cur[r] + h / 6.0 * (k[0][r] + 2 * k[1][r] + 2 * k[2][r] + k[3][r]);
        }
    }

private:
    const CoefficientSet& coeffs_;
    TimeGrid grid_;
    std::vector<Eigen::MatrixXd> sig_;
};

}  // namespace

SamplePathBatch controlled_ode(const CoefficientSet& coeffs, std::span<const double> x,
                               const ControlPath& control) {
    coeffs.validate();
    if (static_cast<int>(x.size()) != coeffs.dims.m) throw ConfigError("controlled_ode: x has wrong dimension");
    if (control.dims() != coeffs.dims.d) throw ConfigError("controlled_ode: control dims differ from d");
    const TimeGrid& grid = control.grid();
    if (std::abs(grid.T() - coeffs.horizon_T) > 1e-12) throw ConfigError("controlled_ode: grid must end at T");
    PathMap map(coeffs, grid);
    std::vector<double> states;
    map.run(x, control.vdot().data(), states);
    SamplePathBatch out(grid, 1, coeffs.dims.m, "phi^v");
    out.values = std::move(states);
    if (!out.all_finite()) throw EvaluationError("controlled_ode: non-finite state");
    return out;
}

SamplePathBatch compose_F0(const SamplePathBatch& phi, const F0Source& source) {
    if (phi.paths != 1) throw ConfigError("compose_F0: phi must be a single path");
    SamplePathBatch psi(phi.grid, 1, 1, "psi");
    if (const PdeSolution* u0 = source.lattice_solution()) {
        for (int i = 0; i <= phi.grid.steps(); ++i) {
            if (!u0->lattice.contains(phi.point(0, i))) {
                throw EvaluationError("compose_F0: phi leaves the lattice at node " + std::to_string(i) +
                                      " (no extrapolation)");
            }
        }
    }
    for (int i = 0; i <= phi.grid.steps(); ++i) psi.at(0, i) = source.value(phi.grid, i, phi.point(0, i));
    return psi;
}

nlohmann::json RateResult::to_json() const {
    nlohmann::json rates = nlohmann::json::array(), residuals = nlohmann::json::array();
    for (double r : restart_rates) rates.push_back(finite_or_null(r));
    for (double r : restart_residuals) residuals.push_back(finite_or_null(r));
    return {{"rate", infinite ? nlohmann::json(nullptr) : nlohmann::json(rate)},
            {"infinite", infinite},
            {"feasibility_residual", finite_or_null(feasibility_residual)},
            {"multistart_spread", multistart_spread},
            {"converged", converged},
            {"restart_rates", rates},
            {"restart_residuals", residuals},
            {"note", note}};
}

namespace {

/// psi (N+1 values) from vdot, and constraints c_eq = 0, c_in <= 0 on psi.
struct ConstrainedPath {
    std::function<void(const double* vdot, std::vector<double>& psi)> path;
    bool terminal_only = false;
    EventSpec event;
    int sign = 1;  ///< branch of a sup-exceedance
    std::vector<double> reference;

    int n_eq() const {
        return event.kind == EventKind::TerminalInterval && event.a == event.b ? 1 : 0;
    }
    void constraints(const std::vector<double>& psi, std::vector<double>& eq, std::vector<double>& in) const {
        eq.clear();
        in.clear();
        const double last = psi.back();
        switch (event.kind) {
            case EventKind::TerminalInterval:
                if (event.a == event.b) {
                    eq.push_back(last - event.a);
                } else {
                    if (std::isfinite(event.a)) in.push_back(event.a - last);
                    if (std::isfinite(event.b)) in.push_back(last - event.b);
                }
                break;
            case EventKind::SupBall:
                for (std::size_t i = 0; i < psi.size(); ++i) {
                    const double d = psi[i] - reference[i];
                    in.push_back(d * d - event.delta * event.delta);
                }
                break;
            case EventKind::SupExceedance: {
                double best = -INFINITY;
                for (std::size_t i = 0; i < psi.size(); ++i) best = std::max(best, sign * (psi[i] - reference[i]));
                in.push_back(event.delta - best);
                break;
            }
        }
    }
};

struct AlmState {
    std::vector<double> lambda_eq, lambda_in;
    double mu = 10.0;
};

class AugmentedLagrangian final : public ceres::FirstOrderFunction {
public:
    AugmentedLagrangian(const ConstrainedPath& problem, const AlmState& state, int n, double delta,
                        double fd_step)
        : problem_(problem), state_(state), n_(n), delta_(delta), fd_step_(fd_step) {}

    bool Evaluate(const double* v, double* cost, double* gradient) const override {
        std::vector<double> psi, eq, in;
        if (!eval(v, psi, eq, in)) return false;
        double action = 0.0;
        for (int k = 0; k < n_; ++k) action += 0.5 * v[k] * v[k] * delta_;
        const double mu = state_.mu;
        double penalty = 0.0;
        std::vector<double> w_eq(eq.size()), w_in(in.size());
        for (std::size_t j = 0; j < eq.size(); ++j) {
            penalty += state_.lambda_eq[j] * eq[j] + 0.5 * mu * eq[j] * eq[j];
            w_eq[j] = state_.lambda_eq[j] + mu * eq[j];
        }
        for (std::size_t j = 0; j < in.size(); ++j) {
            const double s = std::max(0.0, state_.lambda_in[j] + mu * in[j]);
            penalty += (s * s - state_.lambda_in[j] * state_.lambda_in[j]) / (2.0 * mu);
            w_in[j] = s;
        }
        *cost = action + penalty;
        if (!std::isfinite(*cost)) return false;
        if (!gradient) return true;

        const bool any_active =
            !eq.empty() || std::any_of(w_in.begin(), w_in.end(), [](double w) { return w != 0.0; });
        std::vector<double> x(v, v + n_), eq_p, in_p, eq_m, in_m, psi_tmp;
        for (int k = 0; k < n_; ++k) {
            gradient[k] = v[k] * delta_;
            if (!any_active) continue;
            const double h = fd_step_ * std::max(1.0, std::abs(v[k]));
            x[k] = v[k] + h;
            if (!eval(x.data(), psi_tmp, eq_p, in_p)) return false;
            x[k] = v[k] - h;
            if (!eval(x.data(), psi_tmp, eq_m, in_m)) return false;
            x[k] = v[k];
            double g = 0.0;
            for (std::size_t j = 0; j < eq.size(); ++j) g += w_eq[j] * (eq_p[j] - eq_m[j]) / (2.0 * h);
            for (std::size_t j = 0; j < in.size(); ++j) {
                if (w_in[j] != 0.0) g += w_in[j] * (in_p[j] - in_m[j]) / (2.0 * h);
            }
            gradient[k] += g;
        }
        return true;
    }

    int NumParameters() const override { return n_; }

private:
    bool eval(const double* v, std::vector<double>& psi, std::vector<double>& eq, std::vector<double>& in) const {
        problem_.path(v, psi);
        for (double p : psi) {
            if (!std::isfinite(p)) return false;
        }
        problem_.constraints(psi, eq, in);
        return true;
    }

    const ConstrainedPath& problem_;
    const AlmState& state_;
    int n_;
    double delta_;
    double fd_step_;
};

struct RestartOutcome {
    std::vector<double> vdot;
    double action = kNaN;
    double residual = INFINITY;
};

double residual_of(const ConstrainedPath& problem, const std::vector<double>& vdot) {
    std::vector<double> psi, eq, in;
    problem.path(vdot.data(), psi);
    for (double p : psi) {
        if (!std::isfinite(p)) return INFINITY;
    }
    problem.constraints(psi, eq, in);
    double r = 0.0;
    for (double e : eq) r = std::max(r, std::abs(e));
    for (double c : in) r = std::max(r, c);
    return r;
}

RestartOutcome run_restart(const ConstrainedPath& problem, int n, double delta,
                           std::vector<double> start, const OptimizerConfig& config) {
    std::vector<double> psi, eq, in;
    problem.path(start.data(), psi);
    problem.constraints(psi, eq, in);
    AlmState state;
    state.lambda_eq.assign(eq.size(), 0.0);
    state.lambda_in.assign(in.size(), 0.0);
    state.mu = config.penalty0;

    ceres::GradientProblemSolver::Options options;
    options.line_search_direction_type = ceres::LBFGS;
    options.max_num_iterations = config.inner_iterations;
    options.function_tolerance = 1e-16;
    options.gradient_tolerance = 1e-13;
    options.parameter_tolerance = 1e-16;
    options.logging_type = ceres::SILENT;
    options.minimizer_progress_to_stdout = false;

    std::vector<double> v = std::move(start);
    const int total = config.stages + config.extra_stages;
    for (int stage = 0; stage < total; ++stage) {
        ceres::GradientProblem gp(new AugmentedLagrangian(problem, state, n, delta, config.fd_step));
        ceres::GradientProblemSolver::Summary summary;
        ceres::Solve(options, gp, v.data(), &summary);

        problem.path(v.data(), psi);
        problem.constraints(psi, eq, in);
        for (std::size_t j = 0; j < eq.size(); ++j) state.lambda_eq[j] += state.mu * eq[j];
        for (std::size_t j = 0; j < in.size(); ++j) {
            state.lambda_in[j] = std::max(0.0, state.lambda_in[j] + state.mu * in[j]);
        }
        const double res = residual_of(problem, v);
        if (stage + 1 < config.stages) {
            state.mu *= config.penalty_growth;
        } else if (res <= 0.01 * config.feasibility_tol) {
            break;  // final weight reached and comfortably feasible
        }
    }
    RestartOutcome out;
    out.residual = residual_of(problem, v);
    double s = 0.0;
    for (double x : v) s += x * x;
    out.action = 0.5 * s * delta;
    out.vdot = std::move(v);
    return out;
}

RateResult optimize(const ConstrainedPath& problem, const TimeGrid& grid, int d,
                    const OptimizerConfig& config) {
    RateResult result;
    if (problem.event.is_empty()) {
        result.infinite = true;
        result.feasibility_residual = INFINITY;
        result.converged = true;
        result.note = "empty event: infimum over the empty set";
        result.optimal_control = ControlPath::zero(grid, d);
        return result;
    }
    if (config.restarts < 1) throw ConfigError("optimizer: restarts must be >= 1");
    const int n = grid.steps() * d;
    std::vector<RestartOutcome> outcomes(static_cast<std::size_t>(config.restarts));
    parallel_items(outcomes.size(), [&](std::size_t r) {
        std::vector<double> start(static_cast<std::size_t>(n), 0.0);
        if (r > 0) {
            auto rng = substream(config.seed, r);
            std::normal_distribution<double> normal(0.0, config.start_scale);
            for (double& x : start) x = normal(rng);
        }
        outcomes[r] = run_restart(problem, n, grid.delta(), std::move(start), config);
    });

    int best = -1;
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t r = 0; r < outcomes.size(); ++r) {
        const bool feasible = outcomes[r].residual <= config.feasibility_tol;
        result.restart_rates.push_back(feasible ? outcomes[r].action : kNaN);
        result.restart_residuals.push_back(outcomes[r].residual);
        if (!feasible) continue;
        lo = std::min(lo, outcomes[r].action);
        hi = std::max(hi, outcomes[r].action);
        if (best < 0 || outcomes[r].action < outcomes[static_cast<std::size_t>(best)].action) best = static_cast<int>(r);
    }
    if (best < 0) {
        result.infinite = true;
        result.converged = false;
        result.feasibility_residual = INFINITY;
        for (const auto& o : outcomes) result.feasibility_residual = std::min(result.feasibility_residual, o.residual);
        result.note = "no restart reached feasibility at the penalty ceiling";
        result.optimal_control = ControlPath::zero(grid, d);
        return result;
    }
    const RestartOutcome& o = outcomes[static_cast<std::size_t>(best)];
    result.optimal_control = ControlPath(grid, d, o.vdot);
    result.rate = result.optimal_control.action();
    result.feasibility_residual = o.residual;
    result.multistart_spread = hi - lo;
    result.converged = true;
    return result;
}

/// Runs the event through the optimizer; sup-exceedance is split by sign.
RateResult solve_event(ConstrainedPath problem, const TimeGrid& grid, int d, const OptimizerConfig& config) {
    if (problem.event.kind != EventKind::SupExceedance) return optimize(problem, grid, d, config);
    problem.sign = 1;
    RateResult up = optimize(problem, grid, d, config);
    problem.sign = -1;
    RateResult down = optimize(problem, grid, d, config);
    RateResult& best = (down.infinite || (!up.infinite && up.rate <= down.rate)) ? up : down;
    const RateResult& other = &best == &up ? down : up;
    best.restart_rates.insert(best.restart_rates.end(), other.restart_rates.begin(), other.restart_rates.end());
    best.restart_residuals.insert(best.restart_residuals.end(), other.restart_residuals.begin(),
                                  other.restart_residuals.end());
    best.note = (best.note.empty() ? "" : best.note + "; ") + "minimum over both exceedance directions";
    return best;
}

std::vector<double> resolve_reference(const EventSpec& event, const std::function<void(const double*, std::vector<double>&)>& path, int n, int N) {
    if (event.kind == EventKind::TerminalInterval) return {};
    if (!event.reference.empty()) {
        if (static_cast<int>(event.reference.size()) != N + 1) {
            throw ConfigError("EventSpec: reference must have N + 1 values");
        }
        return event.reference;
    }
    std::vector<double> zero(static_cast<std::size_t>(n), 0.0), psi;
    path(zero.data(), psi);
    return psi;
}

}  // namespace

RateResult rate_forward(const CoefficientSet& coeffs, std::span<const double> x,
                        const EventSpec& event, const TimeGrid& grid, const OptimizerConfig& config) {
    coeffs.validate();
    if (!event.is_empty()) event.validate();  // an empty interior is answered with the +inf sentinel
    if (static_cast<int>(x.size()) != coeffs.dims.m) throw ConfigError("rate_forward: x has wrong dimension");
    if (event.component >= coeffs.dims.m) throw ConfigError("rate_forward: event component out of range");
    if (std::abs(grid.T() - coeffs.horizon_T) > 1e-12) throw ConfigError("rate_forward: grid must end at T");
    const int m = coeffs.dims.m, N = grid.steps();
    auto map = std::make_shared<PathMap>(coeffs, grid);
    const std::vector<double> x0(x.begin(), x.end());
    ConstrainedPath problem;
    problem.event = event;
    problem.path = [map, x0, m, N, comp = event.component](const double* vdot, std::vector<double>& psi) {
        std::vector<double> states;
        map->run(x0, vdot, states);
        psi.resize(static_cast<std::size_t>(N) + 1);
        for (int i = 0; i <= N; ++i) psi[i] = states[static_cast<std::size_t>(i) * m + comp];
    };
    problem.reference = resolve_reference(event, problem.path, N * coeffs.dims.d, N);
    return solve_event(problem, grid, coeffs.dims.d, config);
}

RateResult rate_backward(const CoefficientSet& coeffs, std::span<const double> x,
                         const EventSpec& event, const F0Source& source, const TimeGrid& grid,
                         const OptimizerConfig& config) {
    coeffs.validate();
    if (!event.is_empty()) event.validate();  // an empty interior is answered with the +inf sentinel
    if (static_cast<int>(x.size()) != coeffs.dims.m) throw ConfigError("rate_backward: x has wrong dimension");
    if (std::abs(grid.T() - coeffs.horizon_T) > 1e-12) throw ConfigError("rate_backward: grid must end at T");
    const int m = coeffs.dims.m, N = grid.steps();
    auto map = std::make_shared<PathMap>(coeffs, grid);
    const std::vector<double> x0(x.begin(), x.end());
    ConstrainedPath problem;
    problem.event = event;
    if (event.kind == EventKind::TerminalInterval) {
        // Only psi_T = u^0(T, phi_T) = g(phi_T) enters the constraint.
        problem.terminal_only = true;
        problem.path = [map, x0, m, N, &coeffs](const double* vdot, std::vector<double>& psi) {
            std::vector<double> states;
            map->run(x0, vdot, states);
            psi.assign(1, coeffs.terminal_g(std::span<const double>(states.data() + static_cast<std::size_t>(N) * m, m)));
        };
    } else {
        problem.path = [map, x0, m, N, source, grid](const double* vdot, std::vector<double>& psi) {
            std::vector<double> states;
            map->run(x0, vdot, states);
            psi.resize(static_cast<std::size_t>(N) + 1);
            for (int i = 0; i <= N; ++i) {
                psi[i] = source.value(grid, i, std::span<const double>(states.data() + static_cast<std::size_t>(i) * m, m));
            }
        };
    }
    problem.reference = resolve_reference(event, problem.path, N * coeffs.dims.d, N);
    return solve_event(problem, grid, coeffs.dims.d, config);
}

double McRow::eps2_log_p() const {
    if (censored || !(p_hat > 0.0)) return kNaN;
    return epsilon * epsilon * std::log(p_hat);
}

nlohmann::json McTable::to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& r : rows) {
        rows_json.push_back({{"epsilon", r.epsilon},
                             {"p_hat", r.p_hat},
                             {"std_error", r.std_error},
                             {"hits", r.hits},
                             {"censored", r.censored},
                             {"upper_bound", r.upper_bound},
                             {"tilted", r.tilted},
                             {"lattice_exits", r.lattice_exits},
                             {"eps2_logP", finite_or_null(r.eps2_log_p())}});
    }
    return {{"rows", rows_json}, {"warnings", warnings}};
}

McTable mc_tail_estimate(const CoefficientSet& coeffs, const GeneratorFn& generator, double t,
                         std::span<const double> x, const EventSpec& event,
                         const std::vector<double>& epsilons, const McConfig& config) {
    coeffs.validate();
    event.validate();
    if (coeffs.dims.m > 2) throw ConfigError("mc_tail_estimate: lattice evaluation needs m <= 2");
    if (config.paths < 1 || config.steps < 1 || config.pde_refine < 1) {
        throw ConfigError("mc_tail_estimate: paths, steps and pde_refine must be positive");
    }
    for (double e : epsilons) {
        if (!(e > 0.0 && e <= 1.0)) throw ConfigError("mc_tail_estimate: epsilon must lie in (0, 1]");
    }
    const int m = coeffs.dims.m, d = coeffs.dims.d;
    const TimeGrid grid(t, coeffs.horizon_T, config.steps);
    const TimeGrid pde_grid(t, coeffs.horizon_T, config.steps * config.pde_refine);
    const int N = grid.steps();
    const double dt = grid.delta();
    for (const auto& tilt : config.tilts) {
        if (!(tilt.grid() == grid) || tilt.dims() != d) throw ConfigError("mc_tail_estimate: tilt grid differs from the MC grid");
    }

    // Reference path: the unperturbed psi along the deterministic skeleton.
    std::vector<double> reference = event.reference;
    if (event.kind != EventKind::TerminalInterval && reference.empty()) {
        const SamplePathBatch phi = solve_ode(coeffs, t, x, grid);
        const SamplePathBatch psi = compose_F0(phi, F0Source::characteristics(coeffs, generator));
        reference.assign(psi.values.begin(), psi.values.end());
    }
    if (!reference.empty() && static_cast<int>(reference.size()) != N + 1) {
        throw ConfigError("mc_tail_estimate: reference must have N + 1 values");
    }

    // Spatial reach of the tilted skeletons.
    std::vector<double> reach_lo(x.begin(), x.end()), reach_hi(x.begin(), x.end());
    for (const auto& tilt : config.tilts) {
        const SamplePathBatch phi = controlled_ode(coeffs, x, tilt);
        for (int i = 0; i <= N; ++i) {
            for (int r = 0; r < m; ++r) {
                reach_lo[r] = std::min(reach_lo[r], phi.at(0, i, r));
                reach_hi[r] = std::max(reach_hi[r], phi.at(0, i, r));
            }
        }
    }

    McTable table;
    bool any_hit = false;
    for (std::size_t cell = 0; cell < epsilons.size(); ++cell) {
        const double eps = epsilons[cell];
        const bool tilted = !config.tilts.empty() && eps <= config.tilt_below;
        const SpaceLattice lattice = SpaceLattice::around(coeffs, reach_lo, reach_hi, eps, config.lattice_h);
        const PdeSolution u = solve_semilinear(coeffs, generator, eps, lattice, pde_grid);
        const BrownianBatch noise = BrownianBatch::generate(grid, config.paths, d, splitmix64(config.seed + cell));
        const std::size_t K = tilted ? config.tilts.size() : 0;

        std::vector<Eigen::MatrixXd> sigma(static_cast<std::size_t>(N));
        for (int i = 0; i < N; ++i) sigma[i] = coeffs.vol_sigma(grid.node(i));

        std::vector<double> contribution(config.paths);
        std::vector<std::uint8_t> hit(config.paths, 0);
        std::vector<std::size_t> exits((config.paths + kPathBlock - 1) / kPathBlock, 0);
        parallel_blocks(config.paths, kPathBlock, [&](std::size_t blk, std::size_t begin, std::size_t end) {
            std::vector<double> X(static_cast<std::size_t>(m)), Xc(static_cast<std::size_t>(m)),
                drift(static_cast<std::size_t>(m)), Y(static_cast<std::size_t>(N) + 1),
                vol(static_cast<std::size_t>(N) + 1), log_q(K);
            for (std::size_t p = begin; p < end; ++p) {
                const std::size_t comp = K ? p % K : 0;
                std::copy(x.begin(), x.end(), X.begin());
                std::fill(log_q.begin(), log_q.end(), 0.0);
                const auto read_y = [&](int i) {
                    for (int r = 0; r < m; ++r) {
                        Xc[r] = std::clamp(X[r], lattice.lo(r), lattice.hi(r));
                        if (Xc[r] != X[r]) ++exits[blk];
                    }
                    const int slice = i * config.pde_refine;
                    Y[i] = i == N ? coeffs.terminal_g(X) : u.value(slice, Xc);
                    if (event.kind != EventKind::TerminalInterval && config.bridge_correction && i < N) {
                        const std::vector<double> g = u.gradient(slice, Xc);
                        double s2 = 0.0;
                        for (int c = 0; c < d; ++c) {
                            double acc = 0.0;
                            for (int r = 0; r < m; ++r) acc += sigma[i](r, c) * g[r];
                            s2 += acc * acc;
                        }
                        vol[i] = eps * std::sqrt(s2);
                    }
                };
                read_y(0);
                for (int i = 0; i < N; ++i) {
                    coeffs.drift_b(grid.node(i), X, drift);
                    const auto dw = noise.step(p, i);
                    for (int r = 0; r < m; ++r) {
                        double shift = 0.0, stoch = 0.0;
                        for (int c = 0; c < d; ++c) {
                            if (K) shift += sigma[i](r, c) * config.tilts[comp].vdot(i, c);
                            stoch += sigma[i](r, c) * dw[c];
                        }
                        X[r] += drift[r] * dt + shift * dt + eps * stoch;
                    }
                    // Log density of each mixture component against P, in terms of the P-increments.
                    for (std::size_t k = 0; k < K; ++k) {
                        double lin = 0.0, quad = 0.0;
                        for (int c = 0; c < d; ++c) {
                            const double vk = config.tilts[k].vdot(i, c);
                            const double dW = dw[c] + config.tilts[comp].vdot(i, c) * dt / eps;
                            lin += vk * dW;
                            quad += vk * vk;
                        }
                        log_q[k] += lin / eps - quad * dt / (2.0 * eps * eps);
                    }
                    read_y(i + 1);
                }

                double membership = 0.0;
                if (event.kind == EventKind::TerminalInterval) {
                    membership = event.contains(std::span<const double>(Y.data(), Y.size())) ? 1.0 : 0.0;
                } else {
                    bool outside = false;
                    for (int i = 0; i <= N; ++i) outside = outside || std::abs(Y[i] - reference[i]) >= event.delta;
                    double survive = outside ? 0.0 : 1.0;
                    if (!outside && config.bridge_correction) {
                        for (int i = 0; i < N && survive > 0.0; ++i) {
                            const double s2 = vol[i] * vol[i] * dt;
                            if (!(s2 > 0.0)) continue;
                            const double a0 = Y[i] - reference[i], a1 = Y[i + 1] - reference[i + 1];
                            const double up = std::exp(-2.0 * (event.delta - a0) * (event.delta - a1) / s2);
                            const double low = std::exp(-2.0 * (event.delta + a0) * (event.delta + a1) / s2);
                            survive *= 1.0 - std::min(1.0, up + low);
                        }
                    }
                    membership = event.kind == EventKind::SupBall ? survive : 1.0 - survive;
                }
                double weight = 1.0;
                if (K) {
                    const double top = *std::max_element(log_q.begin(), log_q.end());
                    double s = 0.0;
                    for (double l : log_q) s += std::exp(l - top);
                    weight = std::exp(-(top + std::log(s / static_cast<double>(K))));
                }
                contribution[p] = weight * membership;
                hit[p] = membership > 0.0;
            }
        });

        McRow row;
        row.epsilon = eps;
        row.tilted = tilted;
        for (auto e : exits) row.lattice_exits += e;
        for (auto h : hit) row.hits += h;
        const MeanEstimate est = mean_and_std_error(contribution);
        row.p_hat = est.mean;
        row.std_error = est.std_error;
        if (row.hits == 0) {
            row.censored = true;
            row.upper_bound = 3.0 / static_cast<double>(config.paths);
        } else {
            any_hit = true;
        }
        table.rows.push_back(row);
    }
    if (!any_hit && config.tilts.empty()) {
        table.warnings.push_back(
            "no hits at any epsilon: supply a tilt, e.g. the optimal control returned by rate_backward");
    }
    return table;
}

nlohmann::json LdpGapReport::to_json() const {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& row : rows) {
        r.push_back({{"epsilon", row.mc.epsilon},
                     {"p_hat", row.mc.p_hat},
                     {"std_error", row.mc.std_error},
                     {"eps2_logP", finite_or_null(row.mc.eps2_log_p())},
                     {"censored", row.mc.censored},
                     {"verdict", row.verdict}});
    }
    return {{"rows", r},
            {"rate_int", rate_int.to_json()},
            {"rate_cl", rate_cl.to_json()},
            {"slack", slack},
            {"reliable_epsilon", reliable_epsilon ? nlohmann::json(*reliable_epsilon) : nlohmann::json(nullptr)},
            {"sandwich_holds", sandwich_holds},
            {"trend_nonincreasing", trend_nonincreasing},
            {"testable", testable()},
            {"passed", passed()}};
}

LdpGapReport ldp_gap_report(const RateResult& rate_int, const RateResult& rate_cl,
                            const McTable& table, double relative_slack, double absolute_slack) {
    LdpGapReport rep;
    rep.rate_int = rate_int;
    rep.rate_cl = rate_cl;
    double scale = 0.0;
    if (!rate_int.infinite) scale = std::max(scale, rate_int.rate);
    if (!rate_cl.infinite) scale = std::max(scale, rate_cl.rate);
    rep.slack = std::max(relative_slack * scale, absolute_slack);

    // Lower bound from the interior, upper bound from the closure.
    const double lower = rate_int.infinite ? -INFINITY : -rate_int.rate - rep.slack;
    const double upper = rate_cl.infinite ? -INFINITY : -rate_cl.rate + rep.slack;
    const auto holds = [&](const McRow& r) {
        const double v = r.eps2_log_p();
        return v >= lower && v <= upper;
    };

    std::vector<McRow> sorted;
    for (const auto& r : table.rows) {
        LdpGapRow row{r, r.censored ? "untestable" : (holds(r) ? "pass" : "fail")};
        rep.rows.push_back(row);
        if (!r.censored) sorted.push_back(r);
    }
    std::sort(sorted.begin(), sorted.end(), [](const McRow& a, const McRow& b) { return a.epsilon < b.epsilon; });
    if (!sorted.empty()) {
        rep.reliable_epsilon = sorted.front().epsilon;
        rep.sandwich_holds = holds(sorted.front());
    }
    rep.trend_nonincreasing = sorted.size() >= 2;
    for (std::size_t k = 1; k < sorted.size(); ++k) {
        const McRow& a = sorted[k - 1];
        const McRow& b = sorted[k];
        // Allow two standard errors of each estimate, mapped through eps^2 log.
        const double tol = 2.0 * (a.epsilon * a.epsilon * a.std_error / a.p_hat +
                                  b.epsilon * b.epsilon * b.std_error / b.p_hat);
        if (b.eps2_log_p() > a.eps2_log_p() + tol) rep.trend_nonincreasing = false;
    }
    return rep;
}

void write_csv(const LdpGapReport& report, std::ostream& out) {
    const auto rate = [](const RateResult& r) { return r.infinite ? std::string("infeasible") : fmt(r.rate); };
    out << "eps,P_hat,stderr,eps2_logP,rate_int,rate_cl,verdict\n";
    for (const auto& row : report.rows) {
        const double v = row.mc.eps2_log_p();
        out << fmt(row.mc.epsilon) << "," << fmt(row.mc.censored ? row.mc.upper_bound : row.mc.p_hat) << ","
            << fmt(row.mc.std_error) << "," << (std::isfinite(v) ? fmt(v) : std::string("censored")) << ","
            << rate(report.rate_int) << "," << rate(report.rate_cl) << "," << row.verdict << "\n";
    }
}

}  // namespace qbsde
