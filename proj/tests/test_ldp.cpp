#include "doctest.h"
#include "oracles.hpp"

#include "qbsde/errors.hpp"
#include "qbsde/ldp.hpp"
#include "qbsde/parallel.hpp"

#include <cmath>
#include <memory>
#include <sstream>

using namespace qbsde;

namespace {

EventSpec terminal(double a, double b) {
    EventSpec e;
    e.kind = EventKind::TerminalInterval;
    e.a = a;
    e.b = b;
    return e;
}

EventSpec sup_event(EventKind kind, double delta) {
    EventSpec e;
    e.kind = kind;
    e.delta = delta;
    return e;
}

OptimizerConfig quick(int restarts = 3) {
    OptimizerConfig c;
    c.restarts = restarts;
    return c;
}

}  // namespace

TEST_CASE("control paths") {
    const TimeGrid g(0, 1, 4);
    const ControlPath c = ControlPath::constant(g, {2.0});
    CHECK(c.action() == doctest::Approx(2.0));
    const auto v = c.v();
    REQUIRE(v.size() == 5);
    CHECK(v.back() == doctest::Approx(2.0));
    CHECK(ControlPath::zero(g, 2).action() == 0.0);
    CHECK_THROWS_AS(ControlPath(g, 1, {1.0, 2.0}), ConfigError);
    CHECK_THROWS_AS(ControlPath(g, 1, {1.0, 2.0, NAN, 0.0}), ConfigError);
    std::ostringstream out;
    write_csv(c, out);
    CHECK(out.str().rfind("node,vdot0\n", 0) == 0);
}

TEST_CASE("controlled ODE") {
    const TimeGrid g(0, 1, 64);
    const auto w = find_model("schilder-window").coefficients;
    const double x[1] = {0.25};
    const SamplePathBatch phi = controlled_ode(w, x, ControlPath::constant(g, {1.5}));
    for (int i = 0; i <= g.steps(); ++i) CHECK(phi.at(0, i) == doctest::Approx(0.25 + 1.5 * g.node(i)).epsilon(1e-14));

    // OU with vdot = 1: phi_t = x e^{-t} + (1 - e^{-t}).
    const auto ou = find_model("ou").coefficients;
    const SamplePathBatch p = controlled_ode(ou, x, ControlPath::constant(g, {1.0}));
    for (int i = 0; i <= g.steps(); ++i) {
        const double t = g.node(i);
        CHECK(std::abs(p.at(0, i) - (0.25 * std::exp(-t) + 1.0 - std::exp(-t))) <= 1e-8);
    }
}

TEST_CASE("events") {
    const EventSpec e = terminal(1.0, INFINITY);
    const double inside[3] = {0.0, 0.5, 1.2}, outside[3] = {0.0, 2.0, 0.9};
    CHECK(e.contains(inside));
    CHECK_FALSE(e.contains(outside));
    CHECK(e.interior().a > e.a);
    CHECK(e.closure().a < e.a);

    const EventSpec ball = sup_event(EventKind::SupBall, 1.0);
    const double small[3] = {0.0, 0.9, -0.9}, big[3] = {0.0, 0.9, -1.1};
    CHECK(ball.contains(small));
    CHECK_FALSE(ball.contains(big));

    EventSpec thin = terminal(0.5, 0.5);
    CHECK_FALSE(thin.is_empty());
    CHECK(thin.interior().is_empty());

    const auto doc = e.to_json();
    CHECK(doc["b"].is_null());
    const EventSpec back = EventSpec::from_json(doc);
    CHECK(back.a == 1.0);
    CHECK(std::isinf(back.b));
    CHECK_THROWS_AS(EventSpec::from_json({{"kind", "sup-cone"}}), ConfigError);
    CHECK_THROWS_AS(terminal(2.0, 1.0).validate(), ConfigError);
    CHECK_THROWS_AS(sup_event(EventKind::SupBall, -1.0).validate(), ConfigError);
}

TEST_CASE("composition with the first-order solution") {
    const auto ou = find_model("ou").coefficients;
    const TimeGrid g(0, 1, 64);
    const SpaceLattice lat = SpaceLattice::around(ou, {-1.0}, {1.0}, 0.0, 0.01);
    auto u0 = std::make_shared<const PdeSolution>(solve_first_order(ou, ou.generator_f, TimeGrid(0, 1, 512), lat));
    const F0Source from_lattice = F0Source::lattice(u0);
    const F0Source from_chars = F0Source::characteristics(ou, ou.generator_f);
    const double x[1] = {0.3};
    const SamplePathBatch phi = controlled_ode(ou, x, ControlPath::constant(g, {0.5}));
    const SamplePathBatch a = compose_F0(phi, from_lattice), b = compose_F0(phi, from_chars);
    for (int i = 0; i <= g.steps(); ++i) CHECK(std::abs(a.at(0, i) - b.at(0, i)) <= 5e-3);
    // psi_T = g(phi_T).
    CHECK(b.at(0, g.steps()) == doctest::Approx(std::sin(phi.at(0, g.steps()))));

    const double far[1] = {0.0};
    const SamplePathBatch escape = controlled_ode(ou, far, ControlPath::constant(g, {40.0}));
    CHECK_THROWS_AS(compose_F0(escape, from_lattice), EvaluationError);
}

TEST_CASE("forward rate for Schilder equals the discrete QP") {
    const auto w = find_model("schilder-window").coefficients;
    const TimeGrid g(0, 1, 32);
    const double x[1] = {0.0};
    for (double y : {0.5, 1.0, 2.0}) {
        const RateResult r = rate_forward(w, x, terminal(y, INFINITY), g, quick());
        REQUIRE_FALSE(r.infinite);
        const Eigen::VectorXd beta = Eigen::VectorXd::Constant(g.steps(), g.delta());
        CHECK(r.rate == doctest::Approx(oracle::linear_terminal_qp(beta, g.delta(), y)).epsilon(1e-6));
        CHECK(r.rate == doctest::Approx(y * y / 2.0).epsilon(1e-6));
        CHECK(r.feasibility_residual <= 1e-6);
    }
}

TEST_CASE("forward rate for OU against the RK4 discrete QP") {
    const auto ou = find_model("ou").coefficients;
    const int steps = 32;
    const TimeGrid g(0, 1, steps);
    const double x0 = 0.2, c = 1.0;
    const double x[1] = {x0};
    const RateResult r = rate_forward(ou, x, terminal(c, INFINITY), g, quick());
    const oracle::OuRk4Map map(1.0, g.delta());
    const double target = c - std::pow(map.R, steps) * x0;
    CHECK(r.rate == doctest::Approx(oracle::linear_terminal_qp(map.beta(steps), g.delta(), target)).epsilon(1e-5));
    CHECK(std::abs(r.rate - oracle::ou_terminal_rate(x0, c, 1.0)) <= 2e-2 * oracle::ou_terminal_rate(x0, c, 1.0));
}

TEST_CASE("feasible-at-zero and empty events") {
    const auto w = find_model("schilder-window").coefficients;
    const TimeGrid g(0, 1, 16);
    const double x[1] = {0.0};
    const RateResult zero = rate_forward(w, x, sup_event(EventKind::SupBall, 0.5), g, quick());
    CHECK(zero.rate == doctest::Approx(0.0).epsilon(1e-12));
    const RateResult empty = rate_forward(w, x, terminal(0.5, 0.5).interior(), g, quick());
    CHECK(empty.infinite);
    CHECK(empty.to_json()["rate"].is_null());
}

TEST_CASE("sup-exceedance rate and backward pull-back") {
    const auto w = find_model("schilder-window").coefficients;
    const TimeGrid g(0, 1, 32);
    const double x[1] = {0.0};
    const RateResult r = rate_forward(w, x, sup_event(EventKind::SupExceedance, 1.0), g, quick());
    CHECK(r.rate == doctest::Approx(0.5).epsilon(1e-3));

    const F0Source chars = F0Source::characteristics(w, w.generator_f);
    const RateResult back = rate_backward(w, x, terminal(1.0, INFINITY), chars, g, quick());
    CHECK(back.rate == doctest::Approx(0.5).epsilon(1e-5));

    // ou-tanh: psi_T = 2 tanh(phi_T / 2) >= c  <=>  phi_T >= 2 atanh(c/2).
    const auto ot = find_model("ou-tanh").coefficients;
    const double x0[1] = {0.2};
    const TimeGrid fine(0, 1, 64);
    const RateResult pb = rate_backward(ot, x0, terminal(1.0, INFINITY), F0Source::characteristics(ot, ot.generator_f), fine, quick());
    const double pull = 2.0 * std::atanh(0.5);
    const RateResult fw = rate_forward(ot, x0, terminal(pull, INFINITY), fine, quick());
    CHECK(pb.rate == doctest::Approx(fw.rate).epsilon(1e-4));
    CHECK(std::abs(pb.rate - oracle::ou_terminal_rate(0.2, pull, 1.0)) <= 0.01 * pb.rate);
}

TEST_CASE("optimizer is deterministic across worker counts") {
    const auto ou = find_model("ou").coefficients;
    const TimeGrid g(0, 1, 16);
    const double x[1] = {0.0};
    set_worker_count(1);
    const RateResult a = rate_forward(ou, x, sup_event(EventKind::SupExceedance, 0.8), g, quick(4));
    set_worker_count(3);
    const RateResult b = rate_forward(ou, x, sup_event(EventKind::SupExceedance, 0.8), g, quick(4));
    set_worker_count(1);
    CHECK(a.rate == b.rate);
    CHECK(a.optimal_control.vdot() == b.optimal_control.vdot());
}

TEST_CASE("Monte Carlo tail estimates") {
    const auto w = find_model("schilder-window").coefficients;
    const double x[1] = {0.0};

    SUBCASE("whole-space event") {
        McConfig cfg;
        cfg.paths = 256;
        cfg.steps = 16;
        const McTable t = mc_tail_estimate(w, w.generator_f, 0.0, x, terminal(-INFINITY, INFINITY), {0.5}, cfg);
        CHECK(t.rows[0].p_hat == 1.0);
        CHECK(t.rows[0].eps2_log_p() == 0.0);
    }

    SUBCASE("reflection principle under tilts") {
        McConfig cfg;
        cfg.paths = 10000;
        cfg.steps = 64;
        cfg.tilt_below = 0.2;
        const TimeGrid g(0, 1, 64);
        cfg.tilts = {ControlPath::constant(g, {1.0}), ControlPath::constant(g, {-1.0})};
        std::vector<double> eps;
        for (const auto& row : oracle::kReflection) eps.push_back(row.eps);
        const McTable t = mc_tail_estimate(w, w.generator_f, 0.0, x, sup_event(EventKind::SupExceedance, 1.0), eps, cfg);
        REQUIRE(t.rows.size() == eps.size());
        for (std::size_t k = 0; k < eps.size(); ++k) {
            const auto& row = t.rows[k];
            CHECK_FALSE(row.censored);
            CHECK(row.tilted == (eps[k] <= 0.2));
            const double exact = oracle::sup_abs_tail(1.0 / eps[k]);
            CHECK(exact == doctest::Approx(oracle::kReflection[k].p).epsilon(1e-6));
            CHECK(std::abs(row.p_hat - exact) <= 3.0 * row.std_error);
        }
    }

    SUBCASE("tilted and crude estimates agree where crude is reliable") {
        const TimeGrid g(0, 1, 32);
        McConfig crude;
        crude.paths = 20000;
        crude.steps = 32;
        McConfig tilted = crude;
        tilted.tilts = {ControlPath::constant(g, {1.0})};
        const EventSpec e = terminal(0.8, INFINITY);
        const McRow a = mc_tail_estimate(w, w.generator_f, 0.0, x, e, {0.5}, crude).rows[0];
        const McRow b = mc_tail_estimate(w, w.generator_f, 0.0, x, e, {0.5}, tilted).rows[0];
        CHECK(std::abs(a.p_hat - b.p_hat) <= 3.0 * std::hypot(a.std_error, b.std_error));
        CHECK(b.std_error < a.std_error);
        CHECK(std::abs(a.p_hat - oracle::normal_upper(1.6)) <= 3.0 * a.std_error);
    }

    SUBCASE("censoring") {
        McConfig cfg;
        cfg.paths = 200;
        cfg.steps = 16;
        const McTable t = mc_tail_estimate(w, w.generator_f, 0.0, x, terminal(3.0, INFINITY), {0.1}, cfg);
        CHECK(t.rows[0].censored);
        CHECK(t.rows[0].upper_bound == doctest::Approx(3.0 / 200));
        CHECK(std::isnan(t.rows[0].eps2_log_p()));
        CHECK_FALSE(t.warnings.empty());
    }
}

TEST_CASE("gap report") {
    RateResult lo, hi;
    lo.rate = 0.49;
    hi.rate = 0.51;
    McTable t;
    const auto row = [](double eps, double p, double se) {
        McRow r;
        r.epsilon = eps;
        r.p_hat = p;
        r.std_error = se;
        r.hits = 100;
        return r;
    };
    t.rows = {row(0.4, 0.0248, 1e-4), row(0.2, 1.15e-6, 1e-8), row(0.1, 3.05e-23, 1e-25)};
    const LdpGapReport rep = ldp_gap_report(hi, lo, t);
    CHECK(rep.testable());
    CHECK(*rep.reliable_epsilon == 0.1);
    CHECK(rep.slack == doctest::Approx(0.25 * 0.51));
    CHECK(rep.sandwich_holds);
    CHECK(rep.trend_nonincreasing);
    CHECK(rep.passed());

    McTable rising = t;
    rising.rows[2] = row(0.1, 1e-30, 1e-32);
    rising.rows[1] = row(0.2, 1e-40, 1e-42);
    CHECK_FALSE(ldp_gap_report(hi, lo, rising).trend_nonincreasing);

    McTable far = t;
    far.rows[2] = row(0.1, 1e-100, 1e-102);  // eps^2 log P = -2.3, well below -I - slack
    CHECK_FALSE(ldp_gap_report(hi, lo, far).sandwich_holds);

    McTable none;
    McRow c = row(0.1, 0.0, 0.0);
    c.censored = true;
    c.hits = 0;
    c.upper_bound = 3e-4;
    none.rows = {c};
    const LdpGapReport untestable = ldp_gap_report(hi, lo, none);
    CHECK_FALSE(untestable.testable());
    CHECK_FALSE(untestable.passed());

    RateResult inf;
    inf.infinite = true;
    std::ostringstream out;
    write_csv(ldp_gap_report(inf, lo, none), out);
    const std::string s = out.str();
    CHECK(s.rfind("eps,P_hat,stderr,eps2_logP,rate_int,rate_cl,verdict\n", 0) == 0);
    CHECK(s.find("infeasible") != std::string::npos);
    CHECK(s.find("censored") != std::string::npos);
}
