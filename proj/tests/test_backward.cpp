#include "doctest.h"
#include "oracles.hpp"

#include "qbsde/backward.hpp"
#include "qbsde/errors.hpp"

#include <cmath>
#include <sstream>

using namespace qbsde;

namespace {

CoefficientSet model(GeneratorFn f, TerminalFn g, double sigma = 1.0) {
    CoefficientSet c = find_model("zero").coefficients;
    c.generator_f = std::move(f);
    c.terminal_g = std::move(g);
    c.vol_sigma = [sigma](double) { return Eigen::MatrixXd::Constant(1, 1, sigma); };
    return c;
}

double sine(std::span<const double> x) { return std::sin(x[0]); }
double zero_f(double, double, std::span<const double>) { return 0.0; }

struct Setup {
    TimeGrid grid;
    BrownianBatch noise;
    SamplePathBatch x;
    Setup(const CoefficientSet& c, double t, double x0, int steps, std::size_t paths, std::uint64_t seed,
          double eps = 1.0)
        : grid(t, c.horizon_T, steps), noise(BrownianBatch::generate(grid, paths, c.dims.d, seed)) {
        const double xx[1] = {x0};
        x = simulate_sde(c, t, xx, eps, grid, noise);
    }
};

}  // namespace

TEST_CASE("constant terminal, zero generator") {
    const auto c = model(zero_f, [](std::span<const double>) { return 0.35; });
    Setup s(c, 0, 0, 16, 2000, 1);
    const BsdeSolution sol = solve_bsde_lsmc(c, c.generator_f, s.x, s.noise);
    CHECK(sol.y0 == doctest::Approx(0.35).epsilon(1e-12));
    for (double y : sol.y_paths.values) CHECK(y == doctest::Approx(0.35).epsilon(1e-12));
    for (int i = 0; i < 16; ++i) CHECK(std::abs(sol.z_paths.at(0, i)) <= 1e-10);
}

TEST_CASE("deterministic linear generator decays like exp(t - T)") {
    const auto e = find_model("first-order-linear");
    Setup s(e.coefficients, 0, 0, 200, 50, 1);
    const BsdeSolution sol = solve_bsde_lsmc(e.coefficients, e.coefficients.generator_f, s.x, s.noise);
    CHECK(sol.y0 == doctest::Approx(std::exp(-1.0)).epsilon(5e-3));
    CHECK(sol.y0_std_error == doctest::Approx(0.0));
}

TEST_CASE("quadratic generator matches the Cole-Hopf value") {
    const auto e = find_model("quadratic-gamma-1");
    Setup s(e.coefficients, 0.5, 0.0, 32, 10000, 17);
    const BsdeSolution sol = solve_bsde_lsmc(e.coefficients, e.coefficients.generator_f, s.x, s.noise);
    const double allowed = std::max(3.0 * sol.y0_std_error, 0.02 * oracle::kColeHopfHalf);
    CHECK(std::abs(sol.y0 - oracle::kColeHopfHalf) <= allowed);
    CHECK(sol.scheme_meta.sup_abs_y <= e.coefficients.m_bound());
}

TEST_CASE("terminal consistency, clipping bound, and the zero-generator mean") {
    const auto c = model(zero_f, sine);
    Setup s(c, 0, 0.3, 24, 5000, 2);
    const BsdeSolution sol = solve_bsde_lsmc(c, c.generator_f, s.x, s.noise);
    double mean = 0.0;
    for (std::size_t p = 0; p < 5000; ++p) {
        CHECK(sol.y_paths.at(p, 24) == std::sin(s.x.at(p, 24)));
        mean += std::sin(s.x.at(p, 24));
    }
    mean /= 5000.0;
    CHECK(std::abs(sol.y0 - mean) <= 1e-10);
    for (double y : sol.y_paths.values) CHECK(std::abs(y) <= c.m_bound());
}

TEST_CASE("step size against L and ill-conditioning") {
    auto c = model(zero_f, sine);
    c.const_L = 40.0;
    Setup s(c, 0, 0, 32, 200, 3);
    CHECK_THROWS_AS(solve_bsde_lsmc(c, c.generator_f, s.x, s.noise), ConfigError);

    const auto q = find_model("quadratic-gamma-1").coefficients;
    Setup t(q, 0, 0, 8, 500, 3);
    LsmcConfig cfg;
    cfg.degree = 6;
    cfg.condition_limit = 10.0;
    const BsdeSolution sol = solve_bsde_lsmc(q, q.generator_f, t.x, t.noise, cfg);
    CHECK(sol.scheme_meta.degraded_nodes > 0);
    CHECK_FALSE(sol.scheme_meta.warnings.empty());

    const BrownianBatch other = BrownianBatch::generate(t.grid, 500, 1, 4);
    CHECK_THROWS_AS(solve_bsde_lsmc(q, q.generator_f, t.x, other), ConfigError);
}

TEST_CASE("backward ODE limits") {
    const TimeGrid g(0, 1, 50);
    const double x0[1] = {0.4};
    const auto flat = model(zero_f, sine);
    const BackwardOdePath a = solve_backward_ode(flat, flat.generator_f, solve_ode(flat, 0, x0, g));
    for (double v : a.values) CHECK(v == std::sin(0.4));

    const auto lin = find_model("first-order-linear").coefficients;
    const BackwardOdePath b = solve_backward_ode(lin, lin.generator_f, solve_ode(lin, 0, x0, g));
    CHECK(b.values.front() == doctest::Approx(std::exp(-1.0)).epsilon(1e-9));
    CHECK(b.terminal == 1.0);

    const auto zsq = find_model("z-square").coefficients;
    const GeneratorLadder lad(zsq, {4, 16});
    const BackwardOdePath c = solve_backward_ode(zsq, lad.rung(4), solve_ode(zsq, 0, x0, g));
    for (double v : c.values) CHECK(v == doctest::Approx(std::sin(0.4)).epsilon(1e-12));
}

TEST_CASE("ladder on the zero model is flat") {
    const auto c = find_model("zero").coefficients;
    Setup s(c, 0, 0, 16, 1000, 5);
    const LadderSolution lad = monotone_ladder_solve(c, GeneratorLadder(c, {2, 4, 8}), s.x, s.noise);
    CHECK(lad.monotone());
    for (const auto& sol : lad.solutions) {
        for (double y : sol.y_paths.values) CHECK(y == 0.0);
    }
}

TEST_CASE("square-generator ladder increases in n with shrinking gaps") {
    const auto c = find_model("z-square").coefficients;
    Setup s(c, 0, 0, 32, 4000, 6);
    const LadderSolution lad = monotone_ladder_solve(c, GeneratorLadder(c, {4, 8, 16, 32}), s.x, s.noise);
    CHECK(lad.monotone());
    for (std::size_t k = 1; k < lad.solutions.size(); ++k) CHECK(lad.solutions[k].y0 >= lad.solutions[k - 1].y0);
    for (std::size_t k = 1; k < lad.sup_node_gaps.size(); ++k) CHECK(lad.sup_node_gaps[k] <= lad.sup_node_gaps[k - 1]);
    CHECK(lad.to_json().contains("sup_node_gaps"));
}

TEST_CASE("comparison of terminal data") {
    const auto c = model(zero_f, sine);
    Setup s(c, 0, 0, 16, 3000, 7);
    const ComparisonReport same = comparison_check(c, c.generator_f, sine, sine, s.x, s.noise);
    CHECK(same.y0_low == same.y0_high);
    CHECK(same.passed());
    const ComparisonReport shifted = comparison_check(
        c, c.generator_f, [](std::span<const double> x) { return std::sin(x[0]) - 0.1; }, sine, s.x, s.noise);
    CHECK(shifted.y0_high - shifted.y0_low == doctest::Approx(0.1).epsilon(1e-9));
    CHECK(shifted.passed());

    const auto q = find_model("quadratic-gamma-1").coefficients;
    const ComparisonReport quad = comparison_check(
        q, q.generator_f, [](std::span<const double> x) { return 0.5 * std::sin(x[0]) - 0.5; }, sine, s.x, s.noise);
    CHECK(quad.passed());
    CHECK_THROWS_AS(comparison_check(c, c.generator_f, sine, [](std::span<const double>) { return -2.0; }, s.x, s.noise),
                    ConfigError);
}

TEST_CASE("regularity constants vanish on the zero model") {
    const auto c = find_model("zero").coefficients;
    RegularityConfig cfg;
    cfg.x_points = {{0.0}};
    cfg.paths = 300;
    cfg.steps = 16;
    const RegularityReport r = apriori_regularity_check(c, GeneratorLadder(c, {2, 8}), {2, 8}, cfg);
    for (const auto& row : r.rows) {
        CHECK(row.c_x == 0.0);
        CHECK(row.c_t == 0.0);
    }
}

TEST_CASE("small-noise backward gap: zero model and noiseless model") {
    const TimeGrid g(0, 1, 32);
    const double x0[1] = {0.2};
    const auto z = find_model("zero").coefficients;
    const SmallNoiseTable a = small_noise_backward_gap(z, z.generator_f, {0.4, 0.1}, 0, x0, g, 500, 1);
    for (const auto& row : a.rows) CHECK(row.gap.mean == 0.0);

    const auto lin = find_model("first-order-linear").coefficients;
    const SmallNoiseTable b = small_noise_backward_gap(lin, lin.generator_f, {0.4, 0.1}, 0, x0, TimeGrid(0, 1, 256), 200, 1);
    for (const auto& row : b.rows) CHECK(row.gap.mean <= 1e-6);
    CHECK(b.rk4_discrepancy < 1e-2);
}

TEST_CASE("solution CSV carries y0 and node means") {
    const auto c = model(zero_f, sine);
    Setup s(c, 0, 0, 4, 100, 8);
    const BsdeSolution sol = solve_bsde_lsmc(c, c.generator_f, s.x, s.noise);
    std::ostringstream out;
    write_csv(sol, out);
    CHECK(out.str().rfind("y0,std_error\n", 0) == 0);
    CHECK(out.str().find("node,time,mean_y,se_y,mean_z0\n") != std::string::npos);
    CHECK(sol.scheme_meta.to_json().contains("clip_bound"));
}
