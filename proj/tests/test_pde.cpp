#include "doctest.h"
#include "oracles.hpp"

#include "qbsde/errors.hpp"
#include "qbsde/pde.hpp"

#include <cmath>
#include <sstream>

using namespace qbsde;

namespace {

CoefficientSet model(GeneratorFn f, TerminalFn g, double sigma = 1.0) {
    CoefficientSet c = find_model("zero").coefficients;
    c.generator_f = std::move(f);
    c.terminal_g = std::move(g);
    c.vol_sigma = [sigma](double) { return Eigen::MatrixXd::Constant(1, 1, sigma); };
    c.const_L = std::max(1.0, sigma);
    return c;
}

double sup_error_heat(double h, int steps) {
    const auto e = find_model("heat-sine");
    const auto& c = e.coefficients;
    const SpaceLattice lat = SpaceLattice::around(c, {-1.0}, {1.0}, 1.0, h);
    const PdeSolution u = solve_semilinear(c, c.generator_f, 1.0, lat, TimeGrid(0.5, 1.0, steps));
    double err = 0.0;
    for (double x = -1.0; x <= 1.0 + 1e-12; x += 0.125) {
        const double xx[1] = {x};
        err = std::max(err, std::abs(u.value(0, xx) - std::sin(x) * std::exp(-0.5)));
    }
    return err;
}

}  // namespace

TEST_CASE("constants are invariant") {
    const auto c = model([](double, double, std::span<const double>) { return 0.0; },
                         [](std::span<const double>) { return 0.42; });
    const SpaceLattice lat = SpaceLattice::around(c, {-0.5}, {0.5}, 1.0, 0.05);
    const PdeSolution u = solve_semilinear(c, c.generator_f, 1.0, lat, TimeGrid(0, 1, 50));
    for (double v : u.u) CHECK(v == doctest::Approx(0.42).epsilon(1e-13));
}

TEST_CASE("heat equation with sine data against the closed form") {
    CHECK(sup_error_heat(0.01, 512) <= 1e-3);
    // Halving h and delta shrinks the error at least at first order.
    const double coarse = sup_error_heat(0.04, 64), fine = sup_error_heat(0.02, 128);
    CHECK(fine <= coarse / 1.6);
}

TEST_CASE("quadratic generator against Cole-Hopf quadrature") {
    const auto c = find_model("quadratic-gamma-1").coefficients;
    const SpaceLattice lat = SpaceLattice::around(c, {-0.5}, {0.5}, 1.0, 0.01);
    const PdeSolution u = solve_semilinear(c, c.generator_f, 1.0, lat, TimeGrid(0.5, 1.0, 512));
    const double x0[1] = {0.0};
    CHECK(u.value(0, x0) == doctest::Approx(oracle::kColeHopfHalf).epsilon(2e-3 / oracle::kColeHopfHalf));
    const double x1[1] = {0.4};
    const double ref = oracle::cole_hopf([](double v) { return std::sin(v); }, 1.0, 0.5, 0.4);
    CHECK(std::abs(u.value(0, x1) - ref) <= 2e-3);
}

TEST_CASE("terminal slice equals g and values stay within the bound") {
    const auto c = find_model("ou").coefficients;
    const SpaceLattice lat = SpaceLattice::around(c, {-0.5}, {0.5}, 0.5, 0.02);
    const TimeGrid g(0, 1, 256);
    const PdeSolution u = solve_semilinear(c, c.generator_f, 0.5, lat, g);
    for (std::size_t j = 0; j < lat.size(); ++j) {
        const auto x = lat.point(j);
        CHECK(u.node_value(g.steps(), j) == c.terminal_g(x));
    }
    for (double v : u.u) CHECK(std::abs(v) <= c.m_bound());
}

TEST_CASE("discrete comparison: ordered data give ordered solutions") {
    const auto q = find_model("quadratic-gamma-1").coefficients;
    CoefficientSet low = q;
    low.terminal_g = [](std::span<const double> x) { return std::sin(x[0]) - 0.2 * std::cos(x[0]) * std::cos(x[0]); };
    const SpaceLattice lat = SpaceLattice::around(q, {-0.5}, {0.5}, 1.0, 0.02);
    const TimeGrid g(0, 1, 256);
    const PdeSolution hi = solve_semilinear(q, q.generator_f, 1.0, lat, g);
    const PdeSolution lo = solve_semilinear(low, q.generator_f, 1.0, lat, g);
    for (std::size_t k = 0; k < hi.u.size(); ++k) CHECK(lo.u[k] <= hi.u[k] + 1e-12);
}

TEST_CASE("first-order problems") {
    const auto lin = find_model("first-order-linear").coefficients;
    const SpaceLattice lat = SpaceLattice::with_spacing({-1.0}, {1.0}, 0.05);
    const TimeGrid g(0, 1, 400);
    const PdeSolution u = solve_first_order(lin, lin.generator_f, g, lat);
    const double x0[1] = {0.3};
    for (int i : {0, 100, 300}) CHECK(u.value(i, x0) == doctest::Approx(std::exp(g.node(i) - 1.0)).epsilon(5e-3));

    // f(.,.,0) = 0 under the OU drift: u^0(t, x) = g(phi^{t,x}_T) = sin(x e^{-(T-t)}).
    CoefficientSet transport = find_model("ou").coefficients;
    transport.generator_f = [](double, double, std::span<const double> z) { return z[0] * z[0]; };
    const SpaceLattice wide = SpaceLattice::around(transport, {-1.0}, {1.0}, 0.0, 0.01);
    const PdeSolution v = solve_first_order(transport, transport.generator_f, TimeGrid(0, 1, 400), wide);
    for (double x : {-0.8, 0.0, 0.5}) {
        const double xx[1] = {x};
        CHECK(std::abs(v.value(0, xx) - std::sin(x * std::exp(-1.0))) <= 5e-3);
    }

    const auto ou = find_model("ou").coefficients;
    const PdeSolution w = solve_first_order(ou, ou.generator_f, TimeGrid(0, 1, 400), wide, {{-0.5}, {0.0}, {0.7}});
    CHECK(w.characteristics.size() == 3);
    CHECK(w.characteristics_worst <= 5e-3);
}

TEST_CASE("drift CFL violation names a step count") {
    const auto ou = find_model("ou").coefficients;
    const SpaceLattice lat = SpaceLattice::around(ou, {-1.0}, {1.0}, 1.0, 0.005);
    try {
        solve_semilinear(ou, ou.generator_f, 1.0, lat, TimeGrid(0, 1, 16));
        FAIL("expected a configuration error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("N >=") != std::string::npos);
    }
}

TEST_CASE("lattice construction and margin") {
    const auto c = find_model("heat-sine").coefficients;
    const SpaceLattice lat = SpaceLattice::around(c, {-1.0}, {1.0}, 1.0, 0.1);
    const double margin = c.const_L * c.horizon_T + 4.0 * std::sqrt(2.0) * 1.0;
    CHECK(lat.lo(0) <= -1.0 - margin + 1e-12);
    CHECK(lat.hi(0) >= 1.0 + margin - 1e-12);
    const double lo[1] = {-1.0}, hi[1] = {1.0};
    CHECK_NOTHROW(lat.check_margin(c, lo, hi, 1.0));
    const SpaceLattice tight = SpaceLattice::with_spacing({-2.0}, {2.0}, 0.1);
    CHECK_THROWS_AS(tight.check_margin(c, lo, hi, 1.0), ConfigError);
    CHECK_THROWS_AS(SpaceLattice({0, 0, 0}, {1, 1, 1}, {5, 5, 5}), ConfigError);
    CHECK(boundary_mode_from_string("dirichlet-frozen") == BoundaryMode::DirichletFrozen);
    CHECK_THROWS_AS(boundary_mode_from_string("periodic"), ConfigError);
}

TEST_CASE("interpolation refuses points outside the box") {
    const auto c = find_model("heat-sine").coefficients;
    const SpaceLattice lat = SpaceLattice::with_spacing({-6.0}, {6.0}, 0.1);
    const PdeSolution u = solve_semilinear(c, c.generator_f, 1.0, lat, TimeGrid(0, 1, 32));
    const double out[1] = {7.0};
    CHECK_THROWS_AS(u.value(0, out), EvaluationError);
}

TEST_CASE("two-dimensional heat equation") {
    CoefficientSet c;
    c.dims = {2, 2};
    c.const_L = 3.0;
    c.drift_b = [](double, std::span<const double>, std::span<double> out) { out[0] = out[1] = 0.0; };
    c.vol_sigma = [](double) { return Eigen::MatrixXd(Eigen::MatrixXd::Identity(2, 2) * std::sqrt(2.0)); };
    c.generator_f = [](double, double, std::span<const double>) { return 0.0; };
    c.terminal_g = [](std::span<const double> x) { return std::sin(x[0]) + std::sin(x[1]); };
    const SpaceLattice lat = SpaceLattice::around(c, {-0.5, -0.5}, {0.5, 0.5}, 0.5, 0.05);
    const PdeSolution u = solve_semilinear(c, c.generator_f, 0.5, lat, TimeGrid(0, 1, 100));
    // eps = 1/2: a = 2 I, generator eps^2/2 a : D^2 = (1/4) Laplacian, so u = e^{-(T-t)/4} g.
    const double x[2] = {0.3, -0.2};
    CHECK(std::abs(u.value(0, x) - std::exp(-0.25) * (std::sin(0.3) + std::sin(-0.2))) <= 2e-3);
}

TEST_CASE("ladder convergence in sup norm") {
    const auto zero = find_model("zero").coefficients;
    const SpaceLattice lat0 = SpaceLattice::around(zero, {-0.5}, {0.5}, 1.0, 0.05);
    const CompactBox box{0.0, 0.5, {-0.5}, {0.5}};
    const auto r0 = ladder_uniform_convergence(zero, GeneratorLadder(zero, {2, 4, 8}), 1.0, lat0, TimeGrid(0, 1, 64), box);
    for (double gap : r0.sup_gaps) CHECK(gap == 0.0);

    const auto zsq = find_model("z-square").coefficients;
    const SpaceLattice lat = SpaceLattice::around(zsq, {-0.5}, {0.5}, 1.0, 0.05);
    const auto r = ladder_uniform_convergence(zsq, GeneratorLadder(zsq, {2, 4, 8, 16}), 1.0, lat, TimeGrid(0, 1, 64), box);
    CHECK(r.gaps_nonincreasing);
    CHECK(r.monotone_violations == 0);
    CHECK(r.sup_gaps.front() > r.sup_gaps[r.sup_gaps.size() - 2]);
    CHECK(r.passed());
}

TEST_CASE("Feynman-Kac cross-check") {
    const auto flat = model([](double, double, std::span<const double>) { return 0.0; },
                            [](std::span<const double>) { return -0.3; });
    const SpaceLattice lat0 = SpaceLattice::around(flat, {-0.5}, {0.5}, 1.0, 0.05);
    const PdeSolution u0 = solve_semilinear(flat, flat.generator_f, 1.0, lat0, TimeGrid(0, 1, 64));
    FeynmanKacConfig cfg;
    cfg.paths = 500;
    cfg.steps = 16;
    const auto r0 = feynman_kac_crosscheck(u0, flat, flat.generator_f, {{0.0, {0.0}}}, cfg);
    CHECK(r0.points[0].lsmc == doctest::Approx(-0.3));
    CHECK(r0.passed());

    const auto heat = find_model("heat-sine").coefficients;
    const SpaceLattice lat = SpaceLattice::around(heat, {-1.0}, {1.0}, 1.0, 0.02);
    const PdeSolution u = solve_semilinear(heat, heat.generator_f, 1.0, lat, TimeGrid(0, 1, 256));
    cfg.paths = 8000;
    cfg.steps = 32;
    const auto r = feynman_kac_crosscheck(u, heat, heat.generator_f, {{0.0, {-0.6}}, {0.5, {0.0}}, {0.25, {0.9}}}, cfg);
    CHECK(r.passed());
    CHECK(r.to_json().contains("worst"));
}

TEST_CASE("slice export and tensor dump") {
    const auto c = find_model("heat-sine").coefficients;
    const SpaceLattice lat = SpaceLattice::with_spacing({-6.0}, {6.0}, 0.5);
    const PdeSolution u = solve_semilinear(c, c.generator_f, 1.0, lat, TimeGrid(0, 1, 8));
    std::ostringstream out;
    write_slice_csv(u, 0, out);
    CHECK(out.str().rfind("x,u\n", 0) == 0);
    const SamplePathBatch b = to_batch(u);
    CHECK(b.paths == lat.size());
    CHECK(b.at(3, 8) == u.node_value(8, 3));
}
