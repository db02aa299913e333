#include "doctest.h"
#include "oracles.hpp"

#include "qbsde/errors.hpp"
#include "qbsde/forward.hpp"
#include "qbsde/parallel.hpp"

#include <cmath>
#include <sstream>

using namespace qbsde;

namespace {

CoefficientSet drift_model(std::function<double(double)> b, double L = 1.0) {
    CoefficientSet c = find_model("zero").coefficients;
    c.drift_b = [b](double, std::span<const double> x, std::span<double> out) { out[0] = b(x[0]); };
    c.const_L = L;
    return c;
}

const double kOrigin[1] = {0.0};

}  // namespace

TEST_CASE("time grid ends exactly at T") {
    const TimeGrid g(0.1, 0.7, 3);
    CHECK(g.node(3) == 0.7);
    CHECK(g.delta() == doctest::Approx(0.2));
    CHECK(g.index_of(0.5) == 2);
    CHECK(g.index_of(0.55) == -1);
    CHECK_THROWS_AS(TimeGrid(0.5, 0.5, 4), ConfigError);
    CHECK_THROWS_AS(TimeGrid(0.0, 1.0, 0), ConfigError);
}

TEST_CASE("Brownian increments: moments and reproducibility") {
    const TimeGrid g(0, 1, 16);
    const std::size_t M = 20000;
    set_worker_count(1);
    const BrownianBatch a = BrownianBatch::generate(g, M, 2, 99);
    set_worker_count(3);
    const BrownianBatch b = BrownianBatch::generate(g, M, 2, 99);
    set_worker_count(1);
    CHECK(a.increments == b.increments);
    for (int i = 0; i < g.steps(); ++i) {
        for (int j = 0; j < 2; ++j) {
            double s = 0.0, s2 = 0.0;
            for (std::size_t p = 0; p < M; ++p) {
                s += a.dw(p, i, j);
                s2 += a.dw(p, i, j) * a.dw(p, i, j);
            }
            CHECK(std::abs(s / M) <= 4.0 * std::sqrt(g.delta() / M));
            CHECK(s2 / M == doctest::Approx(g.delta()).epsilon(0.05));
        }
    }
    CHECK(BrownianBatch::generate(g, 10, 1, 1).increments != BrownianBatch::generate(g, 10, 1, 2).increments);
}

TEST_CASE("zero drift unit volatility reproduces the Brownian path") {
    const auto c = find_model("zero").coefficients;
    const TimeGrid g(0, 1, 32);
    const BrownianBatch w = BrownianBatch::generate(g, 50, 1, 4);
    const SamplePathBatch x = simulate_sde(c, 0, kOrigin, 1.0, g, w);
    for (std::size_t p = 0; p < 50; ++p) {
        double s = 0.0;
        for (int i = 0; i < g.steps(); ++i) s += w.dw(p, i, 0);
        CHECK(x.at(p, g.steps()) == s);
    }
    const double x1[1] = {0.3};
    const SamplePathBatch still = simulate_sde(c, 0, x1, 0.0, g, w);
    for (double v : still.values) CHECK(v == 0.3);
}

TEST_CASE("Euler and RK4 on the OU drift") {
    const auto c = find_model("ou").coefficients;
    const double x1[1] = {1.0};
    const TimeGrid g(0, 1, 100);
    const BrownianBatch w = BrownianBatch::generate(g, 2, 1, 1);
    const SamplePathBatch e = simulate_sde(c, 0, x1, 0.0, g, w);
    CHECK(std::abs(e.at(0, 100) - std::exp(-1.0)) <= 2.0 * g.delta());
    const SamplePathBatch phi = solve_ode(c, 0, x1, g);
    CHECK(std::abs(phi.at(0, 100) - std::exp(-1.0)) <= 1e-8);
    // eps = 0 is the Euler ODE bit for bit.
    const SamplePathBatch eu = euler_ode(c, 0, x1, g);
    for (int i = 0; i <= 100; ++i) CHECK(eu.at(0, i) == e.at(0, i));
}

TEST_CASE("RK4 integrates constant drift exactly and leaves zero drift still") {
    const auto c = drift_model([](double) { return 1.0; });
    const TimeGrid g(0.25, 1, 12);
    const SamplePathBatch phi = solve_ode(c, 0.25, kOrigin, g);
    for (int i = 0; i <= 12; ++i) CHECK(phi.at(0, i) == doctest::Approx(g.node(i) - 0.25).epsilon(1e-14));
    const double x1[1] = {0.4};
    const SamplePathBatch flat = solve_ode(find_model("zero").coefficients, 0.25, x1, g);
    for (double v : flat.values) CHECK(v == 0.4);
}

TEST_CASE("dimension and grid mismatches are configuration errors") {
    const auto c = find_model("zero").coefficients;
    const TimeGrid g(0, 1, 8);
    const BrownianBatch w = BrownianBatch::generate(g, 4, 1, 1);
    const double x2[2] = {0, 0};
    CHECK_THROWS_AS(simulate_sde(c, 0, x2, 1.0, g, w), ConfigError);
    CHECK_THROWS_AS(simulate_sde(c, 0, kOrigin, 1.0, TimeGrid(0, 1, 9), w), ConfigError);
    CHECK_THROWS_AS(simulate_sde(c, 0.5, kOrigin, 1.0, g, w), ConfigError);
    const SamplePathBatch a = simulate_sde(c, 0, kOrigin, 1.0, g, w);
    const SamplePathBatch phi = solve_ode(c, 0, kOrigin, TimeGrid(0, 1, 16));
    CHECK_THROWS_AS(perturbation_gap(a, phi), ConfigError);
}

TEST_CASE("perturbation gap: zero at eps = 0, eps^2 E[sup W^2] for Brownian motion") {
    const auto c = find_model("zero").coefficients;
    const TimeGrid g(0, 1, 256);
    const BrownianBatch w = BrownianBatch::generate(g, 20000, 1, 12);
    const SamplePathBatch phi = euler_ode(c, 0, kOrigin, g);
    CHECK(perturbation_gap(simulate_sde(c, 0, kOrigin, 0.0, g, w), phi).mean == 0.0);
    const MeanEstimate one = perturbation_gap(simulate_sde(c, 0, kOrigin, 1.0, g, w), phi);
    const MeanEstimate half = perturbation_gap(simulate_sde(c, 0, kOrigin, 0.5, g, w), phi);
    CHECK(half.mean == doctest::Approx(0.25 * one.mean).epsilon(1e-12));
    // Grid monitoring misses part of the continuous supremum, so the discrete value sits below.
    CHECK(one.mean <= oracle::kSupAbsSquare + 3.0 * one.std_error);
    CHECK(one.mean >= 0.9 * oracle::kSupAbsSquare);
}

TEST_CASE("small-noise slope is 2 on every noisy built-in") {
    for (const auto& e : builtin_models()) {
        const auto& c = e.coefficients;
        if (c.vol_sigma(0.0).norm() == 0.0) continue;
        CAPTURE(e.name);
        const TimeGrid g(0, c.horizon_T, 64);
        const BrownianBatch w = BrownianBatch::generate(g, 4000, c.dims.d, 21);
        std::vector<double> x(c.dims.m, 0.1);
        const SamplePathBatch phi = euler_ode(c, 0, x, g);
        std::vector<double> le, lg;
        for (double eps : {0.4, 0.2, 0.1, 0.05}) {
            le.push_back(std::log(eps));
            lg.push_back(std::log(perturbation_gap(simulate_sde(c, 0, x, eps, g, w), phi).mean));
        }
        const double slope = fit_line(le, lg).slope;
        CHECK(slope >= 1.8);
        CHECK(slope <= 2.2);
    }
}

TEST_CASE("pathwise bound with bounded drift") {
    const double L = 1.0;
    const auto c = drift_model([](double x) { return std::sin(x); }, L);
    const TimeGrid g(0, 1, 64);
    const BrownianBatch w = BrownianBatch::generate(g, 500, 1, 8);
    const double x0[1] = {0.7};
    const double eps = 0.3;
    const SamplePathBatch x = simulate_sde(c, 0, x0, eps, g, w);
    for (std::size_t p = 0; p < 500; ++p) {
        double integral = 0.0, sup_integral = 0.0, sup_x = 0.0;
        for (int i = 0; i <= g.steps(); ++i) {
            sup_x = std::max(sup_x, std::abs(x.at(p, i)));
            sup_integral = std::max(sup_integral, std::abs(integral));
            if (i < g.steps()) integral += w.dw(p, i, 0);
        }
        CHECK(sup_x <= 0.7 + L * 1.0 + eps * sup_integral + 1e-12);
    }
}

TEST_CASE("flow continuity under common noise") {
    const auto zero = find_model("zero").coefficients;
    const TimeGrid g(0, 1, 64);
    const BrownianBatch w = BrownianBatch::generate(g, 2000, 1, 3);
    const FlowStart a{0.0, {0.2}, 0.5};
    CHECK(flow_continuity_gap(zero, a, a, g, w).mean == 0.0);
    const FlowStart b{0.0, {0.35}, 0.5};
    CHECK(flow_continuity_gap(zero, a, b, g, w).mean == doctest::Approx(0.15 * 0.15).epsilon(1e-12));

    const auto ou = find_model("ou").coefficients;
    const FlowStart base{0.0, {0.1}, 0.3};
    const FlowStart far{0.0, {0.3}, 0.5};
    const FlowStart near{0.0, {0.2}, 0.4};
    const double ratio = flow_continuity_gap(ou, base, far, g, w).mean / flow_continuity_gap(ou, base, near, g, w).mean;
    CHECK(ratio >= 3.5);
    CHECK(ratio <= 4.5);
    // Later start: X^{t',x} = x before t'.
    const FlowStart late{0.25, {0.1}, 0.3};
    CHECK(flow_continuity_gap(ou, base, late, g, w).mean > 0.0);
}

TEST_CASE("CSV and binary export") {
    const auto c = find_model("ou").coefficients;
    const TimeGrid g(0, 1, 4);
    const BrownianBatch w = BrownianBatch::generate(g, 3, 1, 5);
    const SamplePathBatch x = simulate_sde(c, 0, kOrigin, 1.0, g, w);
    std::ostringstream csv;
    write_csv(x, csv);
    CHECK(csv.str().rfind("path,node,time,v0\n", 0) == 0);
    std::size_t lines = 0;
    for (char ch : csv.str()) lines += ch == '\n';
    CHECK(lines == 1 + 3 * 5);

    std::stringstream bin;
    write_binary(x, bin);
    CHECK(bin.str().substr(0, 8) == "QBSDUMP1");
    const SamplePathBatch back = read_binary(bin);
    CHECK(back.values == x.values);
    CHECK(back.grid == x.grid);
    CHECK(back.seed == x.seed);
    std::stringstream junk("NOTADUMP");
    CHECK_THROWS(read_binary(junk));
}
