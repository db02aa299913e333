#include "qbsde/genapprox.hpp"
#include "qbsde/errors.hpp"
#include "qbsde/numerics.hpp"
#include "qbsde/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace qbsde {

namespace {

std::shared_ptr<const std::vector<double>> build_stencil(int d, double radius, int cells) {
    std::vector<double> axis(static_cast<std::size_t>(cells) + 1);
    for (int k = 0; k <= cells; ++k) axis[k] = -radius + 2.0 * radius * k / cells;
    axis[cells / 2] = 0.0;
    auto out = std::make_shared<std::vector<double>>();
    std::vector<int> idx(static_cast<std::size_t>(d), 0);
    const double r2 = radius * radius * (1.0 + 1e-12);
    for (;;) {
        double n2 = 0.0;
        for (int j = 0; j < d; ++j) n2 += axis[idx[j]] * axis[idx[j]];
        if (n2 <= r2) {
            for (int j = 0; j < d; ++j) out->push_back(axis[idx[j]]);
        }
        int j = d - 1;
        while (j >= 0 && ++idx[j] > cells) idx[j--] = 0;
        if (j < 0) break;
    }
    return out;
}

std::string describe(std::span<const double> v) {
    std::ostringstream os;
    os.precision(17);
    os << "(";
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    os << ")";
    return os.str();
}

struct Minimum {
    std::vector<double> argmin;
    double value = 0.0;
};

Minimum minimize(const GeneratorLadder& ladder, double n, double t, double y,
                 std::span<const double> z) {
    const auto& base = ladder.base();
    const int d = base.dims.d;
    if (static_cast<int>(z.size()) != d) throw ConfigError("inf_convolution: z has wrong dimension");
    if (!ladder.has_rung(n)) throw ConfigError("inf_convolution: n is not a rung of the ladder");

    std::vector<double> v(static_cast<std::size_t>(d));
    const auto objective = [&](std::span<const double> point) {
        const double fv = base.generator_f(t, y, point);
        if (!std::isfinite(fv)) {
            throw EvaluationError("inf_convolution: non-finite f at v=" + describe(point));
        }
        double dist2 = 0.0;
        for (int j = 0; j < d; ++j) dist2 += (z[j] - point[j]) * (z[j] - point[j]);
        return fv + n * dist2;
    };

    const auto& stencil = ladder.stencil();
    const std::size_t points = ladder.stencil_points();
    Minimum best;
    best.value = std::numeric_limits<double>::infinity();
    best.argmin.resize(static_cast<std::size_t>(d));
    for (std::size_t p = 0; p < points; ++p) {
        for (int j = 0; j < d; ++j) v[j] = z[j] + stencil[p * d + j];
        const double val = objective(v);
        if (val < best.value) {  // strict: first (lexicographically smallest) node wins ties
            best.value = val;
            best.argmin = v;
        }
    }

    // Local refinement around the best node, one Brent line search per axis.
    const double cell = 2.0 * ladder.search_radius() / ladder.inner_grid();
    Minimum refined = best;
    const int sweeps = d == 1 ? 1 : 3;
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        for (int j = 0; j < d; ++j) {
            std::vector<double> point = refined.argmin;
            const double lo = std::max(refined.argmin[j] - cell, z[j] - ladder.search_radius());
            const double hi = std::min(refined.argmin[j] + cell, z[j] + ladder.search_radius());
            if (!(hi > lo)) continue;
            const auto [xj, fx] = brent_minimize(
                [&](double s) {
                    point[j] = s;
                    return objective(point);
                },
                lo, hi);
            if (fx < refined.value) {
                refined.value = fx;
                refined.argmin[j] = xj;
            }
        }
    }
    return refined;
}

}  // namespace

GeneratorLadder::GeneratorLadder(CoefficientSet base, std::vector<double> n_values,
                                 double search_radius, int inner_grid)
    : base_(std::move(base)),
      n_values_(std::move(n_values)),
      search_radius_(search_radius),
      inner_grid_(inner_grid + (inner_grid % 2)) {
    base_.validate();
    if (n_values_.empty()) throw ConfigError("GeneratorLadder: at least one rung required");
    for (std::size_t i = 0; i < n_values_.size(); ++i) {
        if (!(n_values_[i] >= 2.0 * base_.const_L)) {
            throw ConfigError("GeneratorLadder: rung n = " + std::to_string(n_values_[i]) +
                              " is below 2L = " + std::to_string(2.0 * base_.const_L));
        }
        if (i > 0 && !(n_values_[i] > n_values_[i - 1])) {
            throw ConfigError("GeneratorLadder: rungs must be strictly increasing");
        }
    }
    if (!(search_radius_ > 0.0)) throw ConfigError("GeneratorLadder: search_radius must be positive");
    if (inner_grid_ < 2) throw ConfigError("GeneratorLadder: inner_grid must be at least 2");
    stencil_ = build_stencil(base_.dims.d, search_radius_, inner_grid_);
}

GeneratorLadder GeneratorLadder::geometric(CoefficientSet base, int rungs, double search_radius,
                                           int inner_grid) {
    std::vector<double> n;
    const double two_l = 2.0 * base.const_L;
    for (int k = 0; k <= rungs - 1; ++k) n.push_back(two_l * std::ldexp(1.0, k));
    return GeneratorLadder(std::move(base), std::move(n), search_radius, inner_grid);
}

bool GeneratorLadder::has_rung(double n) const {
    return std::find(n_values_.begin(), n_values_.end(), n) != n_values_.end();
}

GeneratorFn GeneratorLadder::rung(double n) const {
    if (!has_rung(n)) throw ConfigError("GeneratorLadder::rung: n is not a rung of the ladder");
    return [ladder = *this, n](double t, double y, std::span<const double> z) {
        return inf_convolution(ladder, n, t, y, z);
    };
}

double inf_convolution(const GeneratorLadder& ladder, double n, double t, double y,
                       std::span<const double> z) {
    return minimize(ladder, n, t, y, z).value;
}

std::vector<double> inf_convolution_argmin(const GeneratorLadder& ladder, double n, double t,
                                           double y, std::span<const double> z) {
    return minimize(ladder, n, t, y, z).argmin;
}

bool PropertyReport::witnesses_decreasing() const {
    return std::all_of(witnesses.begin(), witnesses.end(), [&](const ConvergenceWitness& w) {
        return w.gaps.empty() || w.gaps.back() <= w.gaps.front() + tolerance;
    });
}

bool PropertyReport::all_passed() const {
    return witnesses_decreasing() &&
           std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed(); });
}

nlohmann::json PropertyReport::to_json() const {
    nlohmann::json doc;
    doc["tolerance"] = tolerance;
    doc["passed"] = all_passed();
    auto& rows = doc["checks"] = nlohmann::json::array();
    for (const auto& c : checks) {
        rows.push_back({{"property", c.property},
                        {"samples", c.samples},
                        {"violations", c.violations},
                        {"worst_slack", c.worst_slack},
                        {"worst_point", c.worst_point},
                        {"passed", c.passed()}});
    }
    auto& wit = doc["convergence_witnesses"] = nlohmann::json::array();
    for (const auto& w : witnesses) {
        wit.push_back({{"t", w.t}, {"y", w.y}, {"z", w.z}, {"n", w.n}, {"gaps", w.gaps}});
    }
    doc["witnesses_decreasing"] = witnesses_decreasing();
    return doc;
}

PropertyReport ladder_properties_check(const GeneratorLadder& ladder, std::size_t sample_budget,
                                       std::uint64_t rng_seed) {
    const auto& rungs = ladder.n_values();
    if (rungs.size() < 2) throw ConfigError("ladder_properties_check: need at least two rungs");
    const auto& base = ladder.base();
    const int d = base.dims.d;
    const double L = base.const_L;
    constexpr double tol = 1e-9;

    PropertyReport report;
    report.tolerance = tol;
    LadderPropertyCheck growth{"(1) |f_n| <= L(1 + |y| + 2|z|^2)"};
    LadderPropertyCheck monotone{"(2) f_n <= f_n' <= f for n < n'"};
    LadderPropertyCheck lipschitz{"(4) |f_n(y1,z1) - f_n(y2,z2)| <= L|y1-y2| + n(1+|z1|+|z2|)|z1-z2|"};

    const auto note = [](LadderPropertyCheck& c, double slack, const std::string& where) {
        ++c.samples;
        if (c.samples == 1 || slack > c.worst_slack) {
            c.worst_slack = slack;
            c.worst_point = where;
        }
        if (slack > tol) ++c.violations;
    };

    auto rng = substream(rng_seed, 0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> z1(d), z2(d);
    std::vector<double> values(rungs.size());
    for (std::size_t s = 0; s < sample_budget; ++s) {
        const double t = base.horizon_T * unit(rng);
        const double y1 = 4.0 * unit(rng) - 2.0;
        for (int j = 0; j < d; ++j) z1[j] = 4.0 * unit(rng) - 2.0;
        const bool close = unit(rng) < 0.5;
        const double y2 = close ? y1 + 1e-3 * (2.0 * unit(rng) - 1.0) : 4.0 * unit(rng) - 2.0;
        for (int j = 0; j < d; ++j) {
            z2[j] = close ? z1[j] + 1e-3 * (2.0 * unit(rng) - 1.0) : 4.0 * unit(rng) - 2.0;
        }
        const std::size_t k = s % rungs.size();  // rung used for the pair check
        const auto where = [&] {
            return "t=" + std::to_string(t) + " y=" + std::to_string(y1) + " z=" + describe(z1);
        };

        double nz1 = 0.0, nz2 = 0.0, dz = 0.0;
        for (int j = 0; j < d; ++j) {
            nz1 += z1[j] * z1[j];
            nz2 += z2[j] * z2[j];
            dz += (z1[j] - z2[j]) * (z1[j] - z2[j]);
        }
        dz = std::sqrt(dz);

        const double f_base = base.generator_f(t, y1, z1);
        for (std::size_t r = 0; r < rungs.size(); ++r) {
            values[r] = inf_convolution(ladder, rungs[r], t, y1, z1);
            note(growth, std::abs(values[r]) - L * (1.0 + std::abs(y1) + 2.0 * nz1), where());
            if (r > 0) note(monotone, values[r - 1] - values[r], where());
        }
        note(monotone, values.back() - f_base, where());

        const double other = inf_convolution(ladder, rungs[k], t, y2, z2);
        const double allowed = L * std::abs(y1 - y2) +
                               rungs[k] * (1.0 + std::sqrt(nz1) + std::sqrt(nz2)) * dz;
        note(lipschitz, std::abs(values[k] - other) - allowed, where());
    }
    report.checks = {growth, monotone, lipschitz};

    // (3): finite witness sequences z_k = z + e / n_k -> z.
    for (int w = 0; w < 3; ++w) {
        ConvergenceWitness wit;
        wit.t = base.horizon_T * unit(rng);
        wit.y = 2.0 * unit(rng) - 1.0;
        wit.z.resize(d);
        for (int j = 0; j < d; ++j) wit.z[j] = 2.0 * unit(rng) - 1.0;
        const double target = base.generator_f(wit.t, wit.y, wit.z);
        std::vector<double> zk(d);
        for (double n : rungs) {
            for (int j = 0; j < d; ++j) zk[j] = wit.z[j] + 1.0 / n;
            wit.n.push_back(n);
            wit.gaps.push_back(std::abs(inf_convolution(ladder, n, wit.t, wit.y, zk) - target));
        }
        report.witnesses.push_back(std::move(wit));
    }
    return report;
}

double bump_profile(double radius_sq) {
    if (radius_sq >= 1.0) return 0.0;
    return std::exp(-1.0 / (1.0 - radius_sq));
}

double mollify_generator(const CoefficientSet& coeffs, int n, double t, double y,
                         std::span<const double> z, int nodes_per_dim) {
    if (n < 1) throw ConfigError("mollify_generator: n must be >= 1");
    const int d = coeffs.dims.d;
    if (static_cast<int>(z.size()) != d) throw ConfigError("mollify_generator: z has wrong dimension");
    const auto [nodes, weights] = gauss_legendre(nodes_per_dim);
    const int dim = 1 + d;
    const double scale = 1.0 / n;

    std::vector<int> idx(static_cast<std::size_t>(dim), 0);
    std::vector<double> zs(static_cast<std::size_t>(d));
    double mass = 0.0, acc = 0.0;
    for (;;) {
        double r2 = 0.0, w = 1.0;
        for (int j = 0; j < dim; ++j) {
            r2 += nodes[idx[j]] * nodes[idx[j]];
            w *= weights[idx[j]];
        }
        const double eta = bump_profile(r2);
        if (eta > 0.0) {
            const double ys = y - scale * nodes[idx[0]];
            for (int j = 0; j < d; ++j) zs[j] = z[j] - scale * nodes[idx[j + 1]];
            const double fv = coeffs.generator_f(t, ys, zs);
            if (!std::isfinite(fv)) {
                throw EvaluationError("mollify_generator: non-finite f at y=" + std::to_string(ys) +
                                      " z=" + describe(zs));
            }
            mass += w * eta;
            acc += w * eta * fv;
        }
        int j = dim - 1;
        while (j >= 0 && ++idx[j] >= nodes_per_dim) idx[j--] = 0;
        if (j < 0) break;
    }
    if (!(mass > 0.0)) throw EvaluationError("mollify_generator: quadrature missed the bump support");
    return acc / mass;
}

}  // namespace qbsde
