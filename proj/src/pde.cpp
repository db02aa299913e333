#include "qbsde/pde.hpp"
#include "qbsde/errors.hpp"
#include "qbsde/parallel.hpp"
#include "qbsde/rng.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace qbsde {

std::string to_string(BoundaryMode mode) {
    return mode == BoundaryMode::NeumannZero ? "neumann-zero" : "dirichlet-frozen";
}

BoundaryMode boundary_mode_from_string(const std::string& name) {
    if (name == "neumann-zero") return BoundaryMode::NeumannZero;
    if (name == "dirichlet-frozen") return BoundaryMode::DirichletFrozen;
    throw ConfigError("unknown boundary mode '" + name + "' (neumann-zero | dirichlet-frozen)");
}

std::string to_string(PdeVariant variant) {
    switch (variant) {
        case PdeVariant::Full: return "full";
        case PdeVariant::Ladder: return "ladder";
        case PdeVariant::FirstOrder: return "first-order";
    }
    return "unknown";
}

SpaceLattice::SpaceLattice(std::vector<double> lo, std::vector<double> hi, std::vector<int> nodes,
                           BoundaryMode mode)
    : lo_(std::move(lo)), hi_(std::move(hi)), nodes_(std::move(nodes)), mode_(mode) {
    const std::size_t m = lo_.size();
    if (m < 1 || m > 2) throw ConfigError("SpaceLattice: only m = 1 or 2 is supported");
    if (hi_.size() != m || nodes_.size() != m) throw ConfigError("SpaceLattice: inconsistent dimensions");
    for (std::size_t k = 0; k < m; ++k) {
        if (!std::isfinite(lo_[k]) || !std::isfinite(hi_[k]) || !(lo_[k] < hi_[k])) {
            throw ConfigError("SpaceLattice: need finite lo < hi");
        }
        if (nodes_[k] < 3) throw ConfigError("SpaceLattice: need at least 3 nodes per dimension");
    }
}

SpaceLattice SpaceLattice::with_spacing(std::vector<double> lo, std::vector<double> hi, double h,
                                        BoundaryMode mode) {
    if (!(h > 0.0)) throw ConfigError("SpaceLattice: h must be positive");
    std::vector<int> nodes;
    for (std::size_t k = 0; k < lo.size() && k < hi.size(); ++k) {
        nodes.push_back(static_cast<int>(std::ceil((hi[k] - lo[k]) / h - 1e-9)) + 1);
    }
    return SpaceLattice(std::move(lo), std::move(hi), std::move(nodes), mode);
}

namespace {

double required_margin(const CoefficientSet& coeffs, double epsilon) {
    double sigma_norm = 0.0;
    for (int s = 0; s <= 8; ++s) {
        sigma_norm = std::max(sigma_norm, coeffs.vol_sigma(coeffs.horizon_T * s / 8.0).norm());
    }
    const double T = coeffs.horizon_T;
    return coeffs.const_L * T + 4.0 * epsilon * sigma_norm * std::sqrt(T);
}

}  // namespace

SpaceLattice SpaceLattice::around(const CoefficientSet& coeffs, std::vector<double> x_lo,
                                  std::vector<double> x_hi, double epsilon, double h,
                                  BoundaryMode mode) {
    const double margin = required_margin(coeffs, epsilon);
    for (auto& v : x_lo) v -= margin;
    for (auto& v : x_hi) v += margin;
    // Snap the box outward to multiples of h so that nodes land on round coordinates.
    for (std::size_t k = 0; k < x_lo.size(); ++k) {
        x_lo[k] = std::floor(x_lo[k] / h - 1e-9) * h;
        x_hi[k] = std::ceil(x_hi[k] / h + 1e-9) * h;
    }
    return with_spacing(std::move(x_lo), std::move(x_hi), h, mode);
}

std::size_t SpaceLattice::size() const {
    std::size_t s = 1;
    for (int n : nodes_) s *= static_cast<std::size_t>(n);
    return s;
}

std::vector<double> SpaceLattice::point(std::size_t flat_index) const {
    std::vector<double> x(lo_.size());
    x[0] = coordinate(0, static_cast<int>(flat_index % nodes_[0]));
    if (dims() == 2) x[1] = coordinate(1, static_cast<int>(flat_index / nodes_[0]));
    return x;
}

bool SpaceLattice::on_boundary(std::size_t flat_index) const {
    const int i0 = static_cast<int>(flat_index % nodes_[0]);
    if (i0 == 0 || i0 == nodes_[0] - 1) return true;
    if (dims() == 2) {
        const int i1 = static_cast<int>(flat_index / nodes_[0]);
        if (i1 == 0 || i1 == nodes_[1] - 1) return true;
    }
    return false;
}

bool SpaceLattice::contains(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != dims()) return false;
    for (int k = 0; k < dims(); ++k) {
        const double tol = 1e-12 * (hi_[k] - lo_[k]);
        if (!(x[k] >= lo_[k] - tol && x[k] <= hi_[k] + tol)) return false;
    }
    return true;
}

void SpaceLattice::check_margin(const CoefficientSet& coeffs, std::span<const double> x_lo,
                                std::span<const double> x_hi, double epsilon) const {
    if (coeffs.dims.m != dims()) throw ConfigError("SpaceLattice: lattice dimension differs from m");
    const double margin = required_margin(coeffs, epsilon);
    for (int k = 0; k < dims(); ++k) {
        if (x_lo[k] - margin < lo_[k] - 1e-9 || x_hi[k] + margin > hi_[k] + 1e-9) {
            throw ConfigError("SpaceLattice: box [" + std::to_string(lo_[k]) + ", " +
                              std::to_string(hi_[k]) + "] lacks the margin " + std::to_string(margin) +
                              " around [" + std::to_string(x_lo[k]) + ", " + std::to_string(x_hi[k]) + "]");
        }
    }
}

namespace {

struct Cell {
    int index;
    double weight;  ///< of the upper node
};

Cell locate(const SpaceLattice& lat, int k, double x) {
    const double h = lat.spacing(k);
    const double s = (x - lat.lo(k)) / h;
    int j = static_cast<int>(std::floor(s));
    j = std::clamp(j, 0, lat.nodes(k) - 2);
    return {j, std::clamp(s - j, 0.0, 1.0)};
}

}  // namespace

double PdeSolution::value(int slice, std::span<const double> x) const {
    if (!lattice.contains(x)) {
        throw EvaluationError("PdeSolution: point outside the lattice box (extrapolation refused)");
    }
    const Cell c0 = locate(lattice, 0, x[0]);
    if (lattice.dims() == 1) {
        return (1.0 - c0.weight) * node_value(slice, c0.index) + c0.weight * node_value(slice, c0.index + 1);
    }
    const Cell c1 = locate(lattice, 1, x[1]);
    const auto v = [&](int a, int b) { return node_value(slice, lattice.flat(c0.index + a, c1.index + b)); };
    return (1.0 - c1.weight) * ((1.0 - c0.weight) * v(0, 0) + c0.weight * v(1, 0)) +
           c1.weight * ((1.0 - c0.weight) * v(0, 1) + c0.weight * v(1, 1));
}

double PdeSolution::value_at(double t, std::span<const double> x) const {
    const double s = (t - grid.t0()) / grid.delta();
    if (s < -1e-9 || s > grid.steps() + 1e-9) throw EvaluationError("PdeSolution: time outside the grid");
    int i = std::clamp(static_cast<int>(std::floor(s)), 0, grid.steps() - 1);
    const double w = std::clamp(s - i, 0.0, 1.0);
    if (w == 0.0) return value(i, x);
    if (w == 1.0) return value(i + 1, x);
    return (1.0 - w) * value(i, x) + w * value(i + 1, x);
}

namespace {

/// Centered difference along k at (i0, i1), one-sided on the boundary ring.
double centered(const SpaceLattice& lat, const double* v, int k, int i0, int i1) {
    const int n = lat.nodes(k);
    const int i = k == 0 ? i0 : i1;
    const auto at = [&](int j) { return k == 0 ? v[lat.flat(j, i1)] : v[lat.flat(i0, j)]; };
    const double h = lat.spacing(k);
    if (i == 0) return (at(1) - at(0)) / h;
    if (i == n - 1) return (at(n - 1) - at(n - 2)) / h;
    return (at(i + 1) - at(i - 1)) / (2.0 * h);
}

}  // namespace

std::vector<double> PdeSolution::gradient(int slice, std::span<const double> x) const {
    if (!lattice.contains(x)) throw EvaluationError("PdeSolution: point outside the lattice box");
    const double* v = u.data() + static_cast<std::size_t>(slice) * lattice.size();
    const int m = lattice.dims();
    std::vector<double> g(static_cast<std::size_t>(m), 0.0);
    const Cell c0 = locate(lattice, 0, x[0]);
    const Cell c1 = m == 2 ? locate(lattice, 1, x[1]) : Cell{0, 0.0};
    for (int k = 0; k < m; ++k) {
        for (int a = 0; a < 2; ++a) {
            for (int b = 0; b < (m == 2 ? 2 : 1); ++b) {
                const double w = (a ? c0.weight : 1.0 - c0.weight) * (m == 2 ? (b ? c1.weight : 1.0 - c1.weight) : 1.0);
                if (w == 0.0) continue;
                g[k] += w * centered(lattice, v, k, c0.index + a, c1.index + b);
            }
        }
    }
    return g;
}

nlohmann::json PdeSolution::summary() const {
    nlohmann::json lat;
    for (int k = 0; k < lattice.dims(); ++k) {
        lat["box"].push_back({lattice.lo(k), lattice.hi(k)});
        lat["nodes"].push_back(lattice.nodes(k));
        lat["spacing"].push_back(lattice.spacing(k));
    }
    lat["boundary"] = to_string(lattice.boundary());
    nlohmann::json doc{{"variant", to_string(variant)},
                       {"epsilon", epsilon},
                       {"n", n ? nlohmann::json(*n) : nlohmann::json(nullptr)},
                       {"lattice", lat},
                       {"grid", {{"t0", grid.t0()}, {"T", grid.T()}, {"steps", grid.steps()}}},
                       {"clip_events", clip_events},
                       {"boundary_flags", boundary_flags}};
    if (!characteristics.empty()) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& c : characteristics) {
            rows.push_back({{"t", c.t}, {"x", c.x}, {"lattice", c.lattice_value}, {"characteristic", c.characteristic_value}});
        }
        doc["characteristics"] = rows;
        doc["characteristics_worst"] = characteristics_worst;
    }
    return doc;
}

double characteristic_value(const CoefficientSet& coeffs, const GeneratorFn& generator, double t,
                            std::span<const double> x, int steps) {
    const TimeGrid g(t, coeffs.horizon_T, std::max(1, steps));
    const SamplePathBatch phi = solve_ode(coeffs, t, x, g);
    return solve_backward_ode(coeffs, generator, phi).values[0];
}

namespace {

/// Thomas algorithm for a constant-coefficient tridiagonal line with the
/// boundary treatment of the lattice. Solves in place.
void solve_line(std::vector<double>& rhs, double c, BoundaryMode mode, std::vector<double>& scratch) {
    const int n = static_cast<int>(rhs.size());
    std::vector<double>& cp = scratch;
    cp.assign(static_cast<std::size_t>(n), 0.0);
    // Row j: lower_j x_{j-1} + diag_j x_j + upper_j x_{j+1} = rhs_j.
    const auto row = [&](int j, double& lower, double& diag, double& upper) {
        if (j == 0 || j == n - 1) {
            if (mode == BoundaryMode::DirichletFrozen) {
                lower = upper = 0.0;
                diag = 1.0;
                return;
            }
            diag = 1.0 + 2.0 * c;  // ghost node mirrors the interior neighbour
            lower = j == 0 ? 0.0 : -2.0 * c;
            upper = j == 0 ? -2.0 * c : 0.0;
            return;
        }
        lower = upper = -c;
        diag = 1.0 + 2.0 * c;
    };
    double lower, diag, upper;
    row(0, lower, diag, upper);
    cp[0] = upper / diag;
    rhs[0] /= diag;
    for (int j = 1; j < n; ++j) {
        row(j, lower, diag, upper);
        const double denom = diag - lower * cp[j - 1];
        cp[j] = upper / denom;
        rhs[j] = (rhs[j] - lower * rhs[j - 1]) / denom;
    }
    for (int j = n - 2; j >= 0; --j) rhs[j] -= cp[j] * rhs[j + 1];
}

}  // namespace

PdeSolution solve_semilinear(const CoefficientSet& coeffs, const GeneratorFn& generator,
                             double epsilon, const SpaceLattice& lattice, const TimeGrid& grid,
                             std::optional<double> rung) {
    coeffs.validate();
    if (!generator) throw ConfigError("solve_semilinear: generator is empty");
    if (lattice.dims() != coeffs.dims.m) throw ConfigError("solve_semilinear: lattice dimension differs from m");
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("solve_semilinear: epsilon must lie in [0, 1]");
    if (std::abs(grid.T() - coeffs.horizon_T) > 1e-12) {
        throw ConfigError("solve_semilinear: grid must end at the model horizon");
    }
    const int m = coeffs.dims.m;
    const int d = coeffs.dims.d;
    const int N = grid.steps();
    const double delta = grid.delta();
    const std::size_t S = lattice.size();
    const double bound = coeffs.m_bound();

    PdeSolution sol;
    sol.lattice = lattice;
    sol.grid = grid;
    sol.epsilon = epsilon;
    sol.n = rung;
    sol.variant = epsilon == 0.0 ? PdeVariant::FirstOrder : (rung ? PdeVariant::Ladder : PdeVariant::Full);
    sol.u.assign(static_cast<std::size_t>(N + 1) * S, 0.0);

    std::vector<std::vector<double>> nodes(S);
    for (std::size_t j = 0; j < S; ++j) nodes[j] = lattice.point(j);

    double* terminal = sol.u.data() + static_cast<std::size_t>(N) * S;
    for (std::size_t j = 0; j < S; ++j) {
        terminal[j] = coeffs.terminal_g(nodes[j]);
        if (!std::isfinite(terminal[j])) throw EvaluationError("solve_semilinear: non-finite g on the lattice");
    }

    std::vector<double> rhs(S);
    std::vector<std::uint8_t> drift_violation((S + kPathBlock - 1) / kPathBlock, 0);
    std::vector<double> worst_rate((S + kPathBlock - 1) / kPathBlock, 0.0);
    std::vector<double> line, scratch;
    std::vector<std::size_t> block_clips((S + kPathBlock - 1) / kPathBlock, 0);

    for (int i = N - 1; i >= 0; --i) {
        const double t = grid.node(i);
        const Eigen::MatrixXd sigma = coeffs.vol_sigma(t);
        const Eigen::MatrixXd a = sigma * sigma.transpose();
        const double* next = sol.u.data() + static_cast<std::size_t>(i + 1) * S;
        double* cur = sol.u.data() + static_cast<std::size_t>(i) * S;

        parallel_blocks(S, kPathBlock, [&](std::size_t blk, std::size_t begin, std::size_t end) {
            std::vector<double> b(static_cast<std::size_t>(m)), grad(static_cast<std::size_t>(m)),
                z(static_cast<std::size_t>(d));
            for (std::size_t j = begin; j < end; ++j) {
                const int i0 = static_cast<int>(j % lattice.nodes(0));
                const int i1 = m == 2 ? static_cast<int>(j / lattice.nodes(0)) : 0;
                coeffs.drift_b(t, nodes[j], b);
                double rate = 0.0, transport = 0.0;
                for (int k = 0; k < m; ++k) {
                    const int idx = k == 0 ? i0 : i1;
                    const int n = lattice.nodes(k);
                    const double h = lattice.spacing(k);
                    rate += std::abs(b[k]) / h;
                    grad[k] = centered(lattice, next, k, i0, i1);
                    const auto at = [&](int q) { return k == 0 ? next[lattice.flat(q, i1)] : next[lattice.flat(i0, q)]; };
                    // Backward-in-time transport: information comes from x + b delta.
                    double up = 0.0;
                    if (b[k] > 0.0 && idx < n - 1) up = (at(idx + 1) - at(idx)) / h;
                    if (b[k] < 0.0 && idx > 0) up = (at(idx) - at(idx - 1)) / h;
                    transport += b[k] * up;
                }
                if (rate * delta > 0.9) drift_violation[blk] = 1;
                worst_rate[blk] = std::max(worst_rate[blk], rate);
                for (int c = 0; c < d; ++c) {
                    double s = 0.0;
                    for (int k = 0; k < m; ++k) s += sigma(k, c) * grad[k];
                    z[c] = epsilon * s;
                }
                const double f = generator(t, next[j], z);
                if (!std::isfinite(f)) {
                    throw EvaluationError("solve_semilinear: non-finite f at slice " + std::to_string(i) +
                                          ", node " + std::to_string(j));
                }
                double mixed = 0.0;
                if (m == 2 && epsilon > 0.0 && a(0, 1) != 0.0 && !lattice.on_boundary(j)) {
                    const double h0 = lattice.spacing(0), h1 = lattice.spacing(1);
                    mixed = epsilon * epsilon * a(0, 1) *
                            (next[lattice.flat(i0 + 1, i1 + 1)] - next[lattice.flat(i0 + 1, i1 - 1)] -
                             next[lattice.flat(i0 - 1, i1 + 1)] + next[lattice.flat(i0 - 1, i1 - 1)]) /
                            (4.0 * h0 * h1);
                }
                rhs[j] = next[j] + delta * (transport + f + mixed);
            }
        });
        if (std::any_of(drift_violation.begin(), drift_violation.end(), [](auto v) { return v != 0; })) {
            const double rate = *std::max_element(worst_rate.begin(), worst_rate.end());
            const int suggested = static_cast<int>(std::ceil((grid.T() - grid.t0()) * rate / 0.9));
            throw ConfigError("solve_semilinear: drift CFL violated (delta * sum |b_k|/h_k = " +
                              std::to_string(rate * delta) + " > 0.9); use delta <= " +
                              std::to_string(0.9 / rate) + " (N >= " + std::to_string(suggested) + ")");
        }

        if (lattice.boundary() == BoundaryMode::DirichletFrozen) {
            const int steps = std::max(1, std::min(N - i, 64));
            for (std::size_t j = 0; j < S; ++j) {
                if (!lattice.on_boundary(j)) continue;
                const TimeGrid g(t, grid.T(), steps);
                const SamplePathBatch phi = solve_ode(coeffs, t, nodes[j], g);
                rhs[j] = coeffs.terminal_g(phi.point(0, steps));
            }
        }

        // Implicit diffusion, one dimension at a time.
        for (int k = 0; k < m; ++k) {
            const double h = lattice.spacing(k);
            const double c = delta * 0.5 * epsilon * epsilon * a(k, k) / (h * h);
            if (c == 0.0) continue;
            const int n = lattice.nodes(k);
            const int lines = m == 2 ? lattice.nodes(1 - k) : 1;
            line.resize(static_cast<std::size_t>(n));
            for (int l = 0; l < lines; ++l) {
                const auto index = [&](int q) { return k == 0 ? lattice.flat(q, l) : lattice.flat(l, q); };
                const bool frozen_line = lattice.boundary() == BoundaryMode::DirichletFrozen && m == 2 &&
                                         (l == 0 || l == lines - 1);
                if (frozen_line) continue;
                for (int q = 0; q < n; ++q) line[q] = rhs[index(q)];
                solve_line(line, c, lattice.boundary(), scratch);
                for (int q = 0; q < n; ++q) rhs[index(q)] = line[q];
            }
        }

        std::fill(block_clips.begin(), block_clips.end(), 0);
        for (std::size_t j = 0; j < S; ++j) {
            double v = rhs[j];
            if (!std::isfinite(v)) throw EvaluationError("solve_semilinear: non-finite value at slice " + std::to_string(i));
            if (std::abs(v) > bound) {
                if (lattice.on_boundary(j)) ++sol.boundary_flags;
                ++sol.clip_events;
                v = std::clamp(v, -bound, bound);
            }
            cur[j] = v;
        }
    }
    return sol;
}

PdeSolution solve_first_order(const CoefficientSet& coeffs, const GeneratorFn& generator,
                              const TimeGrid& grid, const SpaceLattice& lattice,
                              std::vector<std::vector<double>> check_points) {
    PdeSolution sol = solve_semilinear(coeffs, generator, 0.0, lattice, grid);
    if (check_points.empty()) {
        for (int q = 1; q <= 5; ++q) {
            std::vector<double> x(static_cast<std::size_t>(lattice.dims()));
            for (int k = 0; k < lattice.dims(); ++k) {
                const double mid = 0.5 * (lattice.lo(k) + lattice.hi(k));
                const double half = 0.25 * (lattice.hi(k) - lattice.lo(k));
                x[k] = mid + half * (q - 3) / 2.0;
            }
            check_points.push_back(std::move(x));
        }
    }
    for (auto& x : check_points) {
        CharacteristicsPoint c;
        c.t = grid.t0();
        c.lattice_value = sol.value(0, x);
        c.characteristic_value = characteristic_value(coeffs, generator, grid.t0(), x, grid.steps());
        c.x = std::move(x);
        sol.characteristics_worst = std::max(sol.characteristics_worst,
                                             std::abs(c.lattice_value - c.characteristic_value));
        sol.characteristics.push_back(std::move(c));
    }
    return sol;
}

nlohmann::json UniformConvergenceReport::to_json() const {
    return {{"n", n_values},
            {"sup_gaps", sup_gaps},
            {"decay_exponent", decay_exponent},
            {"gaps_nonincreasing", gaps_nonincreasing},
            {"monotone_violations", monotone_violations},
            {"worst_monotone_slack", worst_monotone_slack},
            {"passed", passed()}};
}

UniformConvergenceReport ladder_uniform_convergence(const CoefficientSet& coeffs,
                                                    const GeneratorLadder& ladder, double epsilon,
                                                    const SpaceLattice& lattice,
                                                    const TimeGrid& grid, const CompactBox& box) {
    const int m = lattice.dims();
    if (static_cast<int>(box.x_lo.size()) != m || static_cast<int>(box.x_hi.size()) != m) {
        throw ConfigError("ladder_uniform_convergence: box dimension differs from the lattice");
    }
    for (int k = 0; k < m; ++k) {
        if (!(box.x_lo[k] > lattice.lo(k) && box.x_hi[k] < lattice.hi(k))) {
            throw ConfigError("ladder_uniform_convergence: compact box must lie inside the lattice interior");
        }
    }
    std::vector<PdeSolution> sols;
    for (double n : ladder.n_values()) {
        sols.push_back(solve_semilinear(coeffs, ladder.rung(n), epsilon, lattice, grid, n));
    }
    std::vector<std::pair<int, std::size_t>> cells;  // (slice, node) inside the box
    for (int i = 0; i <= grid.steps(); ++i) {
        const double t = grid.node(i);
        if (t < box.t_lo - 1e-12 || t > box.t_hi + 1e-12) continue;
        for (std::size_t j = 0; j < lattice.size(); ++j) {
            const auto x = lattice.point(j);
            bool inside = true;
            for (int k = 0; k < m; ++k) inside = inside && x[k] >= box.x_lo[k] && x[k] <= box.x_hi[k];
            if (inside) cells.emplace_back(i, j);
        }
    }
    UniformConvergenceReport rep;
    rep.n_values = ladder.n_values();
    const auto& last = sols.back();
    rep.worst_monotone_slack = -INFINITY;
    for (std::size_t r = 0; r < sols.size(); ++r) {
        double gap = 0.0;
        for (const auto& [i, j] : cells) {
            gap = std::max(gap, std::abs(sols[r].node_value(i, j) - last.node_value(i, j)));
            if (r + 1 < sols.size()) {
                const double slack = sols[r].node_value(i, j) - sols[r + 1].node_value(i, j);
                rep.worst_monotone_slack = std::max(rep.worst_monotone_slack, slack);
                if (slack > 1e-9) ++rep.monotone_violations;
            }
        }
        rep.sup_gaps.push_back(gap);
    }
    rep.gaps_nonincreasing = true;
    for (std::size_t r = 1; r < rep.sup_gaps.size(); ++r) {
        if (rep.sup_gaps[r] > rep.sup_gaps[r - 1] + 1e-12) rep.gaps_nonincreasing = false;
    }
    std::vector<double> ln, lg;
    for (std::size_t r = 0; r + 1 < rep.sup_gaps.size(); ++r) {
        if (rep.sup_gaps[r] > 0.0) {
            ln.push_back(std::log(rep.n_values[r]));
            lg.push_back(std::log(rep.sup_gaps[r]));
        }
    }
    if (ln.size() >= 2) rep.decay_exponent = fit_line(ln, lg).slope;
    if (sols.size() < 2) rep.worst_monotone_slack = 0.0;
    return rep;
}

bool FeynmanKacReport::passed() const {
    return std::all_of(points.begin(), points.end(), [](const auto& p) { return p.passed(); });
}

nlohmann::json FeynmanKacReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& p : points) {
        rows.push_back({{"t", p.t},
                        {"x", p.x},
                        {"pde", p.pde},
                        {"lsmc", p.lsmc},
                        {"std_error", p.std_error},
                        {"allowed", p.allowed},
                        {"passed", p.passed()}});
    }
    return {{"points", rows}, {"worst", worst}, {"passed", passed()}};
}

FeynmanKacReport feynman_kac_crosscheck(const PdeSolution& pde, const CoefficientSet& coeffs,
                                        const GeneratorFn& generator,
                                        const std::vector<std::pair<double, std::vector<double>>>& points,
                                        const FeynmanKacConfig& config) {
    FeynmanKacReport rep;
    double worst_excess = -INFINITY;
    for (std::size_t q = 0; q < points.size(); ++q) {
        const auto& [t, x] = points[q];
        FeynmanKacPoint row;
        row.t = t;
        row.x = x;
        row.pde = pde.value_at(t, x);
        const TimeGrid g(t, coeffs.horizon_T, config.steps);
        const BrownianBatch w = BrownianBatch::generate(g, config.paths, coeffs.dims.d, splitmix64(config.seed + q));
        const SamplePathBatch xs = simulate_sde(coeffs, t, x, pde.epsilon, g, w);
        const BsdeSolution sol = solve_bsde_lsmc(coeffs, generator, xs, w, config.lsmc);
        row.lsmc = sol.y0;
        row.std_error = sol.y0_std_error;
        row.allowed = 3.0 * sol.y0_std_error + config.scheme_tolerance;
        const double excess = std::abs(row.pde - row.lsmc) - row.allowed;
        if (excess > worst_excess) {
            worst_excess = excess;
            rep.worst = q;
        }
        rep.points.push_back(std::move(row));
    }
    return rep;
}

void write_slice_csv(const PdeSolution& pde, int slice, std::ostream& out) {
    const int m = pde.lattice.dims();
    out << (m == 1 ? "x,u\n" : "x0,x1,u\n");
    char buf[96];
    for (std::size_t j = 0; j < pde.lattice.size(); ++j) {
        const auto x = pde.lattice.point(j);
        for (int k = 0; k < m; ++k) {
            std::snprintf(buf, sizeof buf, "%.17g,", x[k]);
            out << buf;
        }
        std::snprintf(buf, sizeof buf, "%.17g\n", pde.node_value(slice, j));
        out << buf;
    }
}

SamplePathBatch to_batch(const PdeSolution& pde) {
    const std::size_t S = pde.lattice.size();
    SamplePathBatch b(pde.grid, S, 1, "u");
    for (std::size_t j = 0; j < S; ++j) {
        for (int i = 0; i <= pde.grid.steps(); ++i) b.at(j, i) = pde.node_value(i, j);
    }
    return b;
}

}  // namespace qbsde
