#include "qbsde/backward.hpp"
#include "qbsde/errors.hpp"
#include "qbsde/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <ostream>

namespace qbsde {

nlohmann::json SchemeMeta::to_json() const {
    return {{"basis", basis},
            {"basis_degree", basis_degree},
            {"clip_bound", clip_bound},
            {"y_clip_events", y_clip_events},
            {"z_clip_events", z_clip_events},
            {"max_fixed_point_iterations", max_fixed_point_iterations},
            {"fixed_point_failures", fixed_point_failures},
            {"degraded_nodes", degraded_nodes},
            {"sup_abs_y", sup_abs_y},
            {"sup_abs_z", sup_abs_z},
            {"warnings", warnings}};
}

MeanEstimate BsdeSolution::node_mean(int node) const {
    std::vector<double> v(y_paths.paths);
    for (std::size_t p = 0; p < y_paths.paths; ++p) v[p] = y_paths.at(p, node);
    MeanEstimate est = mean_and_std_error(v);
    if (node == 0) est.std_error = y0_std_error;  // Y_0 is deterministic; use the estimator's error
    return est;
}

namespace {

/// Least-squares projection on polynomials in the standardized state at one node.
class NodeRegression {
public:
    NodeRegression(const SamplePathBatch& x, int node, const LsmcConfig& config, SchemeMeta& meta) {
        const std::size_t M = x.paths;
        const int m = x.width;
        for (int r = 0; r < m; ++r) {
            double mean = 0.0;
            for (std::size_t p = 0; p < M; ++p) mean += x.at(p, node, r);
            mean /= static_cast<double>(M);
            double var = 0.0;
            for (std::size_t p = 0; p < M; ++p) {
                const double dx = x.at(p, node, r) - mean;
                var += dx * dx;
            }
            const double sd = std::sqrt(var / static_cast<double>(M));
            // A coordinate with no spread (e.g. the deterministic start) carries no information.
            if (sd > 1e-12 * (1.0 + std::abs(mean))) {
                active_.push_back(r);
                center_.push_back(mean);
                scale_.push_back(sd);
            }
        }
        for (int degree = config.degree; degree >= 0; --degree) {
            degree_ = degree;
            build(x, node);
            if (active_.empty() || degree == 0) break;
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(normal_, Eigen::EigenvaluesOnly);
            const double lo = eig.eigenvalues().minCoeff();
            const double hi = eig.eigenvalues().maxCoeff();
            if (lo > 0.0 && hi / lo <= config.condition_limit) break;
            ++meta.degraded_nodes;
            if (meta.warnings.size() < 20) {
                meta.warnings.push_back("node " + std::to_string(node) + ": condition number " +
                                        std::to_string(lo > 0.0 ? hi / lo : INFINITY) +
                                        " above limit, basis degree lowered to " +
                                        std::to_string(degree - 1));
            }
        }
        ldlt_.compute(normal_);
    }

    /// Fitted values of the projection of each column of `targets`.
    Eigen::MatrixXd fitted(const Eigen::MatrixXd& targets) const {
        const Eigen::MatrixXd coef = ldlt_.solve(design_.transpose() * targets);
        return design_ * coef;
    }

private:
    void build(const SamplePathBatch& x, int node) {
        const std::size_t M = x.paths;
        const int a = static_cast<int>(active_.size());
        int K = 1;
        for (int r = 0; r < a; ++r) K *= degree_ + 1;
        design_.resize(static_cast<Eigen::Index>(M), K);
        parallel_blocks(M, kPathBlock, [&](std::size_t, std::size_t begin, std::size_t end) {
            std::vector<double> u(static_cast<std::size_t>(a));
            for (std::size_t p = begin; p < end; ++p) {
                for (int r = 0; r < a; ++r) u[r] = (x.at(p, node, active_[r]) - center_[r]) / scale_[r];
                for (int k = 0; k < K; ++k) {
                    int rem = k;
                    double v = 1.0;
                    for (int r = 0; r < a; ++r) {
                        v *= std::pow(u[r], rem % (degree_ + 1));
                        rem /= degree_ + 1;
                    }
                    design_(static_cast<Eigen::Index>(p), k) = v;
                }
            }
        });
        normal_ = design_.transpose() * design_;
    }

    std::vector<int> active_;
    std::vector<double> center_;
    std::vector<double> scale_;
    int degree_ = 0;
    Eigen::MatrixXd design_;
    Eigen::MatrixXd normal_;
    Eigen::LDLT<Eigen::MatrixXd> ldlt_;
};

void require_finite(double v, const char* who, int node, std::size_t path) {
    if (!std::isfinite(v)) {
        throw EvaluationError(std::string(who) + ": non-finite value at node " +
                              std::to_string(node) + ", path " + std::to_string(path));
    }
}

}  // namespace

BsdeSolution solve_bsde_lsmc(const CoefficientSet& coeffs, const GeneratorFn& generator,
                             const SamplePathBatch& x_batch, const BrownianBatch& noise,
                             const LsmcConfig& config) {
    coeffs.validate();
    if (!generator) throw ConfigError("solve_bsde_lsmc: generator is empty");
    if (!(x_batch.grid == noise.grid)) throw ConfigError("solve_bsde_lsmc: path and noise grids differ");
    if (x_batch.paths != noise.paths) throw ConfigError("solve_bsde_lsmc: path counts differ");
    if (x_batch.seed != noise.seed) throw ConfigError("solve_bsde_lsmc: paths were not driven by this noise");
    if (x_batch.width != coeffs.dims.m || noise.dims != coeffs.dims.d) {
        throw ConfigError("solve_bsde_lsmc: dimensions differ from the model");
    }
    if (config.degree < 0) throw ConfigError("solve_bsde_lsmc: degree must be >= 0");
    const TimeGrid& grid = x_batch.grid;
    const double delta = grid.delta();
    if (delta * coeffs.const_L >= 1.0) {
        throw ConfigError("solve_bsde_lsmc: delta * L = " + std::to_string(delta * coeffs.const_L) +
                          " must be < 1; use more steps");
    }
    const double clip = config.clip.value_or(coeffs.m_bound());
    if (!(clip > 0.0)) throw ConfigError("solve_bsde_lsmc: clip bound must be positive");

    const std::size_t M = x_batch.paths;
    const int N = grid.steps();
    const int d = coeffs.dims.d;

    BsdeSolution sol;
    sol.y_paths = SamplePathBatch(grid, M, 1, "Y", x_batch.seed);
    sol.z_paths = SamplePathBatch(grid, M, d, "Z", x_batch.seed);
    SchemeMeta& meta = sol.scheme_meta;
    meta.basis_degree = config.degree;
    meta.basis = "tensor polynomial in standardized X_i";
    meta.clip_bound = clip;

    std::vector<double> xi(M);  // g(X_N) + sum f delta, for the standard error of y0
    for (std::size_t p = 0; p < M; ++p) {
        const double g = coeffs.terminal_g(x_batch.point(p, N));
        require_finite(g, "solve_bsde_lsmc", N, p);
        sol.y_paths.at(p, N) = g;
        xi[p] = g;
    }

    const std::size_t n_blocks = (M + kPathBlock - 1) / kPathBlock;
    struct BlockStats {
        std::size_t y_clips = 0, z_clips = 0, failures = 0;
        int max_iter = 0;
    };
    std::vector<BlockStats> stats(n_blocks);

    Eigen::MatrixXd target(static_cast<Eigen::Index>(M), 1);
    Eigen::MatrixXd z_target(static_cast<Eigen::Index>(M), d);
    for (int i = N - 1; i >= 0; --i) {
        const double t_i = grid.node(i);
        NodeRegression reg(x_batch, i, config, meta);
        for (std::size_t p = 0; p < M; ++p) target(static_cast<Eigen::Index>(p), 0) = sol.y_paths.at(p, i + 1);
        const Eigen::MatrixXd cond_y = reg.fitted(target);
        for (std::size_t p = 0; p < M; ++p) {
            const double resid = sol.y_paths.at(p, i + 1) - cond_y(static_cast<Eigen::Index>(p), 0);
            for (int j = 0; j < d; ++j) z_target(static_cast<Eigen::Index>(p), j) = resid * noise.dw(p, i, j) / delta;
        }
        const Eigen::MatrixXd z_fit = reg.fitted(z_target);

        parallel_blocks(M, kPathBlock, [&](std::size_t b, std::size_t begin, std::size_t end) {
            BlockStats& st = stats[b];
            std::vector<double> z(static_cast<std::size_t>(d));
            for (std::size_t p = begin; p < end; ++p) {
                for (int j = 0; j < d; ++j) {
                    double zj = z_fit(static_cast<Eigen::Index>(p), j);
                    if (std::abs(zj) > clip) {
                        zj = std::clamp(zj, -clip, clip);
                        ++st.z_clips;
                    }
                    z[j] = zj;
                    sol.z_paths.at(p, i, j) = zj;
                }
                const double a = cond_y(static_cast<Eigen::Index>(p), 0);
                double y = a;
                double fy = 0.0;
                int it = 0;
                bool converged = false;
                while (it < config.fixed_point_max_iter) {
                    ++it;
                    fy = generator(t_i, y, z);
                    require_finite(fy, "solve_bsde_lsmc", i, p);
                    const double next = a + fy * delta;
                    const bool done = std::abs(next - y) <= config.fixed_point_tol * std::max(1.0, std::abs(y));
                    y = next;
                    if (done) {
                        converged = true;
                        break;
                    }
                }
                if (!converged) ++st.failures;
                st.max_iter = std::max(st.max_iter, it);
                if (std::abs(y) > clip) {
                    y = std::clamp(y, -clip, clip);
                    ++st.y_clips;
                }
                sol.y_paths.at(p, i) = y;
                xi[p] += fy * delta;
            }
        });
    }
    // Terminal Z is the regression estimate at the last interval.
    for (std::size_t p = 0; p < M; ++p) {
        for (int j = 0; j < d; ++j) sol.z_paths.at(p, N, j) = sol.z_paths.at(p, N - 1, j);
    }

    for (const auto& st : stats) {
        meta.y_clip_events += st.y_clips;
        meta.z_clip_events += st.z_clips;
        meta.fixed_point_failures += st.failures;
        meta.max_fixed_point_iterations = std::max(meta.max_fixed_point_iterations, st.max_iter);
    }
    for (double v : sol.y_paths.values) meta.sup_abs_y = std::max(meta.sup_abs_y, std::abs(v));
    for (double v : sol.z_paths.values) meta.sup_abs_z = std::max(meta.sup_abs_z, std::abs(v));
    if (meta.fixed_point_failures > 0) {
        meta.warnings.push_back(std::to_string(meta.fixed_point_failures) +
                                " implicit steps hit the iteration cap");
    }

    double y0 = 0.0;
    for (std::size_t p = 0; p < M; ++p) y0 += sol.y_paths.at(p, 0);
    sol.y0 = y0 / static_cast<double>(M);
    sol.y0_std_error = mean_and_std_error(xi).std_error;
    return sol;
}

void write_csv(const BsdeSolution& solution, std::ostream& out) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "y0,std_error\n%.17g,%.17g\n", solution.y0, solution.y0_std_error);
    out << buf << "node,time,mean_y,se_y";
    const int d = solution.z_paths.width;
    for (int j = 0; j < d; ++j) out << ",mean_z" << j;
    out << "\n";
    const auto& grid = solution.y_paths.grid;
    for (int i = 0; i <= grid.steps(); ++i) {
        const MeanEstimate y = solution.node_mean(i);
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g", i, grid.node(i), y.mean, y.std_error);
        out << buf;
        for (int j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < solution.z_paths.paths; ++p) s += solution.z_paths.at(p, i, j);
            std::snprintf(buf, sizeof buf, ",%.17g", s / static_cast<double>(solution.z_paths.paths));
            out << buf;
        }
        out << "\n";
    }
}

BackwardOdePath solve_backward_ode(const CoefficientSet& coeffs, const GeneratorFn& generator,
                                   const SamplePathBatch& phi) {
    if (!generator) throw ConfigError("solve_backward_ode: generator is empty");
    if (phi.paths != 1 || phi.width != coeffs.dims.m) {
        throw ConfigError("solve_backward_ode: phi must be a single m-dimensional path");
    }
    const TimeGrid& grid = phi.grid;
    const int N = grid.steps();
    const double h = grid.delta();
    const std::vector<double> zero(static_cast<std::size_t>(coeffs.dims.d), 0.0);
    const auto f = [&](double s, double y, int node) {
        const double v = generator(s, y, zero);
        if (!std::isfinite(v)) {
            throw EvaluationError("solve_backward_ode: non-finite f near node " + std::to_string(node));
        }
        return v;
    };

    BackwardOdePath out;
    out.grid = grid;
    out.values.assign(static_cast<std::size_t>(N) + 1, 0.0);
    out.terminal = coeffs.terminal_g(phi.point(0, N));
    if (!std::isfinite(out.terminal)) throw EvaluationError("solve_backward_ode: non-finite g(phi_T)");
    out.values[N] = out.terminal;
    // psi' = -f(s, psi, 0); in reversed time r = T - s this is psi' = f.
    for (int i = N - 1; i >= 0; --i) {
        const double s = grid.node(i + 1);
        const double y = out.values[i + 1];
        const double k1 = f(s, y, i + 1);
        const double k2 = f(s - 0.5 * h, y + 0.5 * h * k1, i);
        const double k3 = f(s - 0.5 * h, y + 0.5 * h * k2, i);
        const double k4 = f(s - h, y + h * k3, i);
        out.values[i] = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return out;
}

nlohmann::json LadderSolution::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t k = 0; k < n_values.size(); ++k) {
        rows.push_back({{"n", n_values[k]},
                        {"y0", solutions[k].y0},
                        {"y0_std_error", solutions[k].y0_std_error},
                        {"scheme", solutions[k].scheme_meta.to_json()}});
    }
    return {{"rungs", rows},
            {"sup_node_gaps", sup_node_gaps},
            {"worst_z_score", worst_z_score},
            {"violations", violations},
            {"monotone", monotone()}};
}

namespace {

/// Node-wise test of mean(a_i) <= mean(b_i) + 3 pooled se. Returns (worst slack, node, count, worst z).
struct OrderCheck {
    double worst_slack = -INFINITY;
    int worst_node = 0;
    std::size_t violations = 0;
    double worst_z = INFINITY;
};

OrderCheck check_order(const BsdeSolution& low, const BsdeSolution& high) {
    OrderCheck out;
    const int N = low.y_paths.grid.steps();
    for (int i = 0; i <= N; ++i) {
        const MeanEstimate a = low.node_mean(i);
        const MeanEstimate b = high.node_mean(i);
        const double se = std::hypot(a.std_error, b.std_error);
        const double slack = a.mean - b.mean - 3.0 * se;
        if (slack > out.worst_slack) {
            out.worst_slack = slack;
            out.worst_node = i;
        }
        if (slack > 1e-12) ++out.violations;
        const double diff = b.mean - a.mean;
        const double z = se > 0.0 ? diff / se : (diff >= -1e-12 ? INFINITY : -INFINITY);
        out.worst_z = std::min(out.worst_z, z);
    }
    return out;
}

}  // namespace

LadderSolution monotone_ladder_solve(const CoefficientSet& coeffs, const GeneratorLadder& ladder,
                                     const SamplePathBatch& x_batch, const BrownianBatch& noise,
                                     const LsmcConfig& config) {
    LadderSolution out;
    out.n_values = ladder.n_values();
    for (double n : out.n_values) {
        out.solutions.push_back(solve_bsde_lsmc(coeffs, ladder.rung(n), x_batch, noise, config));
    }
    out.worst_z_score = INFINITY;
    const int N = x_batch.grid.steps();
    for (std::size_t k = 0; k + 1 < out.solutions.size(); ++k) {
        const auto& lo = out.solutions[k];
        const auto& hi = out.solutions[k + 1];
        const OrderCheck c = check_order(lo, hi);
        out.worst_z_score = std::min(out.worst_z_score, c.worst_z);
        if (c.violations > 0) {
            out.violations.push_back("Y^n > Y^n' + 3 se for n = " + std::to_string(out.n_values[k]) +
                                     " at " + std::to_string(c.violations) + " nodes (worst node " +
                                     std::to_string(c.worst_node) + ")");
        }
        double gap = 0.0;
        for (int i = 0; i <= N; ++i) gap = std::max(gap, std::abs(hi.node_mean(i).mean - lo.node_mean(i).mean));
        out.sup_node_gaps.push_back(gap);
    }
    return out;
}

nlohmann::json ComparisonReport::to_json() const {
    return {{"y0_low", y0_low},   {"y0_high", y0_high},       {"violations", violations},
            {"worst_slack", worst_slack}, {"worst_node", worst_node}, {"passed", passed()}};
}

ComparisonReport comparison_check(const CoefficientSet& coeffs, const GeneratorFn& generator,
                                  const TerminalFn& g_low, const TerminalFn& g_high,
                                  const SamplePathBatch& x_batch, const BrownianBatch& noise,
                                  const LsmcConfig& config) {
    const int N = x_batch.grid.steps();
    for (std::size_t p = 0; p < x_batch.paths; ++p) {
        if (g_low(x_batch.point(p, N)) > g_high(x_batch.point(p, N))) {
            throw ConfigError("comparison_check: g_low > g_high on path " + std::to_string(p));
        }
    }
    CoefficientSet low = coeffs, high = coeffs;
    low.terminal_g = g_low;
    high.terminal_g = g_high;
    const BsdeSolution a = solve_bsde_lsmc(low, generator, x_batch, noise, config);
    const BsdeSolution b = solve_bsde_lsmc(high, generator, x_batch, noise, config);
    const OrderCheck c = check_order(a, b);
    ComparisonReport out;
    out.y0_low = a.y0;
    out.y0_high = b.y0;
    out.violations = c.violations;
    out.worst_slack = c.worst_slack;
    out.worst_node = c.worst_node;
    return out;
}

bool RegularityReport::exponent_in(double lo, double hi) const {
    return std::all_of(rows.begin(), rows.end(),
                       [&](const RegularityRow& r) { return r.t_exponent >= lo && r.t_exponent <= hi; });
}

nlohmann::json RegularityReport::to_json() const {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& row : rows) {
        r.push_back({{"n", row.n},
                     {"c_x", row.c_x},
                     {"c_t", row.c_t},
                     {"t_exponent", row.t_exponent},
                     {"c_eps", row.c_eps}});
    }
    return {{"rows", r}, {"c_x_spread", c_x_spread}, {"c_t_spread", c_t_spread}, {"stable", stable()}};
}

namespace {

/// RMS over paths of sup_i |a_{i + offset_a} - b_{i + offset_b}| over the overlap.
double rms_sup_gap(const BsdeSolution& a, int offset_a, const BsdeSolution& b, int offset_b) {
    const int len = std::min(a.y_paths.grid.steps() - offset_a, b.y_paths.grid.steps() - offset_b);
    double acc = 0.0;
    for (std::size_t p = 0; p < a.y_paths.paths; ++p) {
        double worst = 0.0;
        for (int i = 0; i <= len; ++i) {
            worst = std::max(worst, std::abs(a.y_paths.at(p, i + offset_a) - b.y_paths.at(p, i + offset_b)));
        }
        acc += worst * worst;
    }
    return std::sqrt(acc / static_cast<double>(a.y_paths.paths));
}

}  // namespace

RegularityReport apriori_regularity_check(const CoefficientSet& coeffs,
                                          const GeneratorLadder& ladder,
                                          const std::vector<double>& rungs,
                                          const RegularityConfig& config) {
    if (config.x_points.empty()) throw ConfigError("apriori_regularity_check: no x points");
    if (rungs.empty()) throw ConfigError("apriori_regularity_check: no rungs");
    const TimeGrid grid(config.t, coeffs.horizon_T, config.steps);
    const BrownianBatch noise = BrownianBatch::generate(grid, config.paths, coeffs.dims.d, config.seed);

    RegularityReport report;
    for (double n : rungs) {
        const GeneratorFn f = ladder.rung(n);
        const auto solve = [&](std::span<const double> x, double eps, int k) {
            const BrownianBatch w = k == 0 ? noise : noise.tail(k);
            const SamplePathBatch xs = simulate_sde(coeffs, w.grid.t0(), x, eps, w.grid, w);
            return solve_bsde_lsmc(coeffs, f, xs, w, config.lsmc);
        };
        RegularityRow row;
        row.n = n;
        std::vector<double> log_h, log_gap;
        std::vector<double> ms_by_shift(config.t_shifts.size(), 0.0);
        for (const auto& x : config.x_points) {
            const BsdeSolution base = solve(x, 1.0, 0);
            for (double h : config.x_shifts) {
                std::vector<double> xs = x;
                xs[0] += h;
                row.c_x = std::max(row.c_x, rms_sup_gap(base, 0, solve(xs, 1.0, 0), 0) / h);
            }
            for (std::size_t s = 0; s < config.t_shifts.size(); ++s) {
                const int k = config.t_shifts[s];
                const double h = k * grid.delta();
                const double gap = rms_sup_gap(base, k, solve(x, 1.0, k), 0);
                row.c_t = std::max(row.c_t, gap / std::sqrt(h));
                ms_by_shift[s] += gap * gap / static_cast<double>(config.x_points.size());
            }
            for (const auto& [e1, e2] : config.eps_pairs) {
                const double gap = rms_sup_gap(solve(x, e1, 0), 0, solve(x, e2, 0), 0);
                row.c_eps = std::max(row.c_eps, gap / std::abs(e1 - e2));
            }
        }
        for (std::size_t s = 0; s < config.t_shifts.size(); ++s) {
            log_h.push_back(std::log(config.t_shifts[s] * grid.delta()));
            log_gap.push_back(0.5 * std::log(ms_by_shift[s]));
        }
        if (log_h.size() >= 2) row.t_exponent = fit_line(log_h, log_gap).slope;
        report.rows.push_back(row);
    }
    const auto spread = [&](auto member) {
        double lo = INFINITY, hi = 0.0;
        for (const auto& r : report.rows) {
            lo = std::min(lo, r.*member);
            hi = std::max(hi, r.*member);
        }
        return lo > 0.0 ? hi / lo : (hi == 0.0 ? 1.0 : INFINITY);
    };
    report.c_x_spread = spread(&RegularityRow::c_x);
    report.c_t_spread = spread(&RegularityRow::c_t);
    return report;
}

nlohmann::json SmallNoiseTable::to_json() const {
    nlohmann::json r = nlohmann::json::array();
    for (const auto& row : rows) {
        r.push_back({{"epsilon", row.epsilon}, {"gap", row.gap.mean}, {"std_error", row.gap.std_error}});
    }
    return {{"rows", r}, {"slope", slope}, {"rk4_discrepancy", rk4_discrepancy}};
}

SmallNoiseTable small_noise_backward_gap(const CoefficientSet& coeffs,
                                         const GeneratorFn& generator,
                                         const std::vector<double>& epsilons, double t,
                                         std::span<const double> x, const TimeGrid& grid,
                                         std::size_t paths, std::uint64_t seed,
                                         const LsmcConfig& config) {
    for (double e : epsilons) {
        if (!(e > 0.0 && e <= 1.0)) throw ConfigError("small_noise_backward_gap: epsilon must lie in (0, 1]");
    }
    const BrownianBatch noise = BrownianBatch::generate(grid, paths, coeffs.dims.d, seed);

    const BrownianBatch still = BrownianBatch::generate(grid, 1, coeffs.dims.d, seed);
    const SamplePathBatch phi = simulate_sde(coeffs, t, x, 0.0, grid, still);
    const BsdeSolution psi = solve_bsde_lsmc(coeffs, generator, phi, still, config);

    SmallNoiseTable table;
    SamplePathBatch phi_rk4 = solve_ode(coeffs, t, x, grid);
    const BackwardOdePath psi_rk4 = solve_backward_ode(coeffs, generator, phi_rk4);
    for (int i = 0; i <= grid.steps(); ++i) {
        table.rk4_discrepancy = std::max(table.rk4_discrepancy, std::abs(psi.y_paths.at(0, i) - psi_rk4.values[i]));
    }

    std::vector<double> log_eps, log_gap;
    for (double eps : epsilons) {
        const SamplePathBatch xs = simulate_sde(coeffs, t, x, eps, grid, noise);
        const BsdeSolution y = solve_bsde_lsmc(coeffs, generator, xs, noise, config);
        std::vector<double> sup(paths);
        for (std::size_t p = 0; p < paths; ++p) {
            double worst = 0.0;
            for (int i = 0; i <= grid.steps(); ++i) {
                const double diff = y.y_paths.at(p, i) - psi.y_paths.at(0, i);
                worst = std::max(worst, diff * diff);
            }
            sup[p] = worst;
        }
        SmallNoiseRow row{eps, mean_and_std_error(sup)};
        row.gap.std_error = jackknife_std_error(sup);
        table.rows.push_back(row);
        if (row.gap.mean > 0.0) {
            log_eps.push_back(std::log(eps));
            log_gap.push_back(std::log(row.gap.mean));
        }
    }
    if (log_eps.size() >= 2) table.slope = fit_line(log_eps, log_gap).slope;
    return table;
}

}  // namespace qbsde
