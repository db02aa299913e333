#pragma once

#include "qbsde/forward.hpp"
#include "qbsde/genapprox.hpp"

#include <optional>
#include <string>
#include <vector>

namespace qbsde {

struct LsmcConfig {
    int degree = 4;                ///< polynomial degree in each state coordinate
    std::optional<double> clip;    ///< defaults to coeffs.m_bound()
    double fixed_point_tol = 1e-12;
    int fixed_point_max_iter = 50;
    double condition_limit = 1e10;  ///< normal-matrix condition number that triggers degradation
};

struct SchemeMeta {
    int basis_degree = 0;
    std::string basis;
    double clip_bound = 0.0;
    std::size_t y_clip_events = 0;
    std::size_t z_clip_events = 0;
    int max_fixed_point_iterations = 0;
    std::size_t fixed_point_failures = 0;
    std::size_t degraded_nodes = 0;
    double sup_abs_y = 0.0;
    double sup_abs_z = 0.0;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
};

struct BsdeSolution {
    SamplePathBatch y_paths;
    SamplePathBatch z_paths;
    double y0 = 0.0;
    double y0_std_error = 0.0;
    SchemeMeta scheme_meta;

    /// Node-wise mean of Y and its standard error over paths.
    MeanEstimate node_mean(int node) const;
};

/// Backward Euler regression scheme, explicit in Z and implicit in Y:
///   Y_N = g(X_N)
///   Z_i = E[(Y_{i+1} - E[Y_{i+1} | X_i]) dW_i | X_i] / delta
///   Y_i = E[Y_{i+1} | X_i] + f(t_i, Y_i, Z_i) delta   (fixed point, then clipped)
/// Conditional expectations are least-squares fits on a tensor polynomial
/// basis in the standardized X_i. The standard error of y0 is that of
/// g(X_N) + sum_i f(t_i, Y_i, Z_i) delta over paths.
BsdeSolution solve_bsde_lsmc(const CoefficientSet& coeffs, const GeneratorFn& generator,
                             const SamplePathBatch& x_batch, const BrownianBatch& noise,
                             const LsmcConfig& config = {});

/// Writes "y0,std_error" followed by the node-wise means "node,time,mean_y,se_y,mean_z0,...".
void write_csv(const BsdeSolution& solution, std::ostream& out);

struct BackwardOdePath {
    TimeGrid grid;
    std::vector<double> values;
    double terminal = 0.0;
};

/// RK4 for psi' = -f(s, psi, 0) backward from psi_T = g(phi_T).
BackwardOdePath solve_backward_ode(const CoefficientSet& coeffs, const GeneratorFn& generator,
                                   const SamplePathBatch& phi);

struct LadderSolution {
    std::vector<double> n_values;
    std::vector<BsdeSolution> solutions;
    std::vector<double> sup_node_gaps;  ///< sup_i |mean Y^{n_{k+1}}_i - mean Y^{n_k}_i|
    double worst_z_score = 0.0;         ///< min over rungs and nodes of gap / pooled se
    std::vector<std::string> violations;
    bool monotone() const { return violations.empty(); }
    nlohmann::json to_json() const;
};

/// Solves the BSDE for every rung and checks Y^n <= Y^{n'} node-wise within
/// 3 pooled standard errors.
LadderSolution monotone_ladder_solve(const CoefficientSet& coeffs, const GeneratorLadder& ladder,
                                     const SamplePathBatch& x_batch, const BrownianBatch& noise,
                                     const LsmcConfig& config = {});

struct ComparisonReport {
    double y0_low = 0.0;
    double y0_high = 0.0;
    std::size_t violations = 0;
    double worst_slack = 0.0;  ///< max_i (mean Y1_i - mean Y2_i - 3 pooled se)
    int worst_node = 0;
    bool passed() const { return violations == 0; }
    nlohmann::json to_json() const;
};

/// Solves with terminal g_low and g_high on shared paths and checks Y_low <= Y_high.
ComparisonReport comparison_check(const CoefficientSet& coeffs, const GeneratorFn& generator,
                                  const TerminalFn& g_low, const TerminalFn& g_high,
                                  const SamplePathBatch& x_batch, const BrownianBatch& noise,
                                  const LsmcConfig& config = {});

struct RegularityConfig {
    double t = 0.0;
    std::vector<std::vector<double>> x_points;
    std::vector<double> x_shifts{0.05, 0.1, 0.2};  ///< x' = x + h e_1
    std::vector<int> t_shifts{1, 2, 4, 8};           ///< t' = t + k delta
    std::vector<std::pair<double, double>> eps_pairs;  ///< optional (eps, eps')
    int steps = 64;
    std::size_t paths = 4000;
    std::uint64_t seed = 1;
    LsmcConfig lsmc;
};

struct RegularityRow {
    double n = 0.0;
    double c_x = 0.0;       ///< max RMS(sup_s |Y^{t,x} - Y^{t,x'}|) / |x - x'|
    double c_t = 0.0;       ///< max RMS(sup_{s >= t'} |Y^{t,x} - Y^{t',x}|) / sqrt(t' - t)
    double t_exponent = 0.0;
    double c_eps = 0.0;     ///< max RMS(sup_s |Y^{eps} - Y^{eps'}|) / |eps - eps'|
};

struct RegularityReport {
    std::vector<RegularityRow> rows;
    double c_x_spread = 0.0;  ///< max / min over rungs
    double c_t_spread = 0.0;
    bool stable() const { return c_x_spread <= 2.0 && c_t_spread <= 2.0; }
    bool exponent_in(double lo, double hi) const;
    nlohmann::json to_json() const;
};

/// Pathwise Y gaps for shifted starting points under common noise, with the
/// fitted constants reported per rung.
RegularityReport apriori_regularity_check(const CoefficientSet& coeffs,
                                          const GeneratorLadder& ladder,
                                          const std::vector<double>& rungs,
                                          const RegularityConfig& config);

struct SmallNoiseRow {
    double epsilon = 0.0;
    MeanEstimate gap;  ///< E[sup_s |Y^eps_s - psi_s|^2]
};

struct SmallNoiseTable {
    std::vector<SmallNoiseRow> rows;
    double slope = 0.0;             ///< d log gap / d log eps
    double rk4_discrepancy = 0.0;   ///< sup |psi(scheme) - psi(RK4)|
    nlohmann::json to_json() const;
};

/// E[sup_s |Y^eps_s - psi_s|^2] for each eps on common noise. psi is the
/// same scheme run at eps = 0 (implicit Euler along the Euler skeleton), so
/// the gap carries no eps-independent discretization offset; its distance to
/// the RK4 backward ODE is reported separately.
SmallNoiseTable small_noise_backward_gap(const CoefficientSet& coeffs,
                                         const GeneratorFn& generator,
                                         const std::vector<double>& epsilons, double t,
                                         std::span<const double> x, const TimeGrid& grid,
                                         std::size_t paths, std::uint64_t seed,
                                         const LsmcConfig& config = {});

}  // namespace qbsde
