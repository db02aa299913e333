#pragma once

#include "qbsde/pde.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace qbsde {

/// Piecewise-constant control derivative on a grid; v is its running integral.
class ControlPath {
public:
    ControlPath() = default;
    ControlPath(TimeGrid grid, int dims, std::vector<double> vdot);
    static ControlPath zero(const TimeGrid& grid, int dims);
    /// vdot = c on every step.
    static ControlPath constant(const TimeGrid& grid, std::vector<double> c);

    const TimeGrid& grid() const { return grid_; }
    int dims() const { return dims_; }
    const std::vector<double>& vdot() const { return vdot_; }
    double vdot(int step, int coord) const { return vdot_[static_cast<std::size_t>(step) * dims_ + coord]; }
    /// (1/2) sum_i |vdot_i|^2 delta, cached.
    double action() const { return action_; }
    /// v at every node, v_0 = 0.
    std::vector<double> v() const;

private:
    TimeGrid grid_;
    int dims_ = 1;
    std::vector<double> vdot_;
    double action_ = 0.0;
};

/// node,vdot0[,vdot1...]
void write_csv(const ControlPath& control, std::ostream& out);

enum class EventKind { TerminalInterval, SupBall, SupExceedance };
std::string to_string(EventKind kind);

/// Events on a scalar path psi (or on one coordinate of phi):
///   terminal-interval  a <= psi_T <= b   (a or b may be infinite)
///   sup-ball           max_s |psi_s - ref_s| <= delta
///   sup-exceedance     max_s |psi_s - ref_s| >= delta
/// An empty reference means the unperturbed path.
struct EventSpec {
    EventKind kind = EventKind::TerminalInterval;
    double a = 0.0;
    double b = 0.0;
    double delta = 0.0;
    std::vector<double> reference;
    int component = 0;      ///< coordinate of phi for forward events
    bool closed = true;
    double margin = 1e-3;   ///< shrink / inflate width for Int(A) / Cl(A)

    void validate() const;
    /// Shrunk by margin; may be empty (see is_empty).
    EventSpec interior() const;
    EventSpec closure() const;
    bool is_empty() const;
    /// Path membership at grid nodes.
    bool contains(std::span<const double> path) const;

    nlohmann::json to_json() const;
    static EventSpec from_json(const nlohmann::json& doc);
};

/// Where psi = F^0(phi) comes from: the eps = 0 lattice solution or the
/// characteristics oracle (backward ODE along phi from every node). Lattice
/// lookups clamp x to the box.
class F0Source {
public:
    static F0Source lattice(std::shared_ptr<const PdeSolution> u0);
    static F0Source characteristics(CoefficientSet coeffs, GeneratorFn generator);

    /// u^0(s, x) with s = grid.node(i).
    double value(const TimeGrid& grid, int i, std::span<const double> x) const;
    bool is_lattice() const { return static_cast<bool>(u0_); }
    const PdeSolution* lattice_solution() const { return u0_.get(); }

private:
    std::shared_ptr<const PdeSolution> u0_;
    std::shared_ptr<const CoefficientSet> coeffs_;
    GeneratorFn generator_;
};

/// RK4 for phi' = b(s, phi) + sigma(s) vdot_s, vdot frozen on each step.
SamplePathBatch controlled_ode(const CoefficientSet& coeffs, std::span<const double> x,
                               const ControlPath& control);

/// psi_s = u^0(s, phi_s) on the grid of phi. A lattice source throws
/// EvaluationError when phi leaves the box.
SamplePathBatch compose_F0(const SamplePathBatch& phi, const F0Source& source);

struct OptimizerConfig {
    int restarts = 8;
    int stages = 6;              ///< penalty stages, weight x growth each stage
    double penalty0 = 10.0;
    double penalty_growth = 10.0;
    int extra_stages = 10;       ///< multiplier-only stages at the final weight until feasible
    double fd_step = 1e-6;       ///< relative central-difference step
    double feasibility_tol = 1e-7;
    int inner_iterations = 400;
    double start_scale = 1.0;    ///< std of random restarts' vdot
    std::uint64_t seed = 1;
};

struct RateResult {
    ControlPath optimal_control;
    double rate = 0.0;
    bool infinite = false;       ///< +inf sentinel: no feasible control found / empty event
    double feasibility_residual = 0.0;
    double multistart_spread = 0.0;
    bool converged = false;
    std::vector<double> restart_rates;      ///< action per restart (NaN when infeasible)
    std::vector<double> restart_residuals;
    std::string note;

    nlohmann::json to_json() const;
};

RateResult rate_forward(const CoefficientSet& coeffs, std::span<const double> x,
                        const EventSpec& event, const TimeGrid& grid,
                        const OptimizerConfig& config = {});

RateResult rate_backward(const CoefficientSet& coeffs, std::span<const double> x,
                         const EventSpec& event, const F0Source& source, const TimeGrid& grid,
                         const OptimizerConfig& config = {});

struct McConfig {
    std::size_t paths = 10000;
    int steps = 128;
    int pde_refine = 4;          ///< PDE steps per MC step
    double lattice_h = 0.02;
    std::vector<ControlPath> tilts;  ///< equal-weight mixture; empty = crude
    double tilt_below = 1.0;     ///< tilts are used only for eps <= tilt_below
    bool bridge_correction = true;
    std::uint64_t seed = 1;
};

struct McRow {
    double epsilon = 0.0;
    double p_hat = 0.0;
    double std_error = 0.0;
    std::size_t hits = 0;
    bool censored = false;       ///< no hits; only upper_bound = 3/M is known
    double upper_bound = 0.0;
    bool tilted = false;
    std::size_t lattice_exits = 0;  ///< path nodes clamped into the lattice box
    double eps2_log_p() const;   ///< NaN when censored
};

struct McTable {
    std::vector<McRow> rows;
    std::vector<std::string> warnings;
    nlohmann::json to_json() const;
};

/// P[Y^eps in A] with Y^eps_s = u^eps(s, X^eps_s) read from the eps-PDE solved
/// with `generator`. Sup events use a Brownian-bridge crossing correction
/// between nodes with the local volatility eps |sigma^T grad u^eps|. Under a
/// tilt mixture the weights are the mixture's likelihood ratios.
McTable mc_tail_estimate(const CoefficientSet& coeffs, const GeneratorFn& generator,
                         double t, std::span<const double> x, const EventSpec& event,
                         const std::vector<double>& epsilons, const McConfig& config = {});

struct LdpGapRow {
    McRow mc;
    std::string verdict;  ///< "pass", "fail", "untestable"
};

struct LdpGapReport {
    std::vector<LdpGapRow> rows;
    RateResult rate_int;
    RateResult rate_cl;
    double slack = 0.0;
    std::optional<double> reliable_epsilon;  ///< smallest uncensored eps
    bool sandwich_holds = false;             ///< at reliable_epsilon
    bool trend_nonincreasing = false;        ///< eps^2 log P nonincreasing in eps
    bool testable() const { return reliable_epsilon.has_value(); }
    bool passed() const { return testable() && sandwich_holds && trend_nonincreasing; }
    nlohmann::json to_json() const;
};

/// Checks -I_Cl - slack <= eps^2 log P <= -I_Int + slack at the smallest
/// reliable eps, where slack = relative_slack * max(I_Cl, I_Int) (or
/// absolute_slack if larger), and the finite-eps trend.
LdpGapReport ldp_gap_report(const RateResult& rate_int, const RateResult& rate_cl,
                            const McTable& table, double relative_slack = 0.25,
                            double absolute_slack = 1e-3);

/// eps,P_hat,stderr,eps2_logP,rate_int,rate_cl,verdict
void write_csv(const LdpGapReport& report, std::ostream& out);

}  // namespace qbsde
