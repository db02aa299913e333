#pragma once

#include "qbsde/backward.hpp"

#include <optional>
#include <string>
#include <vector>

namespace qbsde {

enum class BoundaryMode { NeumannZero, DirichletFrozen };

std::string to_string(BoundaryMode mode);
BoundaryMode boundary_mode_from_string(const std::string& name);

/// Tensor lattice on a box in R^m, m <= 2.
class SpaceLattice {
public:
    SpaceLattice() = default;
    SpaceLattice(std::vector<double> lo, std::vector<double> hi, std::vector<int> nodes,
                 BoundaryMode mode = BoundaryMode::NeumannZero);

    /// Nodes spaced (at most) h apart covering [lo, hi].
    static SpaceLattice with_spacing(std::vector<double> lo, std::vector<double> hi, double h,
                                     BoundaryMode mode = BoundaryMode::NeumannZero);

    /// Box [x_lo - margin, x_hi + margin] with margin L T + 4 eps |sigma| sqrt(T).
    static SpaceLattice around(const CoefficientSet& coeffs, std::vector<double> x_lo,
                               std::vector<double> x_hi, double epsilon, double h,
                               BoundaryMode mode = BoundaryMode::NeumannZero);

    int dims() const { return static_cast<int>(lo_.size()); }
    double lo(int k) const { return lo_[k]; }
    double hi(int k) const { return hi_[k]; }
    int nodes(int k) const { return nodes_[k]; }
    double spacing(int k) const { return (hi_[k] - lo_[k]) / (nodes_[k] - 1); }
    BoundaryMode boundary() const { return mode_; }
    std::size_t size() const;

    double coordinate(int k, int index) const {
        return index == nodes_[k] - 1 ? hi_[k] : lo_[k] + index * spacing(k);
    }
    std::size_t flat(int i0, int i1 = 0) const { return static_cast<std::size_t>(i1) * nodes_[0] + i0; }
    std::vector<double> point(std::size_t flat_index) const;
    bool on_boundary(std::size_t flat_index) const;
    bool contains(std::span<const double> x) const;

    /// Throws ConfigError unless [x_lo, x_hi] sits inside the box with the margin of `around`.
    void check_margin(const CoefficientSet& coeffs, std::span<const double> x_lo,
                      std::span<const double> x_hi, double epsilon) const;

private:
    std::vector<double> lo_, hi_;
    std::vector<int> nodes_;
    BoundaryMode mode_ = BoundaryMode::NeumannZero;
};

enum class PdeVariant { Full, Ladder, FirstOrder };
std::string to_string(PdeVariant variant);

struct CharacteristicsPoint {
    double t = 0.0;
    std::vector<double> x;
    double lattice_value = 0.0;
    double characteristic_value = 0.0;
};

/// u on every slice of the time grid and every lattice node.
struct PdeSolution {
    SpaceLattice lattice;
    TimeGrid grid;
    std::vector<double> u;  ///< [slice][flat node]
    PdeVariant variant = PdeVariant::Full;
    double epsilon = 1.0;
    std::optional<double> n;
    std::size_t clip_events = 0;
    std::size_t boundary_flags = 0;  ///< boundary values found beyond M_bound
    std::vector<CharacteristicsPoint> characteristics;  ///< first-order cross-check samples
    double characteristics_worst = 0.0;

    double node_value(int slice, std::size_t flat_index) const {
        return u[static_cast<std::size_t>(slice) * lattice.size() + flat_index];
    }
    /// Multilinear interpolation on a slice; throws EvaluationError outside the box.
    double value(int slice, std::span<const double> x) const;
    /// Linear in time between slices.
    double value_at(double t, std::span<const double> x) const;
    /// Interpolated centered-difference gradient on a slice.
    std::vector<double> gradient(int slice, std::span<const double> x) const;

    nlohmann::json summary() const;
};

/// Backward IMEX step from slice i+1 to slice i:
///   (I - delta eps^2/2 a(t_i):D^2) u^i = u^{i+1} + delta [b . grad_up u^{i+1} + f(t_i, u^{i+1}, eps sigma^T grad_c u^{i+1})]
/// Diffusion is implicit (tridiagonal lines, LOD for m = 2 with the mixed term
/// explicit), drift is first-order upwind, the source is explicit with centered
/// gradients (one-sided on the boundary ring). The explicit drift requires
/// delta * sum_k |b_k| / h_k <= 0.9 on the lattice.
PdeSolution solve_semilinear(const CoefficientSet& coeffs, const GeneratorFn& generator,
                             double epsilon, const SpaceLattice& lattice, const TimeGrid& grid,
                             std::optional<double> rung = std::nullopt);

/// eps = 0: upwind transport plus explicit source f(t, u, 0). Compares u^0(t0, x)
/// against psi^{t0,x}_{t0} from the characteristics (RK4 ODE, RK4 backward ODE)
/// at the given points (a default set of interior nodes when empty).
PdeSolution solve_first_order(const CoefficientSet& coeffs, const GeneratorFn& generator,
                              const TimeGrid& grid, const SpaceLattice& lattice,
                              std::vector<std::vector<double>> check_points = {});

/// psi^{t,x}_t along the characteristic started at (t, x).
double characteristic_value(const CoefficientSet& coeffs, const GeneratorFn& generator, double t,
                            std::span<const double> x, int steps);

struct UniformConvergenceReport {
    std::vector<double> n_values;
    std::vector<double> sup_gaps;  ///< sup over the box of |u^{n_k} - u^{n_last}|
    double decay_exponent = 0.0;   ///< fitted slope of log gap vs log n (reported only)
    bool gaps_nonincreasing = false;
    std::size_t monotone_violations = 0;  ///< nodes with u^n > u^{n'} + 1e-9
    double worst_monotone_slack = 0.0;
    bool passed() const { return gaps_nonincreasing && monotone_violations == 0; }
    nlohmann::json to_json() const;
};

/// Compact box: times [t_lo, t_hi] and space [x_lo, x_hi].
struct CompactBox {
    double t_lo = 0.0;
    double t_hi = 0.0;
    std::vector<double> x_lo, x_hi;
};

UniformConvergenceReport ladder_uniform_convergence(const CoefficientSet& coeffs,
                                                    const GeneratorLadder& ladder, double epsilon,
                                                    const SpaceLattice& lattice,
                                                    const TimeGrid& grid, const CompactBox& box);

struct FeynmanKacPoint {
    double t = 0.0;
    std::vector<double> x;
    double pde = 0.0;
    double lsmc = 0.0;
    double std_error = 0.0;
    double allowed = 0.0;
    bool passed() const { return std::abs(pde - lsmc) <= allowed; }
};

struct FeynmanKacConfig {
    std::size_t paths = 20000;
    int steps = 64;
    std::uint64_t seed = 1;
    double scheme_tolerance = 5e-3;
    LsmcConfig lsmc;
};

struct FeynmanKacReport {
    std::vector<FeynmanKacPoint> points;
    std::size_t worst = 0;
    bool passed() const;
    nlohmann::json to_json() const;
};

/// |u(t,x) - y0_lsmc(t,x)| <= 3 se + scheme tolerance at each point, with the
/// LSMC run at the PDE's epsilon using the same generator.
FeynmanKacReport feynman_kac_crosscheck(const PdeSolution& pde, const CoefficientSet& coeffs,
                                        const GeneratorFn& generator,
                                        const std::vector<std::pair<double, std::vector<double>>>& points,
                                        const FeynmanKacConfig& config = {});

/// x,u rows for one slice.
void write_slice_csv(const PdeSolution& pde, int slice, std::ostream& out);

/// The full tensor as a batch with one "path" per lattice node (for write_binary).
SamplePathBatch to_batch(const PdeSolution& pde);

}  // namespace qbsde
