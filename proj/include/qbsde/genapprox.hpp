#pragma once

#include "qbsde/model.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace qbsde {

/// The inf-convolution ladder f_n(t,y,z) = inf_v { f(t,y,v) + n|z - v|^2 }
/// over a finite set of rungs n >= 2L.
///
/// The infimum is taken over the ball |v - z| <= search_radius: a tensor grid
/// with inner_grid cells per axis (center included), then Brent refinement
/// around the best node. The grid stencil is built once and shared by every
/// evaluation.
class GeneratorLadder {
public:
    GeneratorLadder(CoefficientSet base, std::vector<double> n_values, double search_radius = 1.0,
                    int inner_grid = 16);

    /// Rungs {2L, 4L, ..., 2^rungs L}.
    static GeneratorLadder geometric(CoefficientSet base, int rungs = 10, double search_radius = 1.0,
                                     int inner_grid = 16);

    const CoefficientSet& base() const { return base_; }
    const std::vector<double>& n_values() const { return n_values_; }
    double search_radius() const { return search_radius_; }
    int inner_grid() const { return inner_grid_; }
    bool has_rung(double n) const;

    /// Offsets of the discretized ball, in lexicographic order.
    const std::vector<double>& stencil() const { return *stencil_; }
    std::size_t stencil_points() const { return stencil_->size() / static_cast<std::size_t>(base_.dims.d); }

    /// f_n as a generator callable (holds a copy of the ladder).
    GeneratorFn rung(double n) const;

private:
    CoefficientSet base_;
    std::vector<double> n_values_;
    double search_radius_;
    int inner_grid_;
    std::shared_ptr<const std::vector<double>> stencil_;
};

/// f_n(t, y, z). Requires n to be one of the ladder's rungs.
double inf_convolution(const GeneratorLadder& ladder, double n, double t, double y,
                       std::span<const double> z);

/// The minimizer reached by inf_convolution (ties broken toward the
/// lexicographically smallest grid node).
std::vector<double> inf_convolution_argmin(const GeneratorLadder& ladder, double n, double t,
                                           double y, std::span<const double> z);

struct LadderPropertyCheck {
    std::string property;
    std::size_t samples = 0;
    std::size_t violations = 0;
    double worst_slack = 0.0;  ///< max(observed - allowed); <= tolerance when clean
    std::string worst_point;
    bool passed() const { return violations == 0; }
};

struct ConvergenceWitness {
    double t = 0.0;
    double y = 0.0;
    std::vector<double> z;
    std::vector<double> n;
    std::vector<double> gaps;  ///< |f_{n_k}(t, y, z_k) - f(t, y, z)|
};

struct PropertyReport {
    std::vector<LadderPropertyCheck> checks;  ///< growth, monotone, local-lipschitz
    std::vector<ConvergenceWitness> witnesses;
    double tolerance = 0.0;
    bool witnesses_decreasing() const;
    bool all_passed() const;
    nlohmann::json to_json() const;
};

/// Samples the four ladder properties. Numerical tolerance 1e-9 absorbs the
/// minimization error. Samples t in [0, T], |y| <= 2, |z_i| <= 2.
PropertyReport ladder_properties_check(const GeneratorLadder& ladder, std::size_t sample_budget,
                                       std::uint64_t rng_seed);

/// Convolution of f(t, ., .) with the bump eta_n over (y, z), by tensor
/// Gauss-Legendre quadrature on [-1/n, 1/n]^{1+d} normalized by the
/// quadrature mass of the bump itself.
double mollify_generator(const CoefficientSet& coeffs, int n, double t, double y,
                         std::span<const double> z, int nodes_per_dim = 32);

/// Normalized bump exp(-1 / (1 - |v|^2)) on the unit ball (unnormalized value).
double bump_profile(double radius_sq);

}  // namespace qbsde
