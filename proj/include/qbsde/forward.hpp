#pragma once

#include "qbsde/model.hpp"
#include "qbsde/numerics.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace qbsde {

/// Uniform grid t0 = s_0 < ... < s_N = T.
class TimeGrid {
public:
    TimeGrid() = default;
    TimeGrid(double t0, double T, int steps);

    double t0() const { return t0_; }
    double T() const { return T_; }
    int steps() const { return steps_; }
    double delta() const { return (T_ - t0_) / steps_; }
    /// node(N) returns T exactly.
    double node(int i) const { return i == steps_ ? T_ : t0_ + i * delta(); }
    /// Index of the node equal to t (within 1e-12 of the spacing), -1 when t is not a node.
    int index_of(double t) const;

    bool operator==(const TimeGrid& other) const;

private:
    double t0_ = 0.0;
    double T_ = 1.0;
    int steps_ = 1;
};

/// M paths of d-dimensional Brownian increments on a grid. Path p is drawn
/// from its own substream of `seed`, so the batch does not depend on how
/// paths are scheduled.
struct BrownianBatch {
    TimeGrid grid;
    std::size_t paths = 0;
    int dims = 1;
    std::uint64_t seed = 0;
    std::vector<double> increments;  ///< [path][step][coordinate]

    static BrownianBatch generate(const TimeGrid& grid, std::size_t paths, int dims,
                                  std::uint64_t seed);

    double dw(std::size_t path, int step, int coord) const {
        return increments[(path * grid.steps() + step) * dims + coord];
    }
    std::span<const double> step(std::size_t path, int step) const {
        return {increments.data() + (path * grid.steps() + step) * dims,
                static_cast<std::size_t>(dims)};
    }

    /// The same increments restricted to [node(k), T].
    BrownianBatch tail(int k) const;
};

/// M trajectories of a k-vector valued quantity on a grid.
struct SamplePathBatch {
    TimeGrid grid;
    std::size_t paths = 0;
    int width = 1;          ///< k: m for states, d for Z, 1 for scalars
    std::string label;      ///< "X^eps", "phi", "Y", "Z", "psi", ...
    std::uint64_t seed = 0;
    std::vector<double> values;  ///< [path][node][coordinate], N+1 nodes

    SamplePathBatch() = default;
    SamplePathBatch(TimeGrid grid, std::size_t paths, int width, std::string label,
                    std::uint64_t seed = 0);

    double& at(std::size_t path, int node, int coord = 0) {
        return values[(path * (grid.steps() + 1) + node) * width + coord];
    }
    double at(std::size_t path, int node, int coord = 0) const {
        return values[(path * (grid.steps() + 1) + node) * width + coord];
    }
    std::span<const double> point(std::size_t path, int node) const {
        return {values.data() + (path * (grid.steps() + 1) + node) * width,
                static_cast<std::size_t>(width)};
    }
    std::span<double> point(std::size_t path, int node) {
        return {values.data() + (path * (grid.steps() + 1) + node) * width,
                static_cast<std::size_t>(width)};
    }
    bool all_finite() const;
};

/// Euler-Maruyama for dX = b(s, X) ds + eps sigma(s) dW started at (t, x).
SamplePathBatch simulate_sde(const CoefficientSet& coeffs, double t, std::span<const double> x,
                             double epsilon, const TimeGrid& grid, const BrownianBatch& noise);

/// Explicit Euler for phi' = b(s, phi): simulate_sde at eps = 0, one path.
SamplePathBatch euler_ode(const CoefficientSet& coeffs, double t, std::span<const double> x,
                          const TimeGrid& grid);

/// Classical RK4 for phi' = b(s, phi), one path.
SamplePathBatch solve_ode(const CoefficientSet& coeffs, double t, std::span<const double> x,
                          const TimeGrid& grid);

/// E[sup_s |X_s - phi_s|^2] with a jackknife standard error. phi is a single
/// path (or one path per X path).
MeanEstimate perturbation_gap(const SamplePathBatch& x_batch, const SamplePathBatch& phi);

struct FlowStart {
    double t = 0.0;
    std::vector<double> x;
    double epsilon = 1.0;
};

/// E[sup_s |X^{eps,t,x}_s - X^{eps',t',x'}_s|^2] under common noise, with the
/// convention X^{t,x}_s = x for s <= t. Both start times must be grid nodes.
MeanEstimate flow_continuity_gap(const CoefficientSet& coeffs, const FlowStart& a,
                                 const FlowStart& b, const TimeGrid& grid,
                                 const BrownianBatch& noise);

/// One row per (path, node): path,node,time,v0[,v1...].
void write_csv(const SamplePathBatch& batch, std::ostream& out);

/// Little-endian dump: "QBSDUMP1", then M, N, k, seed as uint64, then the
/// grid (t0, T) and the values as float64.
void write_binary(const SamplePathBatch& batch, std::ostream& out);
SamplePathBatch read_binary(std::istream& in);

}  // namespace qbsde
