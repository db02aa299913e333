#pragma once

// Reference values computed without the library: closed forms, brute-force
// grids, composite Simpson quadrature, the exact discrete QP, and the
// reflection series. Frozen constants were produced with 30-digit mpmath.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace oracle {

/// log E[exp(sin(W_0.5))].
inline constexpr double kColeHopfHalf = 0.153826555268055483;

/// P(sup_{[0,1]} |W| >= 1/eps) and eps^2 log of it, for eps in {0.4, 0.2, 0.1, 0.05}.
struct ReflectionRow {
    double eps;
    double p;
    double eps2_log_p;
};
inline const std::vector<ReflectionRow> kReflection{{0.4, 0.0248386613, -0.591257},
                                                     {0.2, 1.14660629e-6, -0.547148},
                                                     {0.1, 3.04794121e-23, -0.518450},
                                                     {0.05, 1.10144965e-88, -0.506327}};

/// E[sup_{[0,1]} |W|^2] = 2 G with G Catalan's constant (continuous monitoring).
inline constexpr double kSupAbsSquare = 1.8319311883544380;

/// min_v v^2 + n (z - v)^2 = n z^2 / (n + 1).
inline double inf_conv_square(double n, double z) { return n / (n + 1.0) * z * z; }

/// min_v a v + n (z - v)^2 = a z - a^2 / (4n).
inline double inf_conv_linear(double a, double n, double z) { return a * z - a * a / (4.0 * n); }

/// Dense 1-d grid minimum of f(v) + n (z - v)^2 over |v - z| <= radius.
inline double brute_inf_conv(const std::function<double(double)>& f, double n, double z,
                             double radius = 1.0, int points = 200001) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < points; ++k) {
        const double v = z - radius + 2.0 * radius * k / (points - 1);
        best = std::min(best, f(v) + n * (z - v) * (z - v));
    }
    return best;
}

/// Composite Simpson on [lo, hi] with an even number of panels.
inline double simpson(const std::function<double(double)>& fn, double lo, double hi, int panels = 20000) {
    const double h = (hi - lo) / panels;
    double s = fn(lo) + fn(hi);
    for (int k = 1; k < panels; ++k) s += (k % 2 ? 4.0 : 2.0) * fn(lo + k * h);
    return s * h / 3.0;
}

/// E[h(x + sd * N(0,1))] by Simpson on +-12 standard deviations.
inline double gaussian_mean(const std::function<double(double)>& h, double x, double sd) {
    const double c = 1.0 / std::sqrt(2.0 * M_PI);
    return simpson([&](double u) { return c * std::exp(-0.5 * u * u) * h(x + sd * u); }, -12.0, 12.0);
}

/// (1/gamma) log E[exp(gamma g(x + W_tau))].
inline double cole_hopf(const std::function<double(double)>& g, double gamma, double tau, double x) {
    return std::log(gaussian_mean([&](double v) { return std::exp(gamma * g(v)); }, x, std::sqrt(tau))) / gamma;
}

inline double normal_upper(double a) { return 0.5 * std::erfc(a / std::sqrt(2.0)); }

/// P(sup_{[0,T]} |W| >= a) = 4 sum_k (-1)^{k+1} Phi_bar((2k-1) a / sqrt(T)).
inline double sup_abs_tail(double a, double T = 1.0) {
    double s = 0.0;
    for (int k = 1; k <= 60; ++k) s += (k % 2 ? 4.0 : -4.0) * normal_upper((2 * k - 1) * a / std::sqrt(T));
    return s;
}

/// Exact discrete QP: min (1/2) delta |v|^2 subject to beta . v = target, by
/// the KKT system [delta I, beta; beta^T, 0].
inline double linear_terminal_qp(const Eigen::VectorXd& beta, double delta, double target) {
    const int n = static_cast<int>(beta.size());
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + 1, n + 1);
    K.topLeftCorner(n, n) = delta * Eigen::MatrixXd::Identity(n, n);
    K.block(0, n, n, 1) = beta;
    K.block(n, 0, 1, n) = beta.transpose();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + 1);
    rhs(n) = target;
    const Eigen::VectorXd sol = K.fullPivLu().solve(rhs);
    return 0.5 * delta * sol.head(n).squaredNorm();
}

/// phi' = -kappa phi + v, v constant on each step, RK4: phi_N = a x + beta . v with
/// the one-step maps phi -> R phi + S v written out from the RK4 stages.
struct OuRk4Map {
    double R = 0.0;
    double S = 0.0;
    OuRk4Map(double kappa, double h) {
        const double q = kappa * h;
        R = 1.0 - q + q * q / 2.0 - q * q * q / 6.0 + q * q * q * q / 24.0;
        S = h * (1.0 - q / 2.0 + q * q / 6.0 - q * q * q / 24.0);
    }
    Eigen::VectorXd beta(int steps) const {
        Eigen::VectorXd b(steps);
        for (int i = 0; i < steps; ++i) b(i) = S * std::pow(R, steps - 1 - i);
        return b;
    }
};

/// Continuous OU (kappa = 1) terminal rate: min action to reach phi_T = c from x.
inline double ou_terminal_rate(double x, double c, double T) {
    return (c - x * std::exp(-T)) * (c - x * std::exp(-T)) / (1.0 - std::exp(-2.0 * T));
}

/// Second moment of one coordinate under the radial bump exp(-1/(1-r^2)) on
/// the disk of radius 1/n in the (y, z) plane: E[u^2] = E[r^2] / 2, both
/// radial integrals by Simpson.
inline double bump_coordinate_second_moment(int n) {
    const auto bump = [](double r) { return r < 1.0 ? std::exp(-1.0 / (1.0 - r * r)) : 0.0; };
    const double num = simpson([&](double r) { return r * r * r * bump(r); }, 0.0, 1.0);
    const double den = simpson([&](double r) { return r * bump(r); }, 0.0, 1.0);
    return num / den / 2.0 / (static_cast<double>(n) * n);
}

}  // namespace oracle
