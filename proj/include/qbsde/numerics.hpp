#pragma once

#include <functional>
#include <span>
#include <utility>
#include <vector>

namespace qbsde {

/// Gauss-Hermite rule for the standard normal weight: E[h(G)] ~ sum w_i h(x_i).
struct GaussHermiteRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/// Golub-Welsch construction of the n-point rule (probabilists' Hermite).
GaussHermiteRule gauss_hermite(int n);

/// E[h(G)], G ~ N(0,1).
double gaussian_expectation(const std::function<double(double)>& h, int n_nodes);

/// Gauss-Legendre nodes/weights on [-1, 1].
std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int n);

/// Minimize a scalar function on [lo, hi] with Brent's method. Returns (argmin, value).
std::pair<double, double> brent_minimize(const std::function<double(double)>& fn, double lo,
                                         double hi, int bits = 40, int max_iter = 200);

/// P[G >= x] for G ~ N(0,1), accurate in the far tail.
double normal_upper_tail(double x);

/// Ordinary least squares slope and intercept of ys on xs.
struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
};
LineFit fit_line(std::span<const double> xs, std::span<const double> ys);

/// Sample mean and standard error of the mean.
struct MeanEstimate {
    double mean = 0.0;
    double std_error = 0.0;
};
MeanEstimate mean_and_std_error(std::span<const double> samples);

/// Jackknife standard error of the sample mean.
double jackknife_std_error(std::span<const double> samples);

}  // namespace qbsde
