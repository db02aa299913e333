#include "qbsde/numerics.hpp"
#include "qbsde/errors.hpp"
#include "qbsde/parallel.hpp"

#include <Eigen/Dense>
#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

namespace qbsde {

namespace {
std::atomic<int> g_workers{static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))};
}

int worker_count() { return g_workers.load(); }

void set_worker_count(int workers) { g_workers.store(std::max(1, workers)); }

GaussHermiteRule gauss_hermite(int n) {
    if (n < 1) throw ConfigError("gauss_hermite: need at least one node");
    // Jacobi matrix of the monic probabilists' Hermite recurrence.
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
    GaussHermiteRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    for (int i = 0; i < n; ++i) {
        rule.nodes[i] = eig.eigenvalues()(i);
        const double v0 = eig.eigenvectors()(0, i);
        rule.weights[i] = v0 * v0;
    }
    return rule;
}

double gaussian_expectation(const std::function<double(double)>& h, int n_nodes) {
    const auto rule = gauss_hermite(n_nodes);
    double acc = 0.0;
    for (int i = 0; i < n_nodes; ++i) acc += rule.weights[i] * h(rule.nodes[i]);
    return acc;
}

std::pair<std::vector<double>, std::vector<double>> gauss_legendre(int n) {
    if (n < 1) throw ConfigError("gauss_legendre: need at least one node");
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        const double kk = static_cast<double>(k);
        jacobi(k, k - 1) = jacobi(k - 1, k) = kk / std::sqrt(4.0 * kk * kk - 1.0);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
    std::vector<double> nodes(n), weights(n);
    for (int i = 0; i < n; ++i) {
        nodes[i] = eig.eigenvalues()(i);
        const double v0 = eig.eigenvectors()(0, i);
        weights[i] = 2.0 * v0 * v0;
    }
    // Symmetrize so odd moments cancel exactly.
    for (int i = 0; i < n / 2; ++i) {
        const int j = n - 1 - i;
        const double x = 0.5 * (nodes[j] - nodes[i]);
        const double w = 0.5 * (weights[i] + weights[j]);
        nodes[i] = -x;
        nodes[j] = x;
        weights[i] = weights[j] = w;
    }
    if (n % 2 == 1) nodes[n / 2] = 0.0;
    return {nodes, weights};
}

std::pair<double, double> brent_minimize(const std::function<double(double)>& fn, double lo,
                                         double hi, int bits, int max_iter) {
    std::uintmax_t iters = static_cast<std::uintmax_t>(max_iter);
    auto [x, fx] = boost::math::tools::brent_find_minima(fn, lo, hi, bits, iters);
    return {x, fx};
}

double normal_upper_tail(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

LineFit fit_line(std::span<const double> xs, std::span<const double> ys) {
    if (xs.size() != ys.size() || xs.size() < 2) {
        throw ConfigError("fit_line: need at least two paired points");
    }
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx <= 0.0) throw ConfigError("fit_line: abscissae are all equal");
    LineFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    return fit;
}

MeanEstimate mean_and_std_error(std::span<const double> samples) {
    MeanEstimate est;
    const std::size_t n = samples.size();
    if (n == 0) return est;
    est.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
    if (n < 2) return est;
    double ss = 0.0;
    for (double s : samples) ss += (s - est.mean) * (s - est.mean);
    est.std_error = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
    return est;
}

double jackknife_std_error(std::span<const double> samples) {
    const std::size_t n = samples.size();
    if (n < 2) return 0.0;
    const double total = std::accumulate(samples.begin(), samples.end(), 0.0);
    const double nn = static_cast<double>(n);
    double mean_loo = 0.0;
    std::vector<double> loo(n);
    for (std::size_t i = 0; i < n; ++i) {
        loo[i] = (total - samples[i]) / (nn - 1.0);
        mean_loo += loo[i];
    }
    mean_loo /= nn;
    double ss = 0.0;
    for (double v : loo) ss += (v - mean_loo) * (v - mean_loo);
    return std::sqrt((nn - 1.0) / nn * ss);
}

}  // namespace qbsde
