#include "qbsde/forward.hpp"
#include "qbsde/errors.hpp"
#include "qbsde/parallel.hpp"
#include "qbsde/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>

namespace qbsde {

TimeGrid::TimeGrid(double t0, double T, int steps) : t0_(t0), T_(T), steps_(steps) {
    if (!std::isfinite(t0) || !std::isfinite(T) || t0 < 0.0 || !(t0 < T)) {
        throw ConfigError("TimeGrid: need 0 <= t0 < T");
    }
    if (steps < 1) throw ConfigError("TimeGrid: need at least one step");
}

int TimeGrid::index_of(double t) const {
    const double k = (t - t0_) / delta();
    const double r = std::round(k);
    if (r < 0 || r > steps_ || std::abs(k - r) > 1e-9) return -1;
    return static_cast<int>(r);
}

bool TimeGrid::operator==(const TimeGrid& other) const {
    return t0_ == other.t0_ && T_ == other.T_ && steps_ == other.steps_;
}

BrownianBatch BrownianBatch::generate(const TimeGrid& grid, std::size_t paths, int dims,
                                      std::uint64_t seed) {
    if (paths < 1) throw ConfigError("BrownianBatch: need at least one path");
    if (dims < 1) throw ConfigError("BrownianBatch: dims must be positive");
    BrownianBatch batch;
    batch.grid = grid;
    batch.paths = paths;
    batch.dims = dims;
    batch.seed = seed;
    const std::size_t per_path = static_cast<std::size_t>(grid.steps()) * dims;
    batch.increments.resize(paths * per_path);
    const double scale = std::sqrt(grid.delta());
    parallel_blocks(paths, kPathBlock, [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            auto rng = substream(seed, p);
            std::normal_distribution<double> normal;
            double* out = batch.increments.data() + p * per_path;
            for (std::size_t j = 0; j < per_path; ++j) out[j] = scale * normal(rng);
        }
    });
    return batch;
}

BrownianBatch BrownianBatch::tail(int k) const {
    if (k < 0 || k >= grid.steps()) throw ConfigError("BrownianBatch::tail: k out of range");
    BrownianBatch out;
    out.grid = TimeGrid(grid.node(k), grid.T(), grid.steps() - k);
    out.paths = paths;
    out.dims = dims;
    out.seed = seed;
    const std::size_t old_row = static_cast<std::size_t>(grid.steps()) * dims;
    const std::size_t new_row = static_cast<std::size_t>(out.grid.steps()) * dims;
    out.increments.resize(paths * new_row);
    for (std::size_t p = 0; p < paths; ++p) {
        std::copy_n(increments.begin() + static_cast<std::ptrdiff_t>(p * old_row + k * dims),
                    new_row, out.increments.begin() + static_cast<std::ptrdiff_t>(p * new_row));
    }
    return out;
}

SamplePathBatch::SamplePathBatch(TimeGrid g, std::size_t m, int k, std::string name,
                                 std::uint64_t s)
    : grid(g), paths(m), width(k), label(std::move(name)), seed(s) {
    values.assign(paths * static_cast<std::size_t>(grid.steps() + 1) * width, 0.0);
}

bool SamplePathBatch::all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

namespace {

void require_start(const CoefficientSet& coeffs, double t, std::span<const double> x,
                   const TimeGrid& grid, const char* who) {
    coeffs.validate();
    if (static_cast<int>(x.size()) != coeffs.dims.m) {
        throw ConfigError(std::string(who) + ": x has dimension " + std::to_string(x.size()) +
                          ", model has m = " + std::to_string(coeffs.dims.m));
    }
    if (std::abs(grid.t0() - t) > 1e-12) {
        throw ConfigError(std::string(who) + ": grid must start at t");
    }
    if (std::abs(grid.T() - coeffs.horizon_T) > 1e-12) {
        throw ConfigError(std::string(who) + ": grid must end at the model horizon");
    }
}

void check_finite(std::span<const double> v, const char* who, double s) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw EvaluationError(std::string(who) + ": non-finite drift at s = " + std::to_string(s));
        }
    }
}

}  // namespace

SamplePathBatch simulate_sde(const CoefficientSet& coeffs, double t, std::span<const double> x,
                             double epsilon, const TimeGrid& grid, const BrownianBatch& noise) {
    require_start(coeffs, t, x, grid, "simulate_sde");
    if (!(noise.grid == grid)) throw ConfigError("simulate_sde: noise grid differs from grid");
    if (noise.dims != coeffs.dims.d) throw ConfigError("simulate_sde: noise dims differ from d");
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("simulate_sde: epsilon must lie in [0, 1]");

    const int m = coeffs.dims.m;
    const int d = coeffs.dims.d;
    const int N = grid.steps();
    const double delta = grid.delta();
    std::vector<Eigen::MatrixXd> sigma(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        sigma[i] = coeffs.vol_sigma(grid.node(i));
        if (sigma[i].rows() != m || sigma[i].cols() != d) {
            throw ConfigError("simulate_sde: sigma(t) is not m x d");
        }
    }

    SamplePathBatch out(grid, noise.paths, m, "X^eps", noise.seed);
    parallel_blocks(noise.paths, kPathBlock, [&](std::size_t, std::size_t begin, std::size_t end) {
        std::vector<double> drift(static_cast<std::size_t>(m));
        for (std::size_t p = begin; p < end; ++p) {
            auto x0 = out.point(p, 0);
            std::copy(x.begin(), x.end(), x0.begin());
            for (int i = 0; i < N; ++i) {
                const auto cur = out.point(p, i);
                auto next = out.point(p, i + 1);
                coeffs.drift_b(grid.node(i), cur, drift);
                check_finite(drift, "simulate_sde", grid.node(i));
                const auto dw = noise.step(p, i);
                for (int r = 0; r < m; ++r) {
                    double noise_term = 0.0;
                    for (int c = 0; c < d; ++c) noise_term += sigma[i](r, c) * dw[c];
                    next[r] = cur[r] + drift[r] * delta + epsilon * noise_term;
                }
            }
        }
    });
    return out;
}

SamplePathBatch euler_ode(const CoefficientSet& coeffs, double t, std::span<const double> x,
                          const TimeGrid& grid) {
    require_start(coeffs, t, x, grid, "euler_ode");
    const int m = coeffs.dims.m;
    SamplePathBatch out(grid, 1, m, "phi");
    std::copy(x.begin(), x.end(), out.point(0, 0).begin());
    std::vector<double> drift(static_cast<std::size_t>(m));
    for (int i = 0; i < grid.steps(); ++i) {
        const auto cur = out.point(0, i);
        auto next = out.point(0, i + 1);
        coeffs.drift_b(grid.node(i), cur, drift);
        check_finite(drift, "euler_ode", grid.node(i));
        // Adding simulate_sde's zero noise term leaves this sum unchanged, so eps = 0 reproduces it bit for bit.
        for (int r = 0; r < m; ++r) next[r] = cur[r] + drift[r] * grid.delta();
    }
    return out;
}

SamplePathBatch solve_ode(const CoefficientSet& coeffs, double t, std::span<const double> x,
                          const TimeGrid& grid) {
    require_start(coeffs, t, x, grid, "solve_ode");
    const int m = coeffs.dims.m;
    const double h = grid.delta();
    SamplePathBatch out(grid, 1, m, "phi");
    std::copy(x.begin(), x.end(), out.point(0, 0).begin());
    std::vector<double> k1(m), k2(m), k3(m), k4(m), tmp(m);
    for (int i = 0; i < grid.steps(); ++i) {
        const double s = grid.node(i);
        const auto cur = out.point(0, i);
        auto next = out.point(0, i + 1);
        coeffs.drift_b(s, cur, k1);
        for (int r = 0; r < m; ++r) tmp[r] = cur[r] + 0.5 * h * k1[r];
        coeffs.drift_b(s + 0.5 * h, tmp, k2);
        for (int r = 0; r < m; ++r) tmp[r] = cur[r] + 0.5 * h * k2[r];
        coeffs.drift_b(s + 0.5 * h, tmp, k3);
        for (int r = 0; r < m; ++r) tmp[r] = cur[r] + h * k3[r];
        coeffs.drift_b(s + h, tmp, k4);
        for (int r = 0; r < m; ++r) {
            next[r] = cur[r] + h / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
        }
        check_finite(next, "solve_ode", grid.node(i + 1));
    }
    return out;
}

namespace {

MeanEstimate summarize(const std::vector<double>& samples) {
    MeanEstimate est = mean_and_std_error(samples);
    est.std_error = jackknife_std_error(samples);
    return est;
}

}  // namespace

MeanEstimate perturbation_gap(const SamplePathBatch& x_batch, const SamplePathBatch& phi) {
    if (!(x_batch.grid == phi.grid)) throw ConfigError("perturbation_gap: grids differ");
    if (x_batch.width != phi.width) throw ConfigError("perturbation_gap: widths differ");
    if (phi.paths != 1 && phi.paths != x_batch.paths) {
        throw ConfigError("perturbation_gap: phi must be one path or one per X path");
    }
    const int N = x_batch.grid.steps();
    std::vector<double> sup(x_batch.paths);
    for (std::size_t p = 0; p < x_batch.paths; ++p) {
        const std::size_t q = phi.paths == 1 ? 0 : p;
        double worst = 0.0;
        for (int i = 0; i <= N; ++i) {
            double s = 0.0;
            for (int r = 0; r < x_batch.width; ++r) {
                const double diff = x_batch.at(p, i, r) - phi.at(q, i, r);
                s += diff * diff;
            }
            worst = std::max(worst, s);
        }
        sup[p] = worst;
    }
    return summarize(sup);
}

MeanEstimate flow_continuity_gap(const CoefficientSet& coeffs, const FlowStart& a,
                                 const FlowStart& b, const TimeGrid& grid,
                                 const BrownianBatch& noise) {
    if (!(noise.grid == grid)) throw ConfigError("flow_continuity_gap: noise grid differs from grid");
    const int ka = grid.index_of(a.t);
    const int kb = grid.index_of(b.t);
    if (ka < 0 || kb < 0 || ka == grid.steps() || kb == grid.steps()) {
        throw ConfigError("flow_continuity_gap: start times must be grid nodes before T");
    }
    const auto run = [&](const FlowStart& s, int k) {
        const BrownianBatch w = k == 0 ? noise : noise.tail(k);
        return simulate_sde(coeffs, s.t, s.x, s.epsilon, w.grid, w);
    };
    const SamplePathBatch xa = run(a, ka);
    const SamplePathBatch xb = run(b, kb);
    const int m = coeffs.dims.m;
    // Value of a path started at node k, frozen at its start before k.
    const auto value = [&](const SamplePathBatch& batch, const FlowStart& s, int k, std::size_t p,
                           int i, int r) { return i < k ? s.x[r] : batch.at(p, i - k, r); };

    std::vector<double> sup(noise.paths);
    for (std::size_t p = 0; p < noise.paths; ++p) {
        double worst = 0.0;
        for (int i = 0; i <= grid.steps(); ++i) {
            double s = 0.0;
            for (int r = 0; r < m; ++r) {
                const double diff = value(xa, a, ka, p, i, r) - value(xb, b, kb, p, i, r);
                s += diff * diff;
            }
            worst = std::max(worst, s);
        }
        sup[p] = worst;
    }
    return summarize(sup);
}

void write_csv(const SamplePathBatch& batch, std::ostream& out) {
    out << "path,node,time";
    for (int r = 0; r < batch.width; ++r) out << ",v" << r;
    out << "\n";
    char buf[64];
    for (std::size_t p = 0; p < batch.paths; ++p) {
        for (int i = 0; i <= batch.grid.steps(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", batch.grid.node(i));
            out << p << "," << i << "," << buf;
            for (int r = 0; r < batch.width; ++r) {
                std::snprintf(buf, sizeof buf, "%.17g", batch.at(p, i, r));
                out << "," << buf;
            }
            out << "\n";
        }
    }
}

namespace {

constexpr char kMagic[8] = {'Q', 'B', 'S', 'D', 'U', 'M', 'P', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
    out.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& in) {
    unsigned char bytes[8];
    if (!in.read(reinterpret_cast<char*>(bytes), 8)) throw EvaluationError("read_binary: truncated dump");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }
double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

}  // namespace

void write_binary(const SamplePathBatch& batch, std::ostream& out) {
    out.write(kMagic, sizeof kMagic);
    put_u64(out, batch.paths);
    put_u64(out, static_cast<std::uint64_t>(batch.grid.steps()));
    put_u64(out, static_cast<std::uint64_t>(batch.width));
    put_u64(out, batch.seed);
    put_f64(out, batch.grid.t0());
    put_f64(out, batch.grid.T());
    for (double v : batch.values) put_f64(out, v);
}

SamplePathBatch read_binary(std::istream& in) {
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw EvaluationError("read_binary: bad magic");
    }
    const std::uint64_t paths = get_u64(in);
    const std::uint64_t steps = get_u64(in);
    const std::uint64_t width = get_u64(in);
    const std::uint64_t seed = get_u64(in);
    const double t0 = get_f64(in);
    const double T = get_f64(in);
    if (steps < 1 || steps > (1U << 30) || width < 1 || width > 64) {
        throw EvaluationError("read_binary: implausible header");
    }
    SamplePathBatch batch(TimeGrid(t0, T, static_cast<int>(steps)), paths, static_cast<int>(width),
                          "dump", seed);
    for (double& v : batch.values) v = get_f64(in);
    return batch;
}

}  // namespace qbsde
