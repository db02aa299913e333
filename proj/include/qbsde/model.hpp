#pragma once

#include <Eigen/Dense>
#include "json.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace qbsde {

/// State dimension m and noise dimension d.
struct Dims {
    int m = 1;
    int d = 1;
};

using DriftFn = std::function<void(double t, std::span<const double> x, std::span<double> out)>;
using VolFn = std::function<Eigen::MatrixXd(double t)>;
using GeneratorFn = std::function<double(double t, double y, std::span<const double> z)>;
using TerminalFn = std::function<double(std::span<const double> x)>;
using ProfileFn = std::function<double(double t)>;

/// The forward-backward model (b, sigma, f, g) together with the constants
/// its assumptions are stated with. Immutable once built; share freely.
struct CoefficientSet {
    DriftFn drift_b;
    VolFn vol_sigma;          ///< m x d, time dependent only
    GeneratorFn generator_f;  ///< deterministic, independent of x
    TerminalFn terminal_g;
    double const_L = 1.0;
    std::optional<double> const_Lz;
    ProfileFn lipschitz_profile;  ///< empty when the model makes no A5 claim
    Dims dims;
    double horizon_T = 1.0;

    /// Throws ConfigError on missing callables or non-positive constants.
    void validate() const;

    /// Clip threshold e^{LT}(L + LT) used by the backward solvers.
    double m_bound() const;

    std::vector<double> drift(double t, std::span<const double> x) const;
    double drift_scalar(double t, double x) const;  ///< m == 1 shortcut
    double generator(double t, double y, double z) const;  ///< d == 1 shortcut
    double terminal(double x) const;                        ///< m == 1 shortcut
};

/// Sampling region for the assumption audit.
struct AuditBox {
    double t_lo = 0.0;
    double t_hi = 1.0;
    std::vector<double> x_lo;
    std::vector<double> x_hi;
    double y_max = 4.0;
    double z_max = 4.0;
    /// Bounded set C0 of the localized Lipschitz condition: |y| <= c0_y, |z_i| <= c0_z.
    double c0_y = 1.0;
    double c0_z = 1.0;

    /// Box [-half_width, half_width]^m over [0, T], C0 defaulting to |y|,|z| <= M_bound.
    static AuditBox around(const CoefficientSet& coeffs, double half_width, double yz_max = 4.0);
    void validate(const CoefficientSet& coeffs) const;
};

/// One inequality of one assumption, with the worst sample found.
struct AssumptionCheck {
    std::string assumption;  ///< "A1", "A3", "A4", "A5"
    std::string condition;   ///< which inequality
    double max_ratio = 0.0;  ///< observed / allowed; <= 1 means no violation seen
    std::string worst_point;
    std::size_t samples = 0;

    bool passed() const { return max_ratio <= 1.0; }
};

struct AuditReport {
    std::vector<AssumptionCheck> checks;
    std::optional<std::string> hard_failure;

    /// True when every inequality of `assumption` held (and it was checked).
    bool passed(std::string_view assumption) const;
    bool checked(std::string_view assumption) const;
    std::set<std::string> passed_assumptions() const;
    bool all_passed() const;
    nlohmann::json to_json() const;
};

/// Samples the assumption inequalities over `box` (half uniform, half Halton
/// points; half of the Lipschitz pairs are close pairs). Deterministic in
/// (coeffs, budget, box, seed).
AuditReport audit_assumptions(const CoefficientSet& coeffs, std::size_t sample_budget,
                              const AuditBox& box, std::uint64_t rng_seed);

enum class FactSource { ClosedForm, Quadrature };

/// A closed-form reference value u(t, x) = formula(T - t, x) for the full
/// (epsilon = 1) problem, with one documented point it must reproduce.
struct AnalyticFact {
    std::string name;
    std::string statement;
    FactSource source = FactSource::ClosedForm;
    std::function<double(double tau, double x)> formula;
    double check_tau = 0.0;
    double check_x = 0.0;
    double documented_value = 0.0;

    /// |formula(check) - documented| <= 1e-12, throws otherwise.
    void self_check() const;
};

struct ModelCatalogEntry {
    std::string name;
    std::string description;
    std::map<std::string, double> params;
    CoefficientSet coefficients;
    std::vector<AnalyticFact> analytic_facts;
    std::set<std::string> claims;  ///< assumptions the audit must pass on audit_box
    AuditBox audit_box;

    const AnalyticFact* fact(std::string_view fact_name) const;
};

std::vector<ModelCatalogEntry> builtin_models();
std::vector<std::string> builtin_model_names();

/// Builds a catalog entry with numeric parameter overrides applied.
/// Unknown model or parameter names raise ConfigError.
ModelCatalogEntry find_model(std::string_view name,
                             const std::map<std::string, double>& overrides = {});

/// {"name": "...", "overrides": {"gamma": 2.0}}
ModelCatalogEntry model_from_json(const nlohmann::json& doc);

/// Cole-Hopf value (1/gamma) log E[exp(gamma g(x + sigma W_tau))] for a
/// driftless model with f = (gamma/2)|z|^2, m = d = 1.
double cole_hopf_value(const std::function<double(double)>& g, double gamma, double sigma,
                       double tau, double x, int nodes = 96);

}  // namespace qbsde
