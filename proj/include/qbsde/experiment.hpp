#pragma once

#include "qbsde/ldp.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace qbsde {

inline constexpr const char* kToolVersion = "0.3.0";

/// Exit codes shared by the CLI and the report command.
enum ExitCode : int { kExitPass = 0, kExitCheckFailure = 1, kExitConfig = 2, kExitRuntime = 3 };

const std::vector<std::string>& pipeline_names();

/// Everything a pipeline needs. Parsed from JSON; unknown keys are rejected so
/// typos surface as usage errors with the field path.
struct ExperimentConfig {
    struct ModelRef {
        std::string name = "zero";
        std::map<std::string, double> overrides;
    };
    struct Grid {
        double t0 = 0.0;
        int steps = 64;  ///< N; T comes from the model
    };
    struct Lattice {
        std::vector<double> x_lo{-1.0};  ///< experiment x-range; the margin is added
        std::vector<double> x_hi{1.0};
        double h = 0.02;
        int pde_refine = 4;  ///< PDE time steps per grid step
        BoundaryMode boundary = BoundaryMode::NeumannZero;
    };
    struct Mc {
        std::size_t paths = 10000;
        std::uint64_t seed = 1;
        double tilt_below = 0.2;  ///< importance tilt for eps at or below this
    };

    std::string pipeline = "audit";
    ModelRef model;
    Grid grid;
    Lattice lattice;
    std::vector<double> ladder{4.0, 16.0, 64.0};
    Mc mc;
    std::vector<double> epsilons{0.4, 0.2, 0.1, 0.05};
    std::optional<EventSpec> event;
    std::vector<double> x0;  ///< start point, defaults to the origin
    int lsmc_degree = 4;
    int optimizer_restarts = 8;
    std::size_t audit_samples = 4096;
    std::size_t genapprox_samples = 10000;
    std::string output_dir = "out";

    /// Throws ConfigError naming the offending field.
    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& doc);
};

/// FNV-1a 64 of the canonical JSON of the config, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

struct CheckResult {
    std::string name;
    bool passed = false;
    bool testable = true;  ///< false: reported but not counted as pass or fail
    std::string value;     ///< short human-readable measurement
};

struct StageRecord {
    std::string name;
    double seconds = 0.0;
    std::string status = "ok";  ///< ok | config-error | runtime-error
    std::string error;
    std::uint64_t seed = 0;
    std::vector<CheckResult> checks;
    std::vector<std::string> files;
};

struct RunManifest {
    std::string config_hash;
    std::string tool_version = kToolVersion;
    std::string pipeline;
    std::uint64_t seed = 0;
    int workers = 1;
    std::vector<StageRecord> stages;

    std::vector<std::string> files() const;
    bool all_passed() const;
    /// 0 when every stage ran and every testable check passed, else 1, 2 or 3.
    int exit_code() const;
    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& doc);
};

/// Executes the configured pipeline, writes its reports and manifest.json into
/// output_dir. Stage failures are recorded, not thrown.
RunManifest run(const ExperimentConfig& config);

/// `genapprox eval`: f_n(t, y, z) for every rung over the z values (d = 1).
void genapprox_eval_csv(const ExperimentConfig& config, double t, double y,
                        const std::vector<double>& z_values, std::ostream& out);

struct SummaryRow {
    std::string stage;
    std::string property;
    std::string status;  ///< pass | fail | untestable | error | unreadable
    std::string value;
};

struct Summary {
    std::vector<SummaryRow> rows;
    std::vector<std::string> warnings;
    int exit_code = kExitPass;
    nlohmann::json to_json() const;
    std::string table() const;
};

/// Consolidates an output directory (or the directory of a manifest path):
/// stage checks from manifest.json plus a readability check of every CSV.
Summary report(const std::string& path);

}  // namespace qbsde
