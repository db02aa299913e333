// qbsde <pipeline> --config FILE [--out DIR] [--workers K] [--seed S]
// qbsde genapprox [check|eval] --config FILE [--t T --y Y --z Z...]   (eval writes CSV to --out or stdout)
// qbsde report DIR
//
// QBSDE_OUT and QBSDE_WORKERS override the output directory and worker count
// when the corresponding flag is absent.

#include "qbsde/errors.hpp"
#include "qbsde/experiment.hpp"
#include "qbsde/parallel.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>

namespace {

struct Common {
    std::string config_path;
    std::string out;
    int workers = 0;
    std::int64_t seed = -1;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "experiment JSON")->required();
    cmd->add_option("--out", c.out, "output directory (env QBSDE_OUT)");
    cmd->add_option("--workers", c.workers, "worker threads (env QBSDE_WORKERS)")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", c.seed, "master seed, overrides mc.seed")->check(CLI::NonNegativeNumber);
}

qbsde::ExperimentConfig load(const Common& c, const std::string& pipeline) {
    std::ifstream in(c.config_path);
    if (!in) throw qbsde::ConfigError("--config: cannot open " + c.config_path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw qbsde::ConfigError("--config: " + std::string(e.what()));
    }
    if (doc.is_object()) doc["pipeline"] = pipeline;
    if (!c.out.empty()) {
        doc["output_dir"] = c.out;
    } else if (const char* env = std::getenv("QBSDE_OUT"); env && *env) {
        doc["output_dir"] = env;
    }
    if (c.seed >= 0 && doc.is_object()) doc["mc"]["seed"] = static_cast<std::uint64_t>(c.seed);
    return qbsde::ExperimentConfig::from_json(doc);
}

void apply_workers(const Common& c) {
    if (c.workers > 0) {
        qbsde::set_worker_count(c.workers);
    } else if (const char* env = std::getenv("QBSDE_WORKERS"); env && *env) {
        char* end = nullptr;
        const long w = std::strtol(env, &end, 10);
        if (*end != '\0' || w < 1) throw qbsde::ConfigError("QBSDE_WORKERS: expected a positive integer");
        qbsde::set_worker_count(static_cast<int>(w));
    }
}

int print_manifest(const qbsde::RunManifest& m) {
    for (const auto& s : m.stages) {
        std::cout << s.name << " [" << s.status << "] " << s.seconds << " s\n";
        if (!s.error.empty()) std::cout << "  error: " << s.error << "\n";
        for (const auto& c : s.checks) {
            std::cout << "  " << (!c.testable ? "UNTESTABLE" : c.passed ? "PASS" : "FAIL") << "  " << c.name;
            if (!c.value.empty()) std::cout << "  (" << c.value << ")";
            std::cout << "\n";
        }
    }
    return m.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quadratic BSDE experiments: ladder, solvers, PDE and large deviations"};
    app.require_subcommand(1);

    std::map<std::string, Common> common;
    for (const auto& name : qbsde::pipeline_names()) {
        if (name == "genapprox") continue;
        add_common(app.add_subcommand(name, "run the " + name + " pipeline"), common[name]);
    }

    auto* gen = app.add_subcommand("genapprox", "generator ladder: 'check' samples the properties, 'eval' tabulates f_n");
    std::string gen_mode = "check";
    double eval_t = 0.0, eval_y = 0.0;
    std::vector<double> eval_z;
    gen->add_option("mode", gen_mode, "check (default) or eval")->check(CLI::IsMember({"check", "eval"}));
    add_common(gen, common["genapprox"]);
    gen->add_option("--t", eval_t, "eval: time");
    gen->add_option("--y", eval_y, "eval: y value");
    gen->add_option("--z", eval_z, "eval: z values (default -2:0.1:2)");

    std::string report_path;
    auto* rep = app.add_subcommand("report", "summarize an output directory or manifest");
    rep->add_option("path", report_path, "output directory or manifest.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? qbsde::kExitPass : qbsde::kExitConfig;
    }

    try {
        if (rep->parsed()) {
            const qbsde::Summary s = qbsde::report(report_path);
            std::cout << s.table();
            return s.exit_code;
        }
        if (gen->parsed() && gen_mode == "eval") {
            const Common& c = common["genapprox"];
            const qbsde::ExperimentConfig cfg = load(c, "genapprox");
            if (eval_z.empty()) {
                for (int k = 0; k <= 40; ++k) eval_z.push_back(-2.0 + 0.1 * k);
            }
            if (c.out.empty()) {
                qbsde::genapprox_eval_csv(cfg, eval_t, eval_y, eval_z, std::cout);
            } else {
                std::ofstream out(c.out);
                if (!out) throw qbsde::ConfigError("--out: cannot write " + c.out);
                qbsde::genapprox_eval_csv(cfg, eval_t, eval_y, eval_z, out);
            }
            return qbsde::kExitPass;
        }
        for (auto* sub : app.get_subcommands()) {
            const std::string name = sub->get_name();
            const Common& c = common[name];
            apply_workers(c);
            return print_manifest(qbsde::run(load(c, name)));
        }
    } catch (const qbsde::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return qbsde::kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return qbsde::kExitRuntime;
    }
    return qbsde::kExitConfig;
}
