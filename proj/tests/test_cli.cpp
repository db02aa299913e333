#include "doctest.h"

#include "qbsde/errors.hpp"
#include "qbsde/experiment.hpp"
#include "qbsde/parallel.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

using namespace qbsde;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("qbsde_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json small_forward(const fs::path& out) {
    return {{"pipeline", "forward"},
            {"model", "ou"},
            {"grid", {{"N", 32}}},
            {"mc", {{"paths", 600}, {"seed", 11}}},
            {"epsilons", {0.4, 0.2, 0.1}},
            {"output_dir", out.string()}};
}

int shell(const std::string& args) {
    const int status = std::system((std::string(QBSDE_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config round trip and hash") {
    const json doc{{"pipeline", "ldp"},
                   {"model", {{"name", "quadratic-gamma-1"}, {"overrides", {{"gamma", 2.0}}}}},
                   {"event", {{"kind", "sup-exceedance"}, {"delta", 1.0}}},
                   {"epsilons", {0.3, 0.2}}};
    const ExperimentConfig c = ExperimentConfig::from_json(doc);
    CHECK(c.model.overrides.at("gamma") == 2.0);
    const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(config_hash(back) == config_hash(c));
    CHECK(config_hash(c).size() == 16);
    ExperimentConfig other = c;
    other.mc.seed = 2;
    CHECK(config_hash(other) != config_hash(c));
}

TEST_CASE("config errors name the field") {
    const auto message = [](const json& doc) {
        try {
            ExperimentConfig::from_json(doc);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message({{"pipeline", "audit"}, {"mc", {{"pathz", 10}}}}).find("mc.pathz") != std::string::npos);
    CHECK(message({{"pipeline", "audit"}, {"grid", {{"N", -3}}}}).find("grid.N") != std::string::npos);
    CHECK(message({{"pipeline", "warp"}}).find("pipeline") != std::string::npos);
    CHECK(message({{"pipeline", "audit"}, {"model", "nope"}}).find("model") != std::string::npos);
    CHECK(message({{"pipeline", "rate"}}).find("event") != std::string::npos);
    CHECK(message({{"pipeline", "audit"}, {"epsilons", {0.1, -0.2}}}).find("epsilons") != std::string::npos);
}

TEST_CASE("audit pipeline on the zero model") {
    const fs::path dir = scratch("audit");
    ExperimentConfig c = ExperimentConfig::from_json({{"pipeline", "audit"}, {"output_dir", dir.string()}});
    const RunManifest m = run(c);
    CHECK(m.exit_code() == kExitPass);
    REQUIRE(m.stages.size() == 1);
    CHECK(m.stages[0].files == std::vector<std::string>{"audit.json"});
    CHECK(fs::exists(dir / "manifest.json"));
    const RunManifest back = RunManifest::from_json(json::parse(slurp(dir / "manifest.json")));
    CHECK(back.config_hash == m.config_hash);
    CHECK(back.tool_version == kToolVersion);
    const Summary s = report(dir.string());
    CHECK(s.exit_code == kExitPass);
    CHECK(fs::exists(dir / "summary.txt"));
}

TEST_CASE("outputs are identical across worker counts") {
    const fs::path a = scratch("workers1"), b = scratch("workers3");
    set_worker_count(1);
    const RunManifest ma = run(ExperimentConfig::from_json(small_forward(a)));
    set_worker_count(3);
    const RunManifest mb = run(ExperimentConfig::from_json(small_forward(b)));
    set_worker_count(1);
    CHECK(ma.workers == 1);
    CHECK(mb.workers == 3);
    CHECK(ma.config_hash != mb.config_hash);  // output_dir differs
    REQUIRE(ma.files() == mb.files());
    CHECK(ma.files().size() >= 2);
    for (const auto& f : ma.files()) CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
}

TEST_CASE("report on empty and corrupted directories") {
    const fs::path empty = scratch("empty");
    const Summary s = report(empty.string());
    CHECK(s.exit_code == kExitPass);
    CHECK(s.rows.empty());
    CHECK_FALSE(s.warnings.empty());

    const fs::path dir = scratch("corrupt");
    run(ExperimentConfig::from_json(small_forward(dir)));
    std::ofstream(dir / "forward_gaps.csv", std::ios::app) << "0.1,abc\n";
    const Summary bad = report(dir.string());
    CHECK(bad.exit_code == kExitRuntime);
    bool flagged = false;
    for (const auto& r : bad.rows) flagged |= r.status == "unreadable" && r.property == "forward_gaps.csv";
    CHECK(flagged);
}

TEST_CASE("genapprox eval table") {
    ExperimentConfig c = ExperimentConfig::from_json({{"pipeline", "genapprox"}, {"model", "z-square"}});
    std::ostringstream out;
    genapprox_eval_csv(c, 0.0, 0.0, {1.0}, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "n,z,f_n,f");
    std::getline(in, line);  // n = 4: 4/5
    CHECK(line.rfind("4,1,0.8", 0) == 0);
}

TEST_CASE("binary exit codes") {
    const fs::path dir = scratch("binary");
    const fs::path good = dir / "audit.json", broken = dir / "broken.json", typo = dir / "typo.json";
    std::ofstream(good) << json{{"model", "zero"}, {"output_dir", (dir / "out").string()}}.dump();
    std::ofstream(broken) << "{\"model\": ";
    std::ofstream(typo) << json{{"modle", "zero"}}.dump();

    CHECK(shell("audit --config " + good.string()) == kExitPass);
    CHECK(fs::exists(dir / "out" / "audit.json"));
    CHECK(shell("audit --config " + good.string() + " --out " + (dir / "out2").string() + " --workers 2") == kExitPass);
    CHECK(fs::exists(dir / "out2" / "manifest.json"));
    CHECK(shell("audit --config " + broken.string()) == kExitConfig);
    CHECK(shell("audit --config " + typo.string()) == kExitConfig);
    CHECK(shell("audit --config " + (dir / "missing.json").string()) == kExitConfig);
    CHECK(shell("audit") == kExitConfig);
    CHECK(shell("frobnicate") == kExitConfig);
    CHECK(shell("report " + (dir / "out").string()) == kExitPass);

    const fs::path zsq = dir / "zsq.json";
    std::ofstream(zsq) << json{{"model", {{"name", "z-square"}}}, {"output_dir", (dir / "out3").string()}}.dump();
    CHECK(shell("audit --config " + zsq.string()) == kExitPass);
    std::ofstream(dir / "out3" / "extra.csv") << "a,b\n1\n";
    CHECK(shell("report " + (dir / "out3").string()) == kExitRuntime);
    CHECK(shell("genapprox eval --config " + zsq.string() + " --z 0.5 --out " + (dir / "eval.csv").string()) == kExitPass);
    CHECK(slurp(dir / "eval.csv").rfind("n,z,f_n,f\n", 0) == 0);

    // A recorded failing check maps to exit 1.
    RunManifest m;
    m.pipeline = "audit";
    StageRecord rec;
    rec.name = "audit";
    rec.checks.push_back({"A3", false, true, "ratio 2"});
    rec.checks.push_back({"A4", false, false, "not sampled"});
    m.stages.push_back(rec);
    fs::create_directories(dir / "out4");
    std::ofstream(dir / "out4" / "manifest.json") << m.to_json().dump();
    CHECK(m.exit_code() == kExitCheckFailure);
    CHECK(shell("report " + (dir / "out4").string()) == kExitCheckFailure);
}
