#include "qbsde/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace qbsde {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Words that may stand in for numbers in the tables we write.
bool is_token(const std::string& field) {
    static const std::vector<std::string> tokens{"infeasible", "censored", "pass", "fail", "untestable",
                                                 "nan", "-nan", "inf", "-inf"};
    return std::find(tokens.begin(), tokens.end(), field) != tokens.end();
}

bool is_number(const std::string& field) {
    if (field.empty()) return false;
    char* end = nullptr;
    std::strtod(field.c_str(), &end);
    return end == field.c_str() + field.size();
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

/// Empty string when the CSV is well formed, else the first problem found.
std::string csv_problem(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) return "cannot open";
    std::string line;
    std::size_t width = 0, row = 0;
    while (std::getline(in, line)) {
        ++row;
        const auto fields = split(line);
        if (row == 1) {
            width = fields.size();
            if (width == 0) return "empty header";
            continue;
        }
        // The BSDE table carries a two-column preamble ahead of its node table.
        if (fields.size() != width) {
            if (row == 3 && file.filename() == "bsde.csv") {
                width = fields.size();
                continue;
            }
            return "row " + std::to_string(row) + " has " + std::to_string(fields.size()) + " fields, expected " +
                   std::to_string(width);
        }
        for (const auto& f : fields) {
            if (!is_number(f) && !is_token(f)) return "row " + std::to_string(row) + " has unreadable field '" + f + "'";
        }
    }
    if (row == 0) return "empty file";
    return "";
}

}  // namespace

json Summary::to_json() const {
    json r = json::array();
    for (const auto& row : rows) {
        r.push_back({{"stage", row.stage}, {"property", row.property}, {"status", row.status}, {"value", row.value}});
    }
    return {{"rows", r}, {"warnings", warnings}, {"exit_code", exit_code}};
}

std::string Summary::table() const {
    std::size_t w_stage = 5, w_prop = 8, w_status = 6;
    for (const auto& r : rows) {
        w_stage = std::max(w_stage, r.stage.size());
        w_prop = std::max(w_prop, r.property.size());
        w_status = std::max(w_status, r.status.size());
    }
    const auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - s.size(), ' '); };
    std::ostringstream out;
    out << pad("stage", w_stage) << "  " << pad("property", w_prop) << "  " << pad("status", w_status) << "  value\n";
    for (const auto& r : rows) {
        out << pad(r.stage, w_stage) << "  " << pad(r.property, w_prop) << "  " << pad(r.status, w_status) << "  "
            << r.value << "\n";
    }
    for (const auto& w : warnings) out << "warning: " << w << "\n";
    return out.str();
}

Summary report(const std::string& path) {
    Summary summary;
    fs::path dir(path);
    if (fs::is_regular_file(dir)) dir = dir.parent_path();
    if (!fs::is_directory(dir)) {
        summary.warnings.push_back("no such directory: " + dir.string());
        return summary;
    }
    const auto raise = [&](int code) { summary.exit_code = std::max(summary.exit_code, code); };

    const fs::path manifest_path = dir / "manifest.json";
    if (fs::exists(manifest_path)) {
        try {
            std::ifstream in(manifest_path);
            const RunManifest manifest = RunManifest::from_json(json::parse(in));
            for (const auto& stage : manifest.stages) {
                if (stage.status != "ok") {
                    summary.rows.push_back({stage.name, "stage", "error", stage.error});
                    raise(stage.status == "config-error" ? kExitConfig : kExitRuntime);
                }
                for (const auto& c : stage.checks) {
                    const std::string status = !c.testable ? "untestable" : (c.passed ? "pass" : "fail");
                    summary.rows.push_back({stage.name, c.name, status, c.value});
                    if (c.testable && !c.passed) raise(kExitCheckFailure);
                }
                for (const auto& f : stage.files) {
                    if (!fs::exists(dir / f)) summary.warnings.push_back("missing file listed in manifest: " + f);
                }
            }
        } catch (const std::exception& e) {
            summary.rows.push_back({"manifest", "manifest.json", "unreadable", e.what()});
            raise(kExitRuntime);
        }
    } else {
        summary.warnings.push_back("no manifest.json in " + dir.string());
    }

    std::vector<fs::path> csvs;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".csv") csvs.push_back(e.path());
    }
    std::sort(csvs.begin(), csvs.end());
    for (const auto& file : csvs) {
        const std::string problem = csv_problem(file);
        if (problem.empty()) continue;
        summary.rows.push_back({"files", file.filename().string(), "unreadable", problem});
        raise(kExitRuntime);
    }
    if (summary.rows.empty() && summary.warnings.empty()) summary.warnings.push_back("nothing to summarize");

    std::ofstream(dir / "summary.json") << summary.to_json().dump(2) << "\n";
    std::ofstream(dir / "summary.txt") << summary.table();
    return summary;
}

}  // namespace qbsde
