// Command line front end for scenario files.
//
//   lrsys run <scenario.json> --out <dir>
//   lrsys suite <dir> [--out <dir>]
//   lrsys validate <scenario.json>
//
// Exit codes: 0 pass, 1 tolerance failure, 2 invalid configuration,
// 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "lrsys/scenario.hpp"

namespace {

constexpr int kPass = 0;
constexpr int kFail = 1;
constexpr int kConfig = 2;
constexpr int kNumerical = 3;

int cmd_run(const std::string& file, const std::string& out) {
    lrsys::scenario::Scenario sc;
    try {
        sc = lrsys::scenario::load_scenario(file);
    } catch (const lrsys::ConfigError& e) {
        std::cerr << "invalid scenario: " << e.what() << '\n';
        return kConfig;
    }
    try {
        const auto r = lrsys::scenario::run_scenario(sc, std::filesystem::path(out));
        std::cout << sc.name << ": " << r.report.value("status", "error") << '\n';
        if (r.pass) return kPass;
        return r.numerical_failure ? kNumerical : kFail;
    } catch (const lrsys::ConfigError& e) {
        std::cerr << "invalid scenario: " << e.what() << '\n';
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumerical;
    }
}

int cmd_suite(const std::string& dir, const std::string& out) {
    int workers = 1;
    try {
        workers = lrsys::scenario::worker_budget();
    } catch (const lrsys::ConfigError& e) {
        std::cerr << e.what() << '\n';
        return kConfig;
    }
    if (!std::filesystem::is_directory(dir)) {
        std::cerr << "not a directory: " << dir << '\n';
        return kConfig;
    }
    const auto entries = lrsys::scenario::run_suite(dir, out, workers);
    bool all = !entries.empty();
    for (const auto& e : entries) {
        std::cout << e.file.filename().string() << ": " << e.status;
        if (!e.message.empty()) std::cout << " (" << e.message << ")";
        std::cout << '\n';
        all = all && e.status == "pass";
    }
    std::cout << (all ? "suite: pass" : "suite: fail") << '\n';
    return all ? kPass : kFail;
}

int cmd_validate(const std::string& file) {
    try {
        const auto sc = lrsys::scenario::load_scenario(file);
        std::cout << sc.name << ": valid\n";
        return kPass;
    } catch (const lrsys::ConfigError& e) {
        std::cerr << "invalid scenario: " << e.what() << '\n';
        return kConfig;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Simulation and verification of LR and Chaplygin-type nonholonomic systems"};
    app.require_subcommand(1);

    std::string run_file;
    std::string run_out;
    auto* run = app.add_subcommand("run", "integrate one scenario and write traj.csv and report.json");
    run->add_option("scenario", run_file, "scenario JSON file")->required();
    run->add_option("--out", run_out, "output directory")->required();

    std::string suite_dir;
    std::string suite_out = "out";
    auto* suite = app.add_subcommand("suite", "run every *.json scenario of a directory");
    suite->add_option("dir", suite_dir, "directory of scenario files")->required();
    suite->add_option("--out", suite_out, "output root; one subdirectory per scenario");

    std::string validate_file;
    auto* validate = app.add_subcommand("validate", "check a scenario file without running it");
    validate->add_option("scenario", validate_file, "scenario JSON file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kPass : kConfig;
    }
    if (*run) return cmd_run(run_file, run_out);
    if (*suite) return cmd_suite(suite_dir, suite_out);
    return cmd_validate(validate_file);
}
