#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "catch_amalgamated.hpp"

#include "lrsys/scenario.hpp"

using namespace lrsys;
using namespace lrsys::scenario;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace fs = std::filesystem;

namespace {

json base(const std::string& system, int n) {
    json j = {{"name", "t"}, {"system", system}, {"n", n}, {"initial", {{"seed", 3}, {"energy", 0.5}}},
              {"integrator", {{"horizon", 1.0}, {"samples", 10}}}, {"tasks", json::array({{{"kind", "simulate"}}})}};
    if (system == "veselova3" || system == "euler_poisson3")
        j["inertia"] = {{"diagonal", {1.0, 1.6, 2.5}}};
    else {
        json a = json::array();
        for (int i = 0; i < n; ++i) a.push_back(1.0 + 0.7 * i);
        j["inertia"] = {{"special", a}};
    }
    return j;
}

std::string error_path(const json& j) {
    try {
        (void)parse_scenario(j);
    } catch (const ConfigError& e) {
        return e.field_path;
    }
    return "";
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("lrsys_test_scenario_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("minimal scenarios parse with defaults", "[scenario]") {
    const Scenario sc = parse_scenario(base("reduced_sphere", 4));
    CHECK(sc.system == System::ReducedSphere);
    CHECK(sc.n == 4);
    CHECK(sc.r == 1);
    CHECK(sc.initial.seed == 3);
    REQUIRE(sc.initial.energy.has_value());
    CHECK(*sc.initial.energy == 0.5);
    CHECK(sc.integrator.output_times.size() == 10);
    CHECK(sc.integrator.output_times.back() == 1.0);
    REQUIRE(sc.tasks.size() == 1);
    CHECK(sc.tasks[0].kind == Task::Kind::Simulate);

    json j = base("reduced_sphere", 4);
    j["tasks"] = json::array({{{"kind", "verify_measure"}}, {{"kind", "reducing_multiplier"}}});
    const Scenario t = parse_scenario(j);
    CHECK(t.tasks[0].tol == 1e-5);
    CHECK(t.tasks[0].points == 50);
    CHECK(t.tasks[0].fd_step == 1e-5);
    CHECK(t.tasks[1].tol == 1e-6);
}

TEST_CASE("configuration errors name the offending field", "[scenario]") {
    json j = base("reduced_sphere", 4);
    j["extra"] = 1;
    CHECK(error_path(j) == "$.extra");

    j = base("reduced_sphere", 4);
    j["integrator"]["rel_tolerance"] = 1e-9;
    CHECK(error_path(j) == "$.integrator.rel_tolerance");

    j = base("reduced_sphere", 4);
    j.erase("initial");
    CHECK(error_path(j) == "$.initial");

    j = base("reduced_sphere", 4);
    j["system"] = "rattleback";
    CHECK(error_path(j) == "$.system");

    j = base("reduced_sphere", 4);
    j["inertia"]["special"] = {1.0, 2.0, 3.0};
    CHECK(error_path(j) == "$.inertia.special");

    j = base("reduced_sphere", 4);
    j["inertia"]["special"][2] = -1.0;
    CHECK(error_path(j) == "$.inertia.special");

    j = base("reduced_sphere", 4);
    j["tasks"][0]["kind"] = "guess";
    CHECK(error_path(j) == "$.tasks[0].kind");

    j = base("reduced_sphere", 4);
    j["tasks"][0]["tol"] = 1e-3;
    CHECK(error_path(j) == "$.tasks[0].tol");

    j = base("reduced_sphere", 4);
    j["tasks"] = json::array({{{"kind", "correspond"}, {"target", "lr_momentum"}}});
    CHECK(error_path(j) == "$.tasks[0].target");

    j = base("reduced_sphere", 4);
    j["initial"]["energy"] = 0.0;
    CHECK(error_path(j) == "$.initial.energy");

    j = base("veselova3", 3);
    j["potential"] = {{"kind", "veselova_family"}, {"alphas", {1.0, 2.0}}};
    CHECK(error_path(j) == "$.potential.alphas");

    j = base("reduced_sphere", 4);
    j["name"] = "a b";
    CHECK(error_path(j) == "$.name");
}

TEST_CASE("rank and dimension are validated", "[scenario]") {
    json j = base("lr_momentum", 4);
    for (int r : {0, 4, 5}) {
        j["r"] = r;
        CHECK(error_path(j) == "$.r");
    }
    j["r"] = 3;
    CHECK(error_path(j).empty());

    j = base("reduced_sphere", 4);
    j["r"] = 2;
    CHECK(error_path(j) == "$.r");

    json v = base("veselova3", 3);
    v["n"] = 4;
    CHECK(error_path(v) == "$.n");

    json small = base("reduced_sphere", 3);
    small["n"] = 2;
    CHECK(error_path(small) == "$.n");

    // diagonal inertia only for the three-dimensional systems
    json d = base("reduced_sphere", 3);
    d["inertia"] = {{"diagonal", {1.0, 2.0, 3.0}}};
    CHECK(error_path(d) == "$.inertia");
}

TEST_CASE("spheroconic tasks need distinct axes", "[scenario]") {
    json j = base("reduced_sphere", 4);
    j["inertia"]["special"] = {1.0, 2.0, 2.0, 3.0};
    CHECK(error_path(j).empty());
    j["tasks"] = json::array({{{"kind", "abel_jacobi"}}});
    CHECK(error_path(j) == "$.inertia.special");
}

TEST_CASE("explicit initial states are checked for size", "[scenario]") {
    json j = base("reduced_sphere", 3);
    j["initial"] = {{"state", {1.0, 0.0, 0.0, 0.0, 1.0, 0.0}}};
    const Scenario sc = parse_scenario(j);
    CHECK(initial_state(sc).size() == 6);
    j["initial"]["state"] = {1.0, 0.0, 0.0};
    CHECK(error_path(j) == "$.initial.state");
    j["initial"] = {{"state", {1.0, 0.0, 0.0, 0.0, 1.0, 0.0}}, {"seed", 1}};
    CHECK(error_path(j) == "$.initial");
}

TEST_CASE("state sizes per system", "[scenario]") {
    json j = base("lr_multiplier", 4);
    j["r"] = 2;
    CHECK(state_size(parse_scenario(j)) == 6 + 16);
    j["system"] = "lr_momentum";
    CHECK(state_size(parse_scenario(j)) == 6 + 8);
    j["system"] = "reduced_stiefel";
    CHECK(state_size(parse_scenario(j)) == 16);
    CHECK(state_size(parse_scenario(base("veselova3", 3))) == 6);
    CHECK(state_size(parse_scenario(base("neumann", 5))) == 10);
}

TEST_CASE("random admissible states are seeded and admissible", "[scenario]") {
    for (const char* system : {"lr_multiplier", "lr_momentum", "veselova3", "euler_poisson3", "reduced_sphere",
                               "reduced_stiefel", "neumann", "geodesic"}) {
        json j = base(system, std::string(system).find('3') != std::string::npos ? 3 : 4);
        if (std::string(system).rfind("lr_", 0) == 0 || std::string(system) == "reduced_stiefel") j["r"] = 2;
        const Scenario sc = parse_scenario(j);
        INFO(system);
        const Vec a = random_admissible_state(sc, 42, 0.75);
        const Vec b = random_admissible_state(sc, 42, 0.75);
        const Vec c = random_admissible_state(sc, 43, 0.75);
        CHECK(a.size() == state_size(sc));
        CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
        CHECK((a - c).cwiseAbs().maxCoeff() > 1e-3);

        const auto energy = state_energy(sc, a);
        REQUIRE(energy.has_value());
        CHECK_THAT(*energy, WithinRel(0.75, 1e-12));

        const SystemModel m = build_model(sc, a);
        CHECK(m.layout.size() == static_cast<std::size_t>(a.size()));
        for (const auto& con : m.constraints) {
            INFO(con.name);
            CHECK(std::abs(con.eval(0.0, a)) < 1e-12);
        }
    }
}

TEST_CASE("zero-F0 Neumann states", "[scenario]") {
    json j = base("neumann", 4);
    j["initial"] = {{"seed", 5}, {"zero_f0", true}};
    const Scenario sc = parse_scenario(j);
    const Vec y = initial_state(sc);
    const Vec a = sc.inertia.values;
    CHECK(std::abs(neumann_f0(NeumannState::unflatten(y), a)) < 1e-12);

    j["initial"]["energy"] = 1.0;
    CHECK(error_path(j) == "$.initial");
    json k = base("reduced_sphere", 4);
    k["initial"]["zero_f0"] = true;
    k["initial"].erase("energy");
    CHECK(error_path(k) == "$.initial.zero_f0");
}

TEST_CASE("numbers are written with round-trip precision", "[scenario][csv]") {
    CHECK(format_double(0.1) == "0.10000000000000001");
    CHECK(format_double(1.0) == "1");
    CHECK(format_double(-0.3) == "-0.29999999999999999");
    for (double x : {0.1, 1.0 / 3.0, -7.123456789012345e-9, 6.02214076e23}) CHECK(std::stod(format_double(x)) == x);
}

TEST_CASE("runs write a trajectory and a report", "[scenario][csv]") {
    const fs::path dir = scratch("run");
    json j = base("reduced_sphere", 3);
    j["tasks"] = json::array({{{"kind", "simulate"}}, {{"kind", "verify_integrals"}}});
    const Scenario sc = parse_scenario(j);
    const RunResult r = run_scenario(sc, dir);
    CHECK(r.pass);
    CHECK(r.report["status"] == "pass");
    CHECK(r.report["seed"] == 3);
    REQUIRE(r.report["tasks"].size() == 2);
    CHECK(r.report["tasks"][1]["kind"] == "verify_integrals");

    std::ifstream csv(dir / "traj.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header.rfind("t,", 0) == 0);
    int rows = 0;
    std::string line;
    std::string first;
    while (std::getline(csv, line)) {
        if (rows == 0) first = line;
        ++rows;
    }
    CHECK(rows == 11);  // t = 0 plus the sample grid
    CHECK(first.rfind("0,", 0) == 0);

    std::ifstream rep(dir / "report.json");
    const json back = json::parse(rep);
    CHECK(back["name"] == "t");
    CHECK(back["tasks"] == r.report["tasks"]);

    const RunResult again = run_scenario(sc, std::nullopt);
    CHECK(again.report["initial_state"] == r.report["initial_state"]);
    fs::remove_all(dir);
}

TEST_CASE("loading malformed files", "[scenario]") {
    json neg = base("geodesic", 3);
    neg["initial"]["seed"] = -1;
    CHECK_THROWS_AS(parse_scenario(neg), ConfigError);
    const fs::path dir = scratch("load");
    std::ofstream(dir / "bad.json") << "{ \"name\": ";
    CHECK_THROWS_AS(load_scenario(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(load_scenario(dir / "missing.json"), ConfigError);
    std::ofstream(dir / "ok.json") << base("geodesic", 3).dump();
    CHECK(load_scenario(dir / "ok.json").system == System::Geodesic);
    fs::remove_all(dir);
}

TEST_CASE("suites report every file", "[scenario][suite]") {
    const fs::path dir = scratch("suite");
    const fs::path out = dir / "out";
    std::ofstream(dir / "a.json") << base("reduced_sphere", 3).dump();
    json b = base("geodesic", 3);
    b["name"] = "b";
    std::ofstream(dir / "b.json") << b.dump();
    std::ofstream(dir / "c.json") << "[]";
    std::ofstream(dir / "notes.txt") << "ignored";
    const auto entries = run_suite(dir, out, 2);
    REQUIRE(entries.size() == 3);
    CHECK(entries[0].status == "pass");
    CHECK(entries[1].status == "pass");
    CHECK(entries[1].name == "b");
    CHECK(entries[2].status == "invalid");
    CHECK(fs::exists(out / "t" / "traj.csv"));
    CHECK(fs::exists(out / "b" / "report.json"));
    fs::remove_all(dir);
}

TEST_CASE("worker budget from the environment", "[scenario][suite]") {
    ::setenv("LRSYS_WORKERS", "3", 1);
    CHECK(worker_budget() == 3);
    ::setenv("LRSYS_WORKERS", "0", 1);
    CHECK_THROWS_AS(worker_budget(), ConfigError);
    ::setenv("LRSYS_WORKERS", "many", 1);
    CHECK_THROWS_AS(worker_budget(), ConfigError);
    ::unsetenv("LRSYS_WORKERS");
    CHECK(worker_budget() >= 1);
}
