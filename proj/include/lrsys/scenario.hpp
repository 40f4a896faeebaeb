#pragma once

// Scenario files: parsing and validation, seeded admissible initial states,
// and the runner that integrates a system, evaluates the requested checks and
// writes traj.csv and report.json.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "lrsys/errors.hpp"
#include "lrsys/harness.hpp"
#include "lrsys/lr_dynamics.hpp"
#include "lrsys/neumann_geodesic.hpp"
#include "lrsys/reconstruction.hpp"
#include "lrsys/reduced_flows.hpp"
#include "lrsys/son_algebra.hpp"
#include "lrsys/verification.hpp"

namespace lrsys::scenario {

using json = nlohmann::json;

enum class System {
    LrMultiplier,
    LrMomentum,
    Veselova3,
    EulerPoisson3,
    ReducedSphere,
    ReducedStiefel,
    Neumann,
    Geodesic,
    QuadricGeodesic
};

inline const std::map<std::string, System>& system_names() {
    static const std::map<std::string, System> names{
        {"lr_multiplier", System::LrMultiplier},     {"lr_momentum", System::LrMomentum},
        {"veselova3", System::Veselova3},            {"euler_poisson3", System::EulerPoisson3},
        {"reduced_sphere", System::ReducedSphere},   {"reduced_stiefel", System::ReducedStiefel},
        {"neumann", System::Neumann},                {"geodesic", System::Geodesic},
        {"quadric_geodesic", System::QuadricGeodesic}};
    return names;
}

inline std::string system_name(System s) {
    for (const auto& [k, v] : system_names())
        if (v == s) return k;
    return "?";
}

struct InertiaConfig {
    enum class Kind { Special, Generic, Diagonal };
    Kind kind = Kind::Special;
    Vec values;   // A (Special) or I (Diagonal)
    Mat matrix;   // Generic operator in so(n) coordinates
};

struct PotentialConfig {
    bool family = false;
    std::array<double, 5> alphas{};
};

struct InitialConfig {
    std::uint64_t seed = 1;
    std::optional<double> energy;
    bool zero_f0 = false;
    std::optional<Vec> state;
};

struct Task {
    enum class Kind {
        Simulate,
        VerifyIntegrals,
        VerifyMeasure,
        Correspond,
        Reconstruct,
        AbelJacobi,
        MeasureDuality,
        ReducingMultiplier,
        PotentialDuality
    };
    Kind kind = Kind::Simulate;
    std::string target;
    bool control = false;
    double tol = 0.0;
    int points = 50;
    double fd_step = 1e-5;
    double horizon = 5.0;
    int samples = 200;
    double branch_tol = 1e-3;
};

struct Scenario {
    std::string name;
    System system = System::ReducedSphere;
    int n = 3;
    int r = 1;
    InertiaConfig inertia;
    PotentialConfig potential;
    InitialConfig initial;
    IntegratorConfig integrator;
    int samples = 200;
    std::vector<Task> tasks;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline void check_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError(path, "expected an object");
    for (const auto& [key, _] : obj.items())
        if (!allowed.count(key)) throw ConfigError(path + "." + key, "unknown key");
}

inline const json& require(const json& obj, const std::string& path, const std::string& key) {
    if (!obj.contains(key)) throw ConfigError(path + "." + key, "missing required key");
    return obj.at(key);
}

inline double get_number(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(path, "expected a finite number");
    return x;
}

inline double get_positive(const json& v, const std::string& path) {
    const double x = get_number(v, path);
    if (!(x > 0.0)) throw ConfigError(path, "must be positive");
    return x;
}

inline int get_int(const json& v, const std::string& path) {
    if (!v.is_number_integer()) throw ConfigError(path, "expected an integer");
    return v.get<int>();
}

inline Vec get_vector(const json& v, const std::string& path) {
    if (!v.is_array() || v.empty()) throw ConfigError(path, "expected a non-empty array of numbers");
    Vec out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = get_number(v[i], path + "[" + std::to_string(i) + "]");
    return out;
}

inline Mat get_matrix(const json& v, const std::string& path) {
    if (!v.is_array() || v.empty()) throw ConfigError(path, "expected an array of rows");
    const auto rows = v.size();
    Mat out;
    for (std::size_t i = 0; i < rows; ++i) {
        const Vec row = get_vector(v[i], path + "[" + std::to_string(i) + "]");
        if (i == 0) out.resize(static_cast<Eigen::Index>(rows), row.size());
        if (row.size() != out.cols()) throw ConfigError(path + "[" + std::to_string(i) + "]", "ragged matrix");
        out.row(static_cast<Eigen::Index>(i)) = row.transpose();
    }
    return out;
}

inline bool sphere_based(System s) {
    return s == System::ReducedSphere || s == System::Neumann || s == System::Geodesic || s == System::QuadricGeodesic;
}

inline bool three_dimensional(System s) { return s == System::Veselova3 || s == System::EulerPoisson3; }

}  // namespace detail

/// Length of the flat state vector of a scenario's system.
inline int state_size(const Scenario& sc) {
    const int n = sc.n;
    switch (sc.system) {
        case System::LrMultiplier: return so_dim(n) + n * n;
        case System::LrMomentum: return so_dim(n) + sc.r * n;
        case System::Veselova3:
        case System::EulerPoisson3: return 6;
        case System::ReducedStiefel: return 2 * n * sc.r;
        default: return 2 * n;
    }
}

inline Scenario parse_scenario(const json& j) {
    using namespace detail;
    check_keys(j, "$", {"name", "system", "n", "r", "inertia", "potential", "initial", "integrator", "tasks"});
    Scenario sc;
    const json& name = require(j, "$", "name");
    if (!name.is_string() || name.get<std::string>().empty()) throw ConfigError("$.name", "expected a non-empty string");
    sc.name = name.get<std::string>();
    for (char c : sc.name)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'))
            throw ConfigError("$.name", "only letters, digits, '_' and '-' are allowed");

    const json& sys = require(j, "$", "system");
    if (!sys.is_string() || !system_names().count(sys.get<std::string>())) throw ConfigError("$.system", "unknown system");
    sc.system = system_names().at(sys.get<std::string>());
    sc.n = get_int(require(j, "$", "n"), "$.n");
    if (j.contains("r")) sc.r = get_int(j.at("r"), "$.r");
    if (sc.n < 3) throw ConfigError("$.n", "need n >= 3");
    if (three_dimensional(sc.system) && sc.n != 3) throw ConfigError("$.n", "this system is defined for n = 3 only");
    if (sc.r < 1 || sc.r >= sc.n) throw ConfigError("$.r", "need 1 <= r < n");
    if ((sphere_based(sc.system) || three_dimensional(sc.system)) && sc.r != 1) throw ConfigError("$.r", "this system has r = 1");

    // inertia
    const json& in = require(j, "$", "inertia");
    check_keys(in, "$.inertia", {"special", "generic", "diagonal"});
    if (in.size() != 1) throw ConfigError("$.inertia", "give exactly one of special, generic, diagonal");
    if (in.contains("special")) {
        sc.inertia.kind = InertiaConfig::Kind::Special;
        sc.inertia.values = get_vector(in.at("special"), "$.inertia.special");
        if (sc.inertia.values.size() != sc.n) throw ConfigError("$.inertia.special", "need n entries");
        if (!(sc.inertia.values.minCoeff() > 0.0)) throw ConfigError("$.inertia.special", "entries must be positive");
    } else if (in.contains("generic")) {
        sc.inertia.kind = InertiaConfig::Kind::Generic;
        sc.inertia.matrix = get_matrix(in.at("generic"), "$.inertia.generic");
        const int d = so_dim(sc.n);
        if (sc.inertia.matrix.rows() != d || sc.inertia.matrix.cols() != d)
            throw ConfigError("$.inertia.generic", "need an n(n-1)/2 square matrix");
        try {
            (void)InertiaSpec::generic(sc.n, sc.inertia.matrix);
        } catch (const Error& e) {
            throw ConfigError("$.inertia.generic", e.what());
        }
    } else {
        sc.inertia.kind = InertiaConfig::Kind::Diagonal;
        sc.inertia.values = get_vector(in.at("diagonal"), "$.inertia.diagonal");
        if (sc.inertia.values.size() != 3) throw ConfigError("$.inertia.diagonal", "need 3 entries");
        if (!(sc.inertia.values.minCoeff() > 0.0)) throw ConfigError("$.inertia.diagonal", "entries must be positive");
    }
    const bool want_diag = three_dimensional(sc.system);
    if (want_diag != (sc.inertia.kind == InertiaConfig::Kind::Diagonal))
        throw ConfigError("$.inertia", want_diag ? "this system needs a diagonal inertia tensor"
                                                 : "this system needs special or generic inertia");
    const bool generic_ok = sc.system == System::LrMultiplier || sc.system == System::LrMomentum ||
                            sc.system == System::ReducedStiefel;
    if (sc.inertia.kind == InertiaConfig::Kind::Generic && !generic_ok)
        throw ConfigError("$.inertia", "this system needs the special form A");

    // potential
    if (j.contains("potential")) {
        const json& p = j.at("potential");
        check_keys(p, "$.potential", {"kind", "alphas"});
        const json& kind = require(p, "$.potential", "kind");
        if (kind == "zero") {
            if (p.contains("alphas")) throw ConfigError("$.potential.alphas", "not used by the zero potential");
        } else if (kind == "veselova_family") {
            const Vec al = get_vector(require(p, "$.potential", "alphas"), "$.potential.alphas");
            if (al.size() != 5) throw ConfigError("$.potential.alphas", "need 5 entries");
            sc.potential.family = true;
            for (int i = 0; i < 5; ++i) sc.potential.alphas[static_cast<std::size_t>(i)] = al(i);
        } else {
            throw ConfigError("$.potential.kind", "expected zero or veselova_family");
        }
        if (sc.potential.family && !three_dimensional(sc.system))
            throw ConfigError("$.potential", "potentials apply to veselova3 and euler_poisson3 only");
    }

    // initial state
    const json& ini = require(j, "$", "initial");
    check_keys(ini, "$.initial", {"seed", "energy", "zero_f0", "state"});
    if (ini.contains("state")) {
        if (ini.contains("seed") || ini.contains("energy") || ini.contains("zero_f0"))
            throw ConfigError("$.initial", "an explicit state excludes seed, energy and zero_f0");
        sc.initial.state = get_vector(ini.at("state"), "$.initial.state");
        if (sc.initial.state->size() != state_size(sc))
            throw ConfigError("$.initial.state", "need " + std::to_string(state_size(sc)) + " entries");
    } else {
        const json& seed = require(ini, "$.initial", "seed");
        if (!seed.is_number_integer() || (!seed.is_number_unsigned() && seed.get<std::int64_t>() < 0)) throw ConfigError("$.initial.seed", "expected a non-negative integer");
        sc.initial.seed = seed.get<std::uint64_t>();
        if (ini.contains("energy")) sc.initial.energy = get_positive(ini.at("energy"), "$.initial.energy");
        if (ini.contains("zero_f0")) {
            if (!ini.at("zero_f0").is_boolean()) throw ConfigError("$.initial.zero_f0", "expected a boolean");
            sc.initial.zero_f0 = ini.at("zero_f0").get<bool>();
            if (sc.initial.zero_f0 && sc.system != System::Neumann)
                throw ConfigError("$.initial.zero_f0", "only meaningful for the neumann system");
            if (sc.initial.zero_f0 && sc.initial.energy) throw ConfigError("$.initial", "zero_f0 fixes the scale; drop energy");
        }
        if (sc.initial.energy && sc.system == System::QuadricGeodesic)
            throw ConfigError("$.initial.energy", "quadric geodesics have unit speed");
    }

    // integrator
    if (j.contains("integrator")) {
        const json& ig = j.at("integrator");
        check_keys(ig, "$.integrator",
                   {"method", "rel_tol", "abs_tol", "min_step", "max_step", "step", "horizon", "stabilize_every", "samples"});
        if (ig.contains("method")) {
            const json& m = ig.at("method");
            if (m == "adaptive")
                sc.integrator.method = IntegratorConfig::Method::Adaptive;
            else if (m == "rk4")
                sc.integrator.method = IntegratorConfig::Method::Rk4Fixed;
            else
                throw ConfigError("$.integrator.method", "expected adaptive or rk4");
        }
        if (ig.contains("rel_tol")) sc.integrator.rel_tol = get_number(ig.at("rel_tol"), "$.integrator.rel_tol");
        if (ig.contains("abs_tol")) sc.integrator.abs_tol = get_number(ig.at("abs_tol"), "$.integrator.abs_tol");
        if (ig.contains("min_step")) sc.integrator.min_step = get_number(ig.at("min_step"), "$.integrator.min_step");
        if (ig.contains("max_step")) sc.integrator.max_step = get_number(ig.at("max_step"), "$.integrator.max_step");
        if (ig.contains("step")) sc.integrator.step = get_number(ig.at("step"), "$.integrator.step");
        if (ig.contains("horizon")) sc.integrator.horizon = get_number(ig.at("horizon"), "$.integrator.horizon");
        if (ig.contains("stabilize_every"))
            sc.integrator.stabilize_every = get_int(ig.at("stabilize_every"), "$.integrator.stabilize_every");
        if (ig.contains("samples")) sc.samples = get_int(ig.at("samples"), "$.integrator.samples");
    }
    try {
        sc.integrator.validate();
    } catch (const Error& e) {
        throw ConfigError("$.integrator", e.what());
    }
    if (sc.samples < 2) throw ConfigError("$.integrator.samples", "need at least 2 samples");
    if (sc.integrator.stabilize_every > 0 && (three_dimensional(sc.system) || sc.system == System::QuadricGeodesic))
        throw ConfigError("$.integrator.stabilize_every", "no manifold projection for this system");
    sc.integrator.output_times = uniform_grid(sc.integrator.horizon, sc.samples);

    // tasks
    const json& tasks = require(j, "$", "tasks");
    if (!tasks.is_array() || tasks.empty()) throw ConfigError("$.tasks", "expected a non-empty array");
    bool needs_distinct = sc.system == System::Neumann || sc.system == System::QuadricGeodesic;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const std::string path = "$.tasks[" + std::to_string(i) + "]";
        const json& t = tasks[i];
        check_keys(t, path, {"kind", "target", "tol", "points", "fd_step", "horizon", "samples", "branch_tol", "control"});
        const json& kind = require(t, path, "kind");
        Task task;
        std::set<std::string> allowed{"kind"};
        auto supported = [&](std::initializer_list<System> systems) {
            if (std::find(systems.begin(), systems.end(), sc.system) == systems.end())
                throw ConfigError(path + ".kind", "task not available for system " + system_name(sc.system));
        };
        if (kind == "simulate") {
            task.kind = Task::Kind::Simulate;
        } else if (kind == "verify_integrals") {
            task.kind = Task::Kind::VerifyIntegrals;
            task.tol = 1e-8;
            allowed.insert("tol");
        } else if (kind == "verify_measure") {
            task.kind = Task::Kind::VerifyMeasure;
            task.tol = 1e-5;
            allowed.insert({"tol", "points", "fd_step"});
            supported({System::Veselova3, System::LrMomentum, System::ReducedSphere});
        } else if (kind == "correspond") {
            task.kind = Task::Kind::Correspond;
            task.tol = 1e-6;
            allowed.insert({"tol", "target", "horizon", "samples"});
            const json& target = require(t, path, "target");
            if (!target.is_string()) throw ConfigError(path + ".target", "expected a string");
            task.target = target.get<std::string>();
            const bool ok = (sc.system == System::ReducedSphere && (task.target == "geodesic" || task.target == "neumann")) ||
                            (sc.system == System::Veselova3 && task.target == "neumann") ||
                            (sc.system == System::LrMultiplier && task.target == "lr_momentum") ||
                            (sc.system == System::Neumann && task.target == "reduced_sphere");
            if (!ok) throw ConfigError(path + ".target", "no correspondence from " + system_name(sc.system) + " to " + task.target);
            if (sc.system == System::Veselova3 && sc.potential.family)
                throw ConfigError(path + ".target", "the Neumann correspondence needs V = 0");
            if (task.target == "neumann" || task.target == "reduced_sphere") needs_distinct = true;
        } else if (kind == "reconstruct") {
            task.kind = Task::Kind::Reconstruct;
            task.tol = 1e-5;
            allowed.insert({"tol", "horizon", "samples", "branch_tol"});
            supported({System::ReducedSphere});
            needs_distinct = true;
        } else if (kind == "abel_jacobi") {
            task.kind = Task::Kind::AbelJacobi;
            task.tol = 1e-5;
            allowed.insert({"tol", "horizon", "samples", "branch_tol"});
            supported({System::ReducedSphere, System::Neumann});
            needs_distinct = true;
        } else if (kind == "measure_duality") {
            task.kind = Task::Kind::MeasureDuality;
            task.tol = 1e-10;
            task.points = 100;
            allowed.insert({"tol", "points"});
            supported({System::LrMultiplier, System::LrMomentum});
        } else if (kind == "reducing_multiplier") {
            task.kind = Task::Kind::ReducingMultiplier;
            task.tol = 1e-6;
            allowed.insert({"tol", "points", "fd_step"});
            supported({System::ReducedSphere});
        } else if (kind == "potential_duality") {
            task.kind = Task::Kind::PotentialDuality;
            task.tol = 1e-8;
            task.horizon = 10.0;
            allowed.insert({"tol", "horizon", "control"});
            supported({System::Veselova3});
            if (!sc.potential.family) throw ConfigError("$.potential", "potential_duality needs a veselova_family potential");
        } else {
            throw ConfigError(path + ".kind", "unknown task");
        }
        for (const auto& [key, _] : t.items())
            if (!allowed.count(key)) throw ConfigError(path + "." + key, "not used by this task");
        if (t.contains("tol")) task.tol = get_positive(t.at("tol"), path + ".tol");
        if (t.contains("points")) task.points = get_int(t.at("points"), path + ".points");
        if (t.contains("fd_step")) task.fd_step = get_positive(t.at("fd_step"), path + ".fd_step");
        if (t.contains("horizon")) task.horizon = get_positive(t.at("horizon"), path + ".horizon");
        if (t.contains("samples")) task.samples = get_int(t.at("samples"), path + ".samples");
        if (t.contains("branch_tol")) task.branch_tol = get_positive(t.at("branch_tol"), path + ".branch_tol");
        if (t.contains("control")) {
            if (!t.at("control").is_boolean()) throw ConfigError(path + ".control", "expected a boolean");
            task.control = t.at("control").get<bool>();
        }
        if (task.points < 1) throw ConfigError(path + ".points", "need at least one point");
        if (task.samples < 8) throw ConfigError(path + ".samples", "need at least 8 samples");
        sc.tasks.push_back(task);
    }
    if (needs_distinct) {
        try {
            require_distinct_axes(sc.inertia.values, "scenario");
        } catch (const Error&) {
            throw ConfigError("$.inertia.special", "entries must be pairwise distinct for spheroconic tasks");
        }
    }
    return sc;
}

inline Scenario load_scenario(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("$", "cannot open " + file.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("$", std::string("malformed JSON: ") + e.what());
    }
    return parse_scenario(j);
}

// ---------------------------------------------------------------------------
// Systems

inline InertiaSpec inertia_spec(const Scenario& sc) {
    if (sc.inertia.kind == InertiaConfig::Kind::Generic) return InertiaSpec::generic(sc.n, sc.inertia.matrix);
    return InertiaSpec::special(sc.inertia.values);
}

inline PotentialSpec potential_spec(const Scenario& sc) {
    if (sc.potential.family) return PotentialSpec::veselova_family(sc.potential.alphas, sc.inertia.values);
    return PotentialSpec::zero();
}

namespace detail {

inline Vec3 unit3(std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    Vec3 v;
    for (int i = 0; i < 3; ++i) v(i) = nd(rng);
    return v.normalized();
}

inline Vec gaussian(std::mt19937_64& rng, Eigen::Index k) {
    std::normal_distribution<double> nd;
    Vec v(k);
    for (Eigen::Index i = 0; i < k; ++i) v(i) = nd(rng);
    return v;
}

}  // namespace detail

/// Uniformly distributed rotation with rows as the frame e_1..e_n.
inline Mat random_frame(int n, std::mt19937_64& rng) { return rotation_from_seed(n, rng()); }

/// Energy of a flat state, where the system has one.
inline std::optional<double> state_energy(const Scenario& sc, const Vec& y);

/// Seeded admissible state: random frame from the QR of a Gaussian matrix,
/// velocities projected onto the constraints and rescaled to `energy`.
inline Vec random_admissible_state(const Scenario& sc, std::uint64_t seed, std::optional<double> energy,
                                   bool zero_f0 = false) {
    std::mt19937_64 rng(seed);
    const int n = sc.n;
    Vec y;
    // velocity part scales linearly; kinetic energy quadratically
    auto rescale = [&](Vec& v, double kinetic, double target) {
        if (!(target > 0.0)) throw DomainError("random_admissible_state: energy target below the potential");
        v *= std::sqrt(target / kinetic);
    };
    switch (sc.system) {
        case System::LrMultiplier:
        case System::LrMomentum: {
            const InertiaSpec spec = inertia_spec(sc);
            const Mat rows = random_frame(n, rng);
            SkewMatrix w = project_constraint_plane(SkewMatrix::from_coords(n, detail::gaussian(rng, so_dim(n))),
                                                    Frame(Mat(rows.topRows(sc.r))));
            const double kin = 0.5 * killing_inner(spec.apply(w), w);
            if (energy) w = SkewMatrix::from_coords(n, w.coords() * std::sqrt(*energy / kin));
            BodyState s;
            s.r = sc.r;
            if (sc.system == System::LrMultiplier) {
                s.representation = BodyState::Representation::Velocity;
                s.xi = w;
                s.frame = rows;
            } else {
                s.representation = BodyState::Representation::Momentum;
                s.frame = rows.topRows(sc.r);
                s.xi = momentum_from_omega(w, s.frame, sc.r, spec);
            }
            y = s.flatten();
            break;
        }
        case System::Veselova3:
        case System::EulerPoisson3: {
            const Vec3 inertia = sc.inertia.values;
            const PotentialSpec v = potential_spec(sc);
            Vec3 g = detail::unit3(rng);
            if (sc.potential.family)
                while (g.cwiseAbs().minCoeff() < 0.2) g = detail::unit3(rng);
            Vec om = detail::gaussian(rng, 3);
            if (sc.system == System::Veselova3) om -= g * g.dot(om);
            if (energy) rescale(om, 0.5 * inertia.cwiseProduct(Vec3(om)).dot(Vec3(om)), *energy - v.value(g));
            y.resize(6);
            y << om, g;
            break;
        }
        case System::ReducedSphere:
        case System::Geodesic:
        case System::Neumann: {
            const Vec a = sc.inertia.values;
            const Vec q = detail::gaussian(rng, n).normalized();
            Vec p = detail::gaussian(rng, n);
            p -= q * q.dot(p);
            if (sc.system == System::Neumann && zero_f0) {
                p = with_zero_f0({q, p}, a).qprime;
            } else if (energy) {
                if (sc.system == System::ReducedSphere) rescale(p, sphere_hamiltonian(q, p, a), *energy);
                if (sc.system == System::Geodesic) rescale(p, geodesic_hamiltonian(q, p, a), *energy);
                if (sc.system == System::Neumann) rescale(p, 0.5 * p.squaredNorm(), *energy - 0.5 * q.dot(q.cwiseQuotient(a)));
            }
            y.resize(2 * n);
            y << q, p;
            break;
        }
        case System::ReducedStiefel: {
            const InertiaSpec spec = inertia_spec(sc);
            const Mat rows = random_frame(n, rng);
            ReducedState s{Mat(rows.topRows(sc.r).transpose()), Mat(n, sc.r)};
            for (int k = 0; k < sc.r; ++k) s.P.col(k) = detail::gaussian(rng, n);
            const Mat xtp = s.X.transpose() * s.P;
            s.P -= s.X * (0.5 * (xtp + xtp.transpose()));
            if (energy) s.P *= std::sqrt(*energy / stiefel_energy(s, spec));
            y = s.flatten();
            break;
        }
        case System::QuadricGeodesic: {
            const Vec a = sc.inertia.values;
            const Vec u = detail::gaussian(rng, n).normalized();
            const Vec x = u / std::sqrt(u.dot(u.cwiseQuotient(a)));
            const Vec normal = x.cwiseQuotient(a).normalized();
            Vec g = detail::gaussian(rng, n);
            g -= normal * normal.dot(g);
            y.resize(2 * n);
            y << x, g.normalized();
            break;
        }
    }
    return y;
}

struct SystemModel {
    VectorField field;
    std::vector<std::string> layout;
    std::vector<Diagnostic> integrals;    // checked for drift
    std::vector<Diagnostic> constraints;  // checked for magnitude
    std::optional<ManifoldLayout> manifold;
};

namespace detail {
inline std::string idx(int i) { return std::to_string(i + 1); }
}  // namespace detail

inline SystemModel build_model(const Scenario& sc, const Vec& y0) {
    using detail::idx;
    const int n = sc.n;
    const int r = sc.r;
    SystemModel m;
    switch (sc.system) {
        case System::LrMultiplier:
        case System::LrMomentum: {
            const bool vel = sc.system == System::LrMultiplier;
            const InertiaSpec spec = inertia_spec(sc);
            const int rows = vel ? n : r;
            const auto rep = vel ? BodyState::Representation::Velocity : BodyState::Representation::Momentum;
            m.field = vel ? multiplier_field_flat(spec, r) : momentum_field_flat(spec, r, rows);
            for (auto [i, j] : pair_list(n)) m.layout.push_back((vel ? "w" : "m") + idx(i) + idx(j));
            for (int k = 0; k < rows; ++k)
                for (int c = 0; c < n; ++c) m.layout.push_back("e" + idx(k) + "_" + idx(c));
            auto unflat = [rep, n, r, rows](const Vec& y) { return BodyState::unflatten(rep, n, r, rows, y); };
            m.integrals.push_back({"energy", [unflat, spec](double, const Vec& y) { return lr_integrals(unflat(y), spec).energy; }});
            const auto cc = lr_integrals(unflat(y0), spec).char_coeffs;
            for (std::size_t k = 0; k < cc.size(); ++k)
                for (std::size_t jj = 0; jj < cc[k].size(); ++jj)
                    m.integrals.push_back({"c" + std::to_string(k + 2) + "_" + std::to_string(jj),
                                           [unflat, spec, k, jj](double, const Vec& y) {
                                               return lr_integrals(unflat(y), spec).char_coeffs[k][jj];
                                           }});
            if (vel && r == 1 && spec.is_special())
                for (int k = 0; k < n - 1; ++k)
                    m.integrals.push_back({"l" + std::to_string(k + 2), [unflat, spec, k](double, const Vec& y) {
                                               return (*lr_integrals(unflat(y), spec).linear_l)(k);
                                           }});
            if (vel) {
                m.constraints.push_back({"constraint", [unflat](double, const Vec& y) {
                                             const BodyState s = unflat(y);
                                             const Vec c = constraint_residuals(s.xi, s.frame, s.r);
                                             return c.size() ? c.cwiseAbs().maxCoeff() : 0.0;
                                         }});
            } else {
                m.constraints.push_back({"invariant_variety", [unflat](double, const Vec& y) {
                                             const BodyState s = unflat(y);
                                             return invariant_variety_residual(s.xi, s.frame, s.r);
                                         }});
            }
            m.constraints.push_back({"orthonormality", [unflat](double, const Vec& y) {
                                         return orthonormality_residual(unflat(y).frame);
                                     }});
            m.manifold = ManifoldLayout{ManifoldLayout::Kind::FrameOrthonormal, n, rows, so_dim(n)};
            break;
        }
        case System::Veselova3:
        case System::EulerPoisson3: {
            const Vec3 inertia = sc.inertia.values;
            const PotentialSpec v = potential_spec(sc);
            m.layout = {"Omega1", "Omega2", "Omega3", "gamma1", "gamma2", "gamma3"};
            auto st = [](const Vec& y) { return Veselova3State::unflatten(y); };
            if (sc.system == System::Veselova3) {
                m.field = veselova3_field_flat(inertia, v);
                auto integ = [st, inertia, v](const Vec& y) { return veselova3_integrals(st(y), inertia, v); };
                const bool on_constraint = std::abs(st(y0).omega.dot(st(y0).gamma)) < 1e-12;
                if (on_constraint) {
                    m.integrals.push_back({"F1", [integ](double, const Vec& y) { return integ(y).F1; }});
                    if (!sc.potential.family) m.integrals.push_back({"F2", [integ](double, const Vec& y) { return integ(y).F2; }});
                }
                if (sc.potential.family) {
                    if (!on_constraint) m.integrals.push_back({"F1", [integ](double, const Vec& y) { return integ(y).F1; }});
                    m.integrals.push_back({"F", [integ](double, const Vec& y) { return *integ(y).F_potential; }});
                } else {
                    m.integrals.push_back({"jacobi_painleve", [integ](double, const Vec& y) { return integ(y).jacobi_painleve; }});
                    m.integrals.push_back({"squared_momentum", [integ](double, const Vec& y) { return integ(y).squared_momentum; }});
                }
                m.integrals.push_back({"geometric", [integ](double, const Vec& y) { return integ(y).geometric; }});
                if (on_constraint)
                    m.constraints.push_back({"constraint", [integ](double, const Vec& y) { return std::abs(integ(y).constraint); }});
                else
                    m.integrals.push_back({"constraint", [integ](double, const Vec& y) { return integ(y).constraint; }});
            } else {
                m.field = euler_poisson3_field_flat(inertia, v);
                auto integ = [st, inertia, v](const Vec& y) { return euler_poisson3_integrals(st(y), inertia, v); };
                m.integrals.push_back({"i1", [integ](double, const Vec& y) { return integ(y).i1; }});
                m.integrals.push_back({"i2", [integ](double, const Vec& y) { return integ(y).i2; }});
                m.integrals.push_back({"f1", [integ](double, const Vec& y) { return integ(y).f1; }});
            }
            break;
        }
        case System::ReducedSphere:
        case System::Neumann:
        case System::Geodesic: {
            const Vec a = sc.inertia.values;
            const std::string pn = sc.system == System::ReducedSphere ? "p" : sc.system == System::Neumann ? "qp" : "pt";
            for (int i = 0; i < n; ++i) m.layout.push_back("q" + idx(i));
            for (int i = 0; i < n; ++i) m.layout.push_back(pn + idx(i));
            auto q_of = [n](const Vec& y) { return Vec(y.head(n)); };
            auto p_of = [n](const Vec& y) { return Vec(y.tail(n)); };
            if (sc.system == System::ReducedSphere) {
                m.field = sphere_field_flat(a);
                m.integrals.push_back({"H", [=](double, const Vec& y) { return sphere_hamiltonian(q_of(y), p_of(y), a); }});
            } else if (sc.system == System::Geodesic) {
                m.field = geodesic_field_flat(a);
                m.integrals.push_back({"Hstar", [=](double, const Vec& y) { return geodesic_hamiltonian(q_of(y), p_of(y), a); }});
                if (n == 3)
                    m.integrals.push_back({"F2star", [=](double, const Vec& y) { return geodesic_f2_star(q_of(y), p_of(y), a); }});
            } else {
                m.field = neumann_field_flat(a);
                m.integrals.push_back({"energy", [=](double, const Vec& y) { return neumann_energy({q_of(y), p_of(y)}, a); }});
                m.integrals.push_back({"F0", [=](double, const Vec& y) { return neumann_f0({q_of(y), p_of(y)}, a); }});
                for (int k = 0; k < n; ++k)
                    m.integrals.push_back({"phiF_" + std::to_string(k),
                                           [=](double, const Vec& y) { return neumann_phi_f({q_of(y), p_of(y)}, a)(k); }});
            }
            m.constraints.push_back({"unit_q", [=](double, const Vec& y) { return std::abs(q_of(y).squaredNorm() - 1.0); }});
            m.constraints.push_back({"tangency", [=](double, const Vec& y) { return std::abs(q_of(y).dot(p_of(y))); }});
            m.manifold = ManifoldLayout{ManifoldLayout::Kind::SphereCotangent, n, 1, 0};
            break;
        }
        case System::ReducedStiefel: {
            const InertiaSpec spec = inertia_spec(sc);
            m.field = stiefel_field_flat(spec, r);
            for (int k = 0; k < r; ++k)
                for (int i = 0; i < n; ++i) m.layout.push_back("x" + idx(i) + "_" + idx(k));
            for (int k = 0; k < r; ++k)
                for (int i = 0; i < n; ++i) m.layout.push_back("p" + idx(i) + "_" + idx(k));
            auto st = [n, r](const Vec& y) { return ReducedState::unflatten(n, r, y); };
            m.integrals.push_back({"energy", [st, spec](double, const Vec& y) { return stiefel_energy(st(y), spec); }});
            for (int k = 0; k < n / 2; ++k)
                m.integrals.push_back({"trM" + std::to_string(2 * k + 2),
                                       [st, k](double, const Vec& y) { return momentum_spectral_invariants(st(y))(k); }});
            m.constraints.push_back({"orthonormality", [st](double, const Vec& y) { return st(y).orthonormality_residual(); }});
            m.constraints.push_back({"cotangency", [st](double, const Vec& y) { return st(y).cotangency_residual(); }});
            m.manifold = ManifoldLayout{ManifoldLayout::Kind::StiefelCotangent, n, r, 0};
            break;
        }
        case System::QuadricGeodesic: {
            const Vec a = sc.inertia.values;
            m.field = quadric_geodesic_field_flat(a);
            for (int i = 0; i < n; ++i) m.layout.push_back("X" + idx(i));
            for (int i = 0; i < n; ++i) m.layout.push_back("g" + idx(i));
            auto st = [](const Vec& y) { return QuadricGeodesicState::unflatten(y); };
            for (int k = 0; k < n; ++k)
                m.integrals.push_back({"moser_" + std::to_string(k + 1), [st, a, k](double, const Vec& y) {
                                           const auto s = st(y);
                                           Eigen::SelfAdjointEigenSolver<Mat> es(moser_matrices(s.X, s.gamma, a).L);
                                           return es.eigenvalues()(k);
                                       }});
            m.constraints.push_back({"on_quadric", [st, a](double, const Vec& y) { return quadric_residuals(st(y), a).on_quadric; }});
            m.constraints.push_back({"tangency", [st, a](double, const Vec& y) { return quadric_residuals(st(y), a).tangency; }});
            m.constraints.push_back({"unit_speed", [st, a](double, const Vec& y) { return quadric_residuals(st(y), a).unit_speed; }});
            break;
        }
    }
    return m;
}

inline std::optional<double> state_energy(const Scenario& sc, const Vec& y) {
    const SystemModel m = build_model(sc, y);
    for (const auto& d : m.integrals)
        if (d.name == "energy" || d.name == "H" || d.name == "Hstar" || d.name == "F1" || d.name == "f1") return d.eval(0.0, y);
    return std::nullopt;
}

inline Vec initial_state(const Scenario& sc) {
    if (sc.initial.state) return *sc.initial.state;
    return random_admissible_state(sc, sc.initial.seed, sc.initial.energy, sc.initial.zero_f0);
}

// ---------------------------------------------------------------------------
// Output

inline std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline void write_csv(const std::filesystem::path& file, const Trajectory& tr, const std::vector<std::string>& layout,
                      const std::vector<double>& grid) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw Error("cannot write " + file.string());
    out << "t";
    for (const auto& name : layout) out << ',' << name;
    for (const auto& name : tr.diagnostic_names) out << ',' << name;
    out << '\n';
    std::size_t k = 0;
    for (double t : grid) {
        while (k + 1 < tr.size() && tr.times[k] < t) ++k;
        const bool node = tr.times[k] == t;
        const Vec y = node ? tr.states[k] : tr.at(t);
        out << format_double(t);
        for (Eigen::Index i = 0; i < y.size(); ++i) out << ',' << format_double(y(i));
        for (std::size_t d = 0; d < tr.diagnostic_names.size(); ++d)
            out << ',' << (node ? format_double(tr.diagnostics[k][d]) : std::string("nan"));
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Running

struct RunResult {
    bool pass = false;
    bool numerical_failure = false;
    json report;
};

namespace detail {

inline json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline json verify_integrals(const Trajectory& tr, const SystemModel& m, const Task& task) {
    json out{{"kind", "verify_integrals"}, {"tol", task.tol}};
    bool pass = true;
    json integ = json::object();
    for (const auto& d : m.integrals) {
        const double drift = tr.max_drift(d.name);
        const double ref = std::abs(tr.diagnostic_series(d.name).front());
        const double rel = drift / std::max(ref, 1.0);
        integ[d.name] = {{"initial", tr.diagnostic_series(d.name).front()}, {"max_drift", drift}, {"scaled_drift", rel}};
        pass = pass && rel < task.tol;
    }
    json cons = json::object();
    for (const auto& d : m.constraints) {
        const double mx = tr.max_abs(d.name);
        cons[d.name] = {{"max_abs", mx}};
        pass = pass && mx < task.tol;
    }
    out["integrals"] = integ;
    out["constraints"] = cons;
    out["pass"] = pass;
    return out;
}

inline bool anisotropic(const Scenario& sc) {
    if (sc.inertia.kind == InertiaConfig::Kind::Generic) {
        const Mat& m = sc.inertia.matrix;
        return (m - m(0, 0) * Mat::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff() > 1e-12;
    }
    return sc.inertia.values.maxCoeff() - sc.inertia.values.minCoeff() > 1e-12;
}

inline json verify_measure(const Scenario& sc, const Task& task) {
    json out{{"kind", "verify_measure"}, {"tol", task.tol}, {"points", task.points}, {"fd_step", task.fd_step}};
    std::vector<double> res;
    std::vector<double> unit;
    for (int i = 0; i < task.points; ++i) {
        const Vec y = random_admissible_state(sc, sc.initial.seed + 1000 + static_cast<std::uint64_t>(i), std::nullopt);
        switch (sc.system) {
            case System::Veselova3: {
                const auto s = Veselova3State::unflatten(y);
                const Vec3 inertia = sc.inertia.values;
                const PotentialSpec v = potential_spec(sc);
                res.push_back(std::abs(veselova3_measure_residual(s, inertia, v, false, task.fd_step)));
                unit.push_back(std::abs(veselova3_measure_residual(s, inertia, v, true, task.fd_step)));
                break;
            }
            case System::LrMomentum: {
                const auto s = BodyState::unflatten(BodyState::Representation::Momentum, sc.n, sc.r, sc.r, y);
                const InertiaSpec spec = inertia_spec(sc);
                res.push_back(std::abs(momentum_measure_residual(s, spec, false, task.fd_step)));
                unit.push_back(std::abs(momentum_measure_residual(s, spec, true, task.fd_step)));
                break;
            }
            default: {
                const Vec a = sc.inertia.values;
                const Vec q = y.head(sc.n);
                const Vec p = y.tail(sc.n);
                res.push_back(std::abs(sphere_measure_residual(q, p, a, -0.5 * (sc.n - 2), task.fd_step)));
                unit.push_back(std::abs(sphere_measure_residual(q, p, a, 0.0, task.fd_step)));
            }
        }
    }
    auto stats = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return json{{"max", v.back()}, {"median", v[v.size() / 2]}, {"min", v.front()}};
    };
    out["density"] = stats(res);
    out["unit_density"] = stats(unit);
    bool pass = *std::max_element(res.begin(), res.end()) < task.tol;
    // a non-constant density must be needed: the unit density is rejected
    if (anisotropic(sc)) pass = pass && out["unit_density"]["median"].get<double>() > 1e-3;
    out["pass"] = pass;
    return out;
}

inline json measure_duality(const Scenario& sc, const Task& task) {
    const InertiaSpec spec = inertia_spec(sc);
    const double det_inv = spec.inverse_matrix().determinant();
    std::mt19937_64 rng(sc.initial.seed + 7000);
    double duality = 0.0;
    std::vector<double> ratios;
    for (int i = 0; i < task.points; ++i) {
        const RestrictedDeterminants d = restricted_determinants(spec, Frame(random_frame(sc.n, rng)), sc.r);
        const double mu2 = *d.mu * *d.mu;
        duality = std::max(duality, std::abs(mu2 - det_inv * d.mu_tilde * d.mu_tilde) / mu2);
        if (d.p_special) ratios.push_back(d.mu_tilde * d.mu_tilde / *d.p_special);
    }
    json out{{"kind", "measure_duality"}, {"tol", task.tol}, {"points", task.points}, {"duality_rel", duality}};
    bool pass = duality < task.tol;
    if (!ratios.empty()) {
        const auto [lo, hi] = std::minmax_element(ratios.begin(), ratios.end());
        const double spread = (*hi - *lo) / std::abs(*lo);
        out["plucker_ratio_spread"] = spread;
        pass = pass && spread < 1e-8;
    }
    out["pass"] = pass;
    return out;
}

inline json reducing_multiplier(const Scenario& sc, const Task& task) {
    const Vec a = sc.inertia.values;
    double pi = 0.0;
    double alpha = 0.0;
    int used = 0;
    for (std::uint64_t k = 0; used < task.points; ++k) {
        const Vec y = random_admissible_state(sc, sc.initial.seed + 3000 + k, std::nullopt);
        const Vec q = y.head(sc.n);
        if (q.cwiseAbs().maxCoeff() < 0.3) continue;
        const PiResidual r = chaplygin_pi_residual(q, y.tail(sc.n), a, 1.0, task.fd_step);
        pi = std::max(pi, r.pi_residual);
        alpha = std::max(alpha, r.alpha_residual);
        ++used;
    }
    return {{"kind", "reducing_multiplier"}, {"tol", task.tol},  {"points", used},
            {"pi_residual", pi},             {"alpha_residual", alpha}, {"pass", pi < task.tol && alpha < task.tol}};
}

/// Control perturbation for the potential duality check.
inline PotentialSpec cubic_control() {
    return PotentialSpec::custom([](const Vec3& g) { return g(0) * g(1) * g(2); },
                                 [](const Vec3& g) { return Vec3(g(1) * g(2), g(0) * g(2), g(0) * g(1)); });
}

inline PotentialSpec sum_potential(const PotentialSpec& u, const PotentialSpec& v) {
    return PotentialSpec::custom([u, v](const Vec3& g) { return u.value(g) + v.value(g); },
                                 [u, v](const Vec3& g) { return Vec3(u.gradient(g) + v.gradient(g)); });
}

/// Veselova with V against Euler–Poisson with J = I⁻¹ and potential F, at
/// i2 = 0: the integrals F2 + F and f2 + V are compared for conservation.
inline json potential_duality(const Scenario& sc, const Vec& y0, const Task& task) {
    const Vec3 inertia = sc.inertia.values;
    const PotentialSpec family = potential_spec(sc);
    const PotentialSpec f_term = veselova_family_integral_term(sc.potential.alphas, inertia);
    const PotentialSpec v = task.control ? sum_potential(family, cubic_control()) : family;
    const Veselova3State s0 = Veselova3State::unflatten(y0);

    const IntegratorConfig cfg = lrsys::detail::gridded(task.horizon, 200, 1e-11, 1e-13);
    const Trajectory ves = integrate_flow(
        veselova3_field_flat(inertia, v), y0, cfg,
        {{"F", [f_term, inertia](double, const Vec& y) {
              return veselova3_integrals(Veselova3State::unflatten(y), inertia, PotentialSpec::zero()).F2 +
                     f_term.value(Veselova3State::unflatten(y).gamma);
          }}});

    const Vec3 j = inertia.cwiseInverse();
    const Vec3 io = inertia.cwiseProduct(s0.omega);
    const Vec3 m = io - io.dot(s0.gamma) * s0.gamma;
    Vec e0(6);
    e0 << Vec3(inertia.cwiseProduct(m)), s0.gamma;
    const Trajectory ep = integrate_flow(
        euler_poisson3_field_flat(j, f_term), e0, cfg,
        {{"f2+V", [j, v](double, const Vec& y) {
              const auto s = Veselova3State::unflatten(y);
              return euler_poisson3_integrals(s, j, PotentialSpec::zero()).f2 + v.value(s.gamma);
          }},
         {"i2", [j](double, const Vec& y) { return euler_poisson3_integrals(Veselova3State::unflatten(y), j, PotentialSpec::zero()).i2; }}});

    auto scaled = [](const Trajectory& tr, const std::string& name) {
        return tr.max_drift(name) / std::max(1.0, std::abs(tr.diagnostic_series(name).front()));
    };
    const double dv = scaled(ves, "F");
    const double de = scaled(ep, "f2+V");
    json out{{"kind", "potential_duality"}, {"tol", task.tol},     {"control", task.control},
             {"veselova_drift", dv},        {"euler_poisson_drift", de}, {"i2_max", ep.max_abs("i2")}};
    // the control must break both integrals by a clear margin
    out["pass"] = task.control ? (dv > 1e-4 && de > 1e-4) : (dv < task.tol && de < task.tol);
    return out;
}

inline json lr_formulations(const Scenario& sc, const Vec& y0, const Task& task) {
    const InertiaSpec spec = inertia_spec(sc);
    const int n = sc.n;
    const int r = sc.r;
    const IntegratorConfig cfg = lrsys::detail::gridded(task.horizon, task.samples, 1e-12, 1e-14);
    const BodyState b0 = BodyState::unflatten(BodyState::Representation::Velocity, n, r, n, y0);
    auto to_momentum = [&](const BodyState& b) {
        BodyState m;
        m.representation = BodyState::Representation::Momentum;
        m.r = r;
        m.frame = b.frame.topRows(r);
        m.xi = momentum_from_omega(b.xi, b.frame, r, spec);
        return m.flatten();
    };
    const Trajectory mult = integrate_flow(multiplier_field_flat(spec, r), y0, cfg);
    const Trajectory mom = integrate_flow(momentum_field_flat(spec, r, r), to_momentum(b0), cfg);
    double sup = 0.0;
    for (double t : cfg.output_times) {
        const Vec lhs = to_momentum(BodyState::unflatten(BodyState::Representation::Velocity, n, r, n, mult.at(t)));
        sup = std::max(sup, (lhs - mom.at(t)).cwiseAbs().maxCoeff());
    }
    return {{"kind", "correspond"}, {"target", "lr_momentum"}, {"tol", task.tol},
            {"horizon", task.horizon}, {"sup_norm", sup},      {"pass", sup < task.tol}};
}

/// Veselova trajectory against the reduced sphere flow (q = γ, A = I⁻¹), and
/// the Neumann time factor of the n = 3 case along it.
inline json veselova_reduction(const Vec3& inertia, const Veselova3State& s0, double horizon, int samples) {
    const Vec a = Vec(inertia.cwiseInverse());
    const IntegratorConfig cfg = lrsys::detail::gridded(horizon, samples, 1e-12, 1e-14);
    const Vec y0 = s0.flatten();
    const Trajectory ves = integrate_flow(veselova3_field_flat(inertia, PotentialSpec::zero()), y0, cfg);
    auto to_sphere = [&](const Vec& y) {
        const auto s = Veselova3State::unflatten(y);
        const Vec q = Vec(Vec3(s.gamma));
        Vec x(6);
        x << q, sphere_momentum_from_velocity(q, Vec(Vec3(s.gamma.cross(s.omega))), a);
        return x;
    };
    const Trajectory sph = integrate_flow(sphere_field_flat(a), to_sphere(y0), cfg);
    const double h = 0.5 * inertia.cwiseProduct(s0.omega).dot(s0.omega);
    double sup = 0.0;
    double factor = 0.0;
    for (double t : cfg.output_times) {
        const Vec y = ves.at(t);
        sup = std::max(sup, (to_sphere(y) - sph.at(t)).cwiseAbs().maxCoeff());
        const auto s = Veselova3State::unflatten(y);
        const Vec3 inv = inertia.cwiseInverse();
        const double closed = std::sqrt(2.0 * h * inv.prod() / inv.cwiseProduct(s.gamma).dot(s.gamma));
        const TimeFactors tf = time_factors(Vec(Vec3(s.gamma)), Vec(Vec3(s.gamma.cross(s.omega))), a, h);
        factor = std::max(factor, std::abs(tf.dtau1_dt - closed));
    }
    return {{"reduction_sup", sup}, {"factor_mismatch", factor}};
}

inline json correspond(const Scenario& sc, const Vec& y0, const Task& task) {
    json out{{"kind", "correspond"}, {"target", task.target}, {"tol", task.tol}, {"horizon", task.horizon}};
    const int n = sc.n;
    if (sc.system == System::LrMultiplier) return lr_formulations(sc, y0, task);
    if (sc.system == System::ReducedSphere && task.target == "geodesic") {
        const auto c = hamiltonization_check(y0.head(n), y0.tail(n), sc.inertia.values, task.horizon, task.samples);
        out["sup_norm"] = c.sup_norm;
        out["hstar_drift"] = c.hstar_drift;
        if (c.f2star_drift) out["f2star_drift"] = *c.f2star_drift;
        out["pass"] = c.sup_norm < task.tol && c.hstar_drift < 1e-9 && c.f2star_drift.value_or(0.0) < 1e-8;
        return out;
    }
    if (sc.system == System::Neumann) {
        const NeumannState s0 = NeumannState::unflatten(y0);
        const double f0 = neumann_f0(s0, sc.inertia.values);
        out["initial_f0"] = f0;
        if (std::abs(f0) > 1e-10) {
            out["pass"] = false;
            out["note"] = "the correspondence needs F0 = 0; set initial.zero_f0";
            return out;
        }
        const auto c = reduced_from_neumann(s0, sc.inertia.values, 0.5, task.horizon, task.samples);
        out["sup_norm"] = c.sup_norm;
        out["ode_residual"] = c.ode_residual;
        out["max_abs_f0"] = c.max_abs_f0;
        out["energy_mismatch"] = c.energy_mismatch;
        out["pass"] = c.sup_norm < task.tol && c.ode_residual < task.tol;
        return out;
    }
    Vec a;
    Vec q;
    Vec p;
    if (sc.system == System::Veselova3) {
        const auto s = Veselova3State::unflatten(y0);
        if (std::abs(s.omega.dot(s.gamma)) > 1e-12) {
            out["pass"] = false;
            out["note"] = "the correspondence needs (Omega, gamma) = 0";
            return out;
        }
        a = Vec(Vec3(sc.inertia.values).cwiseInverse());
        q = Vec(Vec3(s.gamma));
        const Vec qdot = Vec(Vec3(s.gamma.cross(s.omega)));
        p = sphere_momentum_from_velocity(q, qdot, a);
    } else {
        a = sc.inertia.values;
        q = y0.head(n);
        p = y0.tail(n);
    }
    const auto c = neumann_correspondence(q, p, a, task.horizon, task.samples);
    out["sup_norm"] = c.sup_norm;
    out["ode_residual"] = c.ode_residual;
    out["max_abs_f0"] = c.max_abs_f0;
    bool pass = c.sup_norm < task.tol && c.ode_residual < task.tol && c.max_abs_f0 < 1e-8;
    if (c.max_abs_integral37) {
        out["max_abs_integral_n3"] = *c.max_abs_integral37;
        pass = pass && *c.max_abs_integral37 < 1e-8;
    }
    if (sc.system == System::Veselova3) {
        const json extra = veselova_reduction(sc.inertia.values, Veselova3State::unflatten(y0), task.horizon, task.samples);
        out.update(extra);
        pass = pass && extra["reduction_sup"].get<double>() < task.tol && extra["factor_mismatch"].get<double>() < 1e-8;
    }
    out["pass"] = pass;
    return out;
}

inline json reconstruct(const Scenario& sc, const Vec& y0, const Task& task) {
    const int n = sc.n;
    const auto c = reconstruction_check(y0.head(n), y0.tail(n), sc.inertia.values, task.horizon, task.samples, 10.0,
                                        task.branch_tol);
    json out{{"kind", "reconstruct"},          {"tol", task.tol},
             {"orthogonality", c.orthogonality}, {"determinant", c.determinant},
             {"admissibility", c.admissibility}, {"first_row", c.first_row},
             {"kinematics", c.kinematics},       {"moser_drift", c.moser_drift},
             {"alpha_c", c.alpha_c},             {"linear_drift", c.linear_drift},
             {"linear_norm", c.linear_norm},     {"explicit_match", c.explicit_match},
             {"explicit_samples", c.explicit_used}, {"time_two_route", c.time_two_route},
             {"fiber", c.fiber},                 {"samples", c.samples},
             {"flagged", c.flagged}};
    out["pass"] = c.orthogonality < 1e-8 && c.admissibility < 1e-7 && c.kinematics < task.tol && c.moser_drift < 1e-8 &&
                  c.alpha_c < 1e-6 && c.linear_drift < 1e-7 && c.explicit_match < 1e-6 && c.time_two_route < 1e-6;
    return out;
}

inline json abel_jacobi(const Scenario& sc, const Vec& y0, const Task& task) {
    const int n = sc.n;
    const Vec a = sc.inertia.values;
    json out{{"kind", "abel_jacobi"}, {"tol", task.tol}, {"branch_tol", task.branch_tol}};
    NeumannState s0;
    if (sc.system == System::ReducedSphere) {
        const Vec q = y0.head(n);
        const Vec p = y0.tail(n);
        s0 = reduced_to_neumann(q, p, a, sphere_hamiltonian(q, p, a));
    } else {
        s0 = NeumannState::unflatten(y0);
    }
    const double f0 = neumann_f0(s0, a);
    out["initial_f0"] = f0;
    if (std::abs(f0) > 1e-10) {
        out["pass"] = false;
        out["note"] = "the quadratures need F0 = 0";
        return out;
    }
    IntegratorConfig cfg = IntegratorConfig::adaptive(task.horizon, 1e-12, 1e-14);
    cfg.output_times = uniform_grid(task.horizon, task.samples);
    Trajectory tr = integrate_flow(neumann_field_flat(a), s0.flatten(), cfg);
    Trajectory grid;
    grid.times.push_back(0.0);
    grid.states.push_back(tr.states.front());
    for (double t : cfg.output_times) {
        grid.times.push_back(t);
        grid.states.push_back(tr.at(t));
    }
    const AbelJacobiResult res = abel_jacobi_along(grid, a, task.branch_tol);
    out["max_abs"] = res.max_abs;
    out["used"] = res.used;
    out["excluded"] = res.residuals.size() - res.used;
    // the residuals must be sensitive to the constants of motion
    std::vector<double> cs = neumann_invariants(s0, a).cs;
    cs.front() += 1e-2;
    const double perturbed = abel_jacobi_along(grid, a, task.branch_tol, cs).max_abs;
    out["perturbed_c2_max_abs"] = perturbed;
    out["pass"] = res.used > 0 && res.max_abs < task.tol && perturbed > 1e-3;
    return out;
}

inline std::string task_name(Task::Kind k) {
    switch (k) {
        case Task::Kind::Simulate: return "simulate";
        case Task::Kind::VerifyIntegrals: return "verify_integrals";
        case Task::Kind::VerifyMeasure: return "verify_measure";
        case Task::Kind::Correspond: return "correspond";
        case Task::Kind::Reconstruct: return "reconstruct";
        case Task::Kind::AbelJacobi: return "abel_jacobi";
        case Task::Kind::MeasureDuality: return "measure_duality";
        case Task::Kind::ReducingMultiplier: return "reducing_multiplier";
        case Task::Kind::PotentialDuality: return "potential_duality";
    }
    return "?";
}

}  // namespace detail

/// Integrates the scenario and evaluates its tasks. Writes traj.csv and
/// report.json into `out_dir` when given.
inline RunResult run_scenario(const Scenario& sc, const std::optional<std::filesystem::path>& out_dir) {
    RunResult result;
    json& rep = result.report;
    rep["name"] = sc.name;
    rep["system"] = system_name(sc.system);
    rep["n"] = sc.n;
    rep["r"] = sc.r;
    if (!sc.initial.state) rep["seed"] = sc.initial.seed;

    const Vec y0 = initial_state(sc);
    rep["initial_state"] = detail::vec_json(y0);
    const SystemModel model = build_model(sc, y0);
    if (model.layout.size() != static_cast<std::size_t>(y0.size())) throw Error("internal: layout/state size mismatch");

    std::vector<Diagnostic> diags = model.integrals;
    diags.insert(diags.end(), model.constraints.begin(), model.constraints.end());
    Stabilizer stab;
    if (sc.integrator.stabilize_every > 0 && model.manifold)
        stab = [layout = *model.manifold](const Vec& y) { return stabilize_state(y, layout); };

    if (out_dir) std::filesystem::create_directories(*out_dir);
    std::vector<double> grid{0.0};
    grid.insert(grid.end(), sc.integrator.output_times.begin(), sc.integrator.output_times.end());

    Trajectory tr;
    try {
        tr = integrate_flow(model.field, y0, sc.integrator, diags, stab);
    } catch (const IntegrationError& e) {
        result.numerical_failure = true;
        rep["status"] = "error";
        rep["error"] = {{"message", e.what()}, {"t", e.last_time}, {"last_state", detail::vec_json(e.last_state)}};
        if (out_dir) std::ofstream(*out_dir / "report.json", std::ios::binary) << rep.dump(2) << '\n';
        return result;
    }
    rep["accepted_steps"] = tr.accepted_steps;
    rep["rejected_steps"] = tr.rejected_steps;
    if (out_dir) write_csv(*out_dir / "traj.csv", tr, model.layout, grid);

    bool pass = true;
    json tasks = json::array();
    for (const Task& task : sc.tasks) {
        json t;
        try {
            switch (task.kind) {
                case Task::Kind::Simulate:
                    t = {{"kind", "simulate"}, {"samples", grid.size()}, {"final_time", tr.t_end()}, {"pass", true}};
                    break;
                case Task::Kind::VerifyIntegrals: t = detail::verify_integrals(tr, model, task); break;
                case Task::Kind::VerifyMeasure: t = detail::verify_measure(sc, task); break;
                case Task::Kind::Correspond: t = detail::correspond(sc, y0, task); break;
                case Task::Kind::Reconstruct: t = detail::reconstruct(sc, y0, task); break;
                case Task::Kind::AbelJacobi: t = detail::abel_jacobi(sc, y0, task); break;
                case Task::Kind::MeasureDuality: t = detail::measure_duality(sc, task); break;
                case Task::Kind::ReducingMultiplier: t = detail::reducing_multiplier(sc, task); break;
                case Task::Kind::PotentialDuality: t = detail::potential_duality(sc, y0, task); break;
            }
        } catch (const Error& e) {
            result.numerical_failure = true;
            t = {{"kind", detail::task_name(task.kind)}, {"pass", false}, {"error", e.what()}};
        }
        pass = pass && t["pass"].get<bool>();
        tasks.push_back(t);
    }
    rep["tasks"] = tasks;
    rep["status"] = pass ? "pass" : (result.numerical_failure ? "error" : "fail");
    result.pass = pass;
    if (out_dir) std::ofstream(*out_dir / "report.json", std::ios::binary) << rep.dump(2) << '\n';
    return result;
}

// ---------------------------------------------------------------------------
// Suites

struct SuiteEntry {
    std::filesystem::path file;
    std::string name;
    std::string status;  // pass | fail | error | invalid
    std::string message;
};

/// Worker budget from LRSYS_WORKERS (default: hardware concurrency).
inline int worker_budget() {
    if (const char* env = std::getenv("LRSYS_WORKERS")) {
        try {
            const int w = std::stoi(env);
            if (w >= 1) return w;
        } catch (const std::exception&) {
        }
        throw ConfigError("LRSYS_WORKERS", "expected a positive integer");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs every *.json scenario of `dir` (sorted by file name) into
/// out_dir/<name>/, at most `workers` at a time.
inline std::vector<SuiteEntry> run_suite(const std::filesystem::path& dir, const std::filesystem::path& out_dir, int workers) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());

    std::vector<SuiteEntry> entries(files.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < files.size(); i = next++) {
            SuiteEntry& e = entries[i];
            e.file = files[i];
            try {
                const Scenario sc = load_scenario(files[i]);
                e.name = sc.name;
                const RunResult r = run_scenario(sc, out_dir / sc.name);
                e.status = r.pass ? "pass" : (r.numerical_failure ? "error" : "fail");
            } catch (const ConfigError& ex) {
                e.status = "invalid";
                e.message = ex.what();
            } catch (const std::exception& ex) {
                e.status = "error";
                e.message = ex.what();
            }
        }
    };
    std::vector<std::thread> pool;
    const int count = std::max(1, std::min<int>(workers, static_cast<int>(files.size())));
    for (int k = 0; k < count; ++k) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return entries;
}

}  // namespace lrsys::scenario
