#include <cmath>
#include <random>

#include "catch_amalgamated.hpp"

#include "lrsys/harness.hpp"
#include "lrsys/neumann_geodesic.hpp"
#include "lrsys/reduced_flows.hpp"
#include "lrsys/verification.hpp"
#include "test_support.hpp"

using namespace lrsys;
using namespace lrsys::testing;
using Catch::Matchers::WithinAbs;

namespace {

NeumannState neumann_point(std::mt19937_64& rng, int n) {
    const auto [q, v] = sphere_point(rng, n);
    return {q, v};
}

Vec a123() {
    Vec a(3);
    a << 1.0, 2.0, 3.0;
    return a;
}

}  // namespace

TEST_CASE("polynomial helpers", "[neumann][poly]") {
    const Vec c = poly::from_roots({1.0, 2.0, 3.0});
    // λ³ − 6λ² + 11λ − 6
    REQUIRE(c.size() == 4);
    CHECK(c(0) == -6.0);
    CHECK(c(1) == 11.0);
    CHECK(c(2) == -6.0);
    CHECK(c(3) == 1.0);
    CHECK(poly::eval(c, 4.0) == 6.0);
    const Vec d = poly::derivative(c);
    CHECK(d(0) == 11.0);
    CHECK(d(1) == -12.0);
    CHECK(d(2) == 3.0);
    double imag = 1.0;
    const auto roots = poly::real_roots(c, &imag);
    REQUIRE(roots.size() == 3);
    CHECK_THAT(roots[0], WithinAbs(1.0, 1e-13));
    CHECK_THAT(roots[1], WithinAbs(2.0, 1e-13));
    CHECK_THAT(roots[2], WithinAbs(3.0, 1e-13));
    CHECK(imag < 1e-12);
    const Vec z = poly::multiply(poly::from_roots({0.0}), c);
    CHECK((poly::deflate_zero(z) - c).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("spheroconic coordinates round trip", "[neumann][spheroconic]") {
    std::mt19937_64 rng(1);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        Vec inertia = a.cwiseInverse();
        std::sort(inertia.data(), inertia.data() + n);
        for (int trial = 0; trial < 10; ++trial) {
            const Vec q = unit_vec(rng, n);
            const SpheroconicPoint pt = spheroconic_from_q(q, a);
            REQUIRE(pt.lambdas.size() == n - 1);
            CHECK_FALSE(pt.boundary);
            // one root in each gap of the sorted I_i
            for (int k = 0; k < n - 1; ++k) {
                CHECK(pt.lambdas(k) > inertia(k));
                CHECK(pt.lambdas(k) < inertia(k + 1));
            }
            CHECK((spheroconic_to_q(pt, a) - q).cwiseAbs().maxCoeff() < 1e-10);
        }
    }
}

TEST_CASE("spheroconic coordinates on a coordinate axis", "[neumann][spheroconic]") {
    const SpheroconicPoint pt = spheroconic_from_q(Vec::Unit(3, 0), a123());
    REQUIRE(pt.lambdas.size() == 2);
    CHECK(pt.boundary);
    CHECK_THAT(pt.lambdas(0), WithinAbs(1.0 / 3.0, 1e-14));
    CHECK_THAT(pt.lambdas(1), WithinAbs(0.5, 1e-14));
    CHECK((spheroconic_to_q(pt, a123()) - Vec::Unit(3, 0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("Neumann flow integrals", "[neumann]") {
    std::mt19937_64 rng(2);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        const NeumannState s0 = neumann_point(rng, n);
        const Trajectory tr = integrate_flow(neumann_field_flat(a), s0.flatten(), IntegratorConfig::adaptive(10.0, 1e-12, 1e-14));
        const NeumannState s1 = NeumannState::unflatten(tr.final_state());
        INFO("n = " << n);
        CHECK_THAT(s1.q.norm(), WithinAbs(1.0, 1e-10));
        CHECK_THAT(s1.q.dot(s1.qprime), WithinAbs(0.0, 1e-11));
        CHECK_THAT(neumann_energy(s1, a), WithinAbs(neumann_energy(s0, a), 1e-10));
        CHECK_THAT(neumann_f0(s1, a), WithinAbs(neumann_f0(s0, a), 1e-9));
        for (double lam : {-0.7, 0.05, 0.9, 2.0}) CHECK_THAT(neumann_family(s1, a, lam), WithinAbs(neumann_family(s0, a, lam), 1e-8));
        if (n == 3) CHECK_THAT(neumann3_zero_integral(s1, a), WithinAbs(neumann3_zero_integral(s0, a), 1e-9));
    }
}

TEST_CASE("F0 is the family at zero", "[neumann]") {
    std::mt19937_64 rng(3);
    const Vec a = spread_axes(4);
    const NeumannState s = neumann_point(rng, 4);
    CHECK_THAT(neumann_f0(s, a), WithinAbs(neumann_family(s, a, 0.0), 1e-12));
    // Φ𝓕 evaluated as a polynomial matches Φ·𝓕
    const Vec pf = neumann_phi_f(s, a);
    REQUIRE(pf.size() == 4);
    CHECK_THAT(pf(3), WithinAbs(1.0, 1e-14));
    for (double lam : {0.1, 0.6, 3.0}) {
        double phi = 1.0;
        for (int i = 0; i < 4; ++i) phi *= lam - 1.0 / a(i);
        CHECK_THAT(poly::eval(pf, lam), WithinAbs(phi * neumann_family(s, a, lam), 1e-11));
    }
}

TEST_CASE("separation constants", "[neumann]") {
    std::mt19937_64 rng(4);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        const NeumannState s0 = with_zero_f0(neumann_point(rng, n), a);
        REQUIRE(std::abs(neumann_f0(s0, a)) < 1e-12);
        const NeumannInvariants i0 = neumann_invariants(s0, a);
        CHECK(i0.zero_root_deflated);
        REQUIRE(i0.cs.size() == static_cast<std::size_t>(n - 2));
        CHECK_FALSE(i0.near_collision);

        const Trajectory tr = integrate_flow(neumann_field_flat(a), s0.flatten(), IntegratorConfig::adaptive(10.0, 1e-12, 1e-14));
        const NeumannInvariants i1 = neumann_invariants(NeumannState::unflatten(tr.final_state()), a, 1e-8);
        REQUIRE(i1.cs.size() == i0.cs.size());
        for (std::size_t k = 0; k < i0.cs.size(); ++k) CHECK_THAT(i1.cs[k], WithinAbs(i0.cs[k], 1e-8));

        // R = −Φ²𝓕 equals −Φ·λ·Π(λ − c_k)
        const Vec r_state = neumann_r_polynomial(s0, a);
        const Vec r_consts = hyperelliptic_polynomial({neumann_energy(s0, a), i0.cs}, a);
        REQUIRE(r_state.size() == r_consts.size());
        CHECK((r_state - r_consts).cwiseAbs().maxCoeff() < 1e-10);

        // without F0 = 0 all n − 1 roots are reported
        const NeumannState generic{s0.q, 1.3 * s0.qprime};
        const NeumannInvariants ig = neumann_invariants(generic, a);
        CHECK_FALSE(ig.zero_root_deflated);
        CHECK(ig.cs.size() == static_cast<std::size_t>(n - 1));
    }
    Vec twin = spread_axes(3);
    twin(2) = twin(1);
    CHECK_THROWS_AS(neumann_invariants({Vec::Unit(3, 0), Vec::Unit(3, 1)}, twin), DomainError);
}

TEST_CASE("spheroconic rates match finite differences", "[neumann][spheroconic]") {
    std::mt19937_64 rng(5);
    const int n = 4;
    const Vec a = spread_axes(n);
    const NeumannState s = neumann_point(rng, n);
    const SpheroconicPoint pt = spheroconic_from_q(s.q, a);
    const Vec rates = spheroconic_rates(s, pt.lambdas, a);
    const double h = 1e-6;
    const Vec up = spheroconic_from_q(s.q + h * s.qprime, a).lambdas;
    const Vec down = spheroconic_from_q(s.q - h * s.qprime, a).lambdas;
    CHECK(((up - down) / (2 * h) - rates).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("time factors", "[neumann][time]") {
    std::mt19937_64 rng(6);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        const auto [q, p] = sphere_point(rng, n);
        const Vec qdot = sphere_vector_field(q, p, a).first;
        const double h = sphere_hamiltonian(q, p, a);
        const TimeFactors tf = time_factors(q, qdot, a, h);
        INFO("n = " << n);
        CHECK_THAT(tf.dtau1_dt, WithinAbs(tf.dtau1_dt_on_level, 1e-12));
        CHECK_THAT(tf.dtau1_dt, WithinAbs(tf.dtau1_dtau * tf.dtau_dt, 1e-12));
        CHECK_THAT(tf.dtau_dt, WithinAbs(reducing_multiplier(q, a), 1e-14));
        CHECK((sphere_momentum_from_velocity(q, qdot, a) - p).cwiseAbs().maxCoeff() < 1e-12);

        const TimeFactors rest = time_factors(q, Vec::Zero(n), a, 0.0);
        CHECK(std::isnan(rest.dtau1_dtau));
        CHECK(rest.dtau1_dt == 0.0);
    }
}

TEST_CASE("reduced sphere states map to Neumann states", "[neumann]") {
    std::mt19937_64 rng(7);
    const int n = 4;
    const Vec a = spread_axes(n);
    const auto [q, p] = sphere_point(rng, n);
    const double h = sphere_hamiltonian(q, p, a);
    const NeumannState ns = reduced_to_neumann(q, p, a, h);
    // the image lies on F0 = 0
    CHECK(std::abs(neumann_f0(ns, a)) < 1e-12);
    const auto [q2, p2] = neumann_to_reduced(ns, a, h);
    CHECK((q2 - q).cwiseAbs().maxCoeff() == 0.0);
    CHECK((p2 - p).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("Abel-Jacobi residual along a Neumann trajectory", "[neumann][abel_jacobi]") {
    std::mt19937_64 rng(8);
    const Vec a = spread_axes(3);
    const NeumannState s0 = with_zero_f0(neumann_point(rng, 3), a);
    const IntegratorConfig cfg = lrsys::detail::gridded(10.0, 400, 1e-12, 1e-14);
    const Trajectory tr = integrate_flow(neumann_field_flat(a), s0.flatten(), cfg);
    const AbelJacobiResult res = abel_jacobi_along(tr, a);
    CHECK(res.used > 200);
    CHECK(res.max_abs < 1e-5);

    std::vector<double> shifted = neumann_invariants(s0, a).cs;
    shifted[0] += 0.05;
    CHECK(abel_jacobi_along(tr, a, 1e-3, shifted).max_abs > 1e-3);

    const Trajectory off = integrate_flow(neumann_field_flat(a), NeumannState{s0.q, 1.2 * s0.qprime}.flatten(), cfg);
    CHECK_THROWS_AS(abel_jacobi_along(off, a), DomainError);
}
