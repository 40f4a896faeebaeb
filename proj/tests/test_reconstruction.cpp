#include <cmath>
#include <random>
#include <tuple>

#include "catch_amalgamated.hpp"

#include "lrsys/harness.hpp"
#include "lrsys/neumann_geodesic.hpp"
#include "lrsys/reconstruction.hpp"
#include "lrsys/reduced_flows.hpp"
#include "lrsys/verification.hpp"
#include "test_support.hpp"

using namespace lrsys;
using namespace lrsys::testing;
using Catch::Matchers::WithinAbs;

namespace {

/// Neumann state on F0 = 0 and its quadric lift.
std::pair<NeumannState, QuadricGeodesicState> matched_pair(std::mt19937_64& rng, const Vec& a) {
    const auto [q, v] = sphere_point(rng, static_cast<int>(a.size()));
    const NeumannState ns = with_zero_f0({q, v}, a);
    return {ns, knorrer_to_quadric(ns, a).state};
}

double up_to_sign(const Vec& x, const Vec& y) {
    return std::min((x - y).cwiseAbs().maxCoeff(), (x + y).cwiseAbs().maxCoeff());
}

}  // namespace

TEST_CASE("quadric geodesics stay on the quadric", "[reconstruction][quadric]") {
    std::mt19937_64 rng(1);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        const QuadricGeodesicState s0 = matched_pair(rng, a).second;
        const QuadricResiduals r0 = quadric_residuals(s0, a);
        CHECK(r0.on_quadric < 1e-14);
        CHECK(r0.tangency < 1e-14);
        CHECK(r0.unit_speed < 1e-14);

        const Trajectory tr = integrate_flow(quadric_geodesic_field_flat(a), s0.flatten(), IntegratorConfig::adaptive(10.0, 1e-12, 1e-14));
        const QuadricGeodesicState s1 = QuadricGeodesicState::unflatten(tr.final_state());
        const QuadricResiduals r1 = quadric_residuals(s1, a);
        INFO("n = " << n);
        CHECK(r1.on_quadric < 1e-9);
        CHECK(r1.tangency < 1e-9);
        CHECK(r1.unit_speed < 1e-9);

        // the nonzero eigenvalues of L are integrals
        const Vec al0 = chasles_frame(moser_matrices(s0.X, s0.gamma, a).L, s0.gamma).alphas;
        const Vec al1 = chasles_frame(moser_matrices(s1.X, s1.gamma, a).L, s1.gamma).alphas;
        CHECK((al1 - al0).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("Knorrer correspondence round trip", "[reconstruction][knorrer]") {
    std::mt19937_64 rng(2);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        const auto [ns, qs] = matched_pair(rng, a);
        const KnorrerSphereResult back = knorrer_to_sphere(qs, a);
        INFO("n = " << n);
        CHECK((back.state.q - ns.q).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((back.state.qprime - ns.qprime).cwiseAbs().maxCoeff() < 1e-10);
        CHECK_THAT(back.ds_dtau1, WithinAbs(knorrer_to_quadric(ns, a).ds_dtau1, 1e-10));

        // and in the other direction, starting on the quadric
        const KnorrerQuadricResult again = knorrer_to_quadric(back.state, a);
        CHECK((again.state.X - qs.X).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((again.state.gamma - qs.gamma).cwiseAbs().maxCoeff() < 1e-10);
    }
    CHECK_THROWS_AS(knorrer_to_quadric({Vec::Unit(3, 0), Vec::Zero(3)}, spread_axes(3)), DegenerateConfiguration);
}

TEST_CASE("quadric geodesics in Neumann time are Neumann trajectories", "[reconstruction][knorrer]") {
    std::mt19937_64 rng(12);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        const auto [ns, qs] = matched_pair(rng, a);
        IntegratorConfig cfg = lrsys::detail::gridded(3.0, 30, 1e-12, 1e-14);
        const auto ds_dtau1 = [a](double, const Vec& y) {
            return knorrer_to_sphere(QuadricGeodesicState::unflatten(y), a).ds_dtau1;
        };
        const Trajectory quad = reparametrized_integrate(quadric_geodesic_field_flat(a), ds_dtau1, qs.flatten(), cfg);
        const Trajectory neu = integrate_flow(neumann_field_flat(a), ns.flatten(), cfg);
        double sup = 0.0;
        for (double t : cfg.output_times) {
            const Vec y = quad.at(t);
            const NeumannState mapped = knorrer_to_sphere(QuadricGeodesicState::unflatten(Vec(y.head(2 * n))), a).state;
            sup = std::max(sup, (mapped.flatten() - neu.at(t)).cwiseAbs().maxCoeff());
        }
        INFO("n = " << n);
        CHECK(sup < 1e-9);
    }
}

TEST_CASE("Moser matrices", "[reconstruction][moser]") {
    std::mt19937_64 rng(3);
    const int n = 4;
    const Vec a = spread_axes(n);
    const auto [ns, qs] = matched_pair(rng, a);
    const MoserMatrices mm = moser_matrices(qs.X, qs.gamma, a);
    CHECK((mm.L - mm.L.transpose()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((mm.L * qs.gamma).cwiseAbs().maxCoeff() < 1e-13);
    // A⁻¹X spans the second null direction of L
    CHECK((mm.L * qs.X.cwiseQuotient(a)).cwiseAbs().maxCoeff() < 1e-13);
    CHECK_THROWS_AS(moser_matrices(qs.X, Vec::Zero(n), a), DomainError);
}

TEST_CASE("Lax equation along the quadric geodesic", "[reconstruction][moser]") {
    std::mt19937_64 rng(4);
    for (int n : {3, 4}) {
        const Vec a = spread_axes(n);
        const QuadricGeodesicState s0 = matched_pair(rng, a).second;
        const double h = 1e-4;
        IntegratorConfig cfg = IntegratorConfig::adaptive(2.0 * h, 1e-13, 1e-15);
        cfg.output_times = {h, 2.0 * h};
        // start at s = −h so the central difference sits at s0
        IntegratorConfig back = cfg;
        const VectorField f = quadric_geodesic_field_flat(a);
        const Trajectory fwd = integrate_flow(f, s0.flatten(), cfg);
        const Trajectory bwd = integrate_flow([f](double t, const Vec& y) -> Vec { return -f(t, y); }, s0.flatten(), back);
        const auto lp = QuadricGeodesicState::unflatten(fwd.at(h));
        const auto lm = QuadricGeodesicState::unflatten(bwd.at(h));
        const Mat dl = (moser_matrices(lp.X, lp.gamma, a).L - moser_matrices(lm.X, lm.gamma, a).L) / (2.0 * h);
        const MoserMatrices mm = moser_matrices(s0.X, s0.gamma, a);
        // dL/ds₁ = [B, L] with ds = −(X, A⁻²X) ds₁
        const double nu = s0.X.cwiseQuotient(a).squaredNorm();
        const Mat lax = -(mm.B.matrix() * mm.L - mm.L * mm.B.matrix()) / nu;
        INFO("n = " << n);
        CHECK((dl - lax).cwiseAbs().maxCoeff() < 1e-6);
        // the opposite bracket is not a solution
        CHECK((dl + lax).cwiseAbs().maxCoeff() > 1e-3);
    }
}

TEST_CASE("Chasles frame and separation constants", "[reconstruction][chasles]") {
    std::mt19937_64 rng(5);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        const auto [ns, qs] = matched_pair(rng, a);
        const ChaslesFrame cf = chasles_frame(moser_matrices(qs.X, qs.gamma, a).L, qs.gamma, Vec(qs.X.cwiseQuotient(a)));
        const std::vector<double> cs = neumann_invariants(ns, a).cs;
        REQUIRE(cf.alphas.size() == n - 2);
        REQUIRE(cs.size() == static_cast<std::size_t>(n - 2));
        INFO("n = " << n);
        CHECK_FALSE(cf.degenerate);
        // α ascending pairs with c descending
        for (int k = 0; k < n - 2; ++k) CHECK_THAT(cf.alphas(k) * cs[static_cast<std::size_t>(n - 3 - k)], WithinAbs(1.0, 1e-8));
        // n_1 is the outer normal direction, along q
        CHECK((cf.normals.row(0).transpose() - ns.q).cwiseAbs().maxCoeff() < 1e-10);
        CHECK(up_to_sign(cf.gamma, qs.gamma) < 1e-12);
        Mat full(n, n);
        full << cf.normals, cf.gamma.transpose();
        CHECK((full * full.transpose() - Mat::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("ellipsoidal coordinates are reciprocal spheroconic ones", "[reconstruction][chasles]") {
    std::mt19937_64 rng(6);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        const auto [ns, qs] = matched_pair(rng, a);
        const Vec nu = ellipsoidal_coordinates(qs.X, a);
        const Vec lam = spheroconic_from_q(ns.q, a).lambdas;
        REQUIRE(nu.size() == n - 1);
        INFO("n = " << n);
        for (int k = 0; k < n - 1; ++k) CHECK_THAT(nu(k) * lam(n - 2 - k), WithinAbs(1.0, 1e-10));
    }
}

TEST_CASE("explicit frame matches the eigenvector frame", "[reconstruction][explicit]") {
    std::mt19937_64 rng(7);
    for (int n : {3, 4, 5}) {
        const Vec a = spread_axes(n);
        const Vec inertia = a.cwiseInverse();
        NeumannState ns;
        QuadricGeodesicState qs;
        MotionConstants mc;
        SpheroconicPoint sp;
        // the formulas lose accuracy where some λ_s meets a root of R
        for (bool near = true; near;) {
            std::tie(ns, qs) = matched_pair(rng, a);
            sp = spheroconic_from_q(ns.q, a);
            mc = {neumann_energy(ns, a), neumann_invariants(ns, a).cs};
            std::vector<double> branch(inertia.data(), inertia.data() + n);
            branch.push_back(0.0);
            branch.insert(branch.end(), mc.cs.begin(), mc.cs.end());
            near = false;
            for (Eigen::Index s = 0; s < sp.lambdas.size(); ++s)
                for (double b : branch) near = near || std::abs(sp.lambdas(s) - b) < 1e-2;
        }
        const Vec rates = spheroconic_rates(ns, sp.lambdas, a);
        Vec signs(n - 1);
        for (int s = 0; s < n - 1; ++s) {
            double prod = 1.0;
            for (int j = 0; j < n - 1; ++j)
                if (j != s) prod *= sp.lambdas(s) - sp.lambdas(j);
            signs(s) = rates(s) * prod >= 0.0 ? 1.0 : -1.0;
        }
        const ExplicitFrame ef = explicit_frame(sp.lambdas, signs, sp.signs, mc, a);
        const ChaslesFrame cf = chasles_frame(moser_matrices(qs.X, qs.gamma, a).L, qs.gamma, Vec(qs.X.cwiseQuotient(a)));
        INFO("n = " << n);
        CHECK((ef.q - ns.q).cwiseAbs().maxCoeff() < 1e-10);
        CHECK(up_to_sign(ef.gamma, qs.gamma) < 1e-8);
        for (int k = 0; k < n - 2; ++k) CHECK(up_to_sign(ef.normals.row(k).transpose(), cf.normals.row(n - 2 - k).transpose()) < 1e-8);
        CHECK_THROWS_AS(explicit_frame(sp.lambdas, signs, sp.signs, {mc.h, {}}, a), DimensionError);
    }
}

TEST_CASE("cumulative quadrature is exact for quadratics", "[reconstruction][time]") {
    std::vector<double> f;
    const double h = 0.1;
    for (int i = 0; i <= 20; ++i) f.push_back(1.0 + 2.0 * i * h + 3.0 * (i * h) * (i * h));
    const auto c = lrsys::detail::cumulative_quadratic(f, h);
    for (int i = 0; i <= 20; ++i) {
        const double x = i * h;
        CHECK_THAT(c[static_cast<std::size_t>(i)], WithinAbs(x + x * x + x * x * x, 1e-12));
    }
}

TEST_CASE("time chain along a Neumann trajectory", "[reconstruction][time]") {
    std::mt19937_64 rng(8);
    const int n = 4;
    const Vec a = spread_axes(n);
    const auto [q, p] = sphere_point(rng, n);
    const double h = sphere_hamiltonian(q, p, a);
    const NeumannState ns = reduced_to_neumann(q, p, a, h);
    const Trajectory tr = integrate_flow(neumann_field_flat(a), ns.flatten(), IntegratorConfig::adaptive(5.0, 1e-12, 1e-14));
    const TimeChain tc = time_chain(tr, a, h, 1e-3);
    REQUIRE(tc.t.size() == tc.tau1.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < tc.t.size(); ++i) {
        worst = std::max(worst, std::abs(tc.t[i] - tc.t_alt[i]));
        CHECK_THAT(tc.tau[i], WithinAbs(tc.tau1[i] / std::sqrt(2.0 * h), 1e-14));
    }
    // λ-product and (Aq,q) forms of dt/dτ₁ agree
    CHECK(worst < 1e-8);
    CHECK(tc.richardson_error < 1e-8);
    CHECK_THROWS_AS(time_chain(tr, a, 0.0, 1e-3), DomainError);
}

TEST_CASE("frame reconstruction identities", "[reconstruction][frame]") {
    std::mt19937_64 rng(9);
    for (int n : {3, 4}) {
        const Vec a = spread_axes(n);
        auto [q, p] = sphere_point(rng, n);
        p *= std::sqrt(0.5 / sphere_hamiltonian(q, p, a));
        const ReconstructionCheck c = reconstruction_check(q, p, a, 3.0, 300);
        INFO("n = " << n);
        CHECK(c.orthogonality < 1e-10);
        CHECK(c.determinant < 1e-10);
        CHECK(c.first_row < 1e-12);
        CHECK(c.admissibility < 1e-8);
        CHECK(c.kinematics < 1e-5);
        CHECK(c.moser_drift < 1e-8);
        CHECK(c.alpha_c < 1e-6);
        CHECK(c.linear_drift < 1e-7);
        CHECK(c.linear_norm < 1e-8);
        CHECK(c.explicit_used > 0);
        CHECK(c.explicit_match < 1e-6);
        CHECK(c.time_two_route < 1e-6);
        CHECK(c.fiber < 1e-12);
    }
}

TEST_CASE("frame reconstruction input checks", "[reconstruction][frame]") {
    const Vec a = spread_axes(3);
    const std::vector<ReducedSample> one{{0.0, Vec::Unit(3, 0), Vec::Unit(3, 1)}};
    Mat reflect = Mat::Identity(2, 2);
    reflect(1, 1) = -1.0;
    CHECK_THROWS_AS(reconstruct_frame(one, a, reflect), DomainError);
    CHECK_THROWS_AS(reconstruct_frame(one, a, Mat(Mat::Identity(3, 3))), DimensionError);
    Vec twin = a;
    twin(1) = twin(0);
    CHECK_THROWS_AS(reconstruct_frame(one, twin), DomainError);
}
