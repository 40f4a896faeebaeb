#pragma once

// Two-route checks shared by the scenario runner and the test suites: the
// same motion is produced by a transformation of one trajectory and by an
// independent integration of the target system, and the two are compared.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "lrsys/errors.hpp"
#include "lrsys/harness.hpp"
#include "lrsys/lr_dynamics.hpp"
#include "lrsys/neumann_geodesic.hpp"
#include "lrsys/reconstruction.hpp"
#include "lrsys/reduced_flows.hpp"
#include "lrsys/son_algebra.hpp"

namespace lrsys {

inline std::vector<double> uniform_grid(double t_end, int samples) {
    if (samples < 2) throw DomainError("uniform_grid: need at least 2 samples");
    std::vector<double> g;
    for (int k = 1; k <= samples; ++k) g.push_back(t_end * k / samples);
    return g;
}

namespace detail {
inline IntegratorConfig gridded(double horizon, int samples, double rtol, double atol) {
    IntegratorConfig c = IntegratorConfig::adaptive(horizon, rtol, atol);
    c.output_times = uniform_grid(horizon, samples);
    return c;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Reduced sphere flow → geodesic flow

struct HamiltonizationCheck {
    double sup_norm = 0.0;       // max over τ of |(q, p̃)_mapped − (q, p̃)_geodesic|∞
    double hstar_drift = 0.0;    // along the geodesic integration
    std::optional<double> f2star_drift;  // n = 3
};

inline HamiltonizationCheck hamiltonization_check(const Vec& q0, const Vec& p0, const Vec& a, double tau_end,
                                                  int samples = 200, double rtol = 1e-12, double atol = 1e-14) {
    const auto n = a.size();
    const IntegratorConfig cfg = detail::gridded(tau_end, samples, rtol, atol);
    Vec y0(2 * n);
    y0 << q0, p0;
    const Trajectory mapped = reparametrized_integrate(
        [f = sphere_field_flat(a)](double u, const Vec& y) { return f(u, y); },
        [a, n](double, const Vec& y) { return 1.0 / reducing_multiplier(y.head(n), a); }, y0, cfg);

    Vec g0(2 * n);
    g0 << q0, reducing_multiplier(q0, a) * p0;
    std::vector<Diagnostic> diags{{"H*", [a, n](double, const Vec& y) { return geodesic_hamiltonian(y.head(n), y.tail(n), a); }}};
    if (n == 3)
        diags.push_back({"F2*", [a, n](double, const Vec& y) { return geodesic_f2_star(y.head(n), y.tail(n), a); }});
    const Trajectory geo = integrate_flow(geodesic_field_flat(a), g0, cfg, diags);

    HamiltonizationCheck out;
    for (double tau : cfg.output_times) {
        const Vec z = mapped.at(tau);
        const RescaledState rs = chaplygin_to_tau(z.head(n), z.segment(n, n), a, z(2 * n));
        Vec lhs(2 * n);
        lhs << rs.q, rs.p_tilde;
        out.sup_norm = std::max(out.sup_norm, (lhs - geo.at(tau)).cwiseAbs().maxCoeff());
    }
    out.hstar_drift = geo.max_drift("H*");
    if (n == 3) out.f2star_drift = geo.max_drift("F2*");
    return out;
}

// ---------------------------------------------------------------------------
// Reduced sphere flow ↔ Neumann flow

/// (q, q') = (q, q̇/(dτ₁/dt)) on the energy level h.
inline NeumannState reduced_to_neumann(const Vec& q, const Vec& p, const Vec& a, double h) {
    const Vec qdot = sphere_vector_field(q, p, a).first;
    return {q, qdot / time_factors(q, qdot, a, h).dtau1_dt_on_level};
}

/// (q, p) with q̇ = (dτ₁/dt)·q' on the energy level h.
inline std::pair<Vec, Vec> neumann_to_reduced(const NeumannState& s, const Vec& a, double h) {
    const double k = std::sqrt(2.0 * h * a.prod() / s.q.dot(a.cwiseProduct(s.q)));
    return {s.q, sphere_momentum_from_velocity(s.q, k * s.qprime, a)};
}

struct NeumannCorrespondence {
    double sup_norm = 0.0;       // mapped vs independently integrated target
    double ode_residual = 0.0;   // target ODE residual of the mapped trajectory
    double max_abs_f0 = 0.0;
    double energy_mismatch = 0.0;  // reduced energy of the mapped state minus h (Neumann → reduced)
    std::optional<double> max_abs_integral37;  // n = 3
    Trajectory target;           // independent integration of the target system
};

/// Reduced trajectory from (q0, p0) reparametrised to τ₁ and mapped to the
/// Neumann system, against an independent Neumann integration. The ODE
/// residual uses dY/dτ₁ = (dt/dτ₁)·DY[f] with DY[f] a central difference of
/// the map along the reduced field (step `fd_step`).
inline NeumannCorrespondence neumann_correspondence(const Vec& q0, const Vec& p0, const Vec& a, double tau1_end,
                                                    int samples = 200, double fd_step = 1e-6, double rtol = 1e-12,
                                                    double atol = 1e-14) {
    const auto n = a.size();
    const double h = sphere_hamiltonian(q0, p0, a);
    if (!(h > 0.0)) throw DomainError("neumann_correspondence: need positive energy");
    const double det = a.prod();
    auto k_of = [a, h, det](const Vec& q) { return std::sqrt(2.0 * h * det / q.dot(a.cwiseProduct(q))); };
    const IntegratorConfig cfg = detail::gridded(tau1_end, samples, rtol, atol);
    Vec y0(2 * n);
    y0 << q0, p0;
    const VectorField sphere = sphere_field_flat(a);
    const Trajectory mapped = reparametrized_integrate(
        [sphere](double u, const Vec& y) { return sphere(u, y); },
        [k_of, n](double, const Vec& y) { return 1.0 / k_of(y.head(n)); }, y0, cfg);

    auto map = [&](const Vec& x) { return reduced_to_neumann(x.head(n), x.tail(n), a, h).flatten(); };
    NeumannCorrespondence out;
    out.target = integrate_flow(neumann_field_flat(a), map(y0), cfg);
    const VectorField neumann = neumann_field_flat(a);
    for (double tau1 : cfg.output_times) {
        const Vec x = mapped.at(tau1).head(2 * n);
        const Vec y = map(x);
        out.sup_norm = std::max(out.sup_norm, (y - out.target.at(tau1)).cwiseAbs().maxCoeff());
        const Vec f = sphere(0.0, x);
        const Vec dy = (map(x + fd_step * f) - map(x - fd_step * f)) / (2 * fd_step) / k_of(x.head(n));
        out.ode_residual = std::max(out.ode_residual, (dy - neumann(0.0, y)).cwiseAbs().maxCoeff());
        const NeumannState st = NeumannState::unflatten(y);
        out.max_abs_f0 = std::max(out.max_abs_f0, std::abs(neumann_f0(st, a)));
        if (n == 3)
            out.max_abs_integral37 = std::max(out.max_abs_integral37.value_or(0.0), std::abs(neumann3_zero_integral(st, a)));
    }
    return out;
}

/// Reverse direction: a Neumann trajectory with F0 = 0 reparametrised to t
/// on the level h and mapped to the reduced system, against an independent
/// reduced integration.
inline NeumannCorrespondence reduced_from_neumann(const NeumannState& s0, const Vec& a, double h, double t_end,
                                                  int samples = 200, double fd_step = 1e-6, double rtol = 1e-12,
                                                  double atol = 1e-14) {
    const auto n = a.size();
    if (!(h > 0.0)) throw DomainError("reduced_from_neumann: need positive energy");
    const double det = a.prod();
    auto k_of = [a, h, det](const Vec& q) { return std::sqrt(2.0 * h * det / q.dot(a.cwiseProduct(q))); };
    const IntegratorConfig cfg = detail::gridded(t_end, samples, rtol, atol);
    const VectorField neumann = neumann_field_flat(a);
    const Trajectory mapped = reparametrized_integrate(
        [neumann](double u, const Vec& y) { return neumann(u, y); },
        [k_of, n](double, const Vec& y) { return k_of(y.head(n)); }, s0.flatten(), cfg);

    auto map = [&](const Vec& y) {
        auto [q, p] = neumann_to_reduced(NeumannState::unflatten(y), a, h);
        Vec x(2 * n);
        x << q, p;
        return x;
    };
    NeumannCorrespondence out;
    const VectorField sphere = sphere_field_flat(a);
    out.target = integrate_flow(sphere, map(s0.flatten()), cfg);
    for (double t : cfg.output_times) {
        const Vec y = mapped.at(t).head(2 * n);
        const Vec x = map(y);
        out.sup_norm = std::max(out.sup_norm, (x - out.target.at(t)).cwiseAbs().maxCoeff());
        const Vec g = neumann(0.0, y);
        const Vec dx = (map(y + fd_step * g) - map(y - fd_step * g)) / (2 * fd_step) * k_of(y.head(n));
        out.ode_residual = std::max(out.ode_residual, (dx - sphere(0.0, x)).cwiseAbs().maxCoeff());
        out.max_abs_f0 = std::max(out.max_abs_f0, std::abs(neumann_f0(NeumannState::unflatten(y), a)));
        out.energy_mismatch = std::max(out.energy_mismatch, std::abs(sphere_hamiltonian(x.head(n), x.tail(n), a) - h));
    }
    return out;
}

/// Rescales q' (keeping its direction) so that F0(q, q') = 0.
inline NeumannState with_zero_f0(NeumannState s, const Vec& a) {
    const double aqq = s.q.dot(a.cwiseProduct(s.q));
    const double quad = neumann_f0(s, a) + aqq;
    if (!(quad > 0.0)) throw DegenerateConfiguration("with_zero_f0: q' is parallel to q");
    s.qprime *= std::sqrt(aqq / quad);
    return s;
}

// ---------------------------------------------------------------------------
// Abel–Jacobi along a Neumann trajectory

/// Spheroconic samples (λ, dλ/dτ₁) at the grid nodes of a Neumann
/// trajectory, with the constants read from its first state.
inline AbelJacobiResult abel_jacobi_along(const Trajectory& neumann, const Vec& a, double branch_tol = 1e-3,
                                          std::optional<std::vector<double>> cs_override = std::nullopt) {
    const auto n = a.size();
    const NeumannState s0 = NeumannState::unflatten(neumann.states.front());
    const NeumannInvariants inv = neumann_invariants(s0, a);
    if (!inv.zero_root_deflated) throw DomainError("abel_jacobi_along: trajectory needs F0 = 0");
    MotionConstants mc{neumann_energy(s0, a), cs_override.value_or(inv.cs)};
    std::vector<SpheroconicSample> samples;
    for (std::size_t k = 0; k < neumann.size(); ++k) {
        NeumannState st = NeumannState::unflatten(neumann.states[k]);
        st.q /= st.q.norm();
        const SpheroconicPoint pt = spheroconic_from_q(st.q, a);
        if (pt.lambdas.size() != n - 1) continue;
        samples.push_back({neumann.times[k], pt.lambdas, spheroconic_rates(st, pt.lambdas, a)});
    }
    return abel_jacobi_residual(samples, mc, a, QuadratureTime::Tau1, branch_tol);
}

// ---------------------------------------------------------------------------
// Reconstruction

struct ReconstructionCheck {
    double orthogonality = 0.0;    // max ‖gᵀg − Id‖
    double determinant = 0.0;      // max |det g − 1|
    double admissibility = 0.0;    // max |⟨ω, e_p∧e_q⟩|, 2 ≤ p < q
    double first_row = 0.0;        // max |e_1 − q|
    double kinematics = 0.0;       // max |ġ − gω| by 4th-order differences
    double moser_drift = 0.0;      // drift of α_2..α_{n−1}
    double alpha_c = 0.0;          // max |α_k c_k − 1|
    double linear_drift = 0.0;     // drift of l_2..l_n
    double linear_norm = 0.0;      // max |Σ l_k² − |p|²|
    double explicit_match = 0.0;   // explicit vs eigen frame, up to sign
    double time_two_route = 0.0;   // |t_quadrature(τ₁) − t_direct(τ₁)|
    double fiber = 0.0;            // right action of a second R
    std::size_t samples = 0;
    std::size_t flagged = 0;
    std::size_t explicit_used = 0;
};

inline Mat rotation_from_seed(int m, unsigned long long seed);

/// Reconstructs g(t) over the reduced trajectory from (q0, p0) on [0, t_end]
/// and evaluates every reconstruction identity on the uniform grid of step
/// t_end/samples; `tau1_end` sets the horizon of the time-chain comparison.
inline ReconstructionCheck reconstruction_check(const Vec& q0, const Vec& p0, const Vec& a, double t_end,
                                                int samples = 500, double tau1_end = 10.0,
                                                double branch_tol = 1e-3) {
    const int n = static_cast<int>(a.size());
    const double h = sphere_hamiltonian(q0, p0, a);
    if (!(h > 0.0)) throw DomainError("reconstruction_check: need positive energy");
    Vec y0(2 * n);
    y0 << q0, p0;
    IntegratorConfig cfg = detail::gridded(t_end, samples, 1e-12, 1e-14);
    const VectorField sphere = sphere_field_flat(a);
    const Trajectory tr = integrate_flow(sphere, y0, cfg);
    std::vector<double> grid{0.0};
    grid.insert(grid.end(), cfg.output_times.begin(), cfg.output_times.end());
    std::vector<ReducedSample> red;
    std::vector<Vec> momenta;
    for (double t : grid) {
        const Vec y = tr.at(t);
        red.push_back({t, y.head(n), sphere(t, y).head(n)});
        momenta.push_back(y.tail(n));
    }
    const FrameTrajectory ft = reconstruct_frame(red, a);
    const Mat r2 = rotation_from_seed(n - 1, 17);
    const FrameTrajectory ft2 = reconstruct_frame(red, a, r2);

    const InertiaSpec spec = InertiaSpec::special(a);
    const NeumannInvariants inv = neumann_invariants(reduced_to_neumann(q0, p0, a, h), a);
    const Vec inertia = a.cwiseInverse();
    const double spread = inertia.maxCoeff() - inertia.minCoeff();
    std::vector<double> branch(inertia.data(), inertia.data() + n);
    branch.push_back(0.0);
    branch.insert(branch.end(), inv.cs.begin(), inv.cs.end());

    ReconstructionCheck out;
    out.samples = grid.size();
    const double dt = t_end / samples;
    Vec l0;
    Vec alpha0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const Mat& g = ft.frames[i];
        if (ft.flagged[i]) {
            ++out.flagged;
            continue;
        }
        out.orthogonality = std::max(out.orthogonality, (g.transpose() * g - Mat::Identity(n, n)).cwiseAbs().maxCoeff());
        out.determinant = std::max(out.determinant, std::abs(g.determinant() - 1.0));
        out.first_row = std::max(out.first_row, (g.row(0).transpose() - red[i].q).cwiseAbs().maxCoeff());
        const SkewMatrix& w = ft.omegas[i];
        for (int p = 1; p < n; ++p)
            for (int q = p + 1; q < n; ++q)
                out.admissibility = std::max(out.admissibility, std::abs(killing_inner(w, wedge(g.row(p).transpose(), g.row(q).transpose()))));
        if (i >= 2 && i + 2 < grid.size()) {
            const Mat gd = (ft.frames[i - 2] - 8.0 * ft.frames[i - 1] + 8.0 * ft.frames[i + 1] - ft.frames[i + 2]) / (12.0 * dt);
            out.kinematics = std::max(out.kinematics, (gd - g * w.matrix()).cwiseAbs().maxCoeff());
        }
        if (alpha0.size() == 0) alpha0 = ft.alphas[i];
        out.moser_drift = std::max(out.moser_drift, (ft.alphas[i] - alpha0).cwiseAbs().maxCoeff());
        for (Eigen::Index k = 0; k < ft.alphas[i].size(); ++k) {
            const double c = inv.cs[static_cast<std::size_t>(ft.alphas[i].size() - 1 - k)];
            out.alpha_c = std::max(out.alpha_c, std::abs(ft.alphas[i](k) * c - 1.0));
        }
        const SkewMatrix m = momentum_from_omega(w, Mat(g.topRows(1)), 1, spec);
        Vec l(n - 1);
        for (int k = 1; k < n; ++k) l(k - 1) = killing_inner(m, wedge(g.row(0).transpose(), g.row(k).transpose()));
        if (l0.size() == 0) l0 = l;
        out.linear_drift = std::max(out.linear_drift, (l - l0).cwiseAbs().maxCoeff());
        out.linear_norm = std::max(out.linear_norm, std::abs(l.squaredNorm() - momenta[i].squaredNorm()));
        out.fiber = std::max(out.fiber, (ft2.frames[i].bottomRows(n - 1) - r2.transpose() * g.bottomRows(n - 1)).cwiseAbs().maxCoeff());

        // explicit formulas in τ₁ time: λ' = (dλ/dt)/(dτ₁/dt)
        const NeumannState ns = reduced_to_neumann(red[i].q, momenta[i], a, h);
        const SpheroconicPoint sp = spheroconic_from_q(ns.q / ns.q.norm(), a);
        bool near = sp.boundary;
        for (Eigen::Index s = 0; s < sp.lambdas.size(); ++s)
            for (double b : branch)
                if (std::abs(sp.lambdas(s) - b) < branch_tol * spread) near = true;
        if (near) continue;
        const Vec rates = spheroconic_rates(ns, sp.lambdas, a);
        Vec signs(n - 1);
        for (int s = 0; s < n - 1; ++s) {
            double prod = 1.0;
            for (int j = 0; j < n - 1; ++j)
                if (j != s) prod *= sp.lambdas(s) - sp.lambdas(j);
            signs(s) = rates(s) * prod >= 0.0 ? 1.0 : -1.0;
        }
        const ExplicitFrame ef = explicit_frame(sp.lambdas, signs, sp.signs, {h, inv.cs}, a);
        auto up_to_sign = [](const Vec& x, const Vec& y) { return std::min((x - y).cwiseAbs().maxCoeff(), (x + y).cwiseAbs().maxCoeff()); };
        double e = up_to_sign(ef.q, red[i].q);
        const auto kq = knorrer_to_quadric(ns, a);
        e = std::max(e, up_to_sign(ef.gamma, kq.state.gamma));
        // explicit row k pairs with c_k, i.e. with eigen row n − 2 − k
        const MoserMatrices mm = moser_matrices(kq.state.X, kq.state.gamma, a);
        const ChaslesFrame cf = chasles_frame(mm.L, kq.state.gamma, Vec(kq.state.X.cwiseQuotient(a)));
        for (int k = 0; k < n - 2; ++k)
            e = std::max(e, up_to_sign(ef.normals.row(k).transpose(), cf.normals.row(n - 2 - k).transpose()));
        out.explicit_match = std::max(out.explicit_match, e);
        ++out.explicit_used;
    }

    // t(τ₁): λ-product quadrature along an independent Neumann run vs the
    // reduced flow integrated in τ₁ with t carried as a state component
    const NeumannState ns0 = reduced_to_neumann(q0, p0, a, h);
    const Trajectory ntr = integrate_flow(neumann_field_flat(a), ns0.flatten(), IntegratorConfig::adaptive(tau1_end, 1e-12, 1e-14));
    const TimeChain tc = time_chain(ntr, a, h, 1e-3);
    const double det = a.prod();
    const Trajectory direct = reparametrized_integrate(
        [sphere](double u, const Vec& y) { return sphere(u, y); },
        [a, h, det, n](double, const Vec& y) {
            const Vec q = y.head(n);
            return 1.0 / std::sqrt(2.0 * h * det / q.dot(a.cwiseProduct(q)));
        },
        y0, IntegratorConfig::adaptive(tau1_end, 1e-12, 1e-14));
    for (std::size_t i = 0; i < tc.tau1.size(); ++i)
        out.time_two_route = std::max(out.time_two_route, std::abs(direct.at(tc.tau1[i])(2 * n) - tc.t[i]));
    return out;
}

/// Deterministic rotation in SO(m): QR of a seeded Gaussian matrix with
/// the sign of R's diagonal moved into Q and det fixed to +1.
inline Mat rotation_from_seed(int m, unsigned long long seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    Mat g(m, m);
    for (int j = 0; j < m; ++j)
        for (int i = 0; i < m; ++i) g(i, j) = nd(rng);
    Eigen::HouseholderQR<Mat> qr(g);
    Mat q = qr.householderQ() * Mat::Identity(m, m);
    const Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int k = 0; k < m; ++k)
        if (r(k, k) < 0.0) q.col(k) *= -1.0;
    if (q.determinant() < 0.0) q.col(m - 1) *= -1.0;
    return q;
}

// ---------------------------------------------------------------------------
// Invariant-measure residuals

/// Veselova n = 3 with density sqrt((I⁻¹γ,γ)) (or the unit density).
inline double veselova3_measure_residual(const Veselova3State& s, const Vec3& inertia, const PotentialSpec& v,
                                         bool unit_density, double fd_step = 1e-5) {
    const auto field = [&](const Vec& x) { return veselova3_vector_field(Veselova3State::unflatten(x), inertia, v).flatten(); };
    const auto log_density = [&](const Vec& x) {
        if (unit_density) return 0.0;
        const Vec3 g = x.tail<3>();
        return 0.5 * std::log(g.cwiseQuotient(inertia).dot(g));
    };
    return measure_divergence_residual(field, log_density, s.flatten(), fd_step);
}

/// Momentum-form LR system with density 1/μ̃ (or the unit density).
inline double momentum_measure_residual(const BodyState& s, const InertiaSpec& spec, bool unit_density,
                                        double fd_step = 1e-5) {
    const int n = s.n();
    const int rows = static_cast<int>(s.frame.rows());
    const VectorField f = momentum_field_flat(spec, s.r, rows);
    const auto field = [&](const Vec& x) { return f(0.0, x); };
    const auto log_density = [&](const Vec& x) {
        if (unit_density) return 0.0;
        const BodyState b = BodyState::unflatten(BodyState::Representation::Momentum, n, s.r, rows, x);
        return momentum_log_density(spec, b.frame, s.r);
    };
    return measure_divergence_residual(field, log_density, s.flatten(), fd_step);
}

/// Reduced sphere flow in the chart around q with density (Aq,q)^{exponent}.
inline double sphere_measure_residual(const Vec& q, const Vec& p, const Vec& a, double exponent,
                                      double fd_step = 1e-5) {
    const SphereChart chart = SphereChart::around(q);
    const auto field = sphere_chart_field(chart, a);
    const auto log_density = [&](const Vec& z) {
        const Vec qq = chart.to_q(z.head(chart.n - 1));
        return exponent * std::log(qq.dot(a.cwiseProduct(qq)));
    };
    return measure_divergence_residual(field, log_density, chart.to_chart(q, p), fd_step);
}

}  // namespace lrsys
