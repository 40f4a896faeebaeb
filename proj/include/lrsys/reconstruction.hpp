#pragma once

// Reconstruction of the SO(n) motion over a reduced rank-one trajectory:
// geodesics on the quadric Q(0) = {(X, A⁻¹X) = 1}, the Knörrer map to the
// sphere, Moser's Lax matrices, the Chasles frame, explicit hyperelliptic
// frame formulas and the chain of time variables t, s, s₁, τ₁, τ.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "lrsys/errors.hpp"
#include "lrsys/harness.hpp"
#include "lrsys/neumann_geodesic.hpp"
#include "lrsys/reduced_flows.hpp"
#include "lrsys/son_algebra.hpp"

namespace lrsys {

// ---------------------------------------------------------------------------
// Geodesics on Q(0)

struct QuadricGeodesicState {
    Vec X;
    Vec gamma;

    Vec flatten() const {
        Vec out(2 * X.size());
        out << X, gamma;
        return out;
    }
    static QuadricGeodesicState unflatten(const Vec& y) {
        const auto n = y.size() / 2;
        return {y.head(n), y.tail(n)};
    }
};

struct QuadricResiduals {
    double on_quadric = 0.0;  // |(X, A⁻¹X) − 1|
    double tangency = 0.0;    // |(γ, A⁻¹X)|
    double unit_speed = 0.0;  // ||γ| − 1|
};

inline QuadricResiduals quadric_residuals(const QuadricGeodesicState& s, const Vec& a) {
    const Vec ainv_x = s.X.cwiseQuotient(a);
    return {std::abs(ainv_x.dot(s.X) - 1.0), std::abs(ainv_x.dot(s.gamma)), std::abs(s.gamma.norm() - 1.0)};
}

/// dX/ds = γ, dγ/ds = κA⁻¹X with κ = −(γ, A⁻¹γ)/|A⁻¹X|².
inline std::pair<Vec, Vec> quadric_geodesic_field(const QuadricGeodesicState& s, const Vec& a) {
    if (s.X.size() != a.size() || s.gamma.size() != a.size()) throw DimensionError("quadric_geodesic_field: dimension mismatch");
    const Vec ainv_x = s.X.cwiseQuotient(a);
    const double kappa = -s.gamma.dot(s.gamma.cwiseQuotient(a)) / ainv_x.squaredNorm();
    return {s.gamma, kappa * ainv_x};
}

inline VectorField quadric_geodesic_field_flat(const Vec& a) {
    return [a](double, const Vec& y) {
        auto [dx, dg] = quadric_geodesic_field(QuadricGeodesicState::unflatten(y), a);
        Vec out(y.size());
        out << dx, dg;
        return out;
    };
}

// ---------------------------------------------------------------------------
// Knörrer correspondence

struct KnorrerSphereResult {
    NeumannState state;
    double ds_dtau1 = 0.0;
};

struct KnorrerQuadricResult {
    QuadricGeodesicState state;
    double ds_dtau1 = 0.0;
};

/// q = A⁻¹X/|A⁻¹X|, q' = (dq/ds)(ds/dτ₁) with
/// ds/dτ₁ = sqrt((X, A⁻²X)/(γ, A⁻¹γ)), the inverse of knorrer_to_quadric's.
inline KnorrerSphereResult knorrer_to_sphere(const QuadricGeodesicState& s, const Vec& a) {
    const Vec ainv_x = s.X.cwiseQuotient(a);
    const double len = ainv_x.norm();
    const Vec q = ainv_x / len;
    const Vec ainv_g = s.gamma.cwiseQuotient(a);
    const Vec dq_ds = (ainv_g - q * q.dot(ainv_g)) / len;
    const double factor = std::sqrt(ainv_x.squaredNorm() / s.gamma.dot(ainv_g));
    return {{q, dq_ds * factor}, factor};
}

/// X = (q,Aq)^{-1/2}Aq, γ = unit vector along dX/dτ₁; ds/dτ₁ = |dX/dτ₁|.
inline KnorrerQuadricResult knorrer_to_quadric(const NeumannState& s, const Vec& a) {
    const Vec aq = a.cwiseProduct(s.q);
    const double nu = 1.0 / aq.dot(s.q);
    const double rn = std::sqrt(nu);
    const Vec x = rn * aq;
    const Vec dx = rn * a.cwiseProduct(s.qprime) - rn * nu * aq.dot(s.qprime) * aq;
    const double speed = dx.norm();
    if (!(speed > 0.0)) throw DegenerateConfiguration("knorrer_to_quadric: zero velocity");
    return {{x, dx / speed}, speed};
}

// ---------------------------------------------------------------------------
// Moser matrices and the Chasles frame

struct MoserMatrices {
    Mat L;
    SkewMatrix B;
};

/// L = Π_γ(A − x⊗x)Π_γ, B = A⁻¹x⊗A⁻¹γ − A⁻¹γ⊗A⁻¹x.
inline MoserMatrices moser_matrices(const Vec& x, const Vec& gamma, const Vec& a) {
    const double gg = gamma.squaredNorm();
    if (!(gg > 0.0)) throw DomainError("moser_matrices: gamma must be nonzero");
    const auto n = a.size();
    const Mat pi = Mat::Identity(n, n) - gamma * gamma.transpose() / gg;
    Mat l = pi * (Mat(a.asDiagonal()) - x * x.transpose()) * pi;
    l = 0.5 * (l + l.transpose());
    return {l, wedge(x.cwiseQuotient(a), gamma.cwiseQuotient(a))};
}

struct ChaslesFrame {
    Vec alphas;          // α_2..α_{n−1}, ascending
    Vec zero_eigenvalues;  // the two eigenvalues of the γ/n_1 block
    Mat normals;         // rows n_1..n_{n−1}
    Vec gamma;
    bool degenerate = false;
};

/// Eigen-decomposition of L. The two eigenvalues of smallest modulus span
/// {n_1, γ}: γ is the normalised projection of the given tangent into that
/// plane and n_1 its orthogonal complement, oriented along `outer_normal`
/// when supplied. Remaining eigenpairs give α_k, n_k in ascending order.
/// Signs of n_k follow `previous` when given, else the first component of
/// modulus > 1e-8 is made positive.
inline ChaslesFrame chasles_frame(const Mat& l, const Vec& gamma, const std::optional<Vec>& outer_normal = std::nullopt,
                                  const ChaslesFrame* previous = nullptr, double gap_tol = 1e-9) {
    const auto n = l.rows();
    if (n < 3) throw DimensionError("chasles_frame: need n >= 3");
    Eigen::SelfAdjointEigenSolver<Mat> es(l);
    const Vec ev = es.eigenvalues();
    const Mat vecs = es.eigenvectors();

    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](auto i, auto j) { return std::abs(ev(i)) < std::abs(ev(j)); });
    const Eigen::Index z0 = order[0];
    const Eigen::Index z1 = order[1];
    std::vector<Eigen::Index> rest(order.begin() + 2, order.end());
    std::sort(rest.begin(), rest.end(), [&](auto i, auto j) { return ev(i) < ev(j); });

    ChaslesFrame out;
    out.zero_eigenvalues = Vec(2);
    out.zero_eigenvalues << ev(z0), ev(z1);
    out.alphas.resize(static_cast<Eigen::Index>(rest.size()));
    out.normals.resize(n - 1, n);

    Mat zero_space(n, 2);
    zero_space << vecs.col(z0), vecs.col(z1);
    Vec g = zero_space * (zero_space.transpose() * gamma);
    if (!(g.norm() > 0.5 * gamma.norm())) out.degenerate = true;
    g.normalize();
    Vec n1 = zero_space.col(0) - g * g.dot(zero_space.col(0));
    if (n1.norm() < 0.5) n1 = zero_space.col(1) - g * g.dot(zero_space.col(1));
    n1.normalize();
    if (outer_normal) {
        if (n1.dot(*outer_normal) < 0.0) n1 = -n1;
    } else {
        Eigen::Index k = 0;
        while (k < n - 1 && std::abs(n1(k)) <= 1e-8) ++k;
        if (n1(k) < 0.0) n1 = -n1;
    }
    out.gamma = g;
    out.normals.row(0) = n1.transpose();

    for (std::size_t k = 0; k < rest.size(); ++k) {
        const auto idx = rest[k];
        out.alphas(static_cast<Eigen::Index>(k)) = ev(idx);
        Vec v = vecs.col(idx);
        if (previous && previous->normals.rows() == n - 1) {
            if (v.dot(previous->normals.row(static_cast<Eigen::Index>(k + 1)).transpose()) < 0.0) v = -v;
        } else {
            Eigen::Index j = 0;
            while (j < n - 1 && std::abs(v(j)) <= 1e-8) ++j;
            if (v(j) < 0.0) v = -v;
        }
        out.normals.row(static_cast<Eigen::Index>(k + 1)) = v.transpose();
    }

    std::vector<double> all(ev.data(), ev.data() + n);
    std::sort(all.begin(), all.end());
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (std::size_t k = 1; k < all.size(); ++k)
        if (all[k] - all[k - 1] < gap_tol * scale && !(std::abs(all[k]) < 1e-6 * scale && std::abs(all[k - 1]) < 1e-6 * scale))
            out.degenerate = true;
    return out;
}

// ---------------------------------------------------------------------------
// Reconstruction of the frame

struct ReducedSample {
    double t = 0.0;
    Vec q;
    Vec qdot;
};

/// Lift of a reduced sample to the quadric: X = (q,Aq)^{-1/2}Aq and
/// γ = Ẋ/|Ẋ|; also returns ds/dt = |Ẋ|.
inline std::pair<QuadricGeodesicState, double> lift_to_quadric(const Vec& q, const Vec& qdot, const Vec& a) {
    auto r = knorrer_to_quadric({q, qdot}, a);
    return {r.state, r.ds_dtau1};
}

struct FrameTrajectory {
    std::vector<double> times;
    std::vector<Mat> frames;  // rows e_1..e_n
    std::vector<SkewMatrix> omegas;
    std::vector<Vec> alphas;
    std::vector<bool> flagged;
};

/// g(t) rows (q, n_2, …, n_{n−1}, γ) with continuous signs, det +1, and the
/// constant rotation R applied as (e_2 ⋯ e_n) = (n_2 ⋯ n_{n−1} γ)·R.
inline FrameTrajectory reconstruct_frame(const std::vector<ReducedSample>& traj, const Vec& a,
                                         const std::optional<Mat>& r_init = std::nullopt) {
    require_distinct_axes(a, "reconstruct_frame");
    const int n = static_cast<int>(a.size());
    if (n < 3) throw DimensionError("reconstruct_frame: need n >= 3");
    Mat r = Mat::Identity(n - 1, n - 1);
    if (r_init) {
        r = *r_init;
        if (r.rows() != n - 1 || r.cols() != n - 1) throw DimensionError("reconstruct_frame: R must be (n-1)x(n-1)");
        if ((r.transpose() * r - Mat::Identity(n - 1, n - 1)).cwiseAbs().maxCoeff() > 1e-10)
            throw DomainError("reconstruct_frame: R must be orthogonal");
        if (r.determinant() < 0.0) throw DomainError("reconstruct_frame: R must have determinant +1");
    }

    FrameTrajectory out;
    std::optional<ChaslesFrame> prev;
    bool flip_last = false;
    for (const auto& smp : traj) {
        auto [qs, speed] = lift_to_quadric(smp.q, smp.qdot, a);
        (void)speed;
        const MoserMatrices mm = moser_matrices(qs.X, qs.gamma, a);
        ChaslesFrame cf = chasles_frame(mm.L, qs.gamma, Vec(qs.X.cwiseQuotient(a)), prev ? &*prev : nullptr);

        Mat g(n, n);
        g.row(0) = smp.q.transpose();
        for (int k = 1; k < n - 1; ++k) g.row(k) = cf.normals.row(k);
        g.row(n - 1) = qs.gamma.transpose();
        if (!prev) flip_last = g.determinant() < 0.0;
        if (flip_last) {
            g.row(n - 2) *= -1.0;
        }
        g.bottomRows(n - 1) = r.transpose() * g.bottomRows(n - 1);

        out.times.push_back(smp.t);
        out.frames.push_back(g);
        out.omegas.push_back(wedge(smp.q, smp.qdot));
        out.alphas.push_back(cf.alphas);
        out.flagged.push_back(cf.degenerate);
        prev = cf;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ellipsoidal coordinates on Q(0)

/// ν_1..ν_{n−1}: nonzero roots of Π(ν − A_i) + Σ X_i² Π_{j≠i}(ν − A_j),
/// ascending.
inline Vec ellipsoidal_coordinates(const Vec& x, const Vec& a) {
    const auto n = a.size();
    std::vector<double> all(a.data(), a.data() + n);
    Vec p = poly::from_roots(all);
    for (Eigen::Index i = 0; i < n; ++i) {
        std::vector<double> others;
        for (Eigen::Index j = 0; j < n; ++j)
            if (j != i) others.push_back(a(j));
        const Vec pi = poly::from_roots(others);
        p.head(pi.size()) += x(i) * x(i) * pi;
    }
    const auto roots = poly::real_roots(poly::deflate_zero(p));
    return Eigen::Map<const Vec>(roots.data(), static_cast<Eigen::Index>(roots.size()));
}

// ---------------------------------------------------------------------------
// Explicit hyperelliptic frame formulas

struct ExplicitFrame {
    Vec q;
    Mat normals;  // row k belongs to mc.cs[k], i.e. to the eigenvalue α = 1/c_k
    Vec gamma;
};

/// Frame components from spheroconic data. `root_signs` gives the branch of
/// sqrt R(λ_s), `q_signs` the signs of q_i. With Ψ(r) = Π(r − I_i),
/// ψ(r) = r Π(r − c_k), U(λ, r) = Π(r − λ_s) and
/// Ξ_s = sqrt R(λ_s)/Π_{j≠s}(λ_s − λ_j):
///   q_i       = sqrt(U(λ,I_i)/Ψ'(I_i))
///   (n_k)_i   = q_i · sqrt(U(λ,c_k)/ψ'(c_k)) · Σ_s Ξ_s/((c_k − λ_s)(I_i − λ_s))
///   γ_i       = q_i · sqrt(U(λ,0)/ψ'(0))     · Σ_s Ξ_s/(λ_s (I_i − λ_s))
/// Radicands are taken in absolute value.
inline ExplicitFrame explicit_frame(const Vec& lambdas, const Vec& root_signs, const Vec& q_signs,
                                    const MotionConstants& mc, const Vec& a) {
    require_distinct_axes(a, "explicit_frame");
    const int n = static_cast<int>(a.size());
    const int m = n - 1;
    if (lambdas.size() != m || root_signs.size() != m || q_signs.size() != n || static_cast<int>(mc.cs.size()) != n - 2)
        throw DimensionError("explicit_frame: inconsistent sizes");
    const Vec inertia = a.cwiseInverse();

    std::vector<double> psi_roots{0.0};
    psi_roots.insert(psi_roots.end(), mc.cs.begin(), mc.cs.end());
    std::vector<double> big_roots(inertia.data(), inertia.data() + n);
    const Vec big_psi_d = poly::derivative(poly::from_roots(big_roots));
    const Vec small_psi_d = poly::derivative(poly::from_roots(psi_roots));
    const Vec r_poly = hyperelliptic_polynomial(mc, a);

    auto u = [&](double r) {
        double prod = 1.0;
        for (int s = 0; s < m; ++s) prod *= r - lambdas(s);
        return prod;
    };
    Vec xi(m);
    for (int s = 0; s < m; ++s) {
        double den = 1.0;
        for (int j = 0; j < m; ++j)
            if (j != s) den *= lambdas(s) - lambdas(j);
        xi(s) = root_signs(s) * std::sqrt(std::abs(poly::eval(r_poly, lambdas(s)))) / den;
    }

    ExplicitFrame out;
    out.q.resize(n);
    for (int i = 0; i < n; ++i)
        out.q(i) = q_signs(i) * std::sqrt(std::abs(u(inertia(i)) / poly::eval(big_psi_d, inertia(i))));

    auto column = [&](double c, const std::function<double(int)>& denom_s) {
        const double pref = std::sqrt(std::abs(u(c) / poly::eval(small_psi_d, c)));
        Vec v(n);
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int s = 0; s < m; ++s) acc += xi(s) / (denom_s(s) * (inertia(i) - lambdas(s)));
            v(i) = out.q(i) * pref * acc;
        }
        return v;
    };
    out.normals.resize(n - 2, n);
    for (int k = 0; k < n - 2; ++k) {
        const double ck = mc.cs[static_cast<std::size_t>(k)];
        out.normals.row(k) = column(ck, [&](int s) { return ck - lambdas(s); }).transpose();
    }
    out.gamma = column(0.0, [&](int s) { return lambdas(s); });
    return out;
}

// ---------------------------------------------------------------------------
// Time chain

namespace detail {
/// Cumulative integral on a uniform grid, quadratic interpolation on each
/// cell (third order per cell).
inline std::vector<double> cumulative_quadratic(const std::vector<double>& f, double h) {
    std::vector<double> out(f.size(), 0.0);
    for (std::size_t i = 1; i < f.size(); ++i) {
        double cell;
        if (i + 1 < f.size())
            cell = h / 12.0 * (5.0 * f[i - 1] + 8.0 * f[i] - f[i + 1]);
        else if (i >= 2)
            cell = h / 12.0 * (-f[i - 2] + 8.0 * f[i - 1] + 5.0 * f[i]);
        else
            cell = 0.5 * h * (f[i - 1] + f[i]);
        out[i] = out[i - 1] + cell;
    }
    return out;
}
}  // namespace detail

struct TimeChain {
    std::vector<double> tau1;
    std::vector<double> t;       // (1/sqrt 2h)∫ sqrt(λ_1⋯λ_{n−1}) dτ₁
    std::vector<double> t_alt;   // ∫ sqrt((Aq,q)/(2h det A)) dτ₁
    std::vector<double> tau;     // τ₁/sqrt(2h)
    std::vector<double> s;       // ∫ ds/dτ₁ dτ₁
    std::vector<double> s1;      // −∫ ds/(X, A⁻²X)
    double richardson_error = 0.0;  // |t_h − t_{2h}| at the last node
};

/// Time maps along a Neumann trajectory in τ₁ sampled on a uniform grid.
inline TimeChain time_chain(const Trajectory& neumann, const Vec& a, double h, double step) {
    if (!(h > 0.0)) throw DomainError("time_chain: need h > 0");
    const int n = static_cast<int>(a.size());
    const double t0 = neumann.t_begin();
    const double t1 = neumann.t_end();
    const auto cells = static_cast<std::size_t>(std::ceil((t1 - t0) / step));
    const double dx = (t1 - t0) / static_cast<double>(cells);
    const double det = a.prod();

    TimeChain out;
    std::vector<double> f_lambda, f_direct, f_s, f_s1;
    for (std::size_t i = 0; i <= cells; ++i) {
        const double tau1 = t0 + static_cast<double>(i) * dx;
        const Vec y = neumann.at(tau1);
        NeumannState st{y.head(n), y.tail(n)};
        st.q.normalize();
        const SpheroconicPoint sp = spheroconic_from_q(st.q, a);
        const double prod = sp.lambdas.prod();
        auto kq = knorrer_to_quadric(st, a);
        const Vec ainv_x = kq.state.X.cwiseQuotient(a);
        out.tau1.push_back(tau1);
        out.tau.push_back(tau1 / std::sqrt(2.0 * h));
        f_lambda.push_back(std::sqrt(std::max(0.0, prod)) / std::sqrt(2.0 * h));
        f_direct.push_back(std::sqrt(st.q.dot(a.cwiseProduct(st.q)) / (2.0 * h * det)));
        f_s.push_back(kq.ds_dtau1);
        f_s1.push_back(-kq.ds_dtau1 / ainv_x.squaredNorm());
    }
    out.t = detail::cumulative_quadratic(f_lambda, dx);
    out.t_alt = detail::cumulative_quadratic(f_direct, dx);
    out.s = detail::cumulative_quadratic(f_s, dx);
    out.s1 = detail::cumulative_quadratic(f_s1, dx);
    for (std::size_t i = 1; i < out.s.size(); ++i)
        if (!(out.s[i] > out.s[i - 1]) || !(out.t[i] > out.t[i - 1]))
            throw DomainError("time_chain: non-monotone time map, refine the sampling");
    if (cells >= 4 && cells % 2 == 0) {
        std::vector<double> coarse;
        for (std::size_t i = 0; i <= cells; i += 2) coarse.push_back(f_lambda[i]);
        const auto tc = detail::cumulative_quadratic(coarse, 2 * dx);
        out.richardson_error = std::abs(tc.back() - out.t.back());
    }
    return out;
}

}  // namespace lrsys
