#pragma once

// Chaplygin reduction of the LR system to T*V(r,n) and T*S^{n-1}, the
// reduced invariant measure, the time/momentum rescaling by N(q) and the
// geodesic flow it produces.

#include <cmath>
#include <functional>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lrsys/errors.hpp"
#include "lrsys/harness.hpp"
#include "lrsys/son_algebra.hpp"

namespace lrsys {

/// Point (X, P) of T*V(r,n); X and P are n×r. For r = 1 these are (q, p).
struct ReducedState {
    Mat X;
    Mat P;

    int n() const { return static_cast<int>(X.rows()); }
    int r() const { return static_cast<int>(X.cols()); }

    /// max |XᵀX − Id|.
    double orthonormality_residual() const {
        return (X.transpose() * X - Mat::Identity(r(), r())).cwiseAbs().maxCoeff();
    }
    /// max |XᵀP + PᵀX|.
    double cotangency_residual() const { return (X.transpose() * P + P.transpose() * X).cwiseAbs().maxCoeff(); }

    Vec flatten() const {
        Vec out(2 * X.size());
        out.head(X.size()) = Eigen::Map<const Vec>(X.data(), X.size());
        out.tail(P.size()) = Eigen::Map<const Vec>(P.data(), P.size());
        return out;
    }

    static ReducedState unflatten(int n, int r, const Vec& flat) {
        if (flat.size() != 2 * n * r) throw DimensionError("ReducedState::unflatten: wrong length");
        return {Eigen::Map<const Mat>(flat.data(), n, r), Eigen::Map<const Mat>(flat.data() + n * r, n, r)};
    }

    static ReducedState sphere(const Vec& q, const Vec& p) { return {Mat(q), Mat(p)}; }
};

inline void require_admissible(const ReducedState& s, double tol, const char* where) {
    if (s.P.rows() != s.X.rows() || s.P.cols() != s.X.cols()) throw DimensionError(std::string(where) + ": X and P shapes differ");
    if (s.orthonormality_residual() > tol || s.cotangency_residual() > tol)
        throw DomainError(std::string(where) + ": state violates the Stiefel constraints");
}

/// Φ = XẊᵀ − ẊXᵀ + ½X[XᵀẊ − ẊᵀX]Xᵀ. Lies in D_r and satisfies Ẋ = −ΦX.
inline SkewMatrix momentum_map(const Mat& x, const Mat& xdot) {
    require_admissible({x, xdot}, 1e-8, "momentum_map");
    const Mat inner = x.transpose() * xdot - xdot.transpose() * x;
    return SkewMatrix(Mat(x * xdot.transpose() - xdot * x.transpose() + 0.5 * x * inner * x.transpose()));
}

/// M = XPᵀ − PXᵀ + ½X[XᵀP − PᵀX]Xᵀ.
inline SkewMatrix momentum_map_star(const ReducedState& s) {
    const Mat inner = s.X.transpose() * s.P - s.P.transpose() * s.X;
    return SkewMatrix(Mat(s.X * s.P.transpose() - s.P * s.X.transpose() + 0.5 * s.X * inner * s.X.transpose()));
}

/// Coordinates (as columns) of the D_r basis {x_k∧y : k ≤ r} built from the
/// orthonormalised columns of X and a deterministic completion.
inline Mat stiefel_plane_basis(const Mat& x) {
    const Mat rows = orthonormalize_rows(Mat(x.transpose()));
    return constraint_plane_basis(Frame(rows).completed().rows(), static_cast<int>(x.cols()));
}

/// Unique ω ∈ D_r with pr_{D_r}(Iω) = M; the linear system is I|_{D_r}.
inline SkewMatrix stiefel_omega(const ReducedState& s, const InertiaSpec& spec) {
    const Mat b = stiefel_plane_basis(s.X);
    const Mat g = b.transpose() * spec.matrix() * b;
    Eigen::LLT<Mat> llt(g);
    if (llt.info() != Eigen::Success) throw DegenerateConfiguration("stiefel_vector_field: I restricted to D_r is singular");
    const Vec c = llt.solve(b.transpose() * momentum_map_star(s).coords());
    return SkewMatrix::from_coords(s.n(), b * c);
}

/// Ẋ = −ωX, Ṗ = −ωP.
inline ReducedState stiefel_vector_field(const ReducedState& s, const InertiaSpec& spec) {
    if (spec.n() != s.n()) throw DimensionError("stiefel_vector_field: inertia dimension mismatch");
    const Mat w = stiefel_omega(s, spec).matrix();
    return {-w * s.X, -w * s.P};
}

inline VectorField stiefel_field_flat(const InertiaSpec& spec, int r) {
    const int n = spec.n();
    return [spec, n, r](double, const Vec& y) {
        return stiefel_vector_field(ReducedState::unflatten(n, r, y), spec).flatten();
    };
}

/// Energy ½⟨M, ω⟩ of a reduced state.
inline double stiefel_energy(const ReducedState& s, const InertiaSpec& spec) {
    return 0.5 * killing_inner(momentum_map_star(s), stiefel_omega(s, spec));
}

/// tr(M^{2k}), k = 1..⌊n/2⌋: Ad-invariant functions of the momentum.
inline Vec momentum_spectral_invariants(const ReducedState& s) {
    const Mat m = momentum_map_star(s).matrix();
    const int kmax = s.n() / 2;
    Vec out(kmax);
    const Mat m2 = m * m;
    Mat power = Mat::Identity(s.n(), s.n());
    for (int k = 0; k < kmax; ++k) {
        power = power * m2;
        out(k) = power.trace();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rank one: the sphere

inline void require_positive_axes(const Vec& a, const char* where) {
    if (a.size() < 2 || !(a.minCoeff() > 0.0)) throw DomainError(std::string(where) + ": A must be positive");
}

/// Ĥ = ½ det A (p, A⁻¹p)/(q, Aq).
inline double sphere_hamiltonian(const Vec& q, const Vec& p, const Vec& a) {
    return 0.5 * a.prod() * p.dot(p.cwiseQuotient(a)) / q.dot(a.cwiseProduct(q));
}

/// q̇ = det A/(q,Aq)·[A⁻¹p − (p,A⁻¹q)q], ṗ = −Λq with
/// Λ = det A·[(p,A⁻¹p) − (p,q)(q,A⁻¹p)]/(q,Aq).
inline std::pair<Vec, Vec> sphere_vector_field(const Vec& q, const Vec& p, const Vec& a) {
    if (q.size() != a.size() || p.size() != a.size()) throw DimensionError("sphere_vector_field: dimension mismatch");
    require_positive_axes(a, "sphere_vector_field");
    const double det = a.prod();
    const double qaq = q.dot(a.cwiseProduct(q));
    const Vec ainv_p = p.cwiseQuotient(a);
    const double pq_inv = ainv_p.dot(q);
    const Vec qdot = (det / qaq) * (ainv_p - pq_inv * q);
    const double big_lambda = det * (p.dot(ainv_p) - p.dot(q) * pq_inv) / qaq;
    return {qdot, -big_lambda * q};
}

inline VectorField sphere_field_flat(const Vec& a) {
    const auto n = a.size();
    return [a, n](double, const Vec& y) {
        auto [qd, pd] = sphere_vector_field(y.head(n), y.tail(n), a);
        Vec out(2 * n);
        out << qd, pd;
        return out;
    };
}

/// Density 1/μ̃(X) of the reduced invariant measure.
inline double reduced_measure_density(const ReducedState& s, const InertiaSpec& spec) {
    const Frame f(orthonormalize_rows(Mat(s.X.transpose())));
    return 1.0 / restricted_determinants(spec, f, s.r()).mu_tilde;
}

/// (Aq,q)^{−(n−2)/2} scaled to agree with 1/μ̃ at q = E_1.
inline double sphere_measure_density(const Vec& q, const Vec& a) {
    const int n = static_cast<int>(a.size());
    const double e = 0.5 * (n - 2);
    const Vec e1 = Vec::Unit(n, 0);
    const double ref = reduced_measure_density(ReducedState::sphere(e1, Vec::Zero(n)), InertiaSpec::special(a));
    return ref * std::pow(a(0), e) * std::pow(q.dot(a.cwiseProduct(q)), -e);
}

// ---------------------------------------------------------------------------
// Chaplygin rescaling and the geodesic flow

/// N(q) = sqrt(det A/(Aq,q)).
inline double reducing_multiplier(const Vec& q, const Vec& a) { return std::sqrt(a.prod() / q.dot(a.cwiseProduct(q))); }

struct RescaledState {
    Vec q;
    Vec p_tilde;
    double tau = 0.0;
};

/// p̃ = N(q)p; dτ/dt = N(q).
inline RescaledState chaplygin_to_tau(const Vec& q, const Vec& p, const Vec& a, double tau = 0.0) {
    return {q, reducing_multiplier(q, a) * p, tau};
}

inline ReducedState chaplygin_to_t(const RescaledState& s, const Vec& a) {
    return ReducedState::sphere(s.q, s.p_tilde / reducing_multiplier(s.q, a));
}

/// Constrained flow on T*S^{n-1} ⊂ T*R^n generated by the Dirac bracket of
/// the constraints (q,q) = 1, (q,p) = 0, with {F,G} = F_q·G_p − F_p·G_q.
inline std::pair<Vec, Vec> dirac_sphere_flow(const Vec& q, const Vec& p, const Vec& h_q, const Vec& h_p) {
    const double qq = q.dot(q);
    const double hp_q = h_p.dot(q);
    const Vec qdot = h_p - q * (hp_q / qq);
    const Vec pdot = -h_q + (q * (h_q.dot(q) - h_p.dot(p)) + p * hp_q) / qq;
    return {qdot, pdot};
}

/// H* = ½(p̃, A⁻¹p̃), the Legendre transform of
/// L* = ½[(Aq',q')(Aq,q) − (Aq,q')²]/(Aq,q) on T*S^{n-1}.
inline double geodesic_hamiltonian(const Vec& q, const Vec& pt, const Vec& a) {
    (void)q;
    return 0.5 * pt.dot(pt.cwiseQuotient(a));
}

/// Legendre map q' ↦ p̃ = Aq' − (Aq,q')Aq/(Aq,q).
inline Vec geodesic_momentum(const Vec& q, const Vec& qprime, const Vec& a) {
    const Vec aq = a.cwiseProduct(q);
    return a.cwiseProduct(qprime) - (aq.dot(qprime) / aq.dot(q)) * aq;
}

inline double geodesic_lagrangian(const Vec& q, const Vec& qprime, const Vec& a) {
    const Vec aq = a.cwiseProduct(q);
    const double aqq = aq.dot(q);
    return 0.5 * (a.cwiseProduct(qprime).dot(qprime) * aqq - std::pow(aq.dot(qprime), 2)) / aqq;
}

inline std::pair<Vec, Vec> geodesic_vector_field(const Vec& q, const Vec& pt, const Vec& a) {
    if (q.size() != a.size() || pt.size() != a.size()) throw DimensionError("geodesic_vector_field: dimension mismatch");
    require_positive_axes(a, "geodesic_vector_field");
    return dirac_sphere_flow(q, pt, Vec::Zero(q.size()), pt.cwiseQuotient(a));
}

inline VectorField geodesic_field_flat(const Vec& a) {
    const auto n = a.size();
    return [a, n](double, const Vec& y) {
        auto [qd, pd] = geodesic_vector_field(y.head(n), y.tail(n), a);
        Vec out(2 * n);
        out << qd, pd;
        return out;
    };
}

/// Quadratic integral of the n = 3 geodesic flow, with ℐ = diag(1/A_i):
/// [(ℐ(q'×q), ℐ(q'×q)) − (ℐ(q'×q), q)²] / (2(q, ℐ⁻¹q)), the image of F2.
inline double geodesic_f2_star(const Vec& q, const Vec& pt, const Vec& a) {
    if (a.size() != 3) throw DimensionError("geodesic_f2_star: n = 3 only");
    const Eigen::Vector3d qq = q;
    const Eigen::Vector3d qp = geodesic_vector_field(q, pt, a).first;
    const Eigen::Vector3d inertia = a.cwiseInverse();
    const Eigen::Vector3d w = qp.cross(qq);
    const Eigen::Vector3d iw = inertia.cwiseProduct(w);
    return (iw.squaredNorm() - std::pow(iw.dot(qq), 2)) / (2.0 * qq.dot(a.cwiseProduct(qq)));
}

// ---------------------------------------------------------------------------
// Local chart on the sphere

/// Chart dropping coordinate m: x = (q_j)_{j≠m}, q_m = s·sqrt(1 − |x|²), with
/// canonical momenta π_j = p_j − x_j p_m/q_m.
struct SphereChart {
    int n = 0;
    int m = 0;
    double sign = 1.0;

    static SphereChart around(const Vec& q) {
        SphereChart c;
        c.n = static_cast<int>(q.size());
        q.cwiseAbs().maxCoeff(&c.m);
        c.sign = q(c.m) >= 0.0 ? 1.0 : -1.0;
        return c;
    }

    Vec to_q(const Vec& x) const {
        const double rest = 1.0 - x.squaredNorm();
        if (!(rest > 0.0)) throw DomainError("SphereChart: point outside the chart");
        Vec q(n);
        for (int i = 0, k = 0; i < n; ++i) q(i) = (i == m) ? sign * std::sqrt(rest) : x(k++);
        return q;
    }

    Vec drop(const Vec& v) const {
        Vec out(n - 1);
        for (int i = 0, k = 0; i < n; ++i)
            if (i != m) out(k++) = v(i);
        return out;
    }

    /// (q, p) → (x, π).
    Vec to_chart(const Vec& q, const Vec& p) const {
        const Vec x = drop(q);
        const Vec pi = drop(p) - x * (p(m) / q(m));
        Vec out(2 * (n - 1));
        out << x, pi;
        return out;
    }

    /// (x, π) → (q, p) with (q, p) = 0.
    std::pair<Vec, Vec> from_chart(const Vec& z) const {
        const Vec x = z.head(n - 1);
        const Vec pi = z.tail(n - 1);
        const Vec q = to_q(x);
        const double pm = -q(m) * x.dot(pi);
        Vec p(n);
        for (int i = 0, k = 0; i < n; ++i) {
            if (i == m) {
                p(i) = pm;
            } else {
                p(i) = pi(k) + x(k) * pm / q(m);
                ++k;
            }
        }
        return {q, p};
    }

    /// ∂q/∂x_j as columns (n × (n−1)).
    Mat dq_dx(const Vec& q) const {
        Mat j = Mat::Zero(n, n - 1);
        for (int i = 0, k = 0; i < n; ++i) {
            if (i == m) continue;
            j(i, k) = 1.0;
            j(m, k) = -q(i) / q(m);
            ++k;
        }
        return j;
    }

    /// ∂p/∂x_j at fixed π, as columns.
    Mat dp_dx(const Vec& q, const Vec& p) const {
        const Vec x = drop(q);
        const Vec pi = drop(p) - x * (p(m) / q(m));
        const double xpi = x.dot(pi);
        Mat j = Mat::Zero(n, n - 1);
        for (int c = 0; c < n - 1; ++c) {
            j(m, c) = (x(c) / q(m)) * xpi - q(m) * pi(c);
            for (int i = 0, k = 0; i < n; ++i) {
                if (i == m) continue;
                j(i, c) = -(k == c ? xpi : 0.0) - x(k) * pi(c);
                ++k;
            }
        }
        return j;
    }

    /// Pushes an ambient field (q̇, ṗ) into chart coordinates (ẋ, π̇).
    Vec push_field(const Vec& q, const Vec& p, const Vec& qdot, const Vec& pdot) const {
        const Vec x = drop(q);
        const Vec xdot = drop(qdot);
        const double ratio = p(m) / q(m);
        const double ratio_dot = (pdot(m) * q(m) - p(m) * qdot(m)) / (q(m) * q(m));
        const Vec pidot = drop(pdot) - xdot * ratio - x * ratio_dot;
        Vec out(2 * (n - 1));
        out << xdot, pidot;
        return out;
    }
};

/// Sphere field written in a chart.
inline std::function<Vec(const Vec&)> sphere_chart_field(const SphereChart& chart, const Vec& a) {
    return [chart, a](const Vec& z) {
        auto [q, p] = chart.from_chart(z);
        auto [qd, pd] = sphere_vector_field(q, p, a);
        return chart.push_field(q, p, qd, pd);
    };
}

struct PiResidual {
    double pi_residual = 0.0;
    double alpha_residual = 0.0;
};

/// Compares the non-Hamiltonian part Π of the reduced field in a chart with
/// Π = N⁻¹(2H)∇N − N⁻¹(∇N, ẋ)π, and checks (∇_π, Π) + (∇ log N^{k−1}, ẋ) = 0
/// for k = n − 1. `n_exponent` replaces N by N^{n_exponent}.
inline PiResidual chaplygin_pi_residual(const Vec& q, const Vec& p, const Vec& a, double n_exponent = 1.0,
                                        double fd_step = 1e-5) {
    const int n = static_cast<int>(q.size());
    if (n < 3) throw DimensionError("chaplygin_pi_residual: need n >= 3");
    const SphereChart chart = SphereChart::around(q);
    if (std::abs(q(chart.m)) < 0.3) throw DomainError("chaplygin_pi_residual: too close to the chart boundary");

    const Vec z = chart.to_chart(q, p);
    auto [q0, p0] = chart.from_chart(z);
    const auto field = sphere_chart_field(chart, a);
    const Vec v = field(z);
    const Vec xdot = v.head(n - 1);
    const Vec pidot = v.tail(n - 1);
    const Vec pi = z.tail(n - 1);

    // ∂H/∂x at fixed π, exact via the chain rule
    const double det = a.prod();
    const double qaq = q0.dot(a.cwiseProduct(q0));
    const double h = sphere_hamiltonian(q0, p0, a);
    const Vec h_p = (det / qaq) * p0.cwiseQuotient(a);
    const Vec h_q = (-2.0 * h / qaq) * a.cwiseProduct(q0);
    const Vec dh_dx = chart.dq_dx(q0).transpose() * h_q + chart.dp_dx(q0, p0).transpose() * h_p;
    const Vec pi_measured = pidot + dh_dx;

    // ∇_x N^e with N = sqrt(det A/(Aq,q)): ∇_q N = −N Aq/(Aq,q)
    const double nn = std::pow(std::sqrt(det / qaq), n_exponent);
    const Vec grad_q_n = (-n_exponent * nn / qaq) * a.cwiseProduct(q0);
    const Vec grad_x_n = chart.dq_dx(q0).transpose() * grad_q_n;
    const Vec pi_formula = (2.0 * h / nn) * grad_x_n - (grad_x_n.dot(xdot) / nn) * pi;

    PiResidual out;
    out.pi_residual = (pi_measured - pi_formula).norm();

    // (∇_π, Π) = div of the chart field, since Σ ∂²H/∂x_j∂π_j cancels
    double div = 0.0;
    Vec zp = z;
    Vec zm = z;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        zp(i) = z(i) + fd_step;
        zm(i) = z(i) - fd_step;
        div += (field(zp)(i) - field(zm)(i)) / (2 * fd_step);
        zp(i) = z(i);
        zm(i) = z(i);
    }
    const double k = n - 1;
    const Vec grad_log = ((k - 1) / nn) * grad_x_n;
    out.alpha_residual = std::abs(div + grad_log.dot(xdot));
    return out;
}

}  // namespace lrsys
