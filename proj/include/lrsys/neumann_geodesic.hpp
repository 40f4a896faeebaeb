#pragma once

// Neumann system on S^{n-1}, its quadratic integrals, spheroconic
// coordinates, the hyperelliptic polynomial R(λ), Abel–Jacobi residuals and
// the time-substitution factors that link the reduced LR flow, the Neumann
// flow and the geodesic flow.

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "lrsys/errors.hpp"
#include "lrsys/harness.hpp"
#include "lrsys/son_algebra.hpp"

namespace lrsys {

// ---------------------------------------------------------------------------
// Polynomials, coefficients in ascending order of degree

namespace poly {

inline Vec multiply(const Vec& a, const Vec& b) {
    Vec out = Vec::Zero(a.size() + b.size() - 1);
    for (Eigen::Index i = 0; i < a.size(); ++i)
        for (Eigen::Index j = 0; j < b.size(); ++j) out(i + j) += a(i) * b(j);
    return out;
}

/// Π (λ − r_k).
inline Vec from_roots(const std::vector<double>& roots) {
    Vec out = Vec::Ones(1);
    for (double r : roots) {
        Vec lin(2);
        lin << -r, 1.0;
        out = multiply(out, lin);
    }
    return out;
}

inline double eval(const Vec& c, double x) {
    double acc = 0.0;
    for (Eigen::Index i = c.size() - 1; i >= 0; --i) acc = acc * x + c(i);
    return acc;
}

inline Vec derivative(const Vec& c) {
    if (c.size() <= 1) return Vec::Zero(1);
    Vec out(c.size() - 1);
    for (Eigen::Index i = 1; i < c.size(); ++i) out(i - 1) = static_cast<double>(i) * c(i);
    return out;
}

/// Divides by λ (requires a zero constant term up to rounding).
inline Vec deflate_zero(const Vec& c) { return c.tail(c.size() - 1); }

/// Real parts of the roots (companion-matrix eigenvalues, then two Newton
/// polishing steps), sorted ascending. `max_imag` receives the largest
/// imaginary part seen.
inline std::vector<double> real_roots(const Vec& c, double* max_imag = nullptr) {
    Eigen::Index deg = c.size() - 1;
    while (deg > 0 && c(deg) == 0.0) --deg;
    if (deg < 1) return {};
    Mat comp = Mat::Zero(deg, deg);
    for (Eigen::Index i = 0; i < deg; ++i) comp(0, i) = -c(deg - 1 - i) / c(deg);
    for (Eigen::Index i = 1; i < deg; ++i) comp(i, i - 1) = 1.0;
    Eigen::EigenSolver<Mat> es(comp, false);
    const Vec trimmed = c.head(deg + 1);
    const Vec dc = derivative(trimmed);
    std::vector<double> out;
    double imag = 0.0;
    for (Eigen::Index i = 0; i < deg; ++i) {
        const std::complex<double> z = es.eigenvalues()(i);
        imag = std::max(imag, std::abs(z.imag()));
        double x = z.real();
        for (int it = 0; it < 2; ++it) {
            const double d = eval(dc, x);
            if (d == 0.0) break;
            const double step = eval(trimmed, x) / d;
            if (!std::isfinite(step)) break;
            x -= step;
        }
        out.push_back(x);
    }
    std::sort(out.begin(), out.end());
    if (max_imag) *max_imag = imag;
    return out;
}

}  // namespace poly

inline void require_distinct_axes(const Vec& a, const char* where) {
    if (a.size() < 2 || !(a.minCoeff() > 0.0)) throw DomainError(std::string(where) + ": A must be positive");
    for (Eigen::Index i = 0; i < a.size(); ++i)
        for (Eigen::Index j = i + 1; j < a.size(); ++j)
            if (std::abs(a(i) - a(j)) <= 1e-12 * std::max(a(i), a(j)))
                throw DomainError(std::string(where) + ": A_i must be pairwise distinct");
}

// ---------------------------------------------------------------------------
// Neumann system

struct NeumannState {
    Vec q;
    Vec qprime;

    Vec flatten() const {
        Vec out(2 * q.size());
        out << q, qprime;
        return out;
    }
    static NeumannState unflatten(const Vec& y) {
        const auto n = y.size() / 2;
        return {y.head(n), y.tail(n)};
    }
};

/// q'' = −A⁻¹q + λq with λ = ((A⁻¹q,q) − (q',q'))/(q,q), which equals
/// (A⁻¹q,q) − (q',q') on the sphere and keeps (q,q) an exact integral.
inline std::pair<Vec, Vec> neumann_vector_field(const NeumannState& s, const Vec& a) {
    if (s.q.size() != a.size() || s.qprime.size() != a.size()) throw DimensionError("neumann_vector_field: dimension mismatch");
    const Vec ainv_q = s.q.cwiseQuotient(a);
    const double lambda = (ainv_q.dot(s.q) - s.qprime.squaredNorm()) / s.q.squaredNorm();
    return {s.qprime, -ainv_q + lambda * s.q};
}

inline VectorField neumann_field_flat(const Vec& a) {
    return [a](double, const Vec& y) {
        auto [d1, d2] = neumann_vector_field(NeumannState::unflatten(y), a);
        Vec out(y.size());
        out << d1, d2;
        return out;
    };
}

/// ½|q'|² + ½(A⁻¹q, q).
inline double neumann_energy(const NeumannState& s, const Vec& a) {
    return 0.5 * s.qprime.squaredNorm() + 0.5 * s.q.dot(s.q.cwiseQuotient(a));
}

/// 𝓕(λ) = Σ_{i<j} P_ij²/((λ−I_i)(λ−I_j)) + Σ q_i²/(λ−I_i), P = q∧q', I_i = 1/A_i.
inline double neumann_family(const NeumannState& s, const Vec& a, double lambda) {
    const Vec inertia = a.cwiseInverse();
    const auto n = s.q.size();
    double f = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        f += s.q(i) * s.q(i) / (lambda - inertia(i));
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double pij = s.q(i) * s.qprime(j) - s.q(j) * s.qprime(i);
            f += pij * pij / ((lambda - inertia(i)) * (lambda - inertia(j)));
        }
    }
    return f;
}

/// Φ(λ)𝓕(λ) with Φ = Π(λ − I_i): a polynomial of degree n − 1 with leading
/// coefficient (q, q).
inline Vec neumann_phi_f(const NeumannState& s, const Vec& a) {
    const Vec inertia = a.cwiseInverse();
    const auto n = s.q.size();
    Vec acc = Vec::Zero(n);
    auto product_except = [&](std::vector<Eigen::Index> skip) {
        std::vector<double> roots;
        for (Eigen::Index k = 0; k < n; ++k)
            if (std::find(skip.begin(), skip.end(), k) == skip.end()) roots.push_back(inertia(k));
        return poly::from_roots(roots);
    };
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec pi = product_except({i});
        acc.head(pi.size()) += s.q(i) * s.q(i) * pi;
        for (Eigen::Index j = i + 1; j < n; ++j) {
            const double pij = s.q(i) * s.qprime(j) - s.q(j) * s.qprime(i);
            const Vec pij_poly = product_except({i, j});
            acc.head(pij_poly.size()) += pij * pij * pij_poly;
        }
    }
    return acc;
}

struct NeumannInvariants {
    double F0 = 0.0;
    std::vector<double> cs;  // c_2..c_{n−1} when F0 ≈ 0, otherwise all n − 1 roots
    bool zero_root_deflated = false;
    bool near_collision = false;
    Vec phi_f;  // coefficients of Φ𝓕
    std::function<double(double)> F;
};

/// F0 = (Aq',q')(Aq,q) − (Aq,q')² − (Aq,q), which equals 𝓕(0).
inline double neumann_f0(const NeumannState& s, const Vec& a) {
    const Vec aq = a.cwiseProduct(s.q);
    const double aqq = aq.dot(s.q);
    return a.cwiseProduct(s.qprime).dot(s.qprime) * aqq - std::pow(aq.dot(s.qprime), 2) - aqq;
}

inline NeumannInvariants neumann_invariants(const NeumannState& s, const Vec& a, double zero_tol = 1e-10) {
    require_distinct_axes(a, "neumann_invariants");
    NeumannInvariants out;
    out.F0 = neumann_f0(s, a);
    out.phi_f = neumann_phi_f(s, a);
    Vec p = out.phi_f;
    if (std::abs(out.F0) < zero_tol) {
        p = poly::deflate_zero(p);
        out.zero_root_deflated = true;
    }
    out.cs = poly::real_roots(p);
    const double scale = std::max(1.0, a.cwiseInverse().maxCoeff());
    for (std::size_t k = 1; k < out.cs.size(); ++k)
        if (out.cs[k] - out.cs[k - 1] < 1e-8 * scale) out.near_collision = true;
    const NeumannState copy = s;
    const Vec ac = a;
    out.F = [copy, ac](double lambda) { return neumann_family(copy, ac, lambda); };
    return out;
}

/// n = 3: (ℐ(q'×q), q'×q) − det ℐ (ℐ⁻¹q, q) with ℐ = diag(1/A_i).
inline double neumann3_zero_integral(const NeumannState& s, const Vec& a) {
    if (a.size() != 3) throw DimensionError("neumann3_zero_integral: n = 3 only");
    const Eigen::Vector3d q = s.q;
    const Eigen::Vector3d qp = s.qprime;
    const Eigen::Vector3d inertia = a.cwiseInverse();
    const Eigen::Vector3d w = qp.cross(q);
    return inertia.cwiseProduct(w).dot(w) - inertia.prod() * q.dot(a.cwiseProduct(q));
}

// ---------------------------------------------------------------------------
// Spheroconic coordinates

struct SpheroconicPoint {
    Vec lambdas;      // ascending, n − 1 entries
    Vec signs;        // ±1 per component of q
    bool boundary = false;  // some λ_k coincides with an I_i (q on a coordinate hyperplane)
};

namespace detail {
/// Σ_i w_i Π_{j≠i}(λ − I_j) over the listed indices.
inline double spheroconic_g(const std::vector<int>& idx, const Vec& w, const Vec& inertia, double lambda) {
    double acc = 0.0;
    for (int i : idx) {
        double prod = w(i);
        for (int j : idx)
            if (j != i) prod *= lambda - inertia(j);
        acc += prod;
    }
    return acc;
}

inline double bisect(const std::function<double(double)>& g, double lo, double hi) {
    double glo = g(lo);
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        const double gm = g(mid);
        if (gm == 0.0) return mid;
        if ((gm > 0.0) == (glo > 0.0)) {
            lo = mid;
            glo = gm;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}
}  // namespace detail

/// λ_1 < … < λ_{n−1}: roots of Σ q_i²/(I_i − λ) = 0, one in each interval of
/// the sorted I_i. Components with q_i = 0 contribute the root λ = I_i.
inline SpheroconicPoint spheroconic_from_q(const Vec& q, const Vec& a) {
    require_distinct_axes(a, "spheroconic");
    const int n = static_cast<int>(q.size());
    if (a.size() != n) throw DimensionError("spheroconic: dimension mismatch");
    if (std::abs(q.squaredNorm() - 1.0) > 1e-8) throw DomainError("spheroconic: q must be a unit vector");
    const Vec inertia = a.cwiseInverse();
    const Vec w = q.cwiseProduct(q);

    SpheroconicPoint out;
    out.signs = Vec::Ones(n);
    for (int i = 0; i < n; ++i)
        if (q(i) < 0.0) out.signs(i) = -1.0;

    std::vector<double> roots;
    std::vector<int> live;
    for (int i = 0; i < n; ++i) {
        if (std::abs(q(i)) < 1e-15) {
            roots.push_back(inertia(i));
            out.boundary = true;
        } else {
            live.push_back(i);
        }
    }
    std::sort(live.begin(), live.end(), [&](int x, int y) { return inertia(x) < inertia(y); });
    auto g = [&](double lam) { return detail::spheroconic_g(live, w, inertia, lam); };
    for (std::size_t k = 0; k + 1 < live.size(); ++k)
        roots.push_back(detail::bisect(g, inertia(live[k]), inertia(live[k + 1])));
    std::sort(roots.begin(), roots.end());
    out.lambdas = Eigen::Map<Vec>(roots.data(), static_cast<Eigen::Index>(roots.size()));
    return out;
}

/// q_i² = Π_k (I_i − λ_k)/Π_{j≠i}(I_i − I_j), signs from the point.
inline Vec spheroconic_to_q(const SpheroconicPoint& pt, const Vec& a) {
    require_distinct_axes(a, "spheroconic");
    const int n = static_cast<int>(a.size());
    if (pt.lambdas.size() != n - 1 || pt.signs.size() != n) throw DimensionError("spheroconic: dimension mismatch");
    const Vec inertia = a.cwiseInverse();
    Vec q(n);
    for (int i = 0; i < n; ++i) {
        double num = 1.0;
        for (int k = 0; k < n - 1; ++k) num *= inertia(i) - pt.lambdas(k);
        double den = 1.0;
        for (int j = 0; j < n; ++j)
            if (j != i) den *= inertia(i) - inertia(j);
        double q2 = num / den;
        if (q2 < -1e-12) throw DomainError("spheroconic: λ violates interlacing");
        q(i) = pt.signs(i) * std::sqrt(std::max(0.0, q2));
    }
    return q;
}

/// dλ_k/dτ₁ along a Neumann state: −(∂g/∂τ₁)/(∂g/∂λ) at each root of
/// g(λ) = Σ q_i² Π_{j≠i}(λ − I_j).
inline Vec spheroconic_rates(const NeumannState& s, const Vec& lambdas, const Vec& a) {
    const int n = static_cast<int>(a.size());
    const Vec inertia = a.cwiseInverse();
    Vec out(lambdas.size());
    for (Eigen::Index k = 0; k < lambdas.size(); ++k) {
        const double lam = lambdas(k);
        double dg_dt = 0.0;
        double dg_dl = 0.0;
        for (int i = 0; i < n; ++i) {
            double prod = 1.0;
            double dprod = 0.0;
            for (int j = 0; j < n; ++j) {
                if (j == i) continue;
                dprod = dprod * (lam - inertia(j)) + prod;
                prod *= lam - inertia(j);
            }
            dg_dt += 2.0 * s.q(i) * s.qprime(i) * prod;
            dg_dl += s.q(i) * s.q(i) * dprod;
        }
        out(k) = -dg_dt / dg_dl;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Constants of motion and R(λ)

struct MotionConstants {
    double h = 0.0;
    std::vector<double> cs;  // c_2..c_{n−1}; c_1 = 0
};

/// R(λ) = −(λ − I_1)⋯(λ − I_n) λ (λ − c_2)⋯(λ − c_{n−1}).
inline Vec hyperelliptic_polynomial(const MotionConstants& mc, const Vec& a) {
    std::vector<double> roots;
    for (Eigen::Index i = 0; i < a.size(); ++i) roots.push_back(1.0 / a(i));
    roots.push_back(0.0);
    roots.insert(roots.end(), mc.cs.begin(), mc.cs.end());
    return -poly::from_roots(roots);
}

/// −Φ²(λ)𝓕(λ) from a Neumann state.
inline Vec neumann_r_polynomial(const NeumannState& s, const Vec& a) {
    std::vector<double> roots;
    for (Eigen::Index i = 0; i < a.size(); ++i) roots.push_back(1.0 / a(i));
    return -poly::multiply(poly::from_roots(roots), neumann_phi_f(s, a));
}

// ---------------------------------------------------------------------------
// Time factors

struct TimeFactors {
    double dtau1_dt = 0.0;
    double dtau1_dt_on_level = 0.0;
    double dtau_dt = 0.0;
    double dtau1_dtau = 0.0;
};

/// Factors between t (reduced LR), τ (geodesic flow) and τ₁ (Neumann).
inline TimeFactors time_factors(const Vec& q, const Vec& qdot, const Vec& a, double h) {
    const double det = a.prod();
    const double aqq = q.dot(a.cwiseProduct(q));
    const InertiaSpec spec = InertiaSpec::special(a);
    const SkewMatrix w = wedge(q, qdot);
    TimeFactors out;
    out.dtau1_dt = std::sqrt(det * killing_inner(w, spec.apply(w)) / aqq);
    out.dtau_dt = std::sqrt(det / aqq);
    if (h > 0.0) {
        out.dtau1_dtau = std::sqrt(2.0 * h);
        out.dtau1_dt_on_level = std::sqrt(2.0 * h * det / aqq);
    } else {
        out.dtau1_dtau = std::numeric_limits<double>::quiet_NaN();
        out.dtau1_dt_on_level = std::numeric_limits<double>::quiet_NaN();
    }
    return out;
}

/// Velocity-to-momentum map of the reduced sphere system: p with (p,q) = 0
/// and q̇ = det A/(q,Aq)·[A⁻¹p − (p,A⁻¹q)q].
inline Vec sphere_momentum_from_velocity(const Vec& q, const Vec& qdot, const Vec& a) {
    const Vec aq = a.cwiseProduct(q);
    const double aqq = aq.dot(q);
    const Vec av = (aqq / a.prod()) * a.cwiseProduct(qdot);
    return av - (av.dot(q) / aqq) * aq;
}

// ---------------------------------------------------------------------------
// Abel–Jacobi quadratures

struct SpheroconicSample {
    double time = 0.0;
    Vec lambdas;
    Vec rates;  // dλ/d(time)
};

struct AbelJacobiResult {
    std::vector<Vec> residuals;  // per sample, n − 1 entries; NaN where excluded
    std::vector<bool> excluded;
    double max_abs = 0.0;
    std::size_t used = 0;
};

enum class QuadratureTime { Tau1, Tau };

/// residual_k = Σ_s λ_s^{k−1} λ_s'/(2σ_s sqrt|R(λ_s)|) − δ_{k,n−1}·c with
/// c = 1 in τ₁ time and sqrt(2h) in τ time. σ_s starts at
/// sign(λ_s'·Π_{j≠s}(λ_s − λ_j)) on the first sample and flips whenever λ_s'
/// changes sign. Samples with some λ_s closer than `branch_tol` (relative to
/// the spread of the I_i) to a root of R are excluded.
inline AbelJacobiResult abel_jacobi_residual(const std::vector<SpheroconicSample>& samples, const MotionConstants& mc,
                                             const Vec& a, QuadratureTime time = QuadratureTime::Tau1,
                                             double branch_tol = 1e-3) {
    AbelJacobiResult out;
    if (samples.empty()) return out;
    const Vec r = hyperelliptic_polynomial(mc, a);
    std::vector<double> branch;
    for (Eigen::Index i = 0; i < a.size(); ++i) branch.push_back(1.0 / a(i));
    branch.push_back(0.0);
    branch.insert(branch.end(), mc.cs.begin(), mc.cs.end());
    const Vec inertia = a.cwiseInverse();
    const double spread = inertia.maxCoeff() - inertia.minCoeff();
    const double c = time == QuadratureTime::Tau1 ? 1.0 : std::sqrt(2.0 * mc.h);

    const auto m = samples.front().lambdas.size();
    Vec sigma(m);
    for (Eigen::Index s = 0; s < m; ++s) {
        double prod = 1.0;
        for (Eigen::Index j = 0; j < m; ++j)
            if (j != s) prod *= samples.front().lambdas(s) - samples.front().lambdas(j);
        sigma(s) = (samples.front().rates(s) * prod >= 0.0) ? 1.0 : -1.0;
    }
    Vec prev_rate = samples.front().rates;

    for (const auto& smp : samples) {
        for (Eigen::Index s = 0; s < m; ++s) {
            if (smp.rates(s) * prev_rate(s) < 0.0) sigma(s) = -sigma(s);
            if (smp.rates(s) != 0.0) prev_rate(s) = smp.rates(s);
        }
        bool near = false;
        for (Eigen::Index s = 0; s < m; ++s)
            for (double b : branch)
                if (std::abs(smp.lambdas(s) - b) < branch_tol * spread) near = true;
        Vec res = Vec::Constant(m, std::numeric_limits<double>::quiet_NaN());
        if (!near) {
            for (Eigen::Index k = 0; k < m; ++k) {
                double acc = 0.0;
                for (Eigen::Index s = 0; s < m; ++s) {
                    const double lam = smp.lambdas(s);
                    acc += std::pow(lam, static_cast<double>(k)) * smp.rates(s) /
                           (2.0 * sigma(s) * std::sqrt(std::abs(poly::eval(r, lam))));
                }
                res(k) = acc - (k == m - 1 ? c : 0.0);
                out.max_abs = std::max(out.max_abs, std::abs(res(k)));
            }
            ++out.used;
        }
        out.residuals.push_back(res);
        out.excluded.push_back(near);
    }
    return out;
}

}  // namespace lrsys
