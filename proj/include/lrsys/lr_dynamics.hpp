#pragma once

// The unreduced LR system on SO(n) in multiplier form (ω, e_1..e_n) and in
// momentum form (M, e_1..e_r), the n = 3 Veselova and Euler–Poisson systems,
// their first integrals, and a finite-difference invariant-measure check.

#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lrsys/errors.hpp"
#include "lrsys/harness.hpp"
#include "lrsys/son_algebra.hpp"

namespace lrsys {

// ---------------------------------------------------------------------------
// Body states

/// State of the full LR system. `frame` holds e_1..e_k as rows; k = n for the
/// multiplier form, k ≥ r for the momentum form. The rows are not revalidated
/// here because integrated states carry O(tol) drift.
struct BodyState {
    enum class Representation { Velocity, Momentum };

    Representation representation = Representation::Velocity;
    SkewMatrix xi;  // ω (Velocity) or M (Momentum)
    Mat frame;
    int r = 1;

    int n() const { return xi.n(); }

    Vec flatten() const {
        const int d = so_dim(n());
        Vec out(d + frame.size());
        out.head(d) = xi.coords();
        for (Eigen::Index i = 0; i < frame.rows(); ++i) out.segment(d + i * n(), n()) = frame.row(i).transpose();
        return out;
    }

    static BodyState unflatten(Representation rep, int n, int r, int frame_rows, const Vec& flat) {
        const int d = so_dim(n);
        if (flat.size() != d + frame_rows * n) throw DimensionError("BodyState::unflatten: wrong length");
        BodyState s;
        s.representation = rep;
        s.r = r;
        s.xi = SkewMatrix::from_coords(n, flat.head(d));
        s.frame.resize(frame_rows, n);
        for (int i = 0; i < frame_rows; ++i) s.frame.row(i) = flat.segment(d + i * n, n).transpose();
        return s;
    }
};

/// Rates of change of a BodyState in the same layout.
struct BodyRate {
    SkewMatrix xi_dot;
    Mat frame_dot;

    Vec flatten() const {
        const int n = xi_dot.n();
        const int d = so_dim(n);
        Vec out(d + frame_dot.size());
        out.head(d) = xi_dot.coords();
        for (Eigen::Index i = 0; i < frame_dot.rows(); ++i) out.segment(d + i * n, n) = frame_dot.row(i).transpose();
        return out;
    }
};

/// ⟨ω, e_p∧e_q⟩ for r < p < q ≤ n, in lexicographic order of (p, q).
inline Vec constraint_residuals(const SkewMatrix& omega, const Mat& frame, int r) {
    const int n = omega.n();
    std::vector<double> out;
    for (int p = r; p < n; ++p)
        for (int q = p + 1; q < n; ++q)
            out.push_back(killing_inner(omega, wedge(frame.row(p).transpose(), frame.row(q).transpose())));
    return Eigen::Map<Vec>(out.data(), static_cast<Eigen::Index>(out.size()));
}

/// ‖M∧e_1∧⋯∧e_r‖ through the equivalent condition M = pr_{D_r}(M).
inline double invariant_variety_residual(const SkewMatrix& m, const Mat& frame, int r) {
    const Mat top = frame.topRows(r);
    return (m - project_with_gamma(m, top.transpose() * top)).matrix().cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------
// Multiplier form

inline void require_multiplier_state(const BodyState& s, const InertiaSpec& spec) {
    const int n = s.n();
    if (spec.n() != n) throw DimensionError("multiplier_vector_field: inertia dimension mismatch");
    if (s.frame.rows() != n || s.frame.cols() != n) throw DimensionError("multiplier_vector_field: full frame required");
    if (s.r < 1 || s.r >= n) throw DimensionError("multiplier_vector_field: need 1 <= r < n");
}

/// ω̇ = I⁻¹([Iω, ω] + Σ λ_pq e_p∧e_q), ė_i = −ω e_i. The multipliers make
/// every ⟨ω, e_p∧e_q⟩ (r < p < q) a first integral.
inline BodyRate multiplier_vector_field(const BodyState& s, const InertiaSpec& spec) {
    require_multiplier_state(s, spec);
    const int n = s.n();
    const SkewMatrix& omega = s.xi;
    const SkewMatrix u = spec.apply(commutator(spec.apply(omega), omega), InertiaDirection::Inverse);

    const Mat f = constraint_normal_basis(s.frame, s.r);
    Vec rate = u.coords();
    if (f.cols() > 0) {
        const Mat gram = f.transpose() * spec.inverse_matrix() * f;
        Eigen::LLT<Mat> llt(gram);
        if (llt.info() != Eigen::Success) throw DegenerateConfiguration("multiplier_vector_field: multiplier Gram matrix is singular");
        // ⟨ω, [F, ω]⟩ = 0, so only ⟨ω̇, F⟩ enters the constraint derivative
        const Vec lambda = llt.solve(-(f.transpose() * rate));
        rate += spec.inverse_matrix() * (f * lambda);
    }
    BodyRate out;
    out.xi_dot = SkewMatrix::from_coords(n, rate);
    out.frame_dot = s.frame * omega.matrix();  // rows: (−ω e_i)ᵀ = e_iᵀ ω
    return out;
}

// ---------------------------------------------------------------------------
// Momentum form

/// Matrix of ω ↦ pr_D(Iω) + (Id − pr_D)ω in so(n) coordinates, Γ from the
/// leading r rows of the frame.
inline Mat momentum_operator(const InertiaSpec& spec, const Mat& frame, int r) {
    const int n = spec.n();
    const Mat top = frame.topRows(r);
    const Mat p = projector_coords(n, top.transpose() * top);
    const int d = so_dim(n);
    return p * spec.matrix() + (Mat::Identity(d, d) - p);
}

/// Solves M = ω + pr_D(Iω − ω) for ω.
inline SkewMatrix omega_from_momentum(const SkewMatrix& m, const Mat& frame, int r, const InertiaSpec& spec) {
    const int n = m.n();
    if (spec.n() != n || frame.cols() != n) throw DimensionError("omega_from_momentum: dimension mismatch");
    if (r < 1 || r > frame.rows()) throw DimensionError("omega_from_momentum: bad r");
    const Mat k = momentum_operator(spec, frame, r);
    Eigen::FullPivLU<Mat> lu(k);
    if (!lu.isInvertible()) throw DegenerateConfiguration("omega_from_momentum: momentum map is singular");
    return SkewMatrix::from_coords(n, lu.solve(m.coords()));
}

inline SkewMatrix omega_from_momentum(const SkewMatrix& m, const Frame& frame, const InertiaSpec& spec) {
    return omega_from_momentum(m, frame.rows(), frame.r(), spec);
}

/// M = ω + (Iω − ω)Γ + Γ(Iω − ω) − Γ(Iω − ω)Γ.
inline SkewMatrix momentum_from_omega(const SkewMatrix& omega, const Mat& frame, int r, const InertiaSpec& spec) {
    const Mat top = frame.topRows(r);
    return omega + project_with_gamma(spec.apply(omega) - omega, top.transpose() * top);
}

/// Ṁ = Mω − ωM, ė_k = −ω e_k for every stored frame row.
inline BodyRate momentum_vector_field(const BodyState& s, const InertiaSpec& spec) {
    if (s.frame.rows() < s.r) throw DimensionError("momentum_vector_field: frame has fewer than r rows");
    const SkewMatrix omega = omega_from_momentum(s.xi, s.frame, s.r, spec);
    BodyRate out;
    out.xi_dot = SkewMatrix(Mat(s.xi.matrix() * omega.matrix() - omega.matrix() * s.xi.matrix()));
    out.frame_dot = s.frame * omega.matrix();
    return out;
}

inline VectorField multiplier_field_flat(const InertiaSpec& spec, int r) {
    const int n = spec.n();
    return [spec, n, r](double, const Vec& y) {
        return multiplier_vector_field(BodyState::unflatten(BodyState::Representation::Velocity, n, r, n, y), spec)
            .flatten();
    };
}

inline VectorField momentum_field_flat(const InertiaSpec& spec, int r, int frame_rows) {
    const int n = spec.n();
    return [spec, n, r, frame_rows](double, const Vec& y) {
        return momentum_vector_field(BodyState::unflatten(BodyState::Representation::Momentum, n, r, frame_rows, y), spec)
            .flatten();
    };
}

/// log of the momentum-form density 1/μ̃ = det(I|D_r)^{-1/2}. Evaluated via
/// det of the momentum operator, which equals det(I|D_r) when Γ is a
/// projector and extends smoothly to nearby frames.
inline double momentum_log_density(const InertiaSpec& spec, const Mat& frame, int r) {
    return -0.5 * std::log(momentum_operator(spec, frame, r).determinant());
}

// ---------------------------------------------------------------------------
// Integrals

struct LrIntegrals {
    double energy = 0.0;
    Vec constraint_residuals;
    std::vector<std::vector<double>> char_coeffs;  // [k − 2][j]: coefficient of λ^j in tr(M + λΓ)^k
    std::optional<Vec> linear_l;                   // l_2..l_n for r = 1
};

/// Coefficients of λ^j in tr(M + λΓ)^k, k = 2..n, j = 0..k.
inline std::vector<std::vector<double>> characteristic_coefficients(const Mat& m, const Mat& gamma) {
    const auto n = m.rows();
    std::vector<std::vector<double>> out;
    std::vector<Mat> c{Mat::Identity(n, n)};  // (M + λΓ)^0
    for (Eigen::Index k = 1; k <= n; ++k) {
        std::vector<Mat> next(static_cast<std::size_t>(k + 1), Mat::Zero(n, n));
        for (std::size_t j = 0; j < c.size(); ++j) {
            next[j] += m * c[j];
            next[j + 1] += gamma * c[j];
        }
        c = std::move(next);
        if (k >= 2) {
            std::vector<double> row;
            for (const auto& cj : c) row.push_back(cj.trace());
            out.push_back(std::move(row));
        }
    }
    return out;
}

/// Full frame from the stored rows; a single row is completed by the
/// Householder convention of Frame::completed.
inline Mat full_frame_rows(const Mat& frame) {
    const auto n = frame.cols();
    if (frame.rows() == n) return frame;
    Mat rows = orthonormalize_rows(frame);
    return Frame(rows).completed().rows();
}

inline LrIntegrals lr_integrals(const BodyState& s, const InertiaSpec& spec) {
    const int n = s.n();
    LrIntegrals out;
    const Mat top = s.frame.topRows(s.r);
    const Mat gamma = top.transpose() * top;
    SkewMatrix omega;
    SkewMatrix m;
    if (s.representation == BodyState::Representation::Velocity) {
        omega = s.xi;
        m = momentum_from_omega(omega, s.frame, s.r, spec);
        out.energy = 0.5 * killing_inner(spec.apply(omega), omega);
    } else {
        m = s.xi;
        omega = omega_from_momentum(m, s.frame, s.r, spec);
        out.energy = 0.5 * killing_inner(m, omega);
    }
    if (s.frame.rows() == n) out.constraint_residuals = constraint_residuals(omega, s.frame, s.r);
    out.char_coeffs = characteristic_coefficients(m.matrix(), gamma);
    if (s.r == 1) {
        const Mat full = full_frame_rows(s.frame);
        Vec l(n - 1);
        for (int k = 1; k < n; ++k) l(k - 1) = killing_inner(m, wedge(full.row(0).transpose(), full.row(k).transpose()));
        out.linear_l = l;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Potentials on the Poisson sphere

using Vec3 = Eigen::Vector3d;

/// Potential V(γ) with its gradient. Custom potentials are checked against
/// central differences at fixed sample points when constructed.
class PotentialSpec {
public:
    enum class Kind { Zero, VeselovaFamily, Custom };

    using Value = std::function<double(const Vec3&)>;
    using Gradient = std::function<Vec3(const Vec3&)>;

    static PotentialSpec zero() {
        PotentialSpec p;
        p.kind_ = Kind::Zero;
        p.value_ = [](const Vec3&) { return 0.0; };
        p.grad_ = [](const Vec3&) { return Vec3::Zero().eval(); };
        return p;
    }

    /// V = α1((I²γ,γ) − (Iγ,γ)²) + α2(Iγ,γ) + α3/γ1² + α4/γ2² + α5/γ3².
    static PotentialSpec veselova_family(const std::array<double, 5>& alpha, const Vec3& inertia) {
        PotentialSpec p;
        p.kind_ = Kind::VeselovaFamily;
        p.alpha_ = alpha;
        p.inertia_ = inertia;
        p.value_ = [alpha, inertia](const Vec3& g) {
            check_singular(alpha, g);
            const Vec3 ig = inertia.cwiseProduct(g);
            const double igg = ig.dot(g);
            double v = alpha[0] * (ig.squaredNorm() - igg * igg) + alpha[1] * igg;
            for (int i = 0; i < 3; ++i)
                if (alpha[2 + i] != 0.0) v += alpha[2 + i] / (g(i) * g(i));
            return v;
        };
        p.grad_ = [alpha, inertia](const Vec3& g) {
            check_singular(alpha, g);
            const Vec3 ig = inertia.cwiseProduct(g);
            const double igg = ig.dot(g);
            Vec3 grad = alpha[0] * (2.0 * inertia.cwiseProduct(ig) - 4.0 * igg * ig) + alpha[1] * 2.0 * ig;
            for (int i = 0; i < 3; ++i)
                if (alpha[2 + i] != 0.0) grad(i) += -2.0 * alpha[2 + i] / (g(i) * g(i) * g(i));
            return grad;
        };
        return p;
    }

    static PotentialSpec custom(Value value, Gradient grad) {
        PotentialSpec p;
        p.kind_ = Kind::Custom;
        p.value_ = std::move(value);
        p.grad_ = std::move(grad);
        p.validate_gradient();
        return p;
    }

    Kind kind() const { return kind_; }
    double value(const Vec3& g) const { return value_(g); }
    Vec3 gradient(const Vec3& g) const { return grad_(g); }
    const std::array<double, 5>& alphas() const { return alpha_; }
    const Vec3& family_inertia() const { return inertia_; }

private:
    static void check_singular(const std::array<double, 5>& alpha, const Vec3& g) {
        for (int i = 0; i < 3; ++i)
            if (alpha[2 + i] != 0.0 && std::abs(g(i)) < 1e-12)
                throw DomainError("PotentialSpec: singular potential on a coordinate plane");
    }

    void validate_gradient() const {
        std::mt19937_64 rng(0x5eed);
        std::uniform_real_distribution<double> u(0.4, 1.0);
        std::uniform_int_distribution<int> sgn(0, 1);
        for (int trial = 0; trial < 5; ++trial) {
            Vec3 g;
            for (int i = 0; i < 3; ++i) g(i) = u(rng) * (sgn(rng) ? 1.0 : -1.0);
            g.normalize();
            const Vec3 analytic = grad_(g);
            const double h = 1e-5;
            for (int i = 0; i < 3; ++i) {
                Vec3 gp = g;
                Vec3 gm = g;
                gp(i) += h;
                gm(i) -= h;
                const double fd = (value_(gp) - value_(gm)) / (2 * h);
                if (std::abs(fd - analytic(i)) > 1e-6 * std::max(1.0, std::abs(analytic(i))))
                    throw DomainError("PotentialSpec::custom: gradient disagrees with finite differences");
            }
        }
    }

    Kind kind_ = Kind::Zero;
    Value value_;
    Gradient grad_;
    std::array<double, 5> alpha_{};
    Vec3 inertia_ = Vec3::Ones();
};

/// γ-dependent part F(γ) of the extra integral F2 + F(γ) for the Veselova
/// family:
///   α1 det I (Iγ,γ)(I⁻¹γ,γ) − α2 det I (I⁻¹γ,γ) + Σ_i α_{i+2} Σ_{j≠i} I_k γ_j²/γ_i²
/// where k is the index distinct from i and j.
inline PotentialSpec veselova_family_integral_term(const std::array<double, 5>& alpha, const Vec3& inertia) {
    const double det = inertia.prod();
    const Vec3 inv = inertia.cwiseInverse();
    auto third = [](int i, int j) { return 3 - i - j; };
    auto value = [=](const Vec3& g) {
        double f = alpha[0] * det * inertia.cwiseProduct(g).dot(g) * inv.cwiseProduct(g).dot(g) -
                   alpha[1] * det * inv.cwiseProduct(g).dot(g);
        for (int i = 0; i < 3; ++i) {
            if (alpha[2 + i] == 0.0) continue;
            if (std::abs(g(i)) < 1e-12) throw DomainError("veselova_family_integral_term: singular on a coordinate plane");
            for (int j = 0; j < 3; ++j)
                if (j != i) f += alpha[2 + i] * inertia(third(i, j)) * g(j) * g(j) / (g(i) * g(i));
        }
        return f;
    };
    auto grad = [=](const Vec3& g) {
        const Vec3 ig = inertia.cwiseProduct(g);
        const Vec3 vg = inv.cwiseProduct(g);
        Vec3 out = alpha[0] * det * (2.0 * ig * vg.dot(g) + 2.0 * vg * ig.dot(g)) - alpha[1] * det * 2.0 * vg;
        for (int i = 0; i < 3; ++i) {
            if (alpha[2 + i] == 0.0) continue;
            if (std::abs(g(i)) < 1e-12) throw DomainError("veselova_family_integral_term: singular on a coordinate plane");
            const double gi2 = g(i) * g(i);
            for (int j = 0; j < 3; ++j) {
                if (j == i) continue;
                const double c = alpha[2 + i] * inertia(third(i, j));
                out(j) += 2.0 * c * g(j) / gi2;
                out(i) += -2.0 * c * g(j) * g(j) / (gi2 * g(i));
            }
        }
        return out;
    };
    return PotentialSpec::custom(value, grad);
}

// ---------------------------------------------------------------------------
// Veselova system, n = 3

struct Veselova3State {
    Vec3 omega;
    Vec3 gamma;

    Vec flatten() const {
        Vec v(6);
        v << omega, gamma;
        return v;
    }
    static Veselova3State unflatten(const Vec& v) {
        if (v.size() != 6) throw DimensionError("Veselova3State: need 6 components");
        return {v.head<3>(), v.tail<3>()};
    }
};

struct Veselova3Rate {
    Vec3 omega_dot;
    Vec3 gamma_dot;
    double lambda = 0.0;

    Vec flatten() const {
        Vec v(6);
        v << omega_dot, gamma_dot;
        return v;
    }
};

inline void require_positive(const Vec3& d, const char* where) {
    if (!(d.minCoeff() > 0.0)) throw DomainError(std::string(where) + ": inertia must be positive");
}

/// IΩ̇ = IΩ×Ω + γ×∇V + λγ, γ̇ = γ×Ω, with λ keeping (Ω, γ) constant.
inline Veselova3Rate veselova3_vector_field(const Veselova3State& s, const Vec3& inertia, const PotentialSpec& v) {
    require_positive(inertia, "veselova3_vector_field");
    if (s.gamma.squaredNorm() == 0.0) throw DomainError("veselova3_vector_field: gamma must be nonzero");
    const Vec3 io = inertia.cwiseProduct(s.omega);
    const Vec3 inv_g = s.gamma.cwiseQuotient(inertia);
    const Vec3 force = io.cross(s.omega) + s.gamma.cross(v.gradient(s.gamma));
    Veselova3Rate out;
    out.lambda = -force.dot(inv_g) / inv_g.dot(s.gamma);
    out.omega_dot = (force + out.lambda * s.gamma).cwiseQuotient(inertia);
    out.gamma_dot = s.gamma.cross(s.omega);
    return out;
}

inline VectorField veselova3_field_flat(const Vec3& inertia, const PotentialSpec& v) {
    return [inertia, v](double, const Vec& y) {
        return veselova3_vector_field(Veselova3State::unflatten(y), inertia, v).flatten();
    };
}

struct Veselova3Integrals {
    double F1 = 0.0;
    double F2 = 0.0;
    double jacobi_painleve = 0.0;
    double squared_momentum = 0.0;
    double geometric = 0.0;
    double constraint = 0.0;
    std::optional<double> F_potential;
};

inline Veselova3Integrals veselova3_integrals(const Veselova3State& s, const Vec3& inertia, const PotentialSpec& v) {
    const Vec3 io = inertia.cwiseProduct(s.omega);
    const double iog = io.dot(s.gamma);
    const double og = s.omega.dot(s.gamma);
    Veselova3Integrals out;
    out.F1 = 0.5 * io.dot(s.omega) + v.value(s.gamma);
    out.F2 = 0.5 * io.squaredNorm() - 0.5 * iog * iog;
    out.jacobi_painleve = 0.5 * s.omega.dot(io) - og * iog;
    out.squared_momentum = 0.5 * (io - iog * s.gamma + og * s.gamma).squaredNorm();
    out.geometric = s.gamma.squaredNorm();
    out.constraint = og;
    if (v.kind() == PotentialSpec::Kind::VeselovaFamily)
        out.F_potential = out.F2 + veselova_family_integral_term(v.alphas(), v.family_inertia()).value(s.gamma);
    return out;
}

// ---------------------------------------------------------------------------
// Euler–Poisson, n = 3

struct EulerPoissonIntegrals {
    double i1 = 0.0;
    double i2 = 0.0;
    double f1 = 0.0;
    double f2 = 0.0;
};

struct EulerPoissonRate {
    Vec3 omega_dot;
    Vec3 gamma_dot;
    EulerPoissonIntegrals integrals;

    Vec flatten() const {
        Vec v(6);
        v << omega_dot, gamma_dot;
        return v;
    }
};

inline EulerPoissonIntegrals euler_poisson3_integrals(const Veselova3State& s, const Vec3& j, const PotentialSpec& v) {
    const Vec3 jo = j.cwiseProduct(s.omega);
    return {s.gamma.squaredNorm(), jo.dot(s.gamma), 0.5 * jo.dot(s.omega) + v.value(s.gamma), 0.5 * jo.squaredNorm()};
}

/// JΩ̇ = JΩ×Ω + γ×∇V, γ̇ = γ×Ω.
inline EulerPoissonRate euler_poisson3_vector_field(const Veselova3State& s, const Vec3& j, const PotentialSpec& v) {
    require_positive(j, "euler_poisson3_vector_field");
    const Vec3 jo = j.cwiseProduct(s.omega);
    EulerPoissonRate out;
    out.omega_dot = (jo.cross(s.omega) + s.gamma.cross(v.gradient(s.gamma))).cwiseQuotient(j);
    out.gamma_dot = s.gamma.cross(s.omega);
    out.integrals = euler_poisson3_integrals(s, j, v);
    return out;
}

inline VectorField euler_poisson3_field_flat(const Vec3& j, const PotentialSpec& v) {
    return [j, v](double, const Vec& y) {
        return euler_poisson3_vector_field(Veselova3State::unflatten(y), j, v).flatten();
    };
}

// ---------------------------------------------------------------------------
// Invariant measure check

/// div v + ∇log μ · v at x, both by central differences of step h. Vanishes
/// up to O(h²) exactly where μ is an invariant density.
inline double measure_divergence_residual(const std::function<Vec(const Vec&)>& field,
                                          const std::function<double(const Vec&)>& log_density, const Vec& x,
                                          double h) {
    if (!(h > 0.0)) throw DomainError("measure_divergence_residual: fd_step must be positive");
    const Vec v = field(x);
    if (v.size() != x.size()) throw DimensionError("measure_divergence_residual: field changes dimension");
    double div = 0.0;
    double transport = 0.0;
    Vec xp = x;
    Vec xm = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        xp(i) = x(i) + h;
        xm(i) = x(i) - h;
        div += (field(xp)(i) - field(xm)(i)) / (2 * h);
        transport += v(i) * (log_density(xp) - log_density(xm)) / (2 * h);
        xp(i) = x(i);
        xm(i) = x(i);
    }
    return div + transport;
}

// ---------------------------------------------------------------------------
// so(3) ↔ R³ bridge for the n = 3 momentum form

/// Special A for the diagonal inertia tensor diag(I1, I2, I3): A_i = 1/I_i.
inline InertiaSpec special_from_inertia3(const Vec3& inertia) {
    return InertiaSpec::special(inertia.cwiseInverse());
}

}  // namespace lrsys
