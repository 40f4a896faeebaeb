#pragma once

// Linear algebra on so(n): skew matrices, the Killing metric, inertia
// operators, projections onto the constraint plane D_r and the restricted
// determinants that give the invariant measure densities.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lrsys/errors.hpp"

namespace lrsys {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Dimension of so(n).
constexpr int so_dim(int n) { return n * (n - 1) / 2; }

/// Position of the basis element E_i∧E_j (i<j, zero based) in the
/// lexicographic coordinate vector of so(n).
inline int pair_index(int n, int i, int j) {
    // rows 0..i-1 contribute (n-1) + (n-2) + ... + (n-i)
    return i * n - i * (i + 1) / 2 + (j - i - 1);
}

inline std::vector<std::pair<int, int>> pair_list(int n) {
    std::vector<std::pair<int, int>> out;
    out.reserve(static_cast<std::size_t>(so_dim(n)));
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) out.emplace_back(i, j);
    return out;
}

/// Element of so(n) stored as a full n×n matrix. Construction from an
/// arbitrary square matrix keeps only the skew part, so the diagonal is
/// exactly zero and X(i,j) == -X(j,i) bitwise.
class SkewMatrix {
public:
    SkewMatrix() = default;
    explicit SkewMatrix(int n) : m_(Mat::Zero(n, n)) {}
    explicit SkewMatrix(const Mat& m) {
        if (m.rows() != m.cols()) throw DimensionError("SkewMatrix: matrix is not square");
        const auto n = m.rows();
        m_ = Mat::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = i + 1; j < n; ++j) {
                const double v = 0.5 * (m(i, j) - m(j, i));
                m_(i, j) = v;
                m_(j, i) = -v;
            }
    }

    static SkewMatrix from_coords(int n, const Vec& c) {
        if (c.size() != so_dim(n)) throw DimensionError("SkewMatrix::from_coords: wrong length");
        SkewMatrix s(n);
        int k = 0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j, ++k) {
                s.m_(i, j) = c(k);
                s.m_(j, i) = -c(k);
            }
        return s;
    }

    /// Coordinates in the Killing-orthonormal basis {E_i∧E_j, i<j}.
    Vec coords() const {
        const int nn = n();
        Vec c(so_dim(nn));
        int k = 0;
        for (int i = 0; i < nn; ++i)
            for (int j = i + 1; j < nn; ++j) c(k++) = m_(i, j);
        return c;
    }

    int n() const { return static_cast<int>(m_.rows()); }
    const Mat& matrix() const { return m_; }
    double operator()(int i, int j) const { return m_(i, j); }

    SkewMatrix operator+(const SkewMatrix& o) const { return raw(m_ + o.m_); }
    SkewMatrix operator-(const SkewMatrix& o) const { return raw(m_ - o.m_); }
    SkewMatrix operator-() const { return raw(-m_); }
    SkewMatrix operator*(double s) const { return raw(m_ * s); }
    friend SkewMatrix operator*(double s, const SkewMatrix& x) { return x * s; }

private:
    // caller guarantees exact skew symmetry
    static SkewMatrix raw(Mat m) {
        SkewMatrix s;
        s.m_ = std::move(m);
        return s;
    }

    Mat m_;
};

inline void require_same_dim(const SkewMatrix& a, const SkewMatrix& b, const char* where) {
    if (a.n() != b.n()) throw DimensionError(std::string(where) + ": dimension mismatch");
}

/// x∧y = x yᵀ − y xᵀ.
inline SkewMatrix wedge(const Vec& x, const Vec& y) {
    if (x.size() != y.size()) throw DimensionError("wedge: dimension mismatch");
    if (x.size() < 2) throw DimensionError("wedge: need n >= 2");
    return SkewMatrix(Mat(x * y.transpose() - y * x.transpose()));
}

/// Killing metric ⟨X,Y⟩ = −½ tr(XY).
inline double killing_inner(const SkewMatrix& x, const SkewMatrix& y) {
    require_same_dim(x, y, "killing_inner");
    // -½ tr(XY) = ½ Σ_ij X_ij Y_ij for skew X, Y
    return 0.5 * x.matrix().cwiseProduct(y.matrix()).sum();
}

inline SkewMatrix commutator(const SkewMatrix& x, const SkewMatrix& y) {
    require_same_dim(x, y, "commutator");
    return SkewMatrix(Mat(x.matrix() * y.matrix() - y.matrix() * x.matrix()));
}

// ---------------------------------------------------------------------------
// Inertia operators

enum class InertiaDirection { Forward, Inverse };

/// Inertia operator on so(n). Either the special diagonal form
/// I(E_i∧E_j) = A_iA_j/det A · E_i∧E_j, or a generic symmetric positive
/// definite operator written in the coordinates of SkewMatrix::coords().
class InertiaSpec {
public:
    static InertiaSpec special(Vec a) {
        if (a.size() < 2) throw DimensionError("InertiaSpec::special: need n >= 2");
        for (Eigen::Index i = 0; i < a.size(); ++i)
            if (!(a(i) > 0.0)) throw DomainError("InertiaSpec::special: A_i must be positive");
        InertiaSpec s;
        s.n_ = static_cast<int>(a.size());
        const double det = a.prod();
        Vec diag(so_dim(s.n_));
        int k = 0;
        for (int i = 0; i < s.n_; ++i)
            for (int j = i + 1; j < s.n_; ++j) diag(k++) = a(i) * a(j) / det;
        s.op_ = diag.asDiagonal();
        s.inv_ = diag.cwiseInverse().asDiagonal();
        s.a_ = std::move(a);
        return s;
    }

    static InertiaSpec generic(int n, const Mat& op) {
        const int d = so_dim(n);
        if (op.rows() != d || op.cols() != d) throw DimensionError("InertiaSpec::generic: operator must be n(n-1)/2 square");
        const double scale = std::max(1.0, op.cwiseAbs().maxCoeff());
        if ((op - op.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
            throw DomainError("InertiaSpec::generic: operator is not symmetric");
        Eigen::LLT<Mat> llt(op);
        if (llt.info() != Eigen::Success) throw DegenerateConfiguration("InertiaSpec::generic: operator is not positive definite");
        InertiaSpec s;
        s.n_ = n;
        s.op_ = 0.5 * (op + op.transpose());
        s.inv_ = llt.solve(Mat::Identity(d, d));
        s.inv_ = 0.5 * (s.inv_ + s.inv_.transpose());
        return s;
    }

    int n() const { return n_; }
    bool is_special() const { return a_.has_value(); }
    const Vec& special_diagonal() const {
        if (!a_) throw DomainError("InertiaSpec: not of special form");
        return *a_;
    }

    /// Operator matrix in so(n) coordinates.
    const Mat& matrix() const { return op_; }
    const Mat& inverse_matrix() const { return inv_; }
    double determinant() const { return op_.determinant(); }

    SkewMatrix apply(const SkewMatrix& x, InertiaDirection dir = InertiaDirection::Forward) const {
        if (x.n() != n_) throw DimensionError("inertia_apply: dimension mismatch");
        const Mat& m = dir == InertiaDirection::Forward ? op_ : inv_;
        return SkewMatrix::from_coords(n_, m * x.coords());
    }

private:
    int n_ = 0;
    Mat op_;
    Mat inv_;
    std::optional<Vec> a_;
};

inline SkewMatrix inertia_apply(const InertiaSpec& spec, const SkewMatrix& x,
                                InertiaDirection dir = InertiaDirection::Forward) {
    return spec.apply(x, dir);
}

// ---------------------------------------------------------------------------
// Frames

/// max |E Eᵀ − Id| for the matrix E whose rows are the frame vectors.
inline double orthonormality_residual(const Mat& rows) {
    const auto r = rows.rows();
    return (rows * rows.transpose() - Mat::Identity(r, r)).cwiseAbs().maxCoeff();
}

/// Modified Gram–Schmidt on rows, two passes. Keeps the order and the
/// orientation of each vector.
inline Mat orthonormalize_rows(Mat rows) {
    for (int pass = 0; pass < 2; ++pass)
        for (Eigen::Index k = 0; k < rows.rows(); ++k) {
            for (Eigen::Index j = 0; j < k; ++j) rows.row(k) -= rows.row(k).dot(rows.row(j)) * rows.row(j);
            const double nrm = rows.row(k).norm();
            if (nrm == 0.0) throw DegenerateConfiguration("orthonormalize_rows: dependent vectors");
            rows.row(k) /= nrm;
        }
    return rows;
}

/// Ordered orthonormal vectors e_1..e_r in R^n, stored as the rows of an
/// r×n matrix. A full frame (r == n) is positively oriented.
class Frame {
public:
    static constexpr double kSnapTolerance = 1e-10;
    static constexpr double kRejectTolerance = 1e-6;
    static constexpr double kDeterminantTolerance = 1e-8;

    explicit Frame(Mat rows) : rows_(std::move(rows)) {
        if (rows_.rows() < 1 || rows_.rows() > rows_.cols())
            throw DimensionError("Frame: need 1 <= r <= n vectors");
        const double res = orthonormality_residual(rows_);
        if (!(res <= kRejectTolerance)) throw DomainError("Frame: vectors are not orthonormal (residual " + std::to_string(res) + ")");
        if (res > kSnapTolerance) rows_ = orthonormalize_rows(rows_);
        if (full() && std::abs(rows_.determinant() - 1.0) > kDeterminantTolerance)
            throw DomainError("Frame: full frame must have determinant +1");
    }

    static Frame identity(int n) { return Frame(Mat::Identity(n, n)); }

    int n() const { return static_cast<int>(rows_.cols()); }
    int r() const { return static_cast<int>(rows_.rows()); }
    bool full() const { return r() == n(); }
    const Mat& rows() const { return rows_; }
    Vec vector(int k) const { return rows_.row(k).transpose(); }

    Frame leading(int r) const {
        if (r < 1 || r > this->r()) throw DimensionError("Frame::leading: bad r");
        Frame f;
        f.rows_ = rows_.topRows(r);
        return f;
    }

    /// Γ = e_1⊗e_1 + … + e_r⊗e_r.
    Mat projector() const { return rows_.transpose() * rows_; }

    /// Extends a partial frame to a positively oriented full frame. For r = 1
    /// this is the Householder reflection sending E_1 to −e_1 applied to
    /// E_2..E_n; for larger r the completion comes from a QR factorisation.
    Frame completed() const {
        if (full()) return *this;
        const int nn = n();
        Mat out(nn, nn);
        out.topRows(r()) = rows_;
        if (r() == 1) {
            const Vec e = vector(0);
            Vec v = e;
            v(0) += 1.0;  // v = E_1 + e_1
            const double vv = v.squaredNorm();
            if (vv < 1e-24) {
                // e_1 = −E_1: fixed convention −E_2, E_3, ..., E_n
                for (int k = 1; k < nn; ++k) out.row(k) = Mat::Identity(nn, nn).row(k);
                out.row(1) *= -1.0;
            } else {
                const Mat h = Mat::Identity(nn, nn) - 2.0 * v * v.transpose() / vv;
                for (int k = 1; k < nn; ++k) out.row(k) = h.col(k).transpose();
            }
        } else {
            Eigen::HouseholderQR<Mat> qr(rows_.transpose());
            const Mat q = qr.householderQ() * Mat::Identity(nn, nn);
            out.bottomRows(nn - r()) = q.rightCols(nn - r()).transpose();
        }
        if (out.determinant() < 0.0) out.row(nn - 1) *= -1.0;
        return Frame(out);
    }

private:
    Frame() = default;
    Mat rows_;
};

// ---------------------------------------------------------------------------
// Constraint planes

/// pr_D(X) = ΓX + XΓ − ΓXΓ for an arbitrary symmetric Γ.
inline SkewMatrix project_with_gamma(const SkewMatrix& x, const Mat& gamma) {
    const Mat& m = x.matrix();
    return SkewMatrix(Mat(gamma * m + m * gamma - gamma * m * gamma));
}

/// Orthogonal projection onto D_r = span{e_k∧e_i : k ≤ r}.
inline SkewMatrix project_constraint_plane(const SkewMatrix& x, const Frame& frame) {
    if (x.n() != frame.n()) throw DimensionError("project_constraint_plane: dimension mismatch");
    return project_with_gamma(x, frame.projector());
}

/// Matrix of X ↦ ΓX + XΓ − ΓXΓ in so(n) coordinates.
inline Mat projector_coords(int n, const Mat& gamma) {
    const int d = so_dim(n);
    Mat p(d, d);
    Vec unit = Vec::Zero(d);
    for (int b = 0; b < d; ++b) {
        unit.setZero();
        unit(b) = 1.0;
        p.col(b) = project_with_gamma(SkewMatrix::from_coords(n, unit), gamma).coords();
    }
    return p;
}

/// Coordinates (as columns) of {e_k∧e_i : 1 ≤ k ≤ r, k < i ≤ n}.
inline Mat constraint_plane_basis(const Mat& full_rows, int r) {
    const int n = static_cast<int>(full_rows.cols());
    std::vector<Vec> cols;
    for (int k = 0; k < r; ++k)
        for (int i = k + 1; i < n; ++i)
            cols.push_back(wedge(full_rows.row(k).transpose(), full_rows.row(i).transpose()).coords());
    Mat b(so_dim(n), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) b.col(static_cast<Eigen::Index>(c)) = cols[c];
    return b;
}

/// Coordinates (as columns) of {e_p∧e_q : r < p < q ≤ n}, a basis of ⊥D_r.
inline Mat constraint_normal_basis(const Mat& full_rows, int r) {
    const int n = static_cast<int>(full_rows.cols());
    std::vector<Vec> cols;
    for (int p = r; p < n; ++p)
        for (int q = p + 1; q < n; ++q)
            cols.push_back(wedge(full_rows.row(p).transpose(), full_rows.row(q).transpose()).coords());
    Mat b(so_dim(n), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) b.col(static_cast<Eigen::Index>(c)) = cols[c];
    return b;
}

// ---------------------------------------------------------------------------
// Plücker coordinates and restricted determinants

struct PluckerEntry {
    std::vector<int> indices;  // zero based, increasing
    double value = 0.0;
};

namespace detail {
inline void for_each_combination(int n, int r, const auto& fn) {
    std::vector<int> idx(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) idx[static_cast<std::size_t>(i)] = i;
    while (true) {
        fn(idx);
        int i = r - 1;
        while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - r + i) --i;
        if (i < 0) return;
        ++idx[static_cast<std::size_t>(i)];
        for (int j = i + 1; j < r; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
    }
}
}  // namespace detail

/// r×r minors of the n×r matrix (e_1 … e_r), in lexicographic order of the
/// row multi-index.
inline std::vector<PluckerEntry> plucker_coords(const Frame& frame) {
    const int n = frame.n();
    const int r = frame.r();
    if (r >= n) throw DimensionError("plucker_coords: need r < n");
    const Mat cols = frame.rows().transpose();
    std::vector<PluckerEntry> out;
    detail::for_each_combination(n, r, [&](const std::vector<int>& idx) {
        Mat minor(r, r);
        for (int a = 0; a < r; ++a) minor.row(a) = cols.row(idx[static_cast<std::size_t>(a)]);
        out.push_back({idx, minor.determinant()});
    });
    return out;
}

struct RestrictedDeterminants {
    std::optional<double> mu;          // sqrt det(I^{-1}|⊥D_r); needs a full frame
    double mu_tilde = 0.0;             // sqrt det(I|D_r)
    std::optional<double> p_special;   // normalised P_{n,r}, special inertia only
    std::optional<double> rho_estimate;  // log_{det A} of the normalisation constant
};

namespace detail {
inline double gram_determinant(const Mat& basis, const Mat& op, const char* what) {
    if (basis.cols() == 0) return 1.0;
    const Mat g = basis.transpose() * op * basis;
    Eigen::LLT<Mat> llt(g);
    if (llt.info() != Eigen::Success) throw DegenerateConfiguration(std::string(what) + ": Gram matrix is singular");
    const double d = g.determinant();
    if (!(d > 0.0)) throw DegenerateConfiguration(std::string(what) + ": Gram matrix is singular");
    return d;
}

inline double special_sum(const Vec& a, const Frame& partial) {
    double s = 0.0;
    for (const auto& e : plucker_coords(partial)) {
        double prod = 1.0;
        for (int i : e.indices) prod *= a(i);
        s += prod * e.value * e.value;
    }
    return s;
}
}  // namespace detail

/// det(I|D_r), evaluated in the {e_k∧e_i} basis of a (completed) frame.
inline double restricted_inertia_det(const InertiaSpec& spec, const Frame& frame, int r) {
    const Frame full = frame.completed();
    return detail::gram_determinant(constraint_plane_basis(full.rows(), r), spec.matrix(), "restricted_determinants");
}

inline RestrictedDeterminants restricted_determinants(const InertiaSpec& spec, const Frame& frame, int r) {
    const int n = frame.n();
    if (spec.n() != n) throw DimensionError("restricted_determinants: dimension mismatch");
    if (r < 1 || r > n - 1 || r > frame.r()) throw DimensionError("restricted_determinants: need 1 <= r <= min(n-1, frame size)");
    RestrictedDeterminants out;
    const Frame partial = frame.leading(r);
    const double det_d = restricted_inertia_det(spec, partial, r);
    out.mu_tilde = std::sqrt(det_d);
    if (frame.full()) {
        const double det_perp =
            detail::gram_determinant(constraint_normal_basis(frame.rows(), r), spec.inverse_matrix(), "restricted_determinants");
        out.mu = std::sqrt(det_perp);
    }
    if (spec.is_special()) {
        const Vec& a = spec.special_diagonal();
        const int power = n - r - 1;
        // normalisation at the coordinate frame e_i = E_i, where Σ = A_1⋯A_r
        const double ref = restricted_inertia_det(spec, Frame::identity(n).leading(r), r);
        const double c = ref / std::pow(a.head(r).prod(), power);
        out.p_special = c * std::pow(detail::special_sum(a, partial), power);
        const double log_det_a = std::log(a.prod());
        if (std::abs(log_det_a) > 1e-6) out.rho_estimate = std::log(c) / log_det_a;
    }
    return out;
}

/// Hat map R^3 → so(3): ω_ij = −ε_ijk Ω_k, so ω x = Ω × x.
inline SkewMatrix hat3(const Eigen::Vector3d& v) {
    Mat m(3, 3);
    m << 0.0, -v(2), v(1), v(2), 0.0, -v(0), -v(1), v(0), 0.0;
    return SkewMatrix(m);
}

inline Eigen::Vector3d vee3(const SkewMatrix& s) {
    if (s.n() != 3) throw DimensionError("vee3: need n = 3");
    return {s(2, 1), s(0, 2), s(1, 0)};
}

}  // namespace lrsys
