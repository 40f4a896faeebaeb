#include <cmath>
#include <random>

#include "catch_amalgamated.hpp"

#include "lrsys/son_algebra.hpp"
#include "test_support.hpp"

using namespace lrsys;
using namespace lrsys::testing;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {
Vec basis_vec(int n, int i) { return Vec::Unit(n, i); }
}  // namespace

TEST_CASE("skew matrices keep only the antisymmetric part", "[son]") {
    Mat m(3, 3);
    m << 1, 2, 3, 4, 5, 6, 7, 8, 9;
    const SkewMatrix s(m);
    CHECK(s(0, 0) == 0.0);
    CHECK(s(0, 1) == -1.0);
    CHECK(s(1, 0) == 1.0);
    CHECK(s(0, 2) == -2.0);
    CHECK_THROWS_AS(SkewMatrix(Mat(2, 3)), DimensionError);

    std::mt19937_64 rng(1);
    const SkewMatrix x = random_skew(rng, 5);
    CHECK(SkewMatrix::from_coords(5, x.coords()).matrix() == x.matrix());
}

TEST_CASE("Killing inner product on basis and random elements", "[son]") {
    const int n = 4;
    const SkewMatrix e12 = wedge(basis_vec(n, 0), basis_vec(n, 1));
    const SkewMatrix e13 = wedge(basis_vec(n, 0), basis_vec(n, 2));
    CHECK(killing_inner(e12, e12) == 1.0);
    CHECK(killing_inner(e12, e13) == 0.0);
    // −½ tr(XY) agrees with the coordinate dot product
    std::mt19937_64 rng(2);
    for (int k = 0; k < 20; ++k) {
        const SkewMatrix x = random_skew(rng, 5);
        const SkewMatrix y = random_skew(rng, 5);
        CHECK_THAT(killing_inner(x, y), WithinAbs(x.coords().dot(y.coords()), 1e-12));
        CHECK_THAT(killing_inner(x, y), WithinAbs(-0.5 * (x.matrix() * y.matrix()).trace(), 1e-12));
    }
}

TEST_CASE("wedge and commutator", "[son]") {
    std::mt19937_64 rng(3);
    const Vec a = gaussian_vec(rng, 4);
    const Vec b = gaussian_vec(rng, 4);
    CHECK((wedge(a, b).matrix() + wedge(b, a).matrix()).norm() == 0.0);
    const SkewMatrix x = random_skew(rng, 4);
    const SkewMatrix y = random_skew(rng, 4);
    CHECK((commutator(x, y) + commutator(y, x)).matrix().norm() < 1e-14);
    CHECK_THROWS_AS(wedge(a, Vec::Ones(3)), DimensionError);
}

TEST_CASE("special inertia acts entrywise by A_i A_j / det A", "[son]") {
    const InertiaSpec iso = InertiaSpec::special(Vec::Ones(3));
    std::mt19937_64 rng(4);
    const SkewMatrix x = random_skew(rng, 3);
    CHECK((iso.apply(x).matrix() - x.matrix()).norm() < 1e-15);

    Vec a(3);
    a << 1, 2, 3;
    const InertiaSpec spec = InertiaSpec::special(a);
    const SkewMatrix e12 = wedge(basis_vec(3, 0), basis_vec(3, 1));
    CHECK_THAT(spec.apply(e12)(0, 1), WithinAbs(1.0 / 3.0, 1e-15));

    const SkewMatrix y = random_skew(rng, 3);
    CHECK((spec.apply(spec.apply(y), InertiaDirection::Inverse).matrix() - y.matrix()).norm() < 1e-12);
    CHECK_THROWS_AS(InertiaSpec::special(Vec::Ones(3) * -1.0), DomainError);
}

TEST_CASE("generic inertia matches componentwise scaling and inverts", "[son]") {
    const int n = 4;
    Vec d(so_dim(n));
    d << 1.5, 0.5, 2.0, 3.0, 0.7, 1.1;
    const InertiaSpec diag = InertiaSpec::generic(n, Mat(d.asDiagonal()));
    std::mt19937_64 rng(5);
    const SkewMatrix x = random_skew(rng, n);
    CHECK((diag.apply(x).coords() - d.cwiseProduct(x.coords())).norm() < 1e-14);

    const InertiaSpec gen = InertiaSpec::generic(n, random_spd(rng, so_dim(n)));
    CHECK((gen.apply(gen.apply(x), InertiaDirection::Inverse).coords() - x.coords()).norm() < 1e-12);

    Mat singular = Mat::Identity(so_dim(n), so_dim(n));
    singular(2, 2) = -1.0;
    CHECK_THROWS_AS(InertiaSpec::generic(n, singular), DegenerateConfiguration);
}

TEST_CASE("frames snap small drift and reject large drift", "[son]") {
    std::mt19937_64 rng(6);
    Mat g = random_rotation(rng, 4);
    Mat nudged = g;
    nudged(0, 0) += 1e-8;
    const Frame f(nudged);
    CHECK(orthonormality_residual(f.rows()) < 1e-14);
    Mat bad = g;
    bad(1, 1) += 1e-3;
    CHECK_THROWS_AS(Frame(bad), DomainError);
    Mat flipped = g;
    flipped.row(3) *= -1.0;
    CHECK_THROWS_AS(Frame(flipped), DomainError);
}

TEST_CASE("frame completion is orthonormal, positive and keeps the leading rows", "[son]") {
    std::mt19937_64 rng(7);
    for (int r = 1; r <= 3; ++r) {
        const Mat g = random_rotation(rng, 5);
        const Frame partial(Mat(g.topRows(r)));
        const Frame full = partial.completed();
        CHECK(full.full());
        CHECK(orthonormality_residual(full.rows()) < 1e-12);
        CHECK_THAT(full.rows().determinant(), WithinAbs(1.0, 1e-12));
        CHECK((full.rows().topRows(r) - g.topRows(r)).norm() < 1e-12);
    }
    // antipodal convention for e_1 = −E_1
    Mat m = Mat::Zero(1, 3);
    m(0, 0) = -1.0;
    const Frame c = Frame(m).completed();
    CHECK_THAT(c.rows().determinant(), WithinAbs(1.0, 1e-15));
}

TEST_CASE("constraint-plane projection", "[son]") {
    std::mt19937_64 rng(8);
    const SkewMatrix x = random_skew(rng, 4);
    CHECK((project_constraint_plane(x, Frame::identity(4)).matrix() - x.matrix()).norm() < 1e-14);

    const SkewMatrix y = random_skew(rng, 3);
    const SkewMatrix py = project_constraint_plane(y, Frame(Mat(Mat::Identity(3, 3).topRows(1))));
    CHECK(py(0, 1) == y(0, 1));
    CHECK(py(0, 2) == y(0, 2));
    CHECK(py(1, 2) == 0.0);

    for (int r = 1; r <= 3; ++r) {
        const Frame f(Mat(random_rotation(rng, 5).topRows(r)));
        const SkewMatrix a = random_skew(rng, 5);
        const SkewMatrix b = random_skew(rng, 5);
        const SkewMatrix pa = project_constraint_plane(a, f);
        CHECK((project_constraint_plane(pa, f).matrix() - pa.matrix()).norm() < 1e-12);
        CHECK_THAT(killing_inner(pa, b), WithinAbs(killing_inner(a, project_constraint_plane(b, f)), 1e-12));
    }
}

TEST_CASE("constraint plane and normal bases span complementary subspaces", "[son]") {
    std::mt19937_64 rng(9);
    const int n = 5;
    for (int r = 1; r < n; ++r) {
        const Mat g = random_rotation(rng, n);
        const Mat d = constraint_plane_basis(g, r);
        const Mat perp = constraint_normal_basis(g, r);
        CHECK(d.cols() == r * n - r * (r + 1) / 2);
        CHECK(d.cols() + perp.cols() == so_dim(n));
        CHECK((d.transpose() * perp).norm() < 1e-12);
    }
}

TEST_CASE("Plücker coordinates", "[son]") {
    std::mt19937_64 rng(10);
    const Vec e = unit_vec(rng, 4);
    const auto c1 = plucker_coords(Frame(Mat(e.transpose())));
    REQUIRE(c1.size() == 4);
    for (const auto& entry : c1) CHECK_THAT(entry.value, WithinAbs(e(entry.indices[0]), 1e-15));

    const auto c2 = plucker_coords(Frame(Mat(Mat::Identity(4, 4).topRows(2))));
    for (const auto& entry : c2) CHECK(entry.value == ((entry.indices == std::vector<int>{0, 1}) ? 1.0 : 0.0));

    for (int r = 1; r <= 3; ++r) {
        double s = 0.0;
        for (const auto& entry : plucker_coords(Frame(Mat(random_rotation(rng, 5).topRows(r))))) s += entry.value * entry.value;
        CHECK_THAT(s, WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("restricted determinants: direct Gram construction", "[son]") {
    Vec a(3);
    a << 1, 2, 3;
    const auto d = restricted_determinants(InertiaSpec::special(a), Frame::identity(3), 1);
    // D_1 = span{E1∧E2, E1∧E3} with diagonal Gram (1/3, 1/2)
    CHECK_THAT(d.mu_tilde, WithinAbs(std::sqrt(1.0 / 6.0), 1e-15));
    REQUIRE(d.mu);
    // ⊥D_1 = span{E2∧E3} with I⁻¹ entry det A/(A_2 A_3) = 1
    CHECK_THAT(*d.mu, WithinAbs(1.0, 1e-14));
}

TEST_CASE("measure duality mu^2 = det(I^-1) mu_tilde^2", "[son]") {
    std::mt19937_64 rng(11);
    for (int n : {3, 4, 5}) {
        const InertiaSpec special = InertiaSpec::special(spread_axes(n));
        const InertiaSpec generic = InertiaSpec::generic(n, random_spd(rng, so_dim(n)));
        for (const InertiaSpec* spec : {&special, &generic}) {
            const double det_inv = spec->inverse_matrix().determinant();
            for (int r = 1; r < n; ++r)
                for (int k = 0; k < 10; ++k) {
                    const auto d = restricted_determinants(*spec, Frame(random_rotation(rng, n)), r);
                    CHECK_THAT(*d.mu * *d.mu, WithinRel(det_inv * d.mu_tilde * d.mu_tilde, 1e-10));
                }
        }
    }
}

TEST_CASE("mu_tilde follows the Plücker formula for special inertia", "[son]") {
    std::mt19937_64 rng(12);
    for (int n : {4, 5})
        for (int r : {1, 2}) {
            const InertiaSpec spec = InertiaSpec::special(spread_axes(n));
            double lo = 1e300;
            double hi = -1e300;
            for (int k = 0; k < 100; ++k) {
                const auto d = restricted_determinants(spec, Frame(Mat(random_rotation(rng, n).topRows(r))), r);
                const double ratio = d.mu_tilde * d.mu_tilde / *d.p_special;
                lo = std::min(lo, ratio);
                hi = std::max(hi, ratio);
            }
            CHECK((hi - lo) / lo < 1e-8);
        }
}

TEST_CASE("mu_tilde for r = 1 scales as (e1, A e1)^((n-2)/2)", "[son]") {
    std::mt19937_64 rng(13);
    for (int n : {4, 5}) {
        const Vec a = spread_axes(n);
        const InertiaSpec spec = InertiaSpec::special(a);
        double first = 0.0;
        for (int k = 0; k < 20; ++k) {
            const Vec e = unit_vec(rng, n);
            const auto d = restricted_determinants(spec, Frame(Mat(e.transpose())), 1);
            const double ratio = d.mu_tilde / std::pow(e.dot(a.cwiseProduct(e)), 0.5 * (n - 2));
            if (k == 0) first = ratio;
            CHECK_THAT(ratio, WithinRel(first, 1e-10));
        }
    }
}

TEST_CASE("mu_tilde is frame independent without constraints (r = n-1)", "[son]") {
    std::mt19937_64 rng(14);
    const InertiaSpec spec = InertiaSpec::generic(4, random_spd(rng, 6));
    const double ref = restricted_determinants(spec, Frame::identity(4), 3).mu_tilde;
    for (int k = 0; k < 100; ++k)
        CHECK_THAT(restricted_determinants(spec, Frame(random_rotation(rng, 4)), 3).mu_tilde, WithinRel(ref, 1e-10));
}

TEST_CASE("hat map convention", "[son]") {
    const Eigen::Vector3d w(0.3, -1.2, 0.5);
    const Eigen::Vector3d x(1.0, 2.0, -0.7);
    CHECK((hat3(w).matrix() * x - w.cross(x)).norm() < 1e-15);
    CHECK((vee3(hat3(w)) - w).norm() == 0.0);
}
