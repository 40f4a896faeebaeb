#pragma once

// ODE integration: Dormand–Prince 5(4) with PI step control, fixed-step RK4,
// trajectories with cubic Hermite dense output, manifold stabilisation and
// integration in a reparametrised time.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lrsys/errors.hpp"

namespace lrsys {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// dy/dt = f(t, y).
using VectorField = std::function<Vec(double, const Vec&)>;
using Stabilizer = std::function<Vec(const Vec&)>;

struct Diagnostic {
    std::string name;
    std::function<double(double, const Vec&)> eval;
};

struct IntegratorConfig {
    enum class Method { Rk4Fixed, Adaptive };

    Method method = Method::Adaptive;
    double step = 1e-3;  // Rk4Fixed only
    double rel_tol = 1e-10;
    double abs_tol = 1e-12;
    double min_step = 1e-14;
    double max_step = std::numeric_limits<double>::infinity();
    double horizon = 1.0;
    int stabilize_every = 0;  // accepted steps between projections; 0 disables
    long max_steps = 20'000'000;
    std::vector<double> output_times;  // landed on exactly when inside (t0, t0+horizon]

    void validate() const {
        if (!(horizon > 0.0)) throw DomainError("IntegratorConfig: horizon must be positive");
        if (method == Method::Rk4Fixed) {
            if (!(step > 0.0)) throw DomainError("IntegratorConfig: step must be positive");
        } else {
            if (!(rel_tol > 0.0 && rel_tol < 1.0)) throw DomainError("IntegratorConfig: rel_tol must lie in (0,1)");
            if (!(abs_tol > 0.0 && abs_tol < 1.0)) throw DomainError("IntegratorConfig: abs_tol must lie in (0,1)");
            if (!(min_step > 0.0 && max_step > 0.0 && min_step <= max_step))
                throw DomainError("IntegratorConfig: step bounds must be positive and ordered");
        }
        if (stabilize_every < 0) throw DomainError("IntegratorConfig: stabilize_every must be >= 0");
    }

    static IntegratorConfig adaptive(double horizon, double rel_tol = 1e-10, double abs_tol = 1e-12) {
        IntegratorConfig c;
        c.horizon = horizon;
        c.rel_tol = rel_tol;
        c.abs_tol = abs_tol;
        return c;
    }

    static IntegratorConfig rk4(double horizon, double step) {
        IntegratorConfig c;
        c.method = Method::Rk4Fixed;
        c.horizon = horizon;
        c.step = step;
        return c;
    }
};

/// Time-stamped states with derivatives (for Hermite interpolation) and
/// per-sample diagnostics.
class Trajectory {
public:
    std::vector<std::string> layout;
    std::vector<double> times;
    std::vector<Vec> states;
    std::vector<Vec> rates;
    std::vector<std::string> diagnostic_names;
    std::vector<std::vector<double>> diagnostics;  // [sample][diagnostic]
    long accepted_steps = 0;
    long rejected_steps = 0;

    std::size_t size() const { return times.size(); }
    double t_begin() const { return times.front(); }
    double t_end() const { return times.back(); }
    const Vec& final_state() const { return states.back(); }

    /// Cubic Hermite interpolation on the accepted interval containing t.
    Vec at(double t) const {
        if (times.empty()) throw DomainError("Trajectory::at: empty trajectory");
        if (t <= times.front()) return states.front();
        if (t >= times.back()) return states.back();
        const auto it = std::upper_bound(times.begin(), times.end(), t);
        const auto k = static_cast<std::size_t>(it - times.begin()) - 1;
        const double h = times[k + 1] - times[k];
        const double s = (t - times[k]) / h;
        const double h00 = (1 + 2 * s) * (1 - s) * (1 - s);
        const double h10 = s * (1 - s) * (1 - s);
        const double h01 = s * s * (3 - 2 * s);
        const double h11 = s * s * (s - 1);
        return h00 * states[k] + h10 * h * rates[k] + h01 * states[k + 1] + h11 * h * rates[k + 1];
    }

    std::size_t diagnostic_index(const std::string& name) const {
        const auto it = std::find(diagnostic_names.begin(), diagnostic_names.end(), name);
        if (it == diagnostic_names.end()) throw DomainError("Trajectory: unknown diagnostic " + name);
        return static_cast<std::size_t>(it - diagnostic_names.begin());
    }

    std::vector<double> diagnostic_series(const std::string& name) const {
        const auto k = diagnostic_index(name);
        std::vector<double> out;
        out.reserve(diagnostics.size());
        for (const auto& row : diagnostics) out.push_back(row[k]);
        return out;
    }

    /// max_t |d(t) − d(t_0)|.
    double max_drift(const std::string& name) const {
        const auto s = diagnostic_series(name);
        double m = 0.0;
        for (double v : s) m = std::max(m, std::abs(v - s.front()));
        return m;
    }

    /// max_t |d(t) − d(t_0)| / max(|d(t_0)|, floor).
    double max_relative_drift(const std::string& name, double floor = 1e-300) const {
        const auto s = diagnostic_series(name);
        return max_drift(name) / std::max(std::abs(s.front()), floor);
    }

    double max_abs(const std::string& name) const {
        double m = 0.0;
        for (double v : diagnostic_series(name)) m = std::max(m, std::abs(v));
        return m;
    }
};

namespace detail {

inline double error_norm(const Vec& err, const Vec& y0, const Vec& y1, double rtol, double atol) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < err.size(); ++i) {
        const double sc = atol + rtol * std::max(std::abs(y0(i)), std::abs(y1(i)));
        const double e = err(i) / sc;
        acc += e * e;
    }
    return std::sqrt(acc / static_cast<double>(std::max<Eigen::Index>(1, err.size())));
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

struct Recorder {
    Trajectory& traj;
    const std::vector<Diagnostic>& diags;

    void push(double t, const Vec& y, const Vec& f) {
        traj.times.push_back(t);
        traj.states.push_back(y);
        traj.rates.push_back(f);
        std::vector<double> row;
        row.reserve(diags.size());
        for (const auto& d : diags) row.push_back(d.eval(t, y));
        traj.diagnostics.push_back(std::move(row));
    }
};

inline std::vector<double> sorted_targets(const IntegratorConfig& c, double t0, double t1) {
    std::vector<double> out;
    for (double t : c.output_times)
        if (t > t0 && t < t1) out.push_back(t);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    out.push_back(t1);
    return out;
}

}  // namespace detail

/// Integrates y' = f(t,y) from t0 over config.horizon. Every accepted step is
/// recorded; output_times are hit exactly.
inline Trajectory integrate_flow(const VectorField& field, const Vec& initial, const IntegratorConfig& config,
                                 const std::vector<Diagnostic>& diagnostics = {}, const Stabilizer& stabilizer = {},
                                 double t0 = 0.0) {
    config.validate();
    Trajectory traj;
    for (const auto& d : diagnostics) traj.diagnostic_names.push_back(d.name);
    detail::Recorder rec{traj, diagnostics};

    const double t_final = t0 + config.horizon;
    const auto targets = detail::sorted_targets(config, t0, t_final);
    std::size_t next_target = 0;

    double t = t0;
    Vec y = initial;
    if (config.stabilize_every > 0 && stabilizer) y = stabilizer(y);
    Vec f = field(t, y);
    if (!detail::all_finite(f)) throw IntegrationError("integrate_flow: non-finite derivative at start", t, y);
    rec.push(t, y, f);
    long since_stab = 0;

    auto after_accept = [&](double tn, Vec yn, Vec fn) {
        ++traj.accepted_steps;
        if (config.stabilize_every > 0 && stabilizer && ++since_stab >= config.stabilize_every) {
            since_stab = 0;
            yn = stabilizer(yn);
            fn = field(tn, yn);
        }
        t = tn;
        y = std::move(yn);
        f = std::move(fn);
        rec.push(t, y, f);
        while (next_target < targets.size() && targets[next_target] <= t) ++next_target;
    };

    if (config.method == IntegratorConfig::Method::Rk4Fixed) {
        while (next_target < targets.size()) {
            const double goal = targets[next_target];
            double h = std::min(config.step, goal - t);
            if (goal - t - h < 1e-12 * std::max(1.0, std::abs(goal))) h = goal - t;
            const Vec k1 = f;
            const Vec k2 = field(t + 0.5 * h, y + 0.5 * h * k1);
            const Vec k3 = field(t + 0.5 * h, y + 0.5 * h * k2);
            const Vec k4 = field(t + h, y + h * k3);
            Vec yn = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            const double tn = (h == goal - t) ? goal : t + h;
            Vec fn = field(tn, yn);
            if (!detail::all_finite(yn) || !detail::all_finite(fn))
                throw IntegrationError("integrate_flow: non-finite state", t, y);
            after_accept(tn, std::move(yn), std::move(fn));
            if (traj.accepted_steps > config.max_steps) throw IntegrationError("integrate_flow: step budget exhausted", t, y);
        }
        return traj;
    }

    // Dormand–Prince 5(4)
    constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    constexpr double a21 = 1.0 / 5;
    constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                     a65 = -5103.0 / 18656;
    constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784, a76 = 11.0 / 84;
    constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                     e6 = 22.0 / 525, e7 = -1.0 / 40;

    const double rtol = config.rel_tol;
    const double atol = config.abs_tol;

    // initial step (Hairer–Nørsett–Wanner heuristic)
    double h;
    {
        Vec sc(y.size());
        for (Eigen::Index i = 0; i < y.size(); ++i) sc(i) = atol + rtol * std::abs(y(i));
        const double d0 = std::sqrt((y.cwiseQuotient(sc)).squaredNorm() / std::max<double>(1.0, y.size()));
        const double d1 = std::sqrt((f.cwiseQuotient(sc)).squaredNorm() / std::max<double>(1.0, y.size()));
        double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
        h0 = std::min(h0, t_final - t);
        const Vec y1 = y + h0 * f;
        const Vec f1 = field(t + h0, y1);
        const double d2 = std::sqrt(((f1 - f).cwiseQuotient(sc)).squaredNorm() / std::max<double>(1.0, y.size())) / h0;
        const double dm = std::max(d1, d2);
        const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
        h = std::min({100 * h0, h1, config.max_step});
    }

    constexpr double beta = 0.04;
    constexpr double expo1 = 0.2 - beta * 0.75;
    double facold = 1e-4;
    bool last_rejected = false;

    while (next_target < targets.size()) {
        const double goal = targets[next_target];
        h = std::min(h, config.max_step);
        bool lands = false;
        if (t + h >= goal || goal - (t + h) < 1e-12 * std::max(1.0, std::abs(goal))) {
            h = goal - t;
            lands = true;
        }
        if (h < config.min_step && !lands) throw IntegrationError("integrate_flow: step size underflow", t, y);

        const Vec& k1 = f;
        const Vec k2 = field(t + c2 * h, y + h * (a21 * k1));
        const Vec k3 = field(t + c3 * h, y + h * (a31 * k1 + a32 * k2));
        const Vec k4 = field(t + c4 * h, y + h * (a41 * k1 + a42 * k2 + a43 * k3));
        const Vec k5 = field(t + c5 * h, y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
        const Vec k6 = field(t + h, y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
        Vec yn = y + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
        const double tn = lands ? goal : t + h;
        Vec k7 = field(tn, yn);
        const Vec errv = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
        double err = detail::error_norm(errv, y, yn, rtol, atol);
        if (!std::isfinite(err) || !detail::all_finite(k7)) err = 1e10;

        const double fac11 = std::pow(std::max(err, 1e-300), expo1);
        if (err <= 1.0) {
            double fac = fac11 / std::pow(facold, beta);
            fac = std::clamp(fac / 0.9, 0.2, 10.0);
            double hnew = h / fac;
            facold = std::max(err, 1e-4);
            if (last_rejected) hnew = std::min(hnew, h);
            last_rejected = false;
            after_accept(tn, std::move(yn), std::move(k7));
            if (traj.accepted_steps > config.max_steps) throw IntegrationError("integrate_flow: step budget exhausted", t, y);
            h = hnew;
        } else {
            ++traj.rejected_steps;
            last_rejected = true;
            h = h / std::min(5.0, fac11 / 0.9);
            if (h < config.min_step) throw IntegrationError("integrate_flow: step size underflow", t, y);
        }
    }
    return traj;
}

// ---------------------------------------------------------------------------
// Reparametrised integration

/// Integrates dy/dv = f(u, y)·φ(u, y), du/dv = φ(u, y). The returned
/// trajectory is indexed by v and carries u as its last state component.
inline Trajectory reparametrized_integrate(const VectorField& field_in_u,
                                          const std::function<double(double, const Vec&)>& factor,
                                          const Vec& initial, const IntegratorConfig& config,
                                          const std::vector<Diagnostic>& diagnostics = {}, double u0 = 0.0) {
    const auto m = initial.size();
    auto aug = [&](double /*v*/, const Vec& z) -> Vec {
        const double u = z(m);
        const Vec y = z.head(m);
        const double phi = factor(u, y);
        if (!(phi > 0.0)) throw DomainError("reparametrized_integrate: time factor must be positive");
        Vec out(m + 1);
        out.head(m) = phi * field_in_u(u, y);
        out(m) = phi;
        return out;
    };
    Vec z0(m + 1);
    z0.head(m) = initial;
    z0(m) = u0;
    std::vector<Diagnostic> wrapped;
    for (const auto& d : diagnostics)
        wrapped.push_back({d.name, [d, m](double, const Vec& z) { return d.eval(z(m), z.head(m)); }});
    Trajectory traj = integrate_flow(aug, z0, config, wrapped);
    for (std::size_t k = 1; k < traj.size(); ++k)
        if (!(traj.states[k](m) > traj.states[k - 1](m)))
            throw DomainError("reparametrized_integrate: u(v) is not strictly increasing");
    return traj;
}

// ---------------------------------------------------------------------------
// Stabilisation

struct ManifoldLayout {
    enum class Kind { FrameOrthonormal, SphereCotangent, StiefelCotangent };
    Kind kind = Kind::SphereCotangent;
    int n = 0;
    int r = 1;
    Eigen::Index offset = 0;  // start of the frame or of X inside the flat state
};

namespace detail {

/// Rows e_1..e_r stored contiguously (row-major) at offset.
inline Mat read_rows(const Vec& s, Eigen::Index off, int r, int n) {
    Mat m(r, n);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < n; ++j) m(i, j) = s(off + i * n + j);
    return m;
}

inline void write_rows(Vec& s, Eigen::Index off, const Mat& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) s(off + i * m.cols() + j) = m(i, j);
}

/// Column-major n×r block at offset.
inline Mat read_block(const Vec& s, Eigen::Index off, int n, int r) {
    return Eigen::Map<const Mat>(s.data() + off, n, r);
}

inline void write_block(Vec& s, Eigen::Index off, const Mat& m) {
    Eigen::Map<Mat>(s.data() + off, m.rows(), m.cols()) = m;
}

}  // namespace detail

/// Residual of the manifold constraints at a flat state.
inline double manifold_residual(const Vec& state, const ManifoldLayout& m) {
    using K = ManifoldLayout::Kind;
    if (m.kind == K::FrameOrthonormal) {
        const Mat e = detail::read_rows(state, m.offset, m.r, m.n);
        return (e * e.transpose() - Mat::Identity(m.r, m.r)).cwiseAbs().maxCoeff();
    }
    const Mat x = detail::read_block(state, m.offset, m.n, m.r);
    const Mat p = detail::read_block(state, m.offset + m.n * m.r, m.n, m.r);
    const double a = (x.transpose() * x - Mat::Identity(m.r, m.r)).cwiseAbs().maxCoeff();
    const double b = (x.transpose() * p + p.transpose() * x).cwiseAbs().maxCoeff();
    return std::max(a, b);
}

/// Projects a nearby state back onto the manifold. Frames: Gram–Schmidt in
/// row order (orientation of every vector kept). Cotangent bundles: polar
/// factor of X, then P ← P − X·sym(XᵀP).
inline Vec stabilize_state(const Vec& state, const ManifoldLayout& m) {
    if (m.n < 1 || m.r < 1 || m.r > m.n) throw DimensionError("stabilize_state: bad layout");
    const Eigen::Index need = m.offset + (m.kind == ManifoldLayout::Kind::FrameOrthonormal ? m.r * m.n : 2 * m.n * m.r);
    if (state.size() < need) throw DimensionError("stabilize_state: state too short for layout");
    if (!(manifold_residual(state, m) < 1e-3)) throw DomainError("stabilize_state: residual too large to project");

    Vec out = state;
    if (m.kind == ManifoldLayout::Kind::FrameOrthonormal) {
        Mat e = detail::read_rows(state, m.offset, m.r, m.n);
        for (int pass = 0; pass < 2; ++pass)
            for (int k = 0; k < m.r; ++k) {
                for (int j = 0; j < k; ++j) e.row(k) -= e.row(k).dot(e.row(j)) * e.row(j);
                e.row(k) /= e.row(k).norm();
            }
        detail::write_rows(out, m.offset, e);
        return out;
    }
    Mat x = detail::read_block(state, m.offset, m.n, m.r);
    Mat p = detail::read_block(state, m.offset + m.n * m.r, m.n, m.r);
    if (m.r == 1) {
        x /= x.norm();
    } else {
        Eigen::JacobiSVD<Mat> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
        x = svd.matrixU() * svd.matrixV().transpose();
    }
    const Mat xtp = x.transpose() * p;
    p -= x * (0.5 * (xtp + xtp.transpose()));
    detail::write_block(out, m.offset, x);
    detail::write_block(out, m.offset + m.n * m.r, p);
    return out;
}

// ---------------------------------------------------------------------------
// Verification helpers

/// Fourth-order central difference of a vector-valued function of t.
inline Vec central_difference4(const std::function<Vec(double)>& fn, double t, double h) {
    return (fn(t - 2 * h) - 8.0 * fn(t - h) + 8.0 * fn(t + h) - fn(t + 2 * h)) / (12.0 * h);
}

}  // namespace lrsys
