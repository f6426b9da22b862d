#pragma once

// Parameter transforms and the outer optimiser for approximate maximum
// likelihood: the objective sums, over time, the fit of the filtered state
// minus the realised KL divergence between filtered and predicted beliefs.

#include <gsl/gsl_errno.h>
#include <gsl/gsl_multimin.h>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "bf/errors.hpp"
#include "bf/filter.hpp"
#include "bf/kalman.hpp"
#include "bf/numerics.hpp"
#include "bf/obsmodels.hpp"

namespace bf {

enum class TKind { Identity, Log, Atanh, Ball };

struct Transform {
    TKind kind = TKind::Identity;
    int size = 1;
    double lower = 0.0;  // Log: x = lower + exp(u)
};

inline constexpr double kBoundaryPullIn = 1e-8;

// Named natural parameters with per-block bijections onto R^d.
struct ParamLayout {
    std::vector<std::string> names;
    std::vector<Transform> blocks;

    int dim() const {
        int d = 0;
        for (const auto& b : blocks) d += b.size;
        return d;
    }

    void add(const std::string& name, TKind kind, double lower = 0.0) {
        names.push_back(name);
        blocks.push_back({kind, 1, lower});
    }
    void add_ball(const std::vector<std::string>& ns) {
        names.insert(names.end(), ns.begin(), ns.end());
        blocks.push_back({TKind::Ball, static_cast<int>(ns.size()), 0.0});
    }

    int index_of(const std::string& name) const {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int>(i);
        return -1;
    }

    Vec to_unconstrained(const Vec& x) const {
        if (x.size() != dim()) throw Error(Errc::OutOfDomain, "parameter vector has the wrong length");
        Vec u(x.size());
        int i = 0;
        for (const auto& b : blocks) {
            switch (b.kind) {
                case TKind::Identity: u(i) = x(i); break;
                case TKind::Log: {
                    const double s = x(i) - b.lower;
                    if (!(s >= 0.0)) throw Error(Errc::OutOfDomain, names[i] + " below its lower bound");
                    u(i) = std::log(std::max(s, kBoundaryPullIn));
                    break;
                }
                case TKind::Atanh: {
                    if (!(std::abs(x(i)) <= 1.0)) throw Error(Errc::OutOfDomain, names[i] + " outside (-1, 1)");
                    u(i) = std::atanh(std::clamp(x(i), -1.0 + kBoundaryPullIn, 1.0 - kBoundaryPullIn));
                    break;
                }
                case TKind::Ball: {
                    const Vec v = x.segment(i, b.size);
                    const double r = v.norm();
                    if (!(r <= 1.0)) throw Error(Errc::OutOfDomain, "ball block has radius >= 1");
                    const double rc = std::min(r, 1.0 - kBoundaryPullIn);
                    u.segment(i, b.size) = r > 0.0 ? Vec(v * (std::atanh(rc) / r)) : Vec(v);
                    break;
                }
            }
            i += b.size;
        }
        return u;
    }

    Vec to_natural(const Vec& u) const {
        Vec x(u.size());
        int i = 0;
        for (const auto& b : blocks) {
            switch (b.kind) {
                case TKind::Identity: x(i) = u(i); break;
                case TKind::Log: x(i) = b.lower + std::exp(u(i)); break;
                case TKind::Atanh: x(i) = std::tanh(u(i)); break;
                case TKind::Ball: {
                    const Vec v = u.segment(i, b.size);
                    const double r = v.norm();
                    x.segment(i, b.size) = r > 0.0 ? Vec(v * (std::tanh(r) / r)) : Vec(v);
                    break;
                }
            }
            i += b.size;
        }
        return x;
    }

    // d natural / d unconstrained, by central differences.
    Mat jacobian(const Vec& u) const {
        const Eigen::Index d = u.size();
        Mat J(d, d);
        Vec up = u;
        for (Eigen::Index j = 0; j < d; ++j) {
            const double h = 1e-6 * std::max(1.0, std::abs(u(j)));
            up(j) = u(j) + h;
            const Vec xp = to_natural(up);
            up(j) = u(j) - h;
            const Vec xm = to_natural(up);
            up(j) = u(j);
            J.col(j) = (xp - xm) / (2.0 * h);
        }
        return J;
    }
};

using Objective = std::function<double(const Vec&)>;  // natural params -> value, -inf on failure

struct FitOptions {
    double initial_step = 0.1;   // simplex edge, relative to max(1, |u|)
    double simplex_tol = 1e-5;   // characteristic simplex size at exit
    int max_nm_iter = 0;         // 0: 400 * dim
    bool polish = true;
    double polish_step = 1e-4;   // finite-difference step for the gradient
    int max_polish_iter = 50;
    long max_polish_evals = 0;   // 0: 100 * (2 * dim + 1)
    bool standard_errors = true;
    double hessian_step = 1e-3;
};

struct FitResult {
    Vec estimate;
    Vec se;                // NaN entries when the Hessian is not invertible
    bool se_available = false;
    double objective = -std::numeric_limits<double>::infinity();
    int nm_iterations = 0;
    int polish_iterations = 0;
    long evaluations = 0;
    bool polish_improved = false;
};

namespace detail {

struct GslProblem {
    const Objective* f;
    const ParamLayout* layout;
    long evals = 0;
    double best = std::numeric_limits<double>::infinity();
    Vec best_u;
    double fd_step = 1e-4;
    long eval_cap = std::numeric_limits<long>::max();
};

inline constexpr double kBadValue = 1e100;

inline double gsl_value(const gsl_vector* v, void* p) {
    auto* P = static_cast<GslProblem*>(p);
    Vec u(static_cast<Eigen::Index>(v->size));
    for (size_t i = 0; i < v->size; ++i) u(static_cast<Eigen::Index>(i)) = gsl_vector_get(v, i);
    if (P->evals >= P->eval_cap) return kBadValue;
    ++P->evals;
    double val = -(*P->f)(P->layout->to_natural(u));
    if (!std::isfinite(val)) val = kBadValue;
    if (val < P->best) {
        P->best = val;
        P->best_u = u;
    }
    return val;
}

inline void gsl_grad(const gsl_vector* v, void* p, gsl_vector* g) {
    auto* P = static_cast<GslProblem*>(p);
    gsl_vector* w = gsl_vector_alloc(v->size);
    gsl_vector_memcpy(w, v);
    for (size_t i = 0; i < v->size; ++i) {
        const double x = gsl_vector_get(v, i);
        const double h = P->fd_step * std::max(1.0, std::abs(x));
        gsl_vector_set(w, i, x + h);
        const double fp = gsl_value(w, p);
        gsl_vector_set(w, i, x - h);
        const double fm = gsl_value(w, p);
        gsl_vector_set(w, i, x);
        double gi = (fp - fm) / (2.0 * h);
        if (fp >= kBadValue || fm >= kBadValue) gi = 0.0;
        gsl_vector_set(g, i, gi);
    }
    gsl_vector_free(w);
}

inline void gsl_fdf(const gsl_vector* v, void* p, double* f, gsl_vector* g) {
    *f = gsl_value(v, p);
    gsl_grad(v, p, g);
}

struct GslHandlerGuard {
    gsl_error_handler_t* prev;
    GslHandlerGuard() : prev(gsl_set_error_handler_off()) {}
    ~GslHandlerGuard() { gsl_set_error_handler(prev); }
};

}  // namespace detail

// Nelder-Mead on the unconstrained coordinates, then a BFGS polish with
// finite-difference gradients; standard errors by the delta method.
inline FitResult fit(const Objective& objective, const ParamLayout& layout, const Vec& init,
                     const FitOptions& opt = {}) {
    detail::GslHandlerGuard guard;
    const Vec u0 = layout.to_unconstrained(init);
    const size_t d = static_cast<size_t>(u0.size());
    detail::GslProblem P{&objective, &layout, 0, std::numeric_limits<double>::infinity(), u0, opt.polish_step};

    FitResult res;
    gsl_vector* x = gsl_vector_alloc(d);
    gsl_vector* ss = gsl_vector_alloc(d);
    for (size_t i = 0; i < d; ++i) {
        gsl_vector_set(x, i, u0(static_cast<Eigen::Index>(i)));
        gsl_vector_set(ss, i, opt.initial_step * std::max(1.0, std::abs(u0(static_cast<Eigen::Index>(i)))));
    }
    const double f0 = detail::gsl_value(x, &P);
    if (f0 >= detail::kBadValue) {
        gsl_vector_free(x);
        gsl_vector_free(ss);
        throw Error(Errc::OptimFailed, "objective not finite at the initial guess");
    }

    gsl_multimin_function fn{&detail::gsl_value, d, &P};
    gsl_multimin_fminimizer* nm = gsl_multimin_fminimizer_alloc(gsl_multimin_fminimizer_nmsimplex2, d);
    gsl_multimin_fminimizer_set(nm, &fn, x, ss);
    const int max_nm = opt.max_nm_iter > 0 ? opt.max_nm_iter : 400 * static_cast<int>(d);
    int it = 0;
    for (; it < max_nm; ++it) {
        if (gsl_multimin_fminimizer_iterate(nm) != GSL_SUCCESS) break;
        if (gsl_multimin_test_size(gsl_multimin_fminimizer_size(nm), opt.simplex_tol) == GSL_SUCCESS) break;
    }
    res.nm_iterations = it;
    gsl_multimin_fminimizer_free(nm);

    if (opt.polish) {
        const double before = P.best;
        gsl_vector* xb = gsl_vector_alloc(d);
        for (size_t i = 0; i < d; ++i) gsl_vector_set(xb, i, P.best_u(static_cast<Eigen::Index>(i)));
        const long budget = opt.max_polish_evals > 0 ? opt.max_polish_evals : 100 * (2 * static_cast<long>(d) + 1);
        P.eval_cap = P.evals + budget;
        gsl_multimin_function_fdf fdf{&detail::gsl_value, &detail::gsl_grad, &detail::gsl_fdf, d, &P};
        gsl_multimin_fdfminimizer* bf = gsl_multimin_fdfminimizer_alloc(gsl_multimin_fdfminimizer_vector_bfgs2, d);
        gsl_multimin_fdfminimizer_set(bf, &fdf, xb, 0.01, 0.1);
        int pit = 0;
        for (; pit < opt.max_polish_iter; ++pit) {
            if (gsl_multimin_fdfminimizer_iterate(bf) != GSL_SUCCESS) break;
            if (gsl_multimin_test_gradient(bf->gradient, 1e-6) == GSL_SUCCESS) break;
        }
        res.polish_iterations = pit;
        gsl_multimin_fdfminimizer_free(bf);
        gsl_vector_free(xb);
        res.polish_improved = P.best < before;
        P.eval_cap = std::numeric_limits<long>::max();
    }
    gsl_vector_free(x);
    gsl_vector_free(ss);

    const Vec ub = P.best_u;
    res.estimate = layout.to_natural(ub);
    res.objective = -P.best;
    res.evaluations = P.evals;
    res.se = Vec::Constant(static_cast<Eigen::Index>(d), std::numeric_limits<double>::quiet_NaN());

    if (opt.standard_errors) {
        try {
            auto fu = [&](const Vec& u) { return objective(layout.to_natural(u)); };
            const Mat H = fd_hessian(fu, ub, opt.hessian_step);
            const Mat negH = symmetrize(-H);
            if (is_pd(negH)) {
                const Mat J = layout.jacobian(ub);
                const Mat cov = J * inverse_pd(negH) * J.transpose();
                res.se = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
                res.se_available = true;
            }
        } catch (const Error&) {
            res.se_available = false;
        }
    }
    return res;
}

// ---------------------------------------------------------------------
// Model bundles with linear-Gaussian scalar state dynamics.

struct StateSpaceModel {
    ObservationModel obs;
    LinearGaussianDynamics dyn;
};

// Default constants used in the simulation studies.
inline StateSpaceModel default_model(Family f) {
    StateSpaceModel m;
    ShapeParams sp;
    switch (f) {
        case Family::NegBin: sp.kappa = 4.0; break;
        case Family::Gamma: sp.kappa = 1.5; break;
        case Family::Weibull: sp.kappa = 1.2; break;
        case Family::SvT:
        case Family::DepT: sp.nu = 10.0; break;
        case Family::LocalLevelT:
            sp.nu = 3.0;
            sp.sigma = 0.45;
            break;
        default: break;
    }
    if (f == Family::LinearGauss) {
        m.obs = ObservationModel(LinearGaussianObservation{Vec::Zero(1), Mat::Identity(1, 1), Mat::Identity(1, 1)});
    } else {
        m.obs = ObservationModel(f, sp);
    }
    if (f == Family::DepGauss || f == Family::DepT)
        m.dyn = LinearGaussianDynamics::scalar(0.02, 0.98, 0.01);
    else
        m.dyn = LinearGaussianDynamics::scalar(0.0, 0.98, 0.0225);
    return m;
}

// Estimated coordinates: c, T, Q and the family's shape constants.
inline ParamLayout layout_for(const StateSpaceModel& m) {
    ParamLayout L;
    L.add("c", TKind::Identity);
    L.add("T", TKind::Atanh);
    L.add("Q", TKind::Log);
    switch (m.obs.family()) {
        case Family::NegBin:
        case Family::Gamma:
        case Family::Weibull: L.add("kappa", TKind::Log); break;
        case Family::SvT:
        case Family::DepT: L.add("nu", TKind::Log, 2.0); break;
        case Family::LocalLevelT:
            L.add("nu", TKind::Log, 2.0);
            L.add("sigma", TKind::Log);
            break;
        case Family::LinearGauss: L.add("H", TKind::Log); break;
        default: break;
    }
    return L;
}

inline void require_scalar_state(const StateSpaceModel& m) {
    if (m.dyn.dim() != 1 || m.obs.state_dim() != 1 || m.obs.obs_dim() > 2)
        throw Error(Errc::UnsupportedDimension, "estimation bundle requires a scalar state");
}

inline Vec natural_params(const StateSpaceModel& m) {
    require_scalar_state(m);
    const ParamLayout L = layout_for(m);
    Vec x(L.dim());
    x(0) = m.dyn.c(0);
    x(1) = m.dyn.T(0, 0);
    x(2) = m.dyn.Q(0, 0);
    for (int i = 3; i < L.dim(); ++i) {
        const std::string& n = L.names[static_cast<size_t>(i)];
        if (n == "kappa") x(i) = m.obs.shape().kappa;
        if (n == "nu") x(i) = m.obs.shape().nu;
        if (n == "sigma") x(i) = m.obs.shape().sigma;
        if (n == "H") x(i) = m.obs.lg().H(0, 0);
    }
    return x;
}

inline StateSpaceModel with_params(const StateSpaceModel& base, const Vec& x) {
    StateSpaceModel m = base;
    const ParamLayout L = layout_for(base);
    m.dyn = LinearGaussianDynamics::scalar(x(0), x(1), x(2));
    for (int i = 3; i < L.dim(); ++i) {
        const std::string& n = L.names[static_cast<size_t>(i)];
        if (n == "kappa") m.obs.shape().kappa = x(i);
        if (n == "nu") m.obs.shape().nu = x(i);
        if (n == "sigma") m.obs.shape().sigma = x(i);
        if (n == "H") m.obs.lg().H(0, 0) = x(i);
    }
    return m;
}

// Decomposition objective of the filter run; -inf when the run fails.
inline double objective(const StateSpaceModel& m, const Series& data, const UpdateOptions& opts) {
    try {
        m.obs.validate();
        if (m.dyn.dim() == 1 && m.obs.is_scalar()) {
            const double v =
                filter_lg_scalar(m.obs, m.dyn.c(0), m.dyn.T(0, 0), m.dyn.Q(0, 0), data, opts, false).objective;
            return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
        }
        const double v = filter_lg(m.obs, m.dyn, data, opts).objective;
        return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
    } catch (const Error&) {
        return -std::numeric_limits<double>::infinity();
    }
}

inline Objective bellman_objective(const StateSpaceModel& base, const Series& data, const UpdateOptions& opts) {
    return [base, &data, opts](const Vec& x) { return objective(with_params(base, x), data, opts); };
}

inline FitResult fit_model(const StateSpaceModel& init, const Series& data, const UpdateOptions& opts,
                           const FitOptions& fo = {}) {
    require_scalar_state(init);
    return fit(bellman_objective(init, data, opts), layout_for(init), natural_params(init), fo);
}

// Exact Gaussian log-likelihood of a linear model; -inf on failure.
inline double kalman_loglik(const LinearGaussianObservation& obs, const LinearGaussianDynamics& dyn,
                            const Series& data) {
    if (dyn.dim() == 1 && obs.d.size() == 1 && data.cols() == 1) {
        const double c = dyn.c(0), T = dyn.T(0, 0), Q = dyn.Q(0, 0);
        const double d = obs.d(0), Z = obs.Z(0, 0), H = obs.H(0, 0);
        if (!(std::abs(T) < 1.0 - kStationaryMargin) || !(Q > 0.0) || !(H > 0.0))
            return -std::numeric_limits<double>::infinity();
        double a = c / (1.0 - T), P = Q / (1.0 - T * T), ll = 0.0;
        for (Eigen::Index t = 0; t < data.rows(); ++t) {
            const double ap = c + T * a, Pp = T * T * P + Q;
            const double y = data(t, 0);
            if (!std::isfinite(y)) {
                a = ap;
                P = Pp;
                continue;
            }
            const double v = y - d - Z * ap, F = Z * Z * Pp + H;
            ll += -0.5 * (detail::kLog2Pi + std::log(F) + v * v / F);
            const double K = Pp * Z / F;
            a = ap + K * v;
            P = Pp * H / F;
        }
        return std::isfinite(ll) ? ll : -std::numeric_limits<double>::infinity();
    }
    try {
        const double v = kalman_filter(obs, dyn, data, unconditional_belief(dyn)).loglik;
        return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
    } catch (const Error&) {
        return -std::numeric_limits<double>::infinity();
    }
}

struct QmleFit {
    LinearGaussianDynamics dyn;
    LinearGaussianObservation obs;
    FitResult result;
};

// Quasi-likelihood fit of the linearised model: c, T, Q and, for the
// local level, the noise variance H.
inline QmleFit qmle_fit(const StateSpaceModel& init, const Series& y, const FitOptions& fo = {}) {
    const QmleInput q = qmle_transforms(init.obs, y);
    const bool est_H = init.obs.family() == Family::LocalLevelT;
    ParamLayout L;
    L.add("c", TKind::Identity);
    L.add("T", TKind::Atanh);
    L.add("Q", TKind::Log);
    if (est_H) L.add("H", TKind::Log);
    Vec x0(L.dim());
    x0 << init.dyn.c(0), init.dyn.T(0, 0), init.dyn.Q(0, 0), Vec::Constant(est_H ? 1 : 0, q.obs.H(0, 0));
    const Series& xs = q.x;
    const LinearGaussianObservation base = q.obs;
    Objective f = [&xs, base, est_H](const Vec& x) {
        LinearGaussianObservation o = base;
        if (est_H) o.H(0, 0) = x(3);
        return kalman_loglik(o, LinearGaussianDynamics::scalar(x(0), x(1), x(2)), xs);
    };
    QmleFit out;
    out.result = fit(f, L, x0, fo);
    const Vec& xe = out.result.estimate;
    out.dyn = LinearGaussianDynamics::scalar(xe(0), xe(1), xe(2));
    out.obs = base;
    if (est_H) out.obs.H(0, 0) = xe(3);
    return out;
}

}  // namespace bf
