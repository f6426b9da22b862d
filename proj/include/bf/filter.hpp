#pragma once

// Bellman filter. The update step maximises
//   l(y | a) - 1/2 (a - a_pred)' I_pred (a - a_pred)
// by damped Newton-type iterations; the information update adds the
// observation curvature at the peak. The general step optimises jointly
// over (a_t, a_{t-1}) for arbitrary transition densities.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "bf/dynamics.hpp"
#include "bf/errors.hpp"
#include "bf/kalman.hpp"
#include "bf/numerics.hpp"
#include "bf/obsmodels.hpp"

namespace bf {

enum class Method { Newton, Fisher, BHHH, Hybrid };
enum class Start { Prediction, ObservationArgmax };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::Newton: return "newton";
        case Method::Fisher: return "fisher";
        case Method::BHHH: return "bhhh";
        case Method::Hybrid: return "hybrid";
    }
    return "?";
}

struct UpdateOptions {
    Method method = Method::Newton;
    double weight = std::numeric_limits<double>::quiet_NaN();  // Fisher weight for Hybrid; NaN = model minimum
    double tol = 1e-4;
    int max_iter = 40;
    int max_halvings = 10;
    Start start = Start::Prediction;
    bool safeguard = true;

    // Newton where realised information is nonnegative, otherwise
    // Fisher iterations with the minimal hybrid information update.
    static UpdateOptions defaults_for(const ObservationModel& obs) {
        UpdateOptions o;
        if (!obs.nonneg_realised()) {
            o.method = Method::Hybrid;
            o.weight = obs.hybrid_weight();
        }
        return o;
    }
};

struct DecompositionTerms {
    double fit = 0.0;          // l(y | a_upd)
    double logdet_pred = 0.0;  // 1/2 log det I_pred
    double logdet_upd = 0.0;   // 1/2 log det I_upd
    double penalty = 0.0;      // 1/2 |a_upd - a_pred|^2 in the I_pred norm

    double total() const { return fit + logdet_pred - logdet_upd - penalty; }
};

struct FilterStepOutput {
    StateBelief predicted;
    StateBelief updated;
    Vec revised_prev;  // a_{t-1|t}; general step only
    int iterations = 0;
    bool converged = true;
    bool skipped = false;
    bool safeguarded = false;
    bool missing = false;
    double gain = 0.0;  // objective increase from prediction to update
    DecompositionTerms terms;

    double loglik_term() const { return missing ? 0.0 : terms.total(); }
};

namespace detail {

template <class V, class S>
struct CoreEval {
    double logpdf;
    V score;
    S realised;
    S expected;
};

template <class S>
bool chol_pd(const S& A, Eigen::LLT<S>& llt) {
    if (!A.allFinite()) return false;
    const double dmax = A.diagonal().maxCoeff();
    if (!(dmax > 0.0)) return false;
    llt.compute(A);
    if (llt.info() != Eigen::Success) return false;
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        const double l = llt.matrixLLT()(i, i);
        if (!(l * l >= kPdPivotTol * dmax)) return false;
    }
    return true;
}

template <class V, class S>
struct CoreResult {
    V a;
    S info;
    CoreEval<V, S> ev;
    int iterations = 0;
    bool converged = false;
    bool skipped = false;
    bool safeguarded = false;
};

// Update step shared by the scalar (fixed 1x1) and vector paths.
template <class V, class S, class EvalFn>
CoreResult<V, S> update_core(const EvalFn& eval, const V& a_pred, const S& I_pred, const UpdateOptions& opts,
                             double w) {
    using Ev = CoreEval<V, S>;
    const Eigen::Index m = a_pred.size();
    const S Id = S::Identity(m, m);
    auto phi_of = [&](const V& a, const Ev& ev) {
        const V d = a - a_pred;
        return ev.logpdf - 0.5 * d.dot(I_pred * d);
    };
    auto safe_eval = [&](const V& a, Ev& out) {
        try {
            out = eval(a);
            return std::isfinite(out.logpdf) && out.score.allFinite();
        } catch (const Error&) {
            return false;
        }
    };

    CoreResult<V, S> r;
    V a = a_pred;
    Ev ev;
    if (opts.start == Start::ObservationArgmax) {
        // Fisher scoring on l(y|a) alone; used only if it converges.
        V b = a_pred;
        Ev eb;
        bool ok = safe_eval(b, eb);
        for (int it = 0; ok && it < opts.max_iter; ++it) {
            Eigen::LLT<S> llt;
            if (!chol_pd(S(eb.expected), llt)) {
                ok = false;
                break;
            }
            const V step = llt.solve(eb.score);
            V bn = b + step;
            Ev en;
            double s = 1.0;
            int h = 0;
            while (h <= opts.max_halvings && !(safe_eval(bn, en) && en.logpdf >= eb.logpdf)) {
                s *= 0.5;
                bn = b + s * step;
                ++h;
            }
            if (h > opts.max_halvings) {
                ok = false;
                break;
            }
            const double dmax = (bn - b).cwiseAbs().maxCoeff();
            b = bn;
            eb = en;
            if (dmax < opts.tol) {
                a = b;
                break;
            }
            if (it + 1 == opts.max_iter) ok = false;
        }
    }
    if (!safe_eval(a, ev)) {
        a = a_pred;
        if (!safe_eval(a, ev)) throw Error(Errc::NonFinite, "observation density not finite at prediction");
    }
    double phi = phi_of(a, ev);

    auto curvature = [&](Method meth, const Ev& e) -> S {
        switch (meth) {
            case Method::Newton: return I_pred + e.realised;
            case Method::BHHH: return I_pred + e.score * e.score.transpose();
            default: return I_pred + e.expected;
        }
    };
    const Method opt_method = opts.method == Method::Hybrid ? Method::Fisher : opts.method;

    for (int it = 1; it <= opts.max_iter; ++it) {
        r.iterations = it;
        const V g = ev.score - I_pred * (a - a_pred);
        Method meth = opt_method;
        Eigen::LLT<S> llt;
        S C = curvature(meth, ev);
        bool pd = chol_pd(C, llt);
        if (!pd && meth == Method::Newton) {
            meth = Method::Fisher;
            C = curvature(meth, ev);
            pd = chol_pd(C, llt);
        }
        if (!pd && opts.safeguard) {
            for (double delta = 1e-8; !pd && delta < 1e12; delta *= 10.0) pd = chol_pd(S(C + delta * Id), llt);
            r.safeguarded = pd;
        }
        if (!pd) {
            r.skipped = true;
            break;
        }

        // Armijo increase; once the change is lost in rounding, require
        // the directional derivative to shrink instead.
        auto try_dir = [&](const V& dir, V& an, Ev& en, double& phin) {
            const double slope = g.dot(dir);
            const double noise = 1e-13 * (1.0 + std::abs(phi));
            double s = 1.0;
            for (int h = 0; h <= opts.max_halvings; ++h, s *= 0.5) {
                an = a + s * dir;
                if (!safe_eval(an, en)) continue;
                phin = phi_of(an, en);
                if (phin - phi >= 1e-4 * s * slope && phin - phi > noise) return true;
                if (std::abs(phin - phi) <= noise) {
                    const V gn = en.score - I_pred * (an - a_pred);
                    if (std::abs(gn.dot(dir)) <= 0.9 * std::abs(slope)) return true;
                }
            }
            return false;
        };
        V dir = llt.solve(g);
        V an;
        Ev en;
        double phin = phi;
        bool accepted = try_dir(dir, an, en, phin);
        if (!accepted && meth != Method::Fisher) {
            Eigen::LLT<S> fl;
            if (chol_pd(S(curvature(Method::Fisher, ev)), fl)) {
                dir = fl.solve(g);
                accepted = try_dir(dir, an, en, phin);
            }
        }
        if (!accepted) {
            if (dir.cwiseAbs().maxCoeff() < opts.tol) {
                r.converged = true;
            } else if (it == 1) {
                r.skipped = true;
            }
            break;
        }
        const double dmax = (an - a).cwiseAbs().maxCoeff();
        a = an;
        ev = en;
        phi = phin;
        if (dmax < opts.tol) {
            r.converged = true;
            break;
        }
    }

    if (r.skipped) {
        r.a = a_pred;
        r.info = I_pred;
        safe_eval(a_pred, r.ev);
        r.converged = false;
        return r;
    }
    r.a = a;
    r.ev = ev;
    switch (opts.method) {
        case Method::Newton: r.info = I_pred + ev.realised; break;
        case Method::Fisher: r.info = I_pred + ev.expected; break;
        case Method::BHHH: r.info = I_pred + ev.score * ev.score.transpose(); break;
        case Method::Hybrid: r.info = I_pred + w * ev.expected + (1.0 - w) * ev.realised; break;
    }
    r.info = 0.5 * (r.info + r.info.transpose()).eval();
    Eigen::LLT<S> chk;
    if (!chol_pd(r.info, chk)) throw Error(Errc::InfoNotPD, "updated information not positive definite");
    return r;
}

using V1 = Eigen::Matrix<double, 1, 1>;

inline double resolve_weight(const ObservationModel& obs, const UpdateOptions& opts) {
    if (opts.method != Method::Hybrid) return 0.0;
    if (std::isnan(opts.weight)) return obs.nonneg_realised() ? 0.0 : obs.hybrid_weight();
    return opts.weight;
}

}  // namespace detail

inline FilterStepOutput update_lg(const ObservationModel& obs, const Vec& y, const StateBelief& pred,
                                  const UpdateOptions& opts) {
    FilterStepOutput out;
    out.predicted = pred;
    if (has_missing(y)) {
        out.updated = pred;
        out.missing = true;
        return out;
    }
    const double w = detail::resolve_weight(obs, opts);
    const double ldp = 0.5 * logdet_pd(pred.info);
    if (obs.is_scalar() && pred.mean.size() == 1) {
        using V = detail::V1;
        using Ev = detail::CoreEval<V, V>;
        const double* yp = y.data();
        auto eval = [&](const V& a) {
            const ScalarEval s = obs.eval_scalar(yp, a(0));
            return Ev{s.logpdf, V::Constant(s.score), V::Constant(s.realised), V::Constant(s.expected)};
        };
        const auto r = detail::update_core<V, V>(eval, V::Constant(pred.mean(0)), V::Constant(pred.info(0, 0)), opts, w);
        out.updated.mean = Vec::Constant(1, r.a(0));
        out.updated.info = Mat::Constant(1, 1, r.info(0, 0));
        out.iterations = r.iterations;
        out.converged = r.converged;
        out.skipped = r.skipped;
        out.safeguarded = r.safeguarded;
        const double d = r.a(0) - pred.mean(0);
        out.terms = {r.ev.logpdf, ldp, 0.5 * std::log(r.info(0, 0)), 0.5 * d * d * pred.info(0, 0)};
    } else {
        using Ev = detail::CoreEval<Vec, Mat>;
        auto eval = [&](const Vec& a) {
            ObsEval e = obs.eval(y, a);
            return Ev{e.logpdf, std::move(e.score), std::move(e.realised), std::move(e.expected)};
        };
        const auto r = detail::update_core<Vec, Mat>(eval, pred.mean, pred.info, opts, w);
        out.updated.mean = r.a;
        out.updated.info = r.info;
        out.iterations = r.iterations;
        out.converged = r.converged;
        out.skipped = r.skipped;
        out.safeguarded = r.safeguarded;
        const Vec d = r.a - pred.mean;
        out.terms = {r.ev.logpdf, ldp, 0.5 * logdet_pd(r.info), 0.5 * d.dot(pred.info * d)};
    }
    const Vec d = out.updated.mean - pred.mean;
    out.gain = out.terms.fit - 0.5 * d.dot(pred.info * d) - obs.logpdf(y, pred.mean);
    return out;
}

struct FilterInit {
    bool unconditional = true;
    StateBelief fixed;

    static FilterInit stationary() { return {}; }
    static FilterInit with(StateBelief b) { return {false, std::move(b)}; }
    // Belief for an unknown constant: arbitrary mean, large information.
    static FilterInit unknown_constant(int m, double scale = 1e4) {
        return {false, {Vec::Zero(m), scale * Mat::Identity(m, m)}};
    }

    StateBelief resolve(const LinearGaussianDynamics& dyn) const {
        return unconditional ? unconditional_belief(dyn) : fixed;
    }
};

struct FilterRun {
    std::vector<FilterStepOutput> steps;
    double objective = 0.0;
};

inline FilterRun filter_lg(const ObservationModel& obs, const LinearGaussianDynamics& dyn, const Series& data,
                           const UpdateOptions& opts, const FilterInit& init = FilterInit::stationary()) {
    FilterRun run;
    if (data.rows() == 0) return run;
    StateBelief b = init.resolve(dyn);
    run.steps.reserve(static_cast<size_t>(data.rows()));
    for (Eigen::Index t = 0; t < data.rows(); ++t) {
        try {
            StateBelief pred{predict_state(dyn, b.mean), predict_info_lg(dyn.T, dyn.Q, b.info)};
            run.steps.push_back(update_lg(obs, data.row(t).transpose(), pred, opts));
        } catch (const Error& e) {
            throw FilterError(e, t);
        }
        b = run.steps.back().updated;
        run.objective += run.steps.back().loglik_term();
    }
    return run;
}

// Scalar-state trace without per-step allocations, for estimation loops.
struct ScalarTrace {
    std::vector<double> a_pred, a_upd, i_pred, i_upd, loglik;
    std::vector<int> iterations;
    std::vector<char> converged, skipped;
    double objective = 0.0;
    long nonconverged = 0;
};

inline ScalarTrace filter_lg_scalar(const ObservationModel& obs, double c, double T, double Q, const Series& data,
                                    const UpdateOptions& opts, bool keep_trace = true) {
    if (!obs.is_scalar()) throw Error(Errc::UnsupportedDimension, "scalar filter requires a scalar-state family");
    if (!(std::abs(T) < 1.0 - kStationaryMargin)) throw Error(Errc::NonStationary, "|T| must be below one");
    if (!(Q >= 0.0)) throw Error(Errc::SingularPrediction, "Q must be nonnegative");
    using V = detail::V1;
    using Ev = detail::CoreEval<V, V>;
    const double w = detail::resolve_weight(obs, opts);
    ScalarTrace tr;
    const size_t n = static_cast<size_t>(data.rows());
    if (keep_trace) {
        tr.a_pred.resize(n);
        tr.a_upd.resize(n);
        tr.i_pred.resize(n);
        tr.i_upd.resize(n);
        tr.loglik.resize(n);
        tr.iterations.resize(n);
        tr.converged.resize(n);
        tr.skipped.resize(n);
    }
    double a = c / (1.0 - T);
    double P = Q / (1.0 - T * T);
    if (!(P > 0.0)) throw Error(Errc::SingularInformation, "stationary variance not positive");
    double I = 1.0 / P;
    for (size_t t = 0; t < n; ++t) {
        const double ap = c + T * a;
        const double Pp = T * T / I + Q;
        if (!(Pp > 0.0) || !std::isfinite(Pp)) throw FilterError(Error(Errc::SingularPrediction, "predicted variance"), static_cast<long>(t));
        const double Ip = 1.0 / Pp;
        const double* yp = data.row(static_cast<Eigen::Index>(t)).data();
        double au = ap, Iu = Ip;
        int iters = 0;
        bool conv = true, skip = false;
        double term = 0.0;
        if (std::isfinite(yp[0]) && (obs.obs_dim() < 2 || std::isfinite(yp[1]))) {
            auto eval = [&](const V& x) {
                const ScalarEval s = obs.eval_scalar(yp, x(0));
                return Ev{s.logpdf, V::Constant(s.score), V::Constant(s.realised), V::Constant(s.expected)};
            };
            try {
                const auto r = detail::update_core<V, V>(eval, V::Constant(ap), V::Constant(Ip), opts, w);
                au = r.a(0);
                Iu = r.info(0, 0);
                iters = r.iterations;
                conv = r.converged;
                skip = r.skipped;
                const double d = au - ap;
                term = r.ev.logpdf + 0.5 * std::log(Ip) - 0.5 * std::log(Iu) - 0.5 * d * d * Ip;
                tr.objective += term;
            } catch (const Error& e) {
                throw FilterError(e, static_cast<long>(t));
            }
            if (!conv) ++tr.nonconverged;
        }
        if (keep_trace) {
            tr.a_pred[t] = ap;
            tr.a_upd[t] = au;
            tr.i_pred[t] = Ip;
            tr.i_upd[t] = Iu;
            tr.loglik[t] = term;
            tr.iterations[t] = iters;
            tr.converged[t] = conv;
            tr.skipped[t] = skip;
        }
        a = au;
        I = Iu;
    }
    return tr;
}

// Observation term for the general step: log-density, score and both
// curvature matrices as functions of the full state a_t.
using ObsFn = std::function<ObsEval(const Vec&)>;

// Information of a_t implied by the negative Hessian of the joint
// objective in (u, a_{t-1}), where obs_info is the observation curvature
// (-d2 l / da da') in a_t coordinates.
inline Mat info_update_general(const TransitionDerivatives& d, const Mat& obs_info, const Mat& I_prev,
                               const DegeneracyMask& mask) {
    const Mat A = mask.A();
    const Mat B = mask.B();
    const Mat N22 = symmetrize(d.J22 + I_prev + B.transpose() * obs_info * B);
    if (smallest_singular_value(N22) < kSingularTol * std::max(1.0, N22.norm()))
        throw Error(Errc::SingularD, "I_prev + J22 not invertible");
    if (mask.pinned.empty()) {
        const Mat N11 = d.J11 + obs_info;
        return symmetrize(N11 - d.J12 * N22.fullPivLu().solve(d.J21));
    }
    const Eigen::Index f = A.cols(), m = B.cols();
    Mat E(mask.dim, f + m);
    E << A, B;
    Mat N(f + m, f + m);
    if (f > 0) {
        N.topLeftCorner(f, f) = d.J11 + A.transpose() * obs_info * A;
        N.topRightCorner(f, m) = d.J12 + A.transpose() * obs_info * B;
        N.bottomLeftCorner(m, f) = N.topRightCorner(f, m).transpose();
    }
    N.bottomRightCorner(m, m) = N22;
    const Mat cov = E * N.fullPivLu().solve(E.transpose());
    return inverse_pd(symmetrize(cov));
}

namespace detail {

struct GeneralPoint {
    Vec u, v;
    double phi;
    ObsEval ev;
    TransitionDerivatives td;
};

}  // namespace detail

// One step of the general filter: joint Newton-type optimisation over the
// free coordinates of a_t and the previous state a_{t-1}.
inline FilterStepOutput step_general(const ObsFn& obs, const TransitionModel& trans, const StateBelief& prev,
                                     const UpdateOptions& opts) {
    const DegeneracyMask mask = trans.mask();
    const Mat A = mask.A();
    const Mat B = mask.B();
    const Eigen::Index f = A.cols(), m = B.cols();
    const Vec& ap = prev.mean;
    const Mat& Ip = prev.info;

    FilterStepOutput out;
    const Vec a_pred = trans.predict(ap);
    const Vec u0 = A.transpose() * a_pred;
    const TransitionDerivatives td0 = trans.derivatives(u0, ap);
    out.predicted.mean = a_pred;
    out.predicted.info = info_update_general(td0, Mat::Zero(mask.dim, mask.dim), Ip, mask);
    if (!obs) {
        out.updated = out.predicted;
        out.revised_prev = ap;
        out.missing = true;
        return out;
    }

    auto state_of = [&](const Vec& u, const Vec& v) -> Vec { return A * u + B * v; };
    auto evaluate = [&](const Vec& u, const Vec& v, detail::GeneralPoint& p) {
        try {
            p.u = u;
            p.v = v;
            p.ev = obs(state_of(u, v));
            const double lt = trans.logpdf(u, v);
            const Vec dv = v - ap;
            p.phi = p.ev.logpdf + lt - 0.5 * dv.dot(Ip * dv);
            if (!std::isfinite(p.phi)) return false;
            p.td = trans.derivatives(u, v);
            return p.ev.score.allFinite();
        } catch (const Error&) {
            return false;
        }
    };
    auto neg_hessian = [&](const detail::GeneralPoint& p, const Mat& R) {
        Mat N(f + m, f + m);
        if (f > 0) {
            N.topLeftCorner(f, f) = p.td.J11 + A.transpose() * R * A;
            N.topRightCorner(f, m) = p.td.J12 + A.transpose() * R * B;
            N.bottomLeftCorner(m, f) = N.topRightCorner(f, m).transpose();
        }
        N.bottomRightCorner(m, m) = p.td.J22 + Ip + B.transpose() * R * B;
        return Mat(symmetrize(N));
    };
    auto gradient = [&](const detail::GeneralPoint& p) {
        Vec G(f + m);
        if (f > 0) G.head(f) = p.td.J1 + A.transpose() * p.ev.score;
        G.tail(m) = p.td.J2 + B.transpose() * p.ev.score - Ip * (p.v - ap);
        return G;
    };
    // Newton direction via the block inverse of the negative Hessian.
    auto direction = [&](const Mat& N, const Vec& G, Vec& dir) {
        if (!is_pd(N)) return false;
        if (f == 0) {
            dir = Eigen::LLT<Mat>(N).solve(G);
            return true;
        }
        try {
            const BlockInverse bi = block_inverse({N.topLeftCorner(f, f), N.topRightCorner(f, m),
                                                   N.bottomLeftCorner(m, f), N.bottomRightCorner(m, m)});
            dir.resize(f + m);
            dir.head(f) = bi.B11 * G.head(f) + bi.B12 * G.tail(m);
            dir.tail(m) = bi.B21 * G.head(f) + bi.B22 * G.tail(m);
            return dir.allFinite();
        } catch (const Error&) {
            return false;
        }
    };
    auto curv = [&](Method meth, const detail::GeneralPoint& p) -> Mat {
        switch (meth) {
            case Method::Newton: return p.ev.realised;
            case Method::BHHH: return p.ev.score * p.ev.score.transpose();
            default: return p.ev.expected;
        }
    };

    auto skip = [&]() {
        out.updated = out.predicted;
        out.revised_prev = ap;
        out.skipped = true;
        out.converged = false;
        const Vec a = out.predicted.mean;
        try {
            out.terms.fit = obs(a).logpdf;
        } catch (const Error&) {
            out.terms.fit = -std::numeric_limits<double>::infinity();
        }
        out.terms.logdet_pred = out.terms.logdet_upd = 0.5 * logdet_pd(out.predicted.info);
        out.terms.penalty = 0.0;
        return out;
    };

    detail::GeneralPoint cur;
    if (!evaluate(u0, ap, cur)) return skip();
    const double phi0 = cur.phi;
    const Method opt_method = opts.method == Method::Hybrid ? Method::Fisher : opts.method;
    bool converged = false;
    int it = 1;
    for (; it <= opts.max_iter; ++it) {
        const Vec G = gradient(cur);
        Vec dir;
        Method meth = opt_method;
        bool ok = direction(neg_hessian(cur, curv(meth, cur)), G, dir);
        if (!ok && meth != Method::Fisher) {
            meth = Method::Fisher;
            ok = direction(neg_hessian(cur, curv(meth, cur)), G, dir);
        }
        if (!ok) {
            if (it == 1) return skip();
            break;
        }
        auto try_dir = [&](const Vec& d, detail::GeneralPoint& nxt) {
            const double slope = G.dot(d);
            const double noise = 1e-13 * (1.0 + std::abs(cur.phi));
            const Vec du = d.head(f), dv = d.tail(m);
            double s = 1.0;
            for (int h = 0; h <= opts.max_halvings; ++h, s *= 0.5) {
                if (!evaluate(cur.u + s * du, cur.v + s * dv, nxt)) continue;
                const double gain = nxt.phi - cur.phi;
                if (gain >= 1e-4 * s * slope && gain > noise) return true;
                if (std::abs(gain) <= noise && std::abs(gradient(nxt).dot(d)) <= 0.9 * std::abs(slope)) return true;
            }
            return false;
        };
        detail::GeneralPoint nxt;
        bool accepted = try_dir(dir, nxt);
        if (!accepted && meth != Method::Fisher &&
            direction(neg_hessian(cur, curv(Method::Fisher, cur)), G, dir))
            accepted = try_dir(dir, nxt);
        if (!accepted) {
            converged = dir.cwiseAbs().maxCoeff() < opts.tol;
            if (!converged && it == 1) return skip();
            break;
        }
        double dmax = 0.0;
        if (f > 0) dmax = (nxt.u - cur.u).cwiseAbs().maxCoeff();
        dmax = std::max(dmax, (nxt.v - cur.v).cwiseAbs().maxCoeff());
        cur = std::move(nxt);
        if (dmax < opts.tol) {
            converged = true;
            break;
        }
    }
    out.iterations = std::min(it, opts.max_iter);
    out.converged = converged;

    const double w = opts.method == Method::Hybrid ? opts.weight : 0.0;
    if (std::isnan(w)) throw Error(Errc::InvalidParams, "hybrid weight must be set for the general step");
    Mat R;
    switch (opts.method) {
        case Method::Newton: R = cur.ev.realised; break;
        case Method::Fisher: R = cur.ev.expected; break;
        case Method::BHHH: R = cur.ev.score * cur.ev.score.transpose(); break;
        case Method::Hybrid: R = w * cur.ev.expected + (1.0 - w) * cur.ev.realised; break;
    }
    Mat Iu;
    try {
        Iu = info_update_general(cur.td, R, Ip, mask);
    } catch (const Error&) {
        return skip();
    }
    if (!is_pd(Iu)) {
        if (opts.method == Method::Fisher) return skip();
        try {
            Iu = info_update_general(cur.td, cur.ev.expected, Ip, mask);
        } catch (const Error&) {
            return skip();
        }
        if (!is_pd(Iu)) return skip();
        out.safeguarded = true;
    }
    out.updated.mean = state_of(cur.u, cur.v);
    out.updated.info = Iu;
    out.revised_prev = cur.v;
    out.gain = cur.phi - phi0;
    const Vec d = out.updated.mean - out.predicted.mean;
    out.terms = {cur.ev.logpdf, 0.5 * logdet_pd(out.predicted.info), 0.5 * logdet_pd(Iu),
                 0.5 * d.dot(out.predicted.info * d)};
    return out;
}

inline ObsFn bind_observation(const ObservationModel& obs, const Vec& y) {
    if (has_missing(y)) return nullptr;
    return [&obs, y](const Vec& a) { return obs.eval(y, a); };
}

struct StabilityJacobian {
    Mat jacobian;
    Vec eigenvalues;
};

// Derivative of the update with respect to the prediction,
// (I_pred - d2 l(y|a_upd))^{-1} I_pred, and its (real) spectrum.
inline StabilityJacobian stability_jacobian(const ObservationModel& obs, const Vec& y, const StateBelief& pred,
                                            const Vec& a_upd) {
    const ObsEval ev = obs.eval(y, a_upd);
    const Mat C = symmetrize(pred.info + ev.realised);
    if (!is_pd(C)) throw Error(Errc::IndefiniteDirection, "I_pred - Hessian not positive definite");
    StabilityJacobian out;
    if (ev.realised.isZero(0.0)) {
        out.jacobian = Mat::Identity(C.rows(), C.cols());
        out.eigenvalues = Vec::Ones(C.rows());
        return out;
    }
    out.jacobian = Eigen::LLT<Mat>(C).solve(pred.info);
    Eigen::GeneralizedSelfAdjointEigenSolver<Mat> es(symmetrize(pred.info), C, Eigen::EigenvaluesOnly);
    out.eigenvalues = es.eigenvalues();
    return out;
}

// Slack in the update inequalities (all nonnegative when they hold):
// boundedness, direction, and implicit-versus-explicit step length.
struct UpdateInequalities {
    double boundedness;
    double direction;
    double step_length;
};

inline UpdateInequalities update_inequalities(const ObservationModel& obs, const Vec& y, const StateBelief& pred,
                                              const Vec& a_upd) {
    const ObsEval at_pred = obs.eval(y, pred.mean);
    const double l_upd = obs.logpdf(y, a_upd);
    const Vec d = a_upd - pred.mean;
    const double dn2 = d.dot(pred.info * d);
    const Vec explicit_step = Eigen::LLT<Mat>(pred.info).solve(at_pred.score);
    const double en2 = explicit_step.dot(pred.info * explicit_step);
    return {l_upd - at_pred.logpdf - 0.5 * dn2, d.dot(at_pred.score), std::sqrt(en2) - std::sqrt(dn2)};
}

}  // namespace bf
