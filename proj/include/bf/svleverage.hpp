#pragma once

// Stochastic volatility with generalised leverage:
//   y_t   = mu + exp(h_t / 2) eps_t
//   h_t   = c + phi h_{t-1} + sigma_eta eta_t
//   eta_t = sum_{j=0..k} rho_j eps_{t-j} + sigma_xi xi_t,  sigma_xi^2 = 1 - sum rho_j^2
// The filter state is a_t = (h_t, ..., h_{t-k}); each step optimises over
// the stacked vector x_t = (h_t, ..., h_{t-k-1}).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "bf/dynamics.hpp"
#include "bf/errors.hpp"
#include "bf/estimation.hpp"
#include "bf/filter.hpp"
#include "bf/numerics.hpp"
#include "bf/particle.hpp"

namespace bf {

struct SvLeverageParams {
    double mu = 0.0;
    double c = 0.0;
    double phi = 0.98;
    double sigma_eta = 0.25;
    Vec rho = Vec::Zero(1);  // rho_0, ..., rho_k

    int k() const { return static_cast<int>(rho.size()) - 1; }
    double lag_sum_sq() const { return k() > 0 ? rho.tail(k()).squaredNorm() : 0.0; }
    double R() const { return 1.0 - lag_sum_sq(); }

    void validate() const {
        if (rho.size() < 1) throw Error(Errc::InvalidParams, "rho needs at least rho_0");
        if (!(std::abs(phi) < 1.0)) throw Error(Errc::InvalidParams, "|phi| must be below one");
        if (!(sigma_eta > 0.0)) throw Error(Errc::InvalidParams, "sigma_eta must be positive");
        if (!(rho.squaredNorm() < 1.0)) throw Error(Errc::InvalidParams, "sum of squared rho must be below one");
        if (!std::isfinite(mu) || !std::isfinite(c)) throw Error(Errc::InvalidParams, "non-finite location");
    }

    // Benchmark configuration with two lagged leverage terms.
    static SvLeverageParams leverage_benchmark() {
        SvLeverageParams p;
        p.mu = 0.0015;
        p.c = -0.2;
        p.phi = 0.98;
        p.sigma_eta = 0.25;
        p.rho = Vec(3);
        p.rho << -0.7, -0.4, 0.3;
        return p;
    }
};

struct SvSample {
    Vec y;
    Vec h;
};

inline SvSample sv_simulate(const SvLeverageParams& p, long n, uint64_t seed, long burn_in = 1000) {
    p.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N01(0.0, 1.0);
    const int k = p.k();
    const double sxi = std::sqrt(1.0 - p.rho.squaredNorm());
    std::vector<double> eps_hist(static_cast<size_t>(k), 0.0);  // eps_{t-1}, ..., eps_{t-k}
    double h = p.c / (1.0 - p.phi);
    SvSample s{Vec(n), Vec(n)};
    for (long t = -burn_in; t < n; ++t) {
        const double eps = N01(rng);
        const double xi = N01(rng);
        double eta = p.rho(0) * eps + sxi * xi;
        for (int j = 1; j <= k; ++j) eta += p.rho(j) * eps_hist[static_cast<size_t>(j - 1)];
        h = p.c + p.phi * h + p.sigma_eta * eta;
        if (t >= 0) {
            s.h(t) = h;
            s.y(t) = p.mu + std::exp(0.5 * h) * eps;
        }
        if (k > 0) {
            std::rotate(eps_hist.rbegin(), eps_hist.rbegin() + 1, eps_hist.rend());
            eps_hist[0] = eps;
        }
    }
    return s;
}

// Observation term in a_t = (h_t, ..., h_{t-k}). lags[j-1] = y_{t-j}.
struct SvObsEval {
    double f;
    Vec grad;
    Mat hess;
    Mat expected_hess;
};

namespace detail {
inline void check_lags(const SvLeverageParams& p, const double* lags, int available) {
    if (available < p.k()) throw Error(Errc::LagWindowMissing, "not enough lagged observations");
    for (int j = 0; j < p.k(); ++j)
        if (!std::isfinite(lags[j])) throw Error(Errc::LagWindowMissing, "lagged observation missing");
}
}  // namespace detail

inline SvObsEval sv_obs_eval(const SvLeverageParams& p, const Vec& a, double y, const double* lags,
                             int available_lags) {
    detail::check_lags(p, lags, available_lags);
    const int k = p.k();
    const int m = k + 1;
    const double R = p.R();
    const double rho0 = p.rho(0);
    const double e0 = std::exp(0.5 * a(0));
    const double s = e0 * std::sqrt(1.0 - rho0 * rho0 / R);
    const double K = rho0 / R * e0;

    Vec eps(m);  // eps(j) = (y_{t-j} - mu) exp(-h_{t-j}/2), j >= 1
    eps(0) = 0.0;
    double L = 0.0;
    for (int j = 1; j <= k; ++j) {
        eps(j) = (lags[j - 1] - p.mu) * std::exp(-0.5 * a(j));
        L += p.rho(j) * eps(j);
    }
    const double Bv = (a(0) - p.c - (k >= 1 ? p.phi * a(1) : 0.0)) / p.sigma_eta - L;
    const double my = p.mu + K * Bv;

    // B as a function of a_t; h_{t-1} enters through phi when k >= 1.
    Vec dB = Vec::Zero(m);
    Mat d2B = Mat::Zero(m, m);
    dB(0) = 1.0 / p.sigma_eta;
    for (int j = 1; j <= k; ++j) {
        dB(j) = 0.5 * p.rho(j) * eps(j);
        d2B(j, j) = -0.25 * p.rho(j) * eps(j);
    }
    if (k >= 1) dB(1) -= p.phi / p.sigma_eta;

    Vec e1 = Vec::Zero(m);
    e1(0) = 1.0;
    const Vec dm = 0.5 * (my - p.mu) * e1 + K * dB;
    Mat d2m = K * d2B + 0.5 * K * (e1 * dB.transpose() + dB * e1.transpose());
    d2m(0, 0) += 0.25 * (my - p.mu);
    const Vec ds = 0.5 * s * e1;
    Mat d2s = Mat::Zero(m, m);
    d2s(0, 0) = 0.25 * s;

    const double r = y - my;
    const double s2 = s * s;
    const double fm = r / s2;
    const double fs = r * r / (s2 * s) - 1.0 / s;
    const double fmm = -1.0 / s2;
    const double fms = -2.0 * r / (s2 * s);
    const double fss = 1.0 / s2 - 3.0 * r * r / (s2 * s2);

    SvObsEval out;
    out.f = -0.5 * detail::kLog2Pi - std::log(s) - 0.5 * r * r / s2;
    out.grad = fm * dm + fs * ds;
    out.hess = fmm * dm * dm.transpose() + fms * (dm * ds.transpose() + ds * dm.transpose()) +
               fss * ds * ds.transpose() + fm * d2m + fs * d2s;
    out.hess = symmetrize(out.hess);
    out.expected_hess = symmetrize(-(dm * dm.transpose()) / s2 - 2.0 * ds * ds.transpose() / s2);
    return out;
}

// Conditional mean of h_t given a_{t-1} = (h_{t-1}, ..., h_{t-k-1}).
inline double sv_mu_h(const SvLeverageParams& p, const Vec& a_prev, const double* lags) {
    double L = 0.0;
    for (int j = 1; j <= p.k(); ++j) L += p.rho(j) * (lags[j - 1] - p.mu) * std::exp(-0.5 * a_prev(j - 1));
    return p.c + p.phi * a_prev(0) + p.sigma_eta * L;
}

// Transition term in x_t = (h_t, ..., h_{t-k-1}); for k >= 1 the last
// coordinate does not enter.
struct SvTransEval {
    double g;
    Vec grad;
    Mat hess;
};

inline SvTransEval sv_trans_eval(const SvLeverageParams& p, const Vec& x, const double* lags, int available_lags) {
    detail::check_lags(p, lags, available_lags);
    const int k = p.k();
    const int n = k + 2;
    const double sh2 = p.sigma_eta * p.sigma_eta * p.R();
    const Vec v = x.tail(k + 1);
    const double muh = sv_mu_h(p, v, lags);
    const double r = x(0) - muh;

    Vec ct = Vec::Zero(n);  // d mu_h / dx with -1 in the first slot
    Mat d2mu = Mat::Zero(n, n);
    ct(0) = -1.0;
    ct(1) = p.phi;
    for (int j = 1; j <= k; ++j) {
        const double e = (lags[j - 1] - p.mu) * std::exp(-0.5 * x(j));
        ct(j) += -0.5 * p.sigma_eta * p.rho(j) * e;
        d2mu(j, j) = 0.25 * p.sigma_eta * p.rho(j) * e;
    }
    SvTransEval out;
    out.g = -0.5 * detail::kLog2Pi - 0.5 * std::log(sh2) - 0.5 * r * r / sh2;
    out.grad = (r / sh2) * ct;
    out.hess = symmetrize(-(ct * ct.transpose()) / sh2 + (r / sh2) * d2mu);
    return out;
}

// Transition density with the lag coordinates pinned, for the general step.
class SvTransition : public TransitionModel {
public:
    SvTransition(const SvLeverageParams& p, const double* lags, int available)
        : p_(p), lags_(lags), available_(available) {}
    int dim() const override { return p_.k() + 1; }
    DegeneracyMask mask() const override {
        DegeneracyMask mk{dim(), {}};
        for (int j = 1; j <= p_.k(); ++j) mk.pinned.emplace_back(j, j - 1);
        return mk;
    }
    double logpdf(const Vec& u, const Vec& a_prev) const override { return eval(u, a_prev).g; }
    TransitionDerivatives derivatives(const Vec& u, const Vec& a_prev) const override {
        const SvTransEval e = eval(u, a_prev);
        const int m = dim();
        TransitionDerivatives d;
        d.J1 = e.grad.head(1);
        d.J2 = e.grad.tail(m);
        d.J11 = -e.hess.topLeftCorner(1, 1);
        d.J12 = -e.hess.topRightCorner(1, m);
        d.J21 = -e.hess.bottomLeftCorner(m, 1);
        d.J22 = -e.hess.bottomRightCorner(m, m);
        return d;
    }
    Vec predict(const Vec& a_prev) const override {
        Vec a(dim());
        a(0) = sv_mu_h(p_, a_prev, lags_);
        for (int j = 1; j <= p_.k(); ++j) a(j) = a_prev(j - 1);
        return a;
    }

private:
    SvTransEval eval(const Vec& u, const Vec& a_prev) const {
        Vec x(dim() + 1);
        x << u, a_prev;
        return sv_trans_eval(p_, x, lags_, available_);
    }
    SvLeverageParams p_;
    const double* lags_;
    int available_;
};

inline ObsFn sv_observation(const SvLeverageParams& p, double y, const double* lags, int available) {
    return [p, y, lags, available](const Vec& a) {
        const SvObsEval e = sv_obs_eval(p, a, y, lags, available);
        return ObsEval{e.f, e.grad, -e.hess, -e.expected_hess};
    };
}

// Stationary belief of (h_t, ..., h_{t-k}) under the AR(1) h-chain.
inline StateBelief sv_stationary_belief(const SvLeverageParams& p) {
    const int m = p.k() + 1;
    const double var = p.sigma_eta * p.sigma_eta / (1.0 - p.phi * p.phi);
    Mat cov(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) cov(i, j) = var * std::pow(p.phi, std::abs(i - j));
    return {Vec::Constant(m, p.c / (1.0 - p.phi)), inverse_pd(cov)};
}

namespace detail {
// Information of the leading k+1 coordinates: Schur complement of the
// bottom-right element of a (k+2) x (k+2) negative Hessian.
inline Mat schur_last(const Mat& N) {
    const Eigen::Index n = N.rows() - 1;
    const double d = N(n, n);
    if (!(d > 0.0)) throw Error(Errc::SingularD, "bottom-right element not positive");
    return symmetrize(N.topLeftCorner(n, n) - N.topRightCorner(n, 1) * N.bottomLeftCorner(1, n) / d);
}
}  // namespace detail

// One filtering step with Newton (or Fisher) iterations on x_t.
inline FilterStepOutput sv_step(const SvLeverageParams& p, double y, const double* lags, int available,
                                const StateBelief& prev, const UpdateOptions& opts) {
    const int k = p.k();
    const int m = k + 1, n = k + 2;
    const Vec& ap = prev.mean;
    const Mat& Ip = prev.info;

    auto pad_prior = [&](Mat& N) { N.bottomRightCorner(m, m) += Ip; };
    FilterStepOutput out;
    Vec x(n);
    x(0) = sv_mu_h(p, ap, lags);
    x.tail(m) = ap;
    {
        const SvTransEval te = sv_trans_eval(p, x, lags, available);
        Mat Np = -te.hess;
        pad_prior(Np);
        out.predicted.mean = x.head(m);
        out.predicted.info = detail::schur_last(Np);
    }
    if (!std::isfinite(y)) {
        out.updated = out.predicted;
        out.revised_prev = ap;
        out.missing = true;
        return out;
    }

    struct Point {
        Vec x;
        double F;
        SvObsEval fo;
        SvTransEval go;
    };
    auto evaluate = [&](const Vec& xv, Point& pt) {
        try {
            pt.x = xv;
            pt.fo = sv_obs_eval(p, xv.head(m), y, lags, available);
            pt.go = sv_trans_eval(p, xv, lags, available);
            const Vec dv = xv.tail(m) - ap;
            pt.F = pt.fo.f + pt.go.g - 0.5 * dv.dot(Ip * dv);
            return std::isfinite(pt.F) && pt.fo.grad.allFinite();
        } catch (const Error&) {
            return false;
        }
    };
    auto neg_hessian = [&](const Point& pt, bool fisher) {
        Mat N = -pt.go.hess;
        N.topLeftCorner(m, m) -= fisher ? pt.fo.expected_hess : pt.fo.hess;
        pad_prior(N);
        return Mat(symmetrize(N));
    };
    auto gradient = [&](const Point& pt) {
        Vec G = pt.go.grad;
        G.head(m) += pt.fo.grad;
        G.tail(m) -= Ip * (pt.x.tail(m) - ap);
        return G;
    };
    auto skip = [&]() {
        out.updated = out.predicted;
        out.revised_prev = ap;
        out.skipped = true;
        out.converged = false;
        try {
            out.terms.fit = sv_obs_eval(p, out.predicted.mean, y, lags, available).f;
        } catch (const Error&) {
            out.terms.fit = -std::numeric_limits<double>::infinity();
        }
        out.terms.logdet_pred = out.terms.logdet_upd = 0.5 * logdet_pd(out.predicted.info);
        out.terms.penalty = 0.0;
        return out;
    };

    Point cur;
    if (!evaluate(x, cur)) return skip();
    const double F0 = cur.F;
    bool fisher_only = opts.method == Method::Fisher || opts.method == Method::Hybrid;
    bool converged = false;
    int it = 1;
    for (; it <= opts.max_iter; ++it) {
        const Vec G = gradient(cur);
        bool fisher = fisher_only;
        Mat N = neg_hessian(cur, fisher);
        if (!is_pd(N) && !fisher) {
            fisher = true;
            N = neg_hessian(cur, true);
        }
        if (!is_pd(N)) {
            if (it == 1) return skip();
            break;
        }
        Vec dir = Eigen::LLT<Mat>(N).solve(G);
        auto try_dir = [&](const Vec& d, Point& nxt) {
            const double slope = G.dot(d);
            const double noise = 1e-13 * (1.0 + std::abs(cur.F));
            double s = 1.0;
            for (int h = 0; h <= opts.max_halvings; ++h, s *= 0.5) {
                if (!evaluate(cur.x + s * d, nxt)) continue;
                const double gain = nxt.F - cur.F;
                if (gain >= 1e-4 * s * slope && gain > noise) return true;
                if (std::abs(gain) <= noise && std::abs(gradient(nxt).dot(d)) <= 0.9 * std::abs(slope)) return true;
            }
            return false;
        };
        Point nxt;
        bool accepted = try_dir(dir, nxt);
        if (!accepted && !fisher) {
            const Mat NF = neg_hessian(cur, true);
            if (is_pd(NF)) {
                dir = Eigen::LLT<Mat>(NF).solve(G);
                accepted = try_dir(dir, nxt);
            }
        }
        if (!accepted) {
            converged = dir.cwiseAbs().maxCoeff() < opts.tol;
            if (!converged && it == 1) return skip();
            break;
        }
        const double dmax = (nxt.x - cur.x).cwiseAbs().maxCoeff();
        cur = std::move(nxt);
        if (dmax < opts.tol) {
            converged = true;
            break;
        }
    }
    out.iterations = std::min(it, opts.max_iter);
    out.converged = converged;

    Mat Iu;
    bool ok = false;
    for (bool fisher : {opts.method != Method::Newton, true}) {
        try {
            Iu = detail::schur_last(neg_hessian(cur, fisher));
            if (is_pd(Iu)) {
                ok = true;
                out.safeguarded = fisher && opts.method == Method::Newton;
                break;
            }
        } catch (const Error&) {
        }
    }
    if (!ok) return skip();
    out.updated.mean = cur.x.head(m);
    out.updated.info = Iu;
    out.revised_prev = cur.x.tail(m);
    out.gain = cur.F - F0;
    const Vec d = out.updated.mean - out.predicted.mean;
    out.terms = {cur.fo.f, 0.5 * logdet_pd(out.predicted.info), 0.5 * logdet_pd(Iu),
                 0.5 * d.dot(out.predicted.info * d)};
    return out;
}

struct SvTrace {
    std::vector<FilterStepOutput> steps;
    std::vector<double> h_pred;  // one-step-ahead prediction of h_t
    double objective = 0.0;
    long skipped = 0;
    long nonconverged = 0;
};

// Filters from t = k+1 (0-based); earlier steps carry the stationary belief.
inline SvTrace sv_filter(const SvLeverageParams& p, const Vec& y, const UpdateOptions& opts) {
    p.validate();
    const int k = p.k();
    const long n = y.size();
    if (n <= k + 1) throw Error(Errc::LagWindowMissing, "series shorter than the lag window");
    for (long t = 0; t < n; ++t)
        if (!std::isfinite(y(t))) throw Error(Errc::LagWindowMissing, "missing observations are not supported");
    SvTrace tr;
    tr.steps.reserve(static_cast<size_t>(n));
    const StateBelief st = sv_stationary_belief(p);
    StateBelief b = st;
    std::vector<double> lags(static_cast<size_t>(std::max(k, 1)));
    for (long t = 0; t < n; ++t) {
        if (t < k + 1) {
            FilterStepOutput o;
            o.predicted = st;
            o.updated = st;
            o.missing = true;
            tr.steps.push_back(o);
            tr.h_pred.push_back(st.mean(0));
            continue;
        }
        for (int j = 1; j <= k; ++j) lags[static_cast<size_t>(j - 1)] = y(t - j);
        try {
            tr.steps.push_back(sv_step(p, y(t), lags.data(), k, b, opts));
        } catch (const Error& e) {
            throw FilterError(e, t);
        }
        const FilterStepOutput& o = tr.steps.back();
        tr.h_pred.push_back(o.predicted.mean(0));
        tr.objective += o.terms.total();
        tr.skipped += o.skipped;
        tr.nonconverged += !o.converged;
        b = o.updated;
    }
    return tr;
}

inline ParamLayout sv_layout(int k) {
    ParamLayout L;
    L.add("mu", TKind::Identity);
    L.add("c", TKind::Identity);
    L.add("phi", TKind::Atanh);
    L.add("sigma_eta", TKind::Log);
    std::vector<std::string> names;
    for (int j = 0; j <= k; ++j) names.push_back("rho" + std::to_string(j));
    L.add_ball(names);
    return L;
}

inline Vec sv_to_vector(const SvLeverageParams& p) {
    Vec x(4 + p.rho.size());
    x << p.mu, p.c, p.phi, p.sigma_eta, p.rho;
    return x;
}

inline SvLeverageParams sv_from_vector(const Vec& x) {
    SvLeverageParams p;
    p.mu = x(0);
    p.c = x(1);
    p.phi = x(2);
    p.sigma_eta = x(3);
    p.rho = x.tail(x.size() - 4);
    return p;
}

inline double sv_objective(const SvLeverageParams& p, const Vec& y, const UpdateOptions& opts) {
    try {
        const double v = sv_filter(p, y, opts).objective;
        return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
    } catch (const Error&) {
        return -std::numeric_limits<double>::infinity();
    }
}

struct SvFitResult {
    SvLeverageParams params;
    Vec se;
    bool se_available = false;
    double objective = 0.0;
    double bic = 0.0;
    FitResult fit;
};

// Starting values from a coarse grid around moment-based guesses.
inline SvLeverageParams sv_initial_guess(const Vec& y, int k, const UpdateOptions& opts) {
    std::vector<double> v(y.data(), y.data() + y.size());
    std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
    const double med = v[v.size() / 2];
    const double var = (y.array() - y.mean()).square().mean();
    SvLeverageParams best;
    double best_val = -std::numeric_limits<double>::infinity();
    for (double phi : {0.95, 0.98})
        for (double se : {0.15, 0.3})
            for (double r0 : {-0.5, 0.0}) {
                SvLeverageParams p;
                p.mu = med;
                p.phi = phi;
                p.sigma_eta = se;
                p.c = (1.0 - phi) * std::log(std::max(var, 1e-300));
                p.rho = Vec::Zero(k + 1);
                p.rho(0) = r0;
                const double val = sv_objective(p, y, opts);
                if (val > best_val) {
                    best_val = val;
                    best = p;
                }
            }
    if (!std::isfinite(best_val)) throw Error(Errc::OptimFailed, "no finite objective on the starting grid");
    return best;
}

inline SvFitResult sv_fit(const Vec& y, int k, const SvLeverageParams* init = nullptr, UpdateOptions opts = {},
                          const FitOptions& fo = {}) {
    if (k < 0) throw Error(Errc::InvalidParams, "k must be nonnegative");
    const SvLeverageParams start = init ? *init : sv_initial_guess(y, k, opts);
    if (start.k() != k) throw Error(Errc::InvalidParams, "initial rho length does not match k");
    const ParamLayout L = sv_layout(k);
    Objective f = [&y, opts](const Vec& x) { return sv_objective(sv_from_vector(x), y, opts); };
    SvFitResult out;
    out.fit = fit(f, L, sv_to_vector(start), fo);
    out.params = sv_from_vector(out.fit.estimate);
    out.se = out.fit.se;
    out.se_available = out.fit.se_available;
    out.objective = out.fit.objective;
    out.bic = -2.0 * out.objective + static_cast<double>(L.dim()) * std::log(static_cast<double>(y.size()));
    return out;
}

// Particle filter on h_t alone: lag terms use the filtered means of h in
// place of the unobserved lagged volatilities.
inline CsirRun csir_univariate_adapter(const SvLeverageParams& p, const Vec& y, int n_particles, uint64_t seed) {
    p.validate();
    const int k = p.k();
    const double R = p.R();
    const double sh = p.sigma_eta * std::sqrt(R);
    const double lev_scale = p.rho(0) / std::sqrt(R);
    const double sy_scale = std::sqrt(1.0 - p.rho(0) * p.rho(0) / R);
    const long n = y.size();
    std::vector<double> hbar(static_cast<size_t>(n), 0.0);
    long cached_t = -1;
    double lag = 0.0;
    auto prop = [&](long t, double h, double z) {
        if (t != cached_t) {
            lag = 0.0;
            for (int j = 1; j <= k && t - j >= 0; ++j)
                lag += p.rho(j) * (y(t - j) - p.mu) * std::exp(-0.5 * hbar[static_cast<size_t>(t - j)]);
            cached_t = t;
        }
        return p.c + p.phi * h + p.sigma_eta * lag + sh * z;
    };
    auto lw = [&](long t, double h, double z) {
        const double e = std::exp(0.5 * h);
        const double s = e * sy_scale;
        const double r = (y(t) - p.mu - lev_scale * e * z) / s;
        return -0.5 * detail::kLog2Pi - std::log(s) - 0.5 * r * r;
    };
    std::vector<char> missing(static_cast<size_t>(n));
    for (long t = 0; t < n; ++t) missing[static_cast<size_t>(t)] = !std::isfinite(y(t));
    if (k > 0)
        for (char m : missing)
            if (m) throw Error(Errc::LagWindowMissing, "missing observations are not supported with lags");
    const FilteredHook hook = [&](long t, double m) { hbar[static_cast<size_t>(t)] = m; };
    return csir_core(n, n_particles, seed, p.c / (1.0 - p.phi), p.sigma_eta / std::sqrt(1.0 - p.phi * p.phi), prop,
                     lw, missing, hook);
}

}  // namespace bf
