#pragma once

// Monte Carlo study engine, full-path mode oracle, metrics and the
// command-line front end.

#include <yaml-cpp/yaml.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bf/errors.hpp"
#include "bf/estimation.hpp"
#include "bf/filter.hpp"
#include "bf/kalman.hpp"
#include "bf/numerics.hpp"
#include "bf/obsmodels.hpp"
#include "bf/particle.hpp"
#include "bf/svleverage.hpp"

namespace bf {

// ---------------------------------------------------------------------
// Seeds

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Child seed for stream `index` of master seed S: the (index+1)-th output
// of splitmix64 started at S.
inline uint64_t child_seed(uint64_t master, uint64_t index) {
    uint64_t s = master + index * 0x9E3779B97F4A7C15ULL;
    return splitmix64(s);
}

// ---------------------------------------------------------------------
// Metrics

struct Losses {
    double mae = 0.0;
    double rmse = 0.0;
};

inline Losses metrics(const std::vector<double>& pred, const std::vector<double>& truth) {
    if (pred.size() != truth.size()) throw Error(Errc::LengthMismatch, "predictions and truths differ in length");
    if (truth.empty()) throw Error(Errc::LengthMismatch, "empty series");
    double sa = 0.0, ss = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double e = pred[i] - truth[i];
        sa += std::abs(e);
        ss += e * e;
    }
    const double n = static_cast<double>(pred.size());
    return {sa / n, std::sqrt(ss / n)};
}

// ---------------------------------------------------------------------
// Simulation of scalar-state models

struct Simulated {
    Series y;
    Vec alpha;
};

inline Simulated simulate(const StateSpaceModel& m, long n, uint64_t seed) {
    m.obs.validate();
    const LinearGaussianDynamics& d = m.dyn;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N01(0.0, 1.0);
    const int k = d.dim();
    const Moments mo = stationary_moments(d.c, d.T, d.Q);
    const Mat Lc = Eigen::LLT<Mat>(mo.cov + 1e-300 * Mat::Identity(k, k)).matrixL();
    const Mat Lq = Eigen::LLT<Mat>(d.Q + 1e-300 * Mat::Identity(k, k)).matrixL();
    auto normals = [&]() {
        Vec z(k);
        for (int i = 0; i < k; ++i) z(i) = N01(rng);
        return z;
    };
    Simulated s{Series(n, m.obs.obs_dim()), Vec(n * k)};
    Vec a = mo.mean + Lc * normals();
    for (long t = 0; t < n; ++t) {
        if (t > 0) a = d.c + d.T * a + Lq * normals();
        s.alpha.segment(t * k, k) = a;
        s.y.row(t) = m.obs.sample(a, rng).transpose();
    }
    return s;
}

// ---------------------------------------------------------------------
// Full-path mode over a data window

inline constexpr long kModeWindowMax = 250;

struct ModeResult {
    Series modes;  // n x m
    int iterations = 0;
};

// Joint Newton on the stacked path maximising the sum of observation and
// transition log-densities plus a Gaussian prior on the first state. The
// negative Hessian is block tridiagonal and is factorised blockwise.
inline ModeResult mode_oracle(const StateSpaceModel& model, const Series& data, const StateBelief& prior,
                              double tol = 1e-10, int max_iter = 200) {
    const long n = data.rows();
    const int m = model.dyn.dim();
    if (n < 1 || n > kModeWindowMax) throw Error(Errc::InvalidParams, "window length must be in [1, 250]");
    const Mat& T = model.dyn.T;
    Eigen::LLT<Mat> ql(model.dyn.Q);
    if (ql.info() != Eigen::Success || !is_pd(model.dyn.Q)) throw Error(Errc::SingularQ, "Q not positive definite");
    const Mat Qi = inverse_pd(model.dyn.Q);
    const Mat TQi = T.transpose() * Qi;
    const Mat TQiT = symmetrize(TQi * T);

    std::vector<Vec> a(static_cast<size_t>(n));
    a[0] = prior.mean;
    for (long t = 1; t < n; ++t) a[static_cast<size_t>(t)] = model.dyn.c + T * a[static_cast<size_t>(t - 1)];

    auto value = [&](const std::vector<Vec>& x, std::vector<ObsEval>* ev) {
        double v = 0.0;
        const Vec d0 = x[0] - prior.mean;
        v -= 0.5 * d0.dot(prior.info * d0);
        for (long t = 0; t < n; ++t) {
            const size_t u = static_cast<size_t>(t);
            if (t > 0) {
                const Vec r = x[u] - model.dyn.c - T * x[u - 1];
                v -= 0.5 * r.dot(Qi * r);
            }
            const Vec y = data.row(t).transpose();
            if (has_missing(y)) {
                if (ev) (*ev)[u] = ObsEval{0.0, Vec::Zero(m), Mat::Zero(m, m), Mat::Zero(m, m)};
                continue;
            }
            ObsEval e = model.obs.eval(y, x[u]);
            v += e.logpdf;
            if (ev) (*ev)[u] = std::move(e);
        }
        return v;
    };
    auto try_value = [&](const std::vector<Vec>& x) {
        try {
            return value(x, nullptr);
        } catch (const Error&) {
            return -std::numeric_limits<double>::infinity();
        }
    };

    // Solves N d = g for block tridiagonal N with diagonal D and
    // super-diagonal blocks U (U_t couples t and t+1).
    auto solve = [&](std::vector<Mat> D, const std::vector<Mat>& U, std::vector<Vec> g, std::vector<Vec>& d) {
        std::vector<Eigen::LLT<Mat>> f(static_cast<size_t>(n));
        for (long t = 0; t < n; ++t) {
            const size_t u = static_cast<size_t>(t);
            if (t > 0) {
                const Mat L = U[u - 1].transpose();
                D[u] -= L * f[u - 1].solve(U[u - 1]);
                g[u] -= L * f[u - 1].solve(g[u - 1]);
            }
            if (!is_pd(symmetrize(D[u]))) return false;
            f[u].compute(symmetrize(D[u]));
        }
        d.assign(static_cast<size_t>(n), Vec());
        for (long t = n - 1; t >= 0; --t) {
            const size_t u = static_cast<size_t>(t);
            Vec rhs = g[u];
            if (t < n - 1) rhs -= U[u] * d[u + 1];
            d[u] = f[u].solve(rhs);
        }
        return true;
    };

    ModeResult res;
    std::vector<ObsEval> ev(static_cast<size_t>(n));
    double F = value(a, &ev);
    if (!std::isfinite(F)) throw Error(Errc::NonFinite, "objective not finite at the starting path");
    for (int it = 1; it <= max_iter; ++it) {
        std::vector<Vec> g(static_cast<size_t>(n));
        std::vector<Mat> U(static_cast<size_t>(std::max<long>(n - 1, 0)), -TQi);
        for (long t = 0; t < n; ++t) {
            const size_t u = static_cast<size_t>(t);
            g[u] = ev[u].score;
            if (t == 0) g[u] -= prior.info * (a[0] - prior.mean);
            if (t > 0) g[u] -= Qi * (a[u] - model.dyn.c - T * a[u - 1]);
            if (t < n - 1) g[u] += TQi * (a[u + 1] - model.dyn.c - T * a[u]);
        }
        auto diag = [&](bool expected) {
            std::vector<Mat> D(static_cast<size_t>(n));
            for (long t = 0; t < n; ++t) {
                const size_t u = static_cast<size_t>(t);
                D[u] = expected ? ev[u].expected : ev[u].realised;
                if (t == 0) D[u] += prior.info;
                if (t > 0) D[u] += Qi;
                if (t < n - 1) D[u] += TQiT;
            }
            return D;
        };
        std::vector<Vec> step;
        if (!solve(diag(false), U, g, step) && !solve(diag(true), U, g, step))
            throw Error(Errc::NotConverged, "no positive definite curvature along the path");
        double s = 1.0, Fn = -std::numeric_limits<double>::infinity();
        std::vector<Vec> an(static_cast<size_t>(n));
        for (int h = 0; h <= 30; ++h, s *= 0.5) {
            for (long t = 0; t < n; ++t) an[static_cast<size_t>(t)] = a[static_cast<size_t>(t)] + s * step[static_cast<size_t>(t)];
            Fn = try_value(an);
            if (Fn >= F - 1e-12 * (1.0 + std::abs(F))) break;
        }
        if (!(Fn >= F - 1e-12 * (1.0 + std::abs(F)))) throw Error(Errc::NotConverged, "line search failed");
        double dmax = 0.0;
        for (long t = 0; t < n; ++t) dmax = std::max(dmax, s * step[static_cast<size_t>(t)].cwiseAbs().maxCoeff());
        a = an;
        F = value(a, &ev);
        res.iterations = it;
        if (dmax < tol) {
            res.modes = Series(n, m);
            for (long t = 0; t < n; ++t) res.modes.row(t) = a[static_cast<size_t>(t)].transpose();
            return res;
        }
    }
    throw Error(Errc::NotConverged, "mode iteration did not converge");
}

inline ModeResult mode_oracle(const StateSpaceModel& model, const Series& data) {
    return mode_oracle(model, data, unconditional_belief(model.dyn));
}

// ---------------------------------------------------------------------
// Model construction from named parameters

inline StateSpaceModel make_model(const std::string& id, const std::map<std::string, double>& params) {
    Family f;
    if (!family_from_id(id, f)) throw Error(Errc::InvalidParams, "unknown model '" + id + "'");
    StateSpaceModel m = default_model(f);
    for (const auto& [k, v] : params) {
        if (k == "c") m.dyn.c(0) = v;
        else if (k == "T") m.dyn.T(0, 0) = v;
        else if (k == "Q") m.dyn.Q(0, 0) = v;
        else if (k == "kappa") m.obs.shape().kappa = v;
        else if (k == "nu") m.obs.shape().nu = v;
        else if (k == "sigma") m.obs.shape().sigma = v;
        else if (k == "H" && f == Family::LinearGauss) m.obs.lg().H(0, 0) = v;
        else throw Error(Errc::InvalidParams, "unknown parameter '" + k + "' for " + id);
    }
    m.obs.validate();
    if (!m.dyn.stationary()) throw Error(Errc::InvalidParams, "dynamics not stationary");
    if (!(m.dyn.Q(0, 0) > 0.0)) throw Error(Errc::InvalidParams, "Q must be positive");
    return m;
}

// ---------------------------------------------------------------------
// Study

enum class Split { First, Last };

struct StudyConfig {
    std::string model = "poisson";
    std::map<std::string, double> params;  // overrides of the default constants
    int n_series = 100;
    long length = 5000;
    Split split = Split::First;
    bool estimate = false;
    std::vector<std::string> methods = {"bellman"};
    std::string baseline = "bellman";
    uint64_t seed = 1;
    int threads = 1;
    int particles = 1000;
    long mode_window = 250;
    std::string update_method;  // empty: per-family default
    std::string csv_path, json_path;

    void validate() const {
        if (n_series < 1) throw Error(Errc::InvalidParams, "n_series must be at least one");
        if (length < 4 || length % 2) throw Error(Errc::InvalidParams, "length must be even and at least 4");
        if (threads < 1) throw Error(Errc::InvalidParams, "threads must be positive");
        if (particles < 2) throw Error(Errc::InvalidParams, "particles must be at least two");
        if (mode_window < 1 || mode_window > kModeWindowMax) throw Error(Errc::InvalidParams, "mode_window out of range");
        if (methods.empty()) throw Error(Errc::InvalidParams, "no methods");
        for (const auto& mt : methods)
            if (mt != "bellman" && mt != "kalman-qmle" && mt != "csir" && mt != "mode")
                throw Error(Errc::InvalidParams, "unknown method '" + mt + "'");
        if (std::find(methods.begin(), methods.end(), baseline) == methods.end())
            throw Error(Errc::InvalidParams, "baseline must be one of the methods");
    }
};

struct MethodResult {
    std::string method;
    double mae = std::numeric_limits<double>::quiet_NaN();
    double rmse = std::numeric_limits<double>::quiet_NaN();
    double rel_mae = std::numeric_limits<double>::quiet_NaN();
    double rel_rmse = std::numeric_limits<double>::quiet_NaN();
    long succeeded = 0;
    long failed = 0;
    std::vector<double> series_mae, series_rmse;  // NaN for failed series
    std::vector<std::string> errors;              // empty for successful series
    std::vector<Vec> estimates;                   // natural parameters, when estimated
    std::vector<std::string> param_names;
    double estimate_seconds = 0.0;
    double filter_seconds = 0.0;
};

struct StudyReport {
    StudyConfig config;
    long horizon = 0;  // evaluated steps per series
    std::vector<MethodResult> methods;

    const MethodResult& method(const std::string& name) const {
        for (const auto& m : methods)
            if (m.method == name) return m;
        throw Error(Errc::InvalidParams, "method not in report");
    }
};

namespace detail {

struct SeriesOutcome {
    bool ok = false;
    Losses loss;
    std::string error;
    Vec estimate;
    double est_s = 0.0, filt_s = 0.0;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline UpdateOptions study_update(const StudyConfig& cfg, const ObservationModel& obs) {
    UpdateOptions o = UpdateOptions::defaults_for(obs);
    if (cfg.update_method.empty()) return o;
    if (cfg.update_method == "newton") o.method = Method::Newton;
    else if (cfg.update_method == "fisher") o.method = Method::Fisher;
    else if (cfg.update_method == "bhhh") o.method = Method::BHHH;
    else if (cfg.update_method == "hybrid") o.method = Method::Hybrid;
    else throw Error(Errc::InvalidParams, "unknown update method '" + cfg.update_method + "'");
    if (o.method != Method::Hybrid) o.weight = std::numeric_limits<double>::quiet_NaN();
    return o;
}

inline SeriesOutcome run_method(const StudyConfig& cfg, const std::string& method, const StateSpaceModel& truth,
                                const Simulated& sim, uint64_t series_seed) {
    using clock = std::chrono::steady_clock;
    SeriesOutcome out;
    const long n = cfg.length, half = n / 2;
    const Series est_data = cfg.split == Split::First ? Series(sim.y.topRows(half)) : Series(sim.y.bottomRows(half));
    const UpdateOptions uo = study_update(cfg, truth.obs);
    FitOptions fo;
    fo.standard_errors = false;
    std::vector<double> a_pred(static_cast<size_t>(n));
    StateSpaceModel used = truth;
    try {
        if (method == "bellman") {
            auto t0 = clock::now();
            if (cfg.estimate) {
                const FitResult r = fit_model(truth, est_data, uo, fo);
                used = with_params(truth, r.estimate);
                out.estimate = r.estimate;
            }
            out.est_s = seconds_since(t0);
            t0 = clock::now();
            const ScalarTrace tr =
                filter_lg_scalar(used.obs, used.dyn.c(0), used.dyn.T(0, 0), used.dyn.Q(0, 0), sim.y, uo, true);
            a_pred = tr.a_pred;
            out.filt_s = seconds_since(t0);
        } else if (method == "kalman-qmle") {
            auto t0 = clock::now();
            const QmleInput q = qmle_transforms(truth.obs, sim.y);
            LinearGaussianDynamics dyn = truth.dyn;
            LinearGaussianObservation lo = q.obs;
            if (cfg.estimate) {
                const QmleFit r = qmle_fit(truth, est_data, fo);
                dyn = r.dyn;
                lo = r.obs;
                out.estimate = r.result.estimate;
            }
            out.est_s = seconds_since(t0);
            t0 = clock::now();
            const KalmanRun kr = kalman_filter(lo, dyn, q.x, unconditional_belief(dyn));
            for (long t = 0; t < n; ++t) a_pred[static_cast<size_t>(t)] = kr.steps[static_cast<size_t>(t)].predicted.mean(0);
            out.filt_s = seconds_since(t0);
        } else if (method == "csir") {
            const uint64_t pf_seed = child_seed(series_seed, 1);
            auto t0 = clock::now();
            if (cfg.estimate) {
                const FitResult r = csir_estimate(truth, est_data, cfg.particles, pf_seed, fo);
                used = with_params(truth, r.estimate);
                out.estimate = r.estimate;
            }
            out.est_s = seconds_since(t0);
            t0 = clock::now();
            const CsirRun cr = csir_filter(used, sim.y, cfg.particles, pf_seed);
            a_pred = cr.pred_median;
            out.filt_s = seconds_since(t0);
        } else {  // mode
            auto t0 = clock::now();
            const double c = truth.dyn.c(0), T = truth.dyn.T(0, 0);
            const StateBelief prior = unconditional_belief(truth.dyn);
            for (long t = half; t < n; ++t) {
                const long w = std::min(cfg.mode_window, t);
                const ModeResult mr = mode_oracle(truth, Series(sim.y.middleRows(t - w, w)), prior);
                a_pred[static_cast<size_t>(t)] = c + T * mr.modes(w - 1, 0);
            }
            out.filt_s = seconds_since(t0);
        }
        std::vector<double> pred, tru;
        pred.reserve(static_cast<size_t>(n - half));
        tru.reserve(static_cast<size_t>(n - half));
        for (long t = half; t < n; ++t) {
            pred.push_back(truth.obs.target(a_pred[static_cast<size_t>(t)]));
            tru.push_back(truth.obs.target(sim.alpha(t)));
        }
        out.loss = metrics(pred, tru);
        out.ok = std::isfinite(out.loss.mae) && std::isfinite(out.loss.rmse);
        if (!out.ok) out.error = "NonFinite: non-finite loss";
    } catch (const Error& e) {
        out.error = std::string(errc_name(e.code())) + ": " + e.what();
    }
    return out;
}

}  // namespace detail

inline StudyReport run_study(const StudyConfig& cfg) {
    cfg.validate();
    const StateSpaceModel truth = make_model(cfg.model, cfg.params);
    if (!truth.obs.is_scalar()) throw Error(Errc::UnsupportedDimension, "studies support scalar-state families");
    const size_t S = static_cast<size_t>(cfg.n_series), M = cfg.methods.size();
    std::vector<std::vector<detail::SeriesOutcome>> res(S, std::vector<detail::SeriesOutcome>(M));

    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (size_t i; (i = next.fetch_add(1)) < S;) {
            const uint64_t s = child_seed(cfg.seed, i);
            const Simulated sim = simulate(truth, cfg.length, s);
            for (size_t j = 0; j < M; ++j) res[i][j] = detail::run_method(cfg, cfg.methods[j], truth, sim, s);
        }
    };
    const int nt = std::min<int>(cfg.threads, static_cast<int>(S));
    if (nt <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < nt; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    StudyReport rep;
    rep.config = cfg;
    rep.horizon = cfg.length / 2;
    const ParamLayout L = layout_for(truth);
    for (size_t j = 0; j < M; ++j) {
        MethodResult mr;
        mr.method = cfg.methods[j];
        if (cfg.estimate && mr.method != "mode") {
            if (mr.method == "kalman-qmle") {
                mr.param_names = {"c", "T", "Q"};
                if (truth.obs.family() == Family::LocalLevelT) mr.param_names.push_back("H");
            } else {
                mr.param_names = L.names;
            }
        }
        double sa = 0.0, ss = 0.0;
        for (size_t i = 0; i < S; ++i) {
            const detail::SeriesOutcome& o = res[i][j];
            mr.estimate_seconds += o.est_s;
            mr.filter_seconds += o.filt_s;
            mr.errors.push_back(o.error);
            if (!mr.param_names.empty()) mr.estimates.push_back(o.estimate);
            if (o.ok) {
                ++mr.succeeded;
                sa += o.loss.mae;
                ss += o.loss.rmse * o.loss.rmse;
                mr.series_mae.push_back(o.loss.mae);
                mr.series_rmse.push_back(o.loss.rmse);
            } else {
                ++mr.failed;
                mr.series_mae.push_back(std::numeric_limits<double>::quiet_NaN());
                mr.series_rmse.push_back(std::numeric_limits<double>::quiet_NaN());
            }
        }
        if (mr.succeeded > 0) {
            mr.mae = sa / static_cast<double>(mr.succeeded);
            mr.rmse = std::sqrt(ss / static_cast<double>(mr.succeeded));
        }
        rep.methods.push_back(std::move(mr));
    }
    const MethodResult& base = rep.method(cfg.baseline);
    const double bm = base.mae, br = base.rmse;
    for (auto& mr : rep.methods) {
        mr.rel_mae = mr.mae / bm;
        mr.rel_rmse = mr.rmse / br;
    }
    return rep;
}

// ---------------------------------------------------------------------
// Serialisation

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

inline nlohmann::json vec_json(const Vec& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number_or_null(v(i)));
    return a;
}

// Timings are excluded unless asked for, so reports under a fixed seed
// are byte-identical.
inline nlohmann::json report_json(const StudyReport& r, bool with_timings = false) {
    using nlohmann::json;
    json j;
    j["model"] = r.config.model;
    j["params"] = r.config.params;
    j["n_series"] = r.config.n_series;
    j["length"] = r.config.length;
    j["horizon"] = r.horizon;
    j["split"] = r.config.split == Split::First ? "first" : "last";
    j["estimate"] = r.config.estimate;
    j["seed"] = r.config.seed;
    j["baseline"] = r.config.baseline;
    j["methods"] = json::array();
    for (const auto& m : r.methods) {
        json mj;
        mj["method"] = m.method;
        mj["mae"] = number_or_null(m.mae);
        mj["rmse"] = number_or_null(m.rmse);
        mj["relative_mae"] = number_or_null(m.rel_mae);
        mj["relative_rmse"] = number_or_null(m.rel_rmse);
        mj["succeeded"] = m.succeeded;
        mj["failed"] = m.failed;
        json errs = json::array();
        for (size_t i = 0; i < m.errors.size(); ++i)
            if (!m.errors[i].empty()) errs.push_back({{"series", i}, {"error", m.errors[i]}});
        mj["failures"] = errs;
        if (!m.param_names.empty()) {
            mj["param_names"] = m.param_names;
            json est = json::array();
            for (const auto& e : m.estimates) est.push_back(vec_json(e));
            mj["estimates"] = est;
        }
        if (with_timings) {
            mj["estimate_seconds"] = m.estimate_seconds;
            mj["filter_seconds"] = m.filter_seconds;
        }
        j["methods"].push_back(mj);
    }
    return j;
}

inline std::string fmt_double(double v) {
    if (!std::isfinite(v)) return "nan";
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

// Per-series losses: series,method,mae,rmse,failed
inline void write_series_csv(const StudyReport& r, std::ostream& os) {
    os << "series,method,mae,rmse,failed\n";
    for (const auto& m : r.methods)
        for (size_t i = 0; i < m.series_mae.size(); ++i)
            os << i << ',' << m.method << ',' << fmt_double(m.series_mae[i]) << ',' << fmt_double(m.series_rmse[i])
               << ',' << (m.errors[i].empty() ? 0 : 1) << '\n';
}

// ---------------------------------------------------------------------
// Configuration and CSV input

inline StudyConfig load_study_config(const YAML::Node& n) {
    StudyConfig c;
    try {
        if (n["model"]) c.model = n["model"].as<std::string>();
        if (n["params"])
            for (const auto& kv : n["params"]) c.params[kv.first.as<std::string>()] = kv.second.as<double>();
        if (n["n_series"]) c.n_series = n["n_series"].as<int>();
        if (n["length"]) c.length = n["length"].as<long>();
        if (n["split"]) {
            const std::string s = n["split"].as<std::string>();
            if (s == "first") c.split = Split::First;
            else if (s == "last") c.split = Split::Last;
            else throw Error(Errc::InvalidParams, "split must be 'first' or 'last'");
        }
        if (n["estimate"]) c.estimate = n["estimate"].as<bool>();
        if (n["methods"]) c.methods = n["methods"].as<std::vector<std::string>>();
        c.baseline = n["baseline"] ? n["baseline"].as<std::string>() : c.methods.front();
        if (n["seed"]) c.seed = n["seed"].as<uint64_t>();
        if (n["threads"]) c.threads = n["threads"].as<int>();
        if (n["particles"]) c.particles = n["particles"].as<int>();
        if (n["mode_window"]) c.mode_window = n["mode_window"].as<long>();
        if (n["update"]) c.update_method = n["update"].as<std::string>();
        if (n["output"]) {
            if (n["output"]["csv"]) c.csv_path = n["output"]["csv"].as<std::string>();
            if (n["output"]["json"]) c.json_path = n["output"]["json"].as<std::string>();
        }
    } catch (const YAML::Exception& e) {
        throw Error(Errc::InvalidParams, std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<double>> cols;

    int col(const std::string& name) const {
        for (size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        return -1;
    }
};

inline Table read_csv(std::istream& is) {
    Table tb;
    std::string line;
    if (!std::getline(is, line)) throw Error(Errc::InvalidParams, "empty CSV");
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cell.erase(0, cell.find_first_not_of(" \t\r"));
            cell.erase(cell.find_last_not_of(" \t\r") + 1);
            tb.header.push_back(cell);
        }
    }
    tb.cols.assign(tb.header.size(), {});
    long row = 1;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        std::stringstream ss(line);
        std::string cell;
        size_t i = 0;
        while (std::getline(ss, cell, ',')) {
            if (i >= tb.header.size()) throw Error(Errc::InvalidParams, "too many fields on line " + std::to_string(row));
            cell.erase(0, cell.find_first_not_of(" \t\r"));
            cell.erase(cell.find_last_not_of(" \t\r") + 1);
            double v = std::numeric_limits<double>::quiet_NaN();
            if (!cell.empty() && cell != "NA" && cell != "nan" && cell != "NaN") {
                size_t pos = 0;
                try {
                    v = std::stod(cell, &pos);
                } catch (const std::exception&) {
                    pos = 0;
                }
                if (pos != cell.size()) throw Error(Errc::InvalidParams, "bad number '" + cell + "' on line " + std::to_string(row));
            }
            tb.cols[i++].push_back(v);
        }
        for (; i < tb.header.size(); ++i) tb.cols[i].push_back(std::numeric_limits<double>::quiet_NaN());
    }
    return tb;
}

inline Table read_csv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(Errc::InvalidParams, "cannot open '" + path + "'");
    return read_csv(f);
}

// Observation columns: y (or y1, y2 for two-dimensional families),
// falling back to the leading columns.
inline Series observations(const Table& tb, int dim) {
    std::vector<int> idx;
    if (dim == 1 && tb.col("y") >= 0) idx = {tb.col("y")};
    else if (dim == 2 && tb.col("y1") >= 0 && tb.col("y2") >= 0) idx = {tb.col("y1"), tb.col("y2")};
    else
        for (int i = 0; i < dim && i < static_cast<int>(tb.header.size()); ++i) idx.push_back(i);
    if (static_cast<int>(idx.size()) != dim) throw Error(Errc::InvalidParams, "not enough columns in data");
    const long n = static_cast<long>(tb.cols[static_cast<size_t>(idx[0])].size());
    Series y(n, dim);
    for (int j = 0; j < dim; ++j)
        for (long t = 0; t < n; ++t) y(t, j) = tb.cols[static_cast<size_t>(idx[static_cast<size_t>(j)])][static_cast<size_t>(t)];
    return y;
}

inline SvLeverageParams load_sv_params(const YAML::Node& n) {
    SvLeverageParams p = SvLeverageParams::leverage_benchmark();
    try {
        if (n["mu"]) p.mu = n["mu"].as<double>();
        if (n["c"]) p.c = n["c"].as<double>();
        if (n["phi"]) p.phi = n["phi"].as<double>();
        if (n["sigma_eta"]) p.sigma_eta = n["sigma_eta"].as<double>();
        if (n["rho"]) {
            const auto r = n["rho"].as<std::vector<double>>();
            p.rho = Eigen::Map<const Vec>(r.data(), static_cast<Eigen::Index>(r.size()));
        }
    } catch (const YAML::Exception& e) {
        throw Error(Errc::InvalidParams, std::string("parameters: ") + e.what());
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------
// Command line

namespace detail {

inline bool is_config_error(Errc e) {
    switch (e) {
        case Errc::InvalidParams:
        case Errc::DegenerateParams:
        case Errc::NotApplicable:
        case Errc::UnsupportedDimension:
        case Errc::LengthMismatch:
        case Errc::OutOfDomain:
        case Errc::OutOfSupport:
        case Errc::LagWindowMissing: return true;
        default: return false;
    }
}

class Output {
public:
    Output(const std::string& path, std::ostream& fallback) : os_(&fallback) {
        if (!path.empty()) {
            file_.open(path);
            if (!file_) throw Error(Errc::InvalidParams, "cannot write '" + path + "'");
            os_ = &file_;
        }
    }
    std::ostream& operator()() { return *os_; }

private:
    std::ofstream file_;
    std::ostream* os_;
};

inline Method parse_method(const std::string& s) {
    if (s == "newton") return Method::Newton;
    if (s == "fisher") return Method::Fisher;
    if (s == "bhhh") return Method::BHHH;
    if (s == "hybrid") return Method::Hybrid;
    throw Error(Errc::InvalidParams, "unknown method '" + s + "'");
}

// Parameters from an optional YAML mapping file, then name=value overrides.
inline std::map<std::string, double> parse_params(const std::vector<std::string>& kvs, const std::string& file = "") {
    std::map<std::string, double> out;
    if (!file.empty()) {
        try {
            for (const auto& kv : YAML::LoadFile(file)) out[kv.first.as<std::string>()] = kv.second.as<double>();
        } catch (const YAML::Exception& e) {
            throw Error(Errc::InvalidParams, "parameter file: " + std::string(e.what()));
        }
    }
    for (const auto& kv : kvs) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw Error(Errc::InvalidParams, "expected name=value, got '" + kv + "'");
        try {
            out[kv.substr(0, eq)] = std::stod(kv.substr(eq + 1));
        } catch (const std::exception&) {
            throw Error(Errc::InvalidParams, "bad value in '" + kv + "'");
        }
    }
    return out;
}

inline nlohmann::json fit_json(const ParamLayout& L, const FitResult& r) {
    nlohmann::json j;
    j["param_names"] = L.names;
    j["estimate"] = vec_json(r.estimate);
    j["se"] = vec_json(r.se);
    j["objective"] = number_or_null(r.objective);
    j["evaluations"] = r.evaluations;
    return j;
}

}  // namespace detail

// Exit codes: 0 success, 2 configuration error, 3 numerical failure.
inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Bellman filtering and estimation toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    uint64_t seed = 1;
    int threads = 1;
    std::string out_path;
    app.add_option("--seed", seed, "Master random seed")->capture_default_str();
    app.add_option("--threads", threads, "Worker threads for studies")->capture_default_str();
    app.add_option("--out", out_path, "Output file (default: standard output)");

    std::string model = "poisson", data_path, filter = "bellman", method, config_path, params_path, timings_path;
    std::vector<std::string> kv;
    long n = 1000;
    int particles = 1000, lags = 2;

    auto* sim = app.add_subcommand("simulate", "Simulate a scalar-state model");
    sim->add_option("--model", model)->capture_default_str();
    sim->add_option("--n", n)->capture_default_str();
    sim->add_option("--params", params_path, "YAML file of named parameters");
    sim->add_option("--param", kv, "Parameter override name=value");

    auto* fil = app.add_subcommand("filter", "Filter a data file");
    fil->add_option("--model", model)->capture_default_str();
    fil->add_option("--data", data_path)->required();
    fil->add_option("--filter", filter)->check(CLI::IsMember({"bellman", "kalman", "csir"}))->capture_default_str();
    fil->add_option("--method", method, "newton | fisher | bhhh | hybrid");
    fil->add_option("--particles", particles)->capture_default_str();
    fil->add_option("--params", params_path, "YAML file of named parameters");
    fil->add_option("--param", kv, "Parameter override name=value");

    auto* est = app.add_subcommand("estimate", "Estimate parameters from a data file");
    est->add_option("--model", model)->capture_default_str();
    est->add_option("--data", data_path)->required();
    est->add_option("--filter", filter)->check(CLI::IsMember({"bellman", "kalman", "csir"}))->capture_default_str();
    est->add_option("--method", method, "newton | fisher | bhhh | hybrid");
    est->add_option("--particles", particles)->capture_default_str();
    est->add_option("--params", params_path, "YAML file of named parameters");
    est->add_option("--param", kv, "Starting value name=value");

    auto* stu = app.add_subcommand("study", "Run a Monte Carlo study");
    stu->add_option("--config", config_path)->required();
    stu->add_option("--timings", timings_path, "Write per-method timings to this file");

    auto* svs = app.add_subcommand("sv-simulate", "Simulate the leverage volatility model");
    svs->add_option("--params", params_path, "YAML file with mu, c, phi, sigma_eta, rho");
    svs->add_option("--n", n)->capture_default_str();

    auto* svf = app.add_subcommand("sv-fit", "Fit the leverage volatility model");
    svf->add_option("--data", data_path)->required();
    svf->add_option("--lags", lags)->capture_default_str();

    auto* mo = app.add_subcommand("mode-oracle", "Full-path mode over a data window");
    mo->add_option("--model", model)->capture_default_str();
    mo->add_option("--data", data_path)->required();
    mo->add_option("--params", params_path, "YAML file of named parameters");
    mo->add_option("--param", kv, "Parameter override name=value");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, out, err);
        return rc == 0 ? 0 : 2;
    }

    try {
        detail::Output o(out_path, out);
        std::ostream& os = o();
        os << std::setprecision(17);
        if (sim->parsed()) {
            const StateSpaceModel m = make_model(model, detail::parse_params(kv, params_path));
            if (n < 1) throw Error(Errc::InvalidParams, "n must be positive");
            const Simulated s = simulate(m, n, seed);
            const bool two = m.obs.obs_dim() == 2;
            os << (two ? "t,y1,y2,alpha,signal\n" : "t,y,alpha,signal\n");
            for (long t = 0; t < n; ++t) {
                os << t << ',' << s.y(t, 0);
                if (two) os << ',' << s.y(t, 1);
                os << ',' << s.alpha(t) << ',' << m.obs.target(s.alpha(t)) << '\n';
            }
        } else if (fil->parsed()) {
            const StateSpaceModel m = make_model(model, detail::parse_params(kv, params_path));
            const Series y = observations(read_csv_file(data_path), m.obs.obs_dim());
            if (filter == "bellman") {
                UpdateOptions uo = UpdateOptions::defaults_for(m.obs);
                if (!method.empty()) {
                    uo.method = detail::parse_method(method);
                    if (uo.method != Method::Hybrid) uo.weight = std::numeric_limits<double>::quiet_NaN();
                }
                const ScalarTrace tr = filter_lg_scalar(m.obs, m.dyn.c(0), m.dyn.T(0, 0), m.dyn.Q(0, 0), y, uo);
                os << "t,a_pred,a_upd,i_pred,i_upd,iterations,converged,loglik_term,prediction\n";
                for (long t = 0; t < y.rows(); ++t) {
                    const size_t u = static_cast<size_t>(t);
                    os << t << ',' << tr.a_pred[u] << ',' << tr.a_upd[u] << ',' << tr.i_pred[u] << ',' << tr.i_upd[u]
                       << ',' << tr.iterations[u] << ',' << int(tr.converged[u]) << ',' << tr.loglik[u] << ','
                       << m.obs.target(tr.a_pred[u]) << '\n';
                }
                err << "objective " << std::setprecision(17) << tr.objective << '\n';
            } else if (filter == "kalman") {
                const QmleInput q = qmle_transforms(m.obs, y);
                const KalmanRun kr = kalman_filter(q.obs, m.dyn, q.x, unconditional_belief(m.dyn));
                os << "t,a_pred,a_upd,i_pred,i_upd,loglik_term,prediction\n";
                for (long t = 0; t < y.rows(); ++t) {
                    const KalmanStep& s = kr.steps[static_cast<size_t>(t)];
                    os << t << ',' << s.predicted.mean(0) << ',' << s.updated.mean(0) << ',' << s.predicted.info(0, 0)
                       << ',' << s.updated.info(0, 0) << ',' << s.loglik << ',' << m.obs.target(s.predicted.mean(0))
                       << '\n';
                }
                err << "quasi-loglik " << std::setprecision(17) << kr.loglik << '\n';
            } else {
                const CsirRun cr = csir_filter(m, y, particles, seed);
                os << "t,pred_mean,pred_median,filt_mean,filt_median,ess,prediction\n";
                for (long t = 0; t < y.rows(); ++t) {
                    const size_t u = static_cast<size_t>(t);
                    os << t << ',' << cr.pred_mean[u] << ',' << cr.pred_median[u] << ',' << cr.filt_mean[u] << ','
                       << cr.filt_median[u] << ',' << cr.ess[u] << ',' << m.obs.target(cr.pred_median[u]) << '\n';
                }
                err << "loglik " << std::setprecision(17) << cr.loglik << '\n';
            }
        } else if (est->parsed()) {
            const StateSpaceModel m = make_model(model, detail::parse_params(kv, params_path));
            const Series y = observations(read_csv_file(data_path), m.obs.obs_dim());
            nlohmann::json j;
            j["model"] = model;
            j["filter"] = filter;
            if (filter == "bellman") {
                UpdateOptions uo = UpdateOptions::defaults_for(m.obs);
                if (!method.empty()) {
                    uo.method = detail::parse_method(method);
                    if (uo.method != Method::Hybrid) uo.weight = std::numeric_limits<double>::quiet_NaN();
                }
                j.update(detail::fit_json(layout_for(m), fit_model(m, y, uo)));
            } else if (filter == "kalman") {
                const QmleFit r = qmle_fit(m, y);
                ParamLayout L;
                for (const char* nm : {"c", "T", "Q"}) L.add(nm, TKind::Identity);
                if (r.result.estimate.size() == 4) L.add("H", TKind::Identity);
                j.update(detail::fit_json(L, r.result));
            } else {
                j["particles"] = particles;
                j.update(detail::fit_json(layout_for(m), csir_estimate(m, y, particles, seed)));
            }
            os << j.dump(2) << '\n';
        } else if (stu->parsed()) {
            StudyConfig cfg = load_study_config(YAML::LoadFile(config_path));
            if (app.get_option("--seed")->count()) cfg.seed = seed;
            if (app.get_option("--threads")->count()) cfg.threads = threads;
            cfg.validate();
            const StudyReport r = run_study(cfg);
            os << report_json(r).dump(2) << '\n';
            if (!cfg.csv_path.empty()) {
                std::ofstream f(cfg.csv_path);
                if (!f) throw Error(Errc::InvalidParams, "cannot write '" + cfg.csv_path + "'");
                write_series_csv(r, f);
            }
            if (!cfg.json_path.empty()) {
                std::ofstream f(cfg.json_path);
                if (!f) throw Error(Errc::InvalidParams, "cannot write '" + cfg.json_path + "'");
                f << report_json(r).dump(2) << '\n';
            }
            if (!timings_path.empty()) {
                std::ofstream f(timings_path);
                f << report_json(r, true).dump(2) << '\n';
            }
        } else if (svs->parsed()) {
            const SvLeverageParams p =
                params_path.empty() ? SvLeverageParams::leverage_benchmark() : load_sv_params(YAML::LoadFile(params_path));
            if (n < 1) throw Error(Errc::InvalidParams, "n must be positive");
            const SvSample s = sv_simulate(p, n, seed);
            os << "t,y,h\n";
            for (long t = 0; t < n; ++t) os << t << ',' << s.y(t) << ',' << s.h(t) << '\n';
        } else if (svf->parsed()) {
            const Series y = observations(read_csv_file(data_path), 1);
            const SvFitResult r = sv_fit(y.col(0), lags);
            nlohmann::json j = detail::fit_json(sv_layout(lags), r.fit);
            j["lags"] = lags;
            j["bic"] = number_or_null(r.bic);
            os << j.dump(2) << '\n';
        } else if (mo->parsed()) {
            const StateSpaceModel m = make_model(model, detail::parse_params(kv, params_path));
            const Series y = observations(read_csv_file(data_path), m.obs.obs_dim());
            const ModeResult r = mode_oracle(m, y);
            os << "t,mode\n";
            for (long t = 0; t < y.rows(); ++t) os << t << ',' << r.modes(t, 0) << '\n';
        }
    } catch (const FilterError& e) {
        err << "error: " << e.what() << '\n';
        return detail::is_config_error(e.inner()) ? 2 : 3;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return detail::is_config_error(e.code()) ? 2 : 3;
    } catch (const YAML::Exception& e) {
        err << "error: config: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

}  // namespace bf
