#pragma once

// Continuous sampling importance resampling for scalar states. Particles
// are sorted before resampling and drawn through a piecewise-linear
// inverse CDF, so the likelihood estimate is continuous in the parameters
// when the random numbers are held fixed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "bf/errors.hpp"
#include "bf/estimation.hpp"
#include "bf/numerics.hpp"

namespace bf {

struct CsirRun {
    std::vector<double> pred_mean, pred_median;
    std::vector<double> filt_mean, filt_median;
    std::vector<double> ess;
    double loglik = 0.0;
};

namespace detail {

// Inverse of the interpolated CDF of a sorted weighted cloud: particle i
// sits at cumulative mass sum_{j<i} w_j + w_i / 2.
class SmoothCdf {
public:
    SmoothCdf(const std::vector<double>& xs, const std::vector<double>& w) : xs_(xs), mid_(xs.size()) {
        double acc = 0.0;
        for (size_t i = 0; i < xs.size(); ++i) {
            mid_[i] = acc + 0.5 * w[i];
            acc += w[i];
        }
    }

    double inverse(double u) const {
        const size_t n = xs_.size();
        if (u <= mid_.front()) return xs_.front();
        if (u >= mid_.back()) return xs_.back();
        const size_t i = static_cast<size_t>(std::upper_bound(mid_.begin(), mid_.end(), u) - mid_.begin()) - 1;
        if (i + 1 >= n) return xs_.back();
        const double span = mid_[i + 1] - mid_[i];
        const double frac = span > 0.0 ? (u - mid_[i]) / span : 0.0;
        return xs_[i] + frac * (xs_[i + 1] - xs_[i]);
    }

    // Systematic draws (j + U) / N through the inverse CDF.
    void resample(double U, std::vector<double>& out) const {
        const size_t n = out.size();
        size_t i = 0;
        for (size_t j = 0; j < n; ++j) {
            const double u = (static_cast<double>(j) + U) / static_cast<double>(n);
            if (u <= mid_.front()) {
                out[j] = xs_.front();
                continue;
            }
            if (u >= mid_.back()) {
                out[j] = xs_.back();
                continue;
            }
            while (i + 1 < mid_.size() && mid_[i + 1] <= u) ++i;
            const double span = mid_[i + 1] - mid_[i];
            const double frac = span > 0.0 ? (u - mid_[i]) / span : 0.0;
            out[j] = xs_[i] + frac * (xs_[i + 1] - xs_[i]);
        }
    }

private:
    const std::vector<double>& xs_;
    std::vector<double> mid_;
};

inline double sorted_median(const std::vector<double>& xs) {
    const size_t n = xs.size();
    return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Normalises log-weights in place; returns log of the mean raw weight.
inline double normalise_log_weights(std::vector<double>& lw) {
    const double mx = *std::max_element(lw.begin(), lw.end());
    if (!std::isfinite(mx)) throw Error(Errc::WeightCollapse, "all particle weights are zero");
    double s = 0.0;
    for (double& v : lw) {
        v = std::exp(v - mx);
        s += v;
    }
    for (double& v : lw) v /= s;
    return mx + std::log(s / static_cast<double>(lw.size()));
}

}  // namespace detail

using FilteredHook = std::function<void(long, double)>;

// Propagation and weighting callbacks for a scalar state. The transition
// receives the particle and its standard normal draw. The optional hook
// sees each filtered mean before the next propagation.
template <class Propagate, class LogWeight>
CsirRun csir_core(long n_steps, int n_particles, uint64_t seed, double init_mean, double init_sd,
                  const Propagate& propagate, const LogWeight& logweight, const std::vector<char>& missing,
                  const FilteredHook& on_filtered = nullptr) {
    if (n_particles < 2) throw Error(Errc::InvalidParams, "at least two particles are required");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N01(0.0, 1.0);
    std::uniform_real_distribution<double> U01(0.0, 1.0);
    const size_t N = static_cast<size_t>(n_particles);
    std::vector<double> x(N), z(N), lw(N), nx(N);
    std::vector<size_t> order(N);
    for (size_t i = 0; i < N; ++i) x[i] = init_mean + init_sd * N01(rng);

    CsirRun run;
    for (long t = 0; t < n_steps; ++t) {
        for (size_t i = 0; i < N; ++i) z[i] = N01(rng);
        const double U = U01(rng);
        for (size_t i = 0; i < N; ++i) nx[i] = propagate(t, x[i], z[i]);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return nx[a] < nx[b]; });
        std::vector<double> xs(N), zs(N);
        for (size_t i = 0; i < N; ++i) {
            xs[i] = nx[order[i]];
            zs[i] = z[order[i]];
        }
        run.pred_mean.push_back(std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(N));
        run.pred_median.push_back(detail::sorted_median(xs));
        if (missing[static_cast<size_t>(t)]) {
            x = xs;
            run.filt_mean.push_back(run.pred_mean.back());
            run.filt_median.push_back(run.pred_median.back());
            run.ess.push_back(static_cast<double>(N));
            if (on_filtered) on_filtered(t, run.filt_mean.back());
            continue;
        }
        for (size_t i = 0; i < N; ++i) {
            const double v = logweight(t, xs[i], zs[i]);
            lw[i] = std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
        }
        try {
            run.loglik += detail::normalise_log_weights(lw);
        } catch (const Error& e) {
            throw FilterError(e, t);
        }
        double m = 0.0, s2 = 0.0;
        for (size_t i = 0; i < N; ++i) {
            m += lw[i] * xs[i];
            s2 += lw[i] * lw[i];
        }
        run.filt_mean.push_back(m);
        run.ess.push_back(1.0 / s2);
        if (on_filtered) on_filtered(t, m);
        const detail::SmoothCdf cdf(xs, lw);
        run.filt_median.push_back(cdf.inverse(0.5));
        cdf.resample(U, x);
    }
    return run;
}

inline std::vector<char> missing_mask(const Series& data) {
    std::vector<char> m(static_cast<size_t>(data.rows()));
    for (Eigen::Index t = 0; t < data.rows(); ++t) m[static_cast<size_t>(t)] = !data.row(t).allFinite();
    return m;
}

inline CsirRun csir_filter(const StateSpaceModel& model, const Series& data, int n_particles, uint64_t seed) {
    if (model.dyn.dim() != 1 || model.obs.state_dim() != 1)
        throw Error(Errc::UnsupportedDimension, "particle filter supports scalar states only");
    model.obs.validate();
    const double c = model.dyn.c(0), T = model.dyn.T(0, 0), Q = model.dyn.Q(0, 0);
    if (!(std::abs(T) < 1.0) || !(Q >= 0.0)) throw Error(Errc::InvalidParams, "dynamics not stationary");
    const double sq = std::sqrt(Q);
    const ObservationModel& obs = model.obs;
    auto prop = [&](long, double x, double z) { return c + T * x + sq * z; };
    const double m0 = c / (1.0 - T), s0 = std::sqrt(Q / (1.0 - T * T));
    if (obs.is_scalar()) {
        auto lw = [&](long t, double x, double) { return obs.eval_scalar(data.row(t).data(), x).logpdf; };
        return csir_core(data.rows(), n_particles, seed, m0, s0, prop, lw, missing_mask(data));
    }
    // Linear-Gaussian observation of a scalar state: Gaussian in the
    // residual y - d - Z x with precomputed H^{-1} and log-determinant.
    const LinearGaussianObservation& lg = obs.lg();
    if (lg.Z.cols() != 1 || data.cols() != lg.Z.rows())
        throw Error(Errc::UnsupportedDimension, "observation does not match the data");
    const Mat Hi = inverse_pd(lg.H);
    const double cst = -0.5 * (static_cast<double>(lg.d.size()) * detail::kLog2Pi + logdet_pd(lg.H));
    Vec r(lg.d.size());
    auto lw = [&](long t, double x, double) {
        r = data.row(t).transpose() - lg.d - lg.Z.col(0) * x;
        return cst - 0.5 * r.dot(Hi * r);
    };
    return csir_core(data.rows(), n_particles, seed, m0, s0, prop, lw, missing_mask(data));
}

inline double csir_loglik(const StateSpaceModel& model, const Series& data, int n_particles, uint64_t seed) {
    try {
        const double v = csir_filter(model, data, n_particles, seed).loglik;
        return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
    } catch (const Error& e) {
        if (e.code() == Errc::UnsupportedDimension) throw;
        return -std::numeric_limits<double>::infinity();
    }
}

// Maximises the particle likelihood with common random numbers.
inline FitResult csir_estimate(const StateSpaceModel& init, const Series& data, int n_particles, uint64_t seed,
                               const FitOptions& fo = {}) {
    if (init.dyn.dim() != 1 || init.obs.state_dim() != 1)
        throw Error(Errc::UnsupportedDimension, "particle estimation supports scalar states only");
    Objective f = [&init, &data, n_particles, seed](const Vec& x) {
        return csir_loglik(with_params(init, x), data, n_particles, seed);
    };
    return fit(f, layout_for(init), natural_params(init), fo);
}

}  // namespace bf
