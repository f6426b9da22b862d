#pragma once

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <cmath>
#include <vector>

#include "bf/dynamics.hpp"
#include "bf/numerics.hpp"
#include "bf/obsmodels.hpp"

namespace bf {

inline bool has_missing(const Vec& y) { return !y.allFinite(); }

struct KalmanStep {
    StateBelief predicted;
    StateBelief updated;
    double loglik = 0.0;
};

// Information-form step from the previous filtered belief.
inline KalmanStep kalman_step(const LinearGaussianObservation& obs, const LinearGaussianDynamics& dyn,
                              const StateBelief& prev, const Vec& y) {
    KalmanStep s;
    s.predicted.mean = predict_state(dyn, prev.mean);
    try {
        s.predicted.info = predict_info_lg(dyn.T, dyn.Q, prev.info);
    } catch (const Error& e) {
        throw Error(Errc::SingularInformation, e.what());
    }
    if (has_missing(y)) {
        s.updated = s.predicted;
        return s;
    }
    Eigen::LLT<Mat> hl(obs.H);
    const Mat HZ = hl.solve(obs.Z);
    const Vec v = y - obs.d - obs.Z * s.predicted.mean;
    s.updated.info = symmetrize(s.predicted.info + obs.Z.transpose() * HZ);
    if (!is_pd(s.updated.info)) throw Error(Errc::SingularInformation, "updated information not PD");
    s.updated.mean = s.predicted.mean + Eigen::LLT<Mat>(s.updated.info).solve(HZ.transpose() * v);

    const Mat F = symmetrize(obs.Z * inverse_pd(s.predicted.info) * obs.Z.transpose() + obs.H);
    Eigen::LLT<Mat> fl(F);
    const double ld = 2.0 * fl.matrixLLT().diagonal().array().log().sum();
    s.loglik = -0.5 * (static_cast<double>(v.size()) * 1.8378770664093454836 + ld + v.dot(fl.solve(v)));
    return s;
}

struct CovBelief {
    Vec mean;
    Mat cov;
};

struct KalmanCovStep {
    CovBelief predicted;
    CovBelief updated;
    double loglik = 0.0;
};

// Covariance-form step (gain recursion), used as a cross-check.
inline KalmanCovStep kalman_step_cov(const LinearGaussianObservation& obs, const LinearGaussianDynamics& dyn,
                                     const CovBelief& prev, const Vec& y) {
    KalmanCovStep s;
    s.predicted.mean = predict_state(dyn, prev.mean);
    s.predicted.cov = symmetrize(dyn.T * prev.cov * dyn.T.transpose() + dyn.Q);
    if (has_missing(y)) {
        s.updated = s.predicted;
        return s;
    }
    const Vec v = y - obs.d - obs.Z * s.predicted.mean;
    const Mat F = symmetrize(obs.Z * s.predicted.cov * obs.Z.transpose() + obs.H);
    Eigen::LLT<Mat> fl(F);
    if (fl.info() != Eigen::Success) throw Error(Errc::SingularInformation, "innovation variance not PD");
    const Mat K = fl.solve(obs.Z * s.predicted.cov).transpose();
    s.updated.mean = s.predicted.mean + K * v;
    const Mat IKZ = Mat::Identity(dyn.dim(), dyn.dim()) - K * obs.Z;
    s.updated.cov = symmetrize(IKZ * s.predicted.cov * IKZ.transpose() + K * obs.H * K.transpose());
    const double ld = 2.0 * fl.matrixLLT().diagonal().array().log().sum();
    s.loglik = -0.5 * (static_cast<double>(v.size()) * 1.8378770664093454836 + ld + v.dot(fl.solve(v)));
    return s;
}

inline StateBelief unconditional_belief(const LinearGaussianDynamics& dyn) {
    const Moments mo = stationary_moments(dyn.c, dyn.T, dyn.Q);
    if (!is_pd(mo.cov)) throw Error(Errc::SingularInformation, "stationary covariance not PD");
    return {mo.mean, inverse_pd(mo.cov)};
}

struct KalmanRun {
    std::vector<KalmanStep> steps;
    double loglik = 0.0;
};

inline KalmanRun kalman_filter(const LinearGaussianObservation& obs, const LinearGaussianDynamics& dyn,
                               const Series& data, const StateBelief& init) {
    KalmanRun run;
    run.steps.reserve(static_cast<size_t>(data.rows()));
    StateBelief b = init;
    for (Eigen::Index t = 0; t < data.rows(); ++t) {
        try {
            run.steps.push_back(kalman_step(obs, dyn, b, data.row(t).transpose()));
        } catch (const Error& e) {
            throw FilterError(e, t);
        }
        b = run.steps.back().updated;
        run.loglik += run.steps.back().loglik;
    }
    return run;
}

inline constexpr double kLogSquareFloor = 1e-8;

struct QmleInput {
    Series x;                         // transformed observations
    LinearGaussianObservation obs;    // scalar d, Z = 1, H
    std::vector<long> floored;        // indices censored at the floor
};

// Maps a nonlinear family onto a linear observation equation for a
// Kalman quasi-likelihood. Volatility families use log(y^2) with the
// mean and variance of the log squared noise; the local level passes
// y through with H equal to the noise variance sigma^2.
inline QmleInput qmle_transforms(const ObservationModel& model, const Series& y) {
    QmleInput out;
    out.x = y.leftCols(1);
    double d = 0.0, H = 1.0;
    switch (model.family()) {
        case Family::SvGauss:
            d = boost::math::digamma(0.5) + std::log(2.0);
            H = boost::math::trigamma(0.5);
            break;
        case Family::SvT: {
            const double nu = model.shape().nu;
            d = std::log(nu - 2.0) + boost::math::digamma(0.5) - boost::math::digamma(0.5 * nu);
            H = boost::math::trigamma(0.5) + boost::math::trigamma(0.5 * nu);
            break;
        }
        case Family::LocalLevelT:
            H = model.shape().sigma * model.shape().sigma;
            break;
        default:
            throw Error(Errc::NotApplicable, std::string("no quasi-likelihood transform for ") + model.id());
    }
    if (model.family() != Family::LocalLevelT) {
        for (Eigen::Index t = 0; t < y.rows(); ++t) {
            const double v = y(t, 0);
            if (!std::isfinite(v)) continue;
            if (std::abs(v) < kLogSquareFloor) {
                out.x(t, 0) = 2.0 * std::log(kLogSquareFloor);
                out.floored.push_back(static_cast<long>(t));
            } else {
                out.x(t, 0) = std::log(v * v);
            }
        }
    }
    out.obs = {Vec::Constant(1, d), Mat::Identity(1, 1), Mat::Constant(1, 1, H)};
    return out;
}

}  // namespace bf
