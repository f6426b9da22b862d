#pragma once

// Observation densities p(y | alpha) for a scalar state, plus the
// linear-Gaussian observation for vector states.
//
// The Student's t families use the variance-normalised parametrisation:
// the scale carries a factor (nu - 2), so the noise has variance one
// (or sigma^2 for the local level), not nu / (nu - 2) as for a textbook t.
// This requires nu > 2.

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "bf/errors.hpp"
#include "bf/numerics.hpp"

namespace bf {

enum class Family {
    Poisson,
    NegBin,
    Exponential,
    Gamma,
    Weibull,
    SvGauss,
    SvT,
    DepGauss,
    DepT,
    LocalLevelT,
    LinearGauss,
};

inline const std::vector<Family>& scalar_families() {
    static const std::vector<Family> f = {Family::Poisson,  Family::NegBin,   Family::Exponential,
                                          Family::Gamma,    Family::Weibull,  Family::SvGauss,
                                          Family::SvT,      Family::DepGauss, Family::DepT,
                                          Family::LocalLevelT};
    return f;
}

inline const char* family_id(Family f) {
    switch (f) {
        case Family::Poisson: return "poisson";
        case Family::NegBin: return "negbin";
        case Family::Exponential: return "exponential";
        case Family::Gamma: return "gamma";
        case Family::Weibull: return "weibull";
        case Family::SvGauss: return "sv-gauss";
        case Family::SvT: return "sv-t";
        case Family::DepGauss: return "dep-gauss";
        case Family::DepT: return "dep-t";
        case Family::LocalLevelT: return "local-level-t";
        case Family::LinearGauss: return "linear-gauss";
    }
    return "?";
}

inline bool family_from_id(const std::string& id, Family& out) {
    for (Family f : scalar_families())
        if (id == family_id(f)) {
            out = f;
            return true;
        }
    if (id == family_id(Family::LinearGauss)) {
        out = Family::LinearGauss;
        return true;
    }
    return false;
}

struct LinearGaussianObservation {
    Vec d;
    Mat Z;
    Mat H;
};

struct ShapeParams {
    double kappa = 1.0;
    double nu = 10.0;
    double sigma = 1.0;
};

struct ScalarEval {
    double logpdf;
    double score;
    double realised;
    double expected;
};

struct ObsEval {
    double logpdf;
    Vec score;
    Mat realised;
    Mat expected;
};

namespace detail {
inline constexpr double kLog2Pi = 1.8378770664093454836;

// log(1 + exp(x)) without overflow.
inline double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// rho = tanh(a/2) and 1 - rho^2 computed without cancellation.
inline void dep_link(double a, double& rho, double& one_m_rho2) {
    rho = std::tanh(0.5 * a);
    const double e = std::exp(-std::abs(a));
    one_m_rho2 = 4.0 * e / ((1.0 + e) * (1.0 + e));
}
}  // namespace detail

class ObservationModel {
public:
    ObservationModel() = default;
    ObservationModel(Family f, ShapeParams p) : family_(f), shape_(p) {}
    explicit ObservationModel(LinearGaussianObservation lg) : family_(Family::LinearGauss), lg_(std::move(lg)) {}

    Family family() const { return family_; }
    const ShapeParams& shape() const { return shape_; }
    ShapeParams& shape() { return shape_; }
    const LinearGaussianObservation& lg() const { return lg_; }
    LinearGaussianObservation& lg() { return lg_; }
    const char* id() const { return family_id(family_); }

    bool is_scalar() const { return family_ != Family::LinearGauss; }
    int obs_dim() const {
        if (family_ == Family::LinearGauss) return static_cast<int>(lg_.Z.rows());
        return (family_ == Family::DepGauss || family_ == Family::DepT) ? 2 : 1;
    }
    int state_dim() const { return family_ == Family::LinearGauss ? static_cast<int>(lg_.Z.cols()) : 1; }

    // Families whose realised information can be negative.
    bool nonneg_realised() const {
        return !(family_ == Family::DepGauss || family_ == Family::DepT || family_ == Family::LocalLevelT);
    }

    void validate() const {
        switch (family_) {
            case Family::NegBin:
            case Family::Gamma:
            case Family::Weibull:
                if (!(shape_.kappa > 0.0)) throw Error(Errc::DegenerateParams, "kappa must be positive");
                break;
            case Family::SvT:
            case Family::DepT:
                if (!(shape_.nu > 2.0)) throw Error(Errc::DegenerateParams, "nu must exceed 2");
                break;
            case Family::LocalLevelT:
                if (!(shape_.nu > 2.0)) throw Error(Errc::DegenerateParams, "nu must exceed 2");
                if (!(shape_.sigma > 0.0)) throw Error(Errc::DegenerateParams, "sigma must be positive");
                break;
            case Family::LinearGauss:
                if (lg_.Z.rows() != lg_.d.size() || lg_.H.rows() != lg_.Z.rows() || lg_.H.cols() != lg_.Z.rows())
                    throw Error(Errc::DegenerateParams, "observation matrices not conformable");
                if (!is_pd(lg_.H)) throw Error(Errc::DegenerateParams, "H must be positive definite");
                break;
            default:
                break;
        }
    }

    void check_support(const double* y) const {
        const double v = y[0];
        switch (family_) {
            case Family::Poisson:
            case Family::NegBin:
                if (!(v >= 0.0) || std::floor(v) != v) throw Error(Errc::OutOfSupport, "count must be a nonnegative integer");
                break;
            case Family::Exponential:
                if (!(v >= 0.0)) throw Error(Errc::OutOfSupport, "duration must be nonnegative");
                break;
            case Family::Gamma:
            case Family::Weibull:
                if (!(v > 0.0)) throw Error(Errc::OutOfSupport, "duration must be positive");
                break;
            case Family::DepGauss:
            case Family::DepT:
                if (!std::isfinite(v) || !std::isfinite(y[1])) throw Error(Errc::OutOfSupport, "non-finite observation");
                break;
            default:
                if (!std::isfinite(v)) throw Error(Errc::OutOfSupport, "non-finite observation");
        }
    }

    // Log-density, score, realised information (-d2/da2) and expected
    // information for a scalar family.
    ScalarEval eval_scalar(const double* y, double a) const {
        check_support(y);
        const double nu = shape_.nu;
        const double k = shape_.kappa;
        switch (family_) {
            case Family::Poisson: {
                const double lam = std::exp(a);
                return {y[0] * a - lam - std::lgamma(y[0] + 1.0), y[0] - lam, lam, lam};
            }
            case Family::NegBin: {
                const double lam = std::exp(a);
                const double log_kl = detail::log1pexp(a - std::log(k)) + std::log(k);  // log(k + lam)
                const double lp = std::lgamma(k + y[0]) - std::lgamma(k) - std::lgamma(y[0] + 1.0) +
                                  k * (std::log(k) - log_kl) + y[0] * (a - log_kl);
                const double kl = k + lam;
                return {lp, y[0] - lam * (k + y[0]) / kl, k * lam * (k + y[0]) / (kl * kl), k * lam / kl};
            }
            case Family::Exponential: {
                const double ly = std::exp(a) * y[0];
                return {a - ly, 1.0 - ly, ly, 1.0};
            }
            case Family::Gamma: {
                const double r = y[0] * std::exp(-a);
                return {(k - 1.0) * std::log(y[0]) - r - std::lgamma(k) - k * a, r - k, r, k};
            }
            case Family::Weibull: {
                const double lr = std::log(y[0]) - a;
                const double p = std::exp(k * lr);
                return {std::log(k) + (k - 1.0) * lr - a - p, k * p - k, k * k * p, k * k};
            }
            case Family::SvGauss: {
                const double r = y[0] * y[0] * std::exp(-a);
                return {-0.5 * detail::kLog2Pi - 0.5 * a - 0.5 * r, 0.5 * r - 0.5, 0.5 * r, 0.5};
            }
            case Family::SvT: {
                const double r = y[0] * y[0] * std::exp(-a);
                const double w = (nu + 1.0) / (nu - 2.0 + r);
                const double lp = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
                                  0.5 * std::log((nu - 2.0) * M_PI) - 0.5 * a -
                                  0.5 * (nu + 1.0) * std::log1p(r / (nu - 2.0));
                return {lp, 0.5 * w * r - 0.5, (nu - 2.0) / (nu + 1.0) * w * w * 0.5 * r, nu / (2.0 * nu + 6.0)};
            }
            case Family::DepGauss: {
                double rho, u;
                detail::dep_link(a, rho, u);
                const double q = y[0] * y[0] + y[1] * y[1] - 2.0 * rho * y[0] * y[1];
                const double z1 = y[0] - rho * y[1], z2 = y[1] - rho * y[0];
                const double lp = -detail::kLog2Pi - 0.5 * std::log(u) - 0.5 * q / u;
                return {lp, 0.5 * rho + 0.5 * z1 * z2 / u, 0.25 * (z1 * z1 + z2 * z2) / u - 0.25 * u,
                        0.25 * (1.0 + rho * rho)};
            }
            case Family::DepT: {
                double rho, u;
                detail::dep_link(a, rho, u);
                const double q = y[0] * y[0] + y[1] * y[1] - 2.0 * rho * y[0] * y[1];
                const double z1 = y[0] - rho * y[1], z2 = y[1] - rho * y[0];
                const double w = (nu + 2.0) / (nu - 2.0 + q / u);
                const double lp = std::log(nu) - std::log(2.0 * M_PI * (nu - 2.0)) - 0.5 * std::log(u) -
                                  0.5 * (nu + 2.0) * std::log1p(q / ((nu - 2.0) * u));
                const double zz = z1 * z2;
                const double re = 0.25 * w * (z1 * z1 + z2 * z2) / u - 0.25 * u -
                                  0.5 * w * w / (nu + 2.0) * zz * zz / (u * u);
                return {lp, 0.5 * rho + 0.5 * w * zz / u, re, (2.0 + nu * (1.0 + rho * rho)) / (4.0 * (nu + 4.0))};
            }
            case Family::LocalLevelT: {
                const double s = shape_.sigma;
                const double e = (y[0] - a) / s;
                const double den = nu - 2.0 + e * e;
                const double lp = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
                                  0.5 * std::log((nu - 2.0) * M_PI) - std::log(s) -
                                  0.5 * (nu + 1.0) * std::log1p(e * e / (nu - 2.0));
                return {lp, (nu + 1.0) * e / (s * den), (nu + 1.0) / (s * s) * (nu - 2.0 - e * e) / (den * den),
                        nu * (nu + 1.0) / (s * s * (nu - 2.0) * (nu + 3.0))};
            }
            case Family::LinearGauss:
                break;
        }
        throw Error(Errc::NotApplicable, "eval_scalar on a vector-state family");
    }

    ObsEval eval(const Vec& y, const Vec& a) const {
        if (family_ != Family::LinearGauss) {
            const ScalarEval s = eval_scalar(y.data(), a(0));
            return {s.logpdf, Vec::Constant(1, s.score), Mat::Constant(1, 1, s.realised),
                    Mat::Constant(1, 1, s.expected)};
        }
        const Vec v = y - lg_.d - lg_.Z * a;
        Eigen::LLT<Mat> llt(lg_.H);
        const Vec Hv = llt.solve(v);
        const Mat HZ = llt.solve(lg_.Z);
        const double ld = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        ObsEval out;
        out.logpdf = -0.5 * (static_cast<double>(v.size()) * detail::kLog2Pi + ld + v.dot(Hv));
        out.score = lg_.Z.transpose() * Hv;
        out.realised = symmetrize(lg_.Z.transpose() * HZ);
        out.expected = out.realised;
        return out;
    }

    double logpdf(const Vec& y, const Vec& a) const {
        if (family_ != Family::LinearGauss) return eval_scalar(y.data(), a(0)).logpdf;
        return eval(y, a).logpdf;
    }

    // Signal implied by the state: lambda, beta, sigma^2, rho or mu.
    double link(double a) const {
        switch (family_) {
            case Family::DepGauss:
            case Family::DepT: return std::tanh(0.5 * a);
            case Family::LocalLevelT:
            case Family::LinearGauss: return a;
            default: return std::exp(a);
        }
    }

    // Quantity that is predicted and scored: kappa*beta for Gamma,
    // Gamma(1 + 1/kappa)*beta for Weibull, sigma = exp(a/2) for volatility.
    double target(double a) const {
        switch (family_) {
            case Family::Gamma: return shape_.kappa * std::exp(a);
            case Family::Weibull: return std::tgamma(1.0 + 1.0 / shape_.kappa) * std::exp(a);
            case Family::SvGauss:
            case Family::SvT: return std::exp(0.5 * a);
            default: return link(a);
        }
    }

    template <class Rng>
    Vec sample(const Vec& a, Rng& rng) const {
        validate();
        std::normal_distribution<double> N01(0.0, 1.0);
        const double nu = shape_.nu;
        const double k = shape_.kappa;
        switch (family_) {
            case Family::Poisson: {
                std::poisson_distribution<long> d(std::exp(a(0)));
                return Vec::Constant(1, static_cast<double>(d(rng)));
            }
            case Family::NegBin: {
                std::gamma_distribution<double> g(k, std::exp(a(0)) / k);
                std::poisson_distribution<long> d(g(rng));
                return Vec::Constant(1, static_cast<double>(d(rng)));
            }
            case Family::Exponential: {
                std::exponential_distribution<double> d(std::exp(a(0)));
                return Vec::Constant(1, d(rng));
            }
            case Family::Gamma: {
                std::gamma_distribution<double> d(k, std::exp(a(0)));
                return Vec::Constant(1, d(rng));
            }
            case Family::Weibull: {
                std::weibull_distribution<double> d(k, std::exp(a(0)));
                return Vec::Constant(1, d(rng));
            }
            case Family::SvGauss: return Vec::Constant(1, std::exp(0.5 * a(0)) * N01(rng));
            case Family::SvT: {
                std::chi_squared_distribution<double> c(nu);
                const double z = N01(rng);
                return Vec::Constant(1, std::exp(0.5 * a(0)) * z * std::sqrt((nu - 2.0) / c(rng)));
            }
            case Family::DepGauss:
            case Family::DepT: {
                const double rho = std::tanh(0.5 * a(0));
                const double z1 = N01(rng), z2 = N01(rng);
                Vec y(2);
                y << z1, rho * z1 + std::sqrt(1.0 - rho * rho) * z2;
                if (family_ == Family::DepT) {
                    std::chi_squared_distribution<double> c(nu);
                    y *= std::sqrt((nu - 2.0) / c(rng));
                }
                return y;
            }
            case Family::LocalLevelT: {
                std::chi_squared_distribution<double> c(nu);
                const double z = N01(rng);
                return Vec::Constant(1, a(0) + shape_.sigma * z * std::sqrt((nu - 2.0) / c(rng)));
            }
            case Family::LinearGauss: {
                Vec z(lg_.d.size());
                for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = N01(rng);
                return lg_.d + lg_.Z * a + Eigen::LLT<Mat>(lg_.H).matrixL() * z;
            }
        }
        return Vec();
    }

    // Smallest weight on expected information that keeps the hybrid
    // information update nonnegative.
    double hybrid_weight() const {
        const double nu = shape_.nu;
        switch (family_) {
            case Family::DepGauss: return 0.5;
            case Family::DepT: return 0.5 * (nu + 4.0) / (nu + 3.0);
            case Family::LocalLevelT: return (1.0 + nu / 3.0) / (1.0 + 3.0 * nu);
            default: throw Error(Errc::NotApplicable, std::string(id()) + " has nonnegative realised information");
        }
    }

private:
    Family family_ = Family::Poisson;
    ShapeParams shape_;
    LinearGaussianObservation lg_;
};

inline ObsEval eval_obs(const ObservationModel& m, const Vec& y, const Vec& a) { return m.eval(y, a); }

inline double link(const ObservationModel& m, double a) { return m.link(a); }

template <class Rng>
Vec sample_obs(const ObservationModel& m, const Vec& a, Rng& rng) {
    return m.sample(a, rng);
}

}  // namespace bf
