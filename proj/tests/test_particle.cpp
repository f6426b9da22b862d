#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bf/particle.hpp"
#include "bf/svleverage.hpp"

using namespace bf;

namespace {

Series simulate_scalar(const StateSpaceModel& m, int n, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> N01;
    const double c = m.dyn.c(0), T = m.dyn.T(0, 0), Q = m.dyn.Q(0, 0);
    Series y(n, m.obs.obs_dim());
    double a = c / (1 - T) + std::sqrt(Q / (1 - T * T)) * N01(rng);
    for (int t = 0; t < n; ++t) {
        a = c + T * a + std::sqrt(Q) * N01(rng);
        y.row(t) = m.obs.sample(Vec::Constant(1, a), rng).transpose();
    }
    return y;
}

StateSpaceModel linear_model(double c, double T, double Q, double H) {
    StateSpaceModel m = default_model(Family::LinearGauss);
    m.dyn = LinearGaussianDynamics::scalar(c, T, Q);
    m.obs.lg().H(0, 0) = H;
    return m;
}

}  // namespace

TEST(Csir, LinearGaussianLoglikWithinMonteCarloError) {
    const StateSpaceModel m = linear_model(0.1, 0.9, 0.2, 0.5);
    const Series y = simulate_scalar(m, 500, 1);
    const double exact = kalman_loglik(m.obs.lg(), m.dyn, y);
    const int seeds = 20;
    double mean = 0.0, sq = 0.0;
    for (int s = 0; s < seeds; ++s) {
        const double v = csir_filter(m, y, 10000, 100 + s).loglik;
        mean += v / seeds;
        sq += v * v / seeds;
    }
    const double sd = std::sqrt(std::max(sq - mean * mean, 0.0) * seeds / (seeds - 1));
    EXPECT_LT(std::abs(mean - exact), 3.0 * sd / std::sqrt(seeds) + 1e-3);
    EXPECT_LT(sd, 0.5);
}

TEST(Csir, FilteredMeansTrackKalman) {
    const StateSpaceModel m = linear_model(0.0, 0.95, 0.1, 1.0);
    const Series y = simulate_scalar(m, 300, 2);
    const KalmanRun k = kalman_filter(m.obs.lg(), m.dyn, y, unconditional_belief(m.dyn));
    const CsirRun r = csir_filter(m, y, 20000, 3);
    double worst = 0.0;
    for (int t = 0; t < 300; ++t) worst = std::max(worst, std::abs(r.filt_mean[t] - k.steps[t].updated.mean(0)));
    EXPECT_LT(worst, 0.05);
}

TEST(Csir, ZeroStateNoiseIsDeterministic) {
    StateSpaceModel m = default_model(Family::Poisson);
    m.dyn = LinearGaussianDynamics::scalar(0.1, 0.5, 0.0);
    const Series y = simulate_scalar(m, 100, 4);
    const CsirRun r = csir_filter(m, y, 50, 5);
    double expect = 0.0;
    for (int t = 0; t < 100; ++t) expect += m.obs.logpdf(y.row(t).transpose(), Vec::Constant(1, 0.2));
    EXPECT_NEAR(r.loglik, expect, 1e-9);
    for (int t = 0; t < 100; ++t) {
        EXPECT_NEAR(r.pred_mean[t], 0.2, 1e-12);
        EXPECT_NEAR(r.ess[t], 50.0, 1e-9);
    }
}

TEST(Csir, EssBoundsAndMissingSteps) {
    const StateSpaceModel m = default_model(Family::SvT);
    Series y = simulate_scalar(m, 400, 6);
    y(50, 0) = NAN;
    const CsirRun r = csir_filter(m, y, 500, 7);
    ASSERT_EQ(r.ess.size(), 400u);
    for (double e : r.ess) {
        EXPECT_GE(e, 1.0 - 1e-9);
        EXPECT_LE(e, 500.0 + 1e-9);
    }
    EXPECT_EQ(r.ess[50], 500.0);
    EXPECT_EQ(r.filt_mean[50], r.pred_mean[50]);
}

TEST(Csir, SameSeedSameResult) {
    const StateSpaceModel m = default_model(Family::Gamma);
    const Series y = simulate_scalar(m, 200, 8);
    const CsirRun a = csir_filter(m, y, 300, 9), b = csir_filter(m, y, 300, 9), c = csir_filter(m, y, 300, 10);
    EXPECT_EQ(a.loglik, b.loglik);
    EXPECT_EQ(a.pred_median, b.pred_median);
    EXPECT_NE(a.loglik, c.loglik);
}

TEST(Csir, LoglikIsContinuousInParameters) {
    const StateSpaceModel m = default_model(Family::Poisson);
    const Series y = simulate_scalar(m, 500, 11);
    std::vector<double> ll;
    for (int i = 0; i <= 100; ++i) {
        StateSpaceModel mi = m;
        mi.dyn.T(0, 0) = 0.97 + 2e-4 * i;
        ll.push_back(csir_loglik(mi, y, 500, 12));
    }
    double max_jump = 0.0;
    for (size_t i = 1; i < ll.size(); ++i) max_jump = std::max(max_jump, std::abs(ll[i] - ll[i - 1]));
    // A plain multinomial resampler jumps by O(1) between neighbours.
    EXPECT_LT(max_jump, 0.05);
}

TEST(Csir, RejectsMultivariateStates) {
    StateSpaceModel m;
    m.obs = ObservationModel(LinearGaussianObservation{Vec::Zero(1), Mat::Ones(1, 2), Mat::Identity(1, 1)});
    m.dyn = {Vec::Zero(2), 0.5 * Mat::Identity(2, 2), Mat::Identity(2, 2)};
    try {
        csir_filter(m, Series::Zero(5, 1), 100, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::UnsupportedDimension);
    }
    EXPECT_THROW(csir_filter(default_model(Family::Poisson), Series::Zero(5, 1), 1, 1), Error);
}

TEST(Csir, WeightCollapseIsReported) {
    auto prop = [](long, double x, double z) { return x + z; };
    auto lw = [](long t, double, double) { return t == 3 ? -INFINITY : 0.0; };
    try {
        csir_core(10, 20, 1, 0.0, 1.0, prop, lw, std::vector<char>(10, 0));
        FAIL();
    } catch (const FilterError& e) {
        EXPECT_EQ(e.inner(), Errc::WeightCollapse);
        EXPECT_EQ(e.time(), 3);
    }
    StateSpaceModel m = default_model(Family::Poisson);
    Series y = Series::Ones(10, 1);
    y(4, 0) = -2.0;
    EXPECT_EQ(csir_loglik(m, y, 50, 1), -INFINITY);
}

TEST(Csir, SmoothCdfInterpolates) {
    const std::vector<double> xs = {0.0, 1.0, 2.0, 3.0};
    const std::vector<double> w = {0.25, 0.25, 0.25, 0.25};
    const detail::SmoothCdf cdf(xs, w);
    EXPECT_EQ(cdf.inverse(0.1), 0.0);
    EXPECT_NEAR(cdf.inverse(0.5), 1.5, 1e-15);
    EXPECT_NEAR(cdf.inverse(0.25), 0.5, 1e-15);
    EXPECT_EQ(cdf.inverse(0.95), 3.0);
    std::vector<double> out(4);
    cdf.resample(0.5, out);
    EXPECT_NEAR(out[0], 0.0, 1e-15);
    EXPECT_NEAR(out[1], 1.0, 1e-15);
    EXPECT_NEAR(out[2], 2.0, 1e-15);
    EXPECT_NEAR(out[3], 3.0, 1e-15);
}

TEST(Csir, EstimationMovesTowardsTheTruth) {
    StateSpaceModel truth = default_model(Family::Poisson);
    const Series y = simulate_scalar(truth, 1000, 13);
    StateSpaceModel init = truth;
    init.dyn = LinearGaussianDynamics::scalar(0.0, 0.9, 0.05);
    FitOptions fo;
    fo.standard_errors = false;
    fo.polish = false;
    const FitResult r = csir_estimate(init, y, 200, 14, fo);
    EXPECT_GT(r.objective, csir_loglik(init, y, 200, 14));
    EXPECT_NEAR(r.estimate(1), 0.98, 0.05);
}

TEST(CsirAdapter, ReducesToPlainFilterWithoutLeverage) {
    SvLeverageParams p;
    p.mu = 0.0;
    p.c = -0.1;
    p.phi = 0.97;
    p.sigma_eta = 0.2;
    p.rho = Vec::Zero(1);
    const SvSample s = sv_simulate(p, 300, 15);
    StateSpaceModel m = default_model(Family::SvGauss);
    m.dyn = LinearGaussianDynamics::scalar(p.c, p.phi, p.sigma_eta * p.sigma_eta);
    const CsirRun a = csir_univariate_adapter(p, s.y, 400, 16);
    const CsirRun b = csir_filter(m, Series(s.y), 400, 16);
    EXPECT_NEAR(a.loglik, b.loglik, 1e-8);
    for (size_t t = 0; t < a.filt_mean.size(); ++t) EXPECT_NEAR(a.filt_mean[t], b.filt_mean[t], 1e-9);
}

TEST(CsirAdapter, DeterministicAndRejectsGaps) {
    const SvLeverageParams p = SvLeverageParams::leverage_benchmark();
    SvSample s = sv_simulate(p, 300, 17);
    const CsirRun a = csir_univariate_adapter(p, s.y, 300, 18), b = csir_univariate_adapter(p, s.y, 300, 18);
    EXPECT_EQ(a.loglik, b.loglik);
    EXPECT_EQ(a.pred_median, b.pred_median);
    double mae = 0.0;
    for (int t = 0; t < 300; ++t) mae += std::abs(a.pred_median[t] - s.h(t)) / 300;
    EXPECT_LT(mae, 1.0);
    s.y(10) = NAN;
    try {
        csir_univariate_adapter(p, s.y, 300, 18);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::LagWindowMissing);
    }
}
