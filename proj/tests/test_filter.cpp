#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bf/filter.hpp"
#include "bf/kalman.hpp"
#include "test_util.hpp"

using namespace bf;
using namespace bftest;

namespace {

StateBelief scalar_belief(double a, double I) { return {Vec::Constant(1, a), Mat::Constant(1, 1, I)}; }

UpdateOptions tight(Method m = Method::Newton) {
    UpdateOptions o;
    o.method = m;
    o.tol = 1e-11;
    o.max_iter = 200;
    return o;
}

ObservationModel family_model(Family f) {
    ShapeParams p;
    p.kappa = 2.0;
    p.nu = 6.0;
    p.sigma = 0.7;
    return ObservationModel(f, p);
}

// Draws an observation from the family at state a.
Vec draw(const ObservationModel& obs, double a, std::mt19937_64& rng) { return obs.sample(Vec::Constant(1, a), rng); }

// Scalar transition a_t = g(a_{t-1}) + N(0, Q) with g = 0.9 tanh.
class TanhTransition : public TransitionModel {
public:
    explicit TanhTransition(double Q) : Q_(Q) {}
    int dim() const override { return 1; }
    double logpdf(const Vec& u, const Vec& b) const override {
        const double r = u(0) - g(b(0));
        return -0.5 * (std::log(2.0 * M_PI * Q_) + r * r / Q_);
    }
    TransitionDerivatives derivatives(const Vec& u, const Vec& b) const override {
        const double th = std::tanh(b(0)), s2 = 1.0 - th * th;
        const double g1 = 0.9 * s2, g2 = -1.8 * s2 * th;
        const double r = u(0) - g(b(0));
        TransitionDerivatives d;
        d.J1 = Vec::Constant(1, -r / Q_);
        d.J2 = Vec::Constant(1, r * g1 / Q_);
        d.J11 = Mat::Constant(1, 1, 1.0 / Q_);
        d.J12 = Mat::Constant(1, 1, -g1 / Q_);
        d.J21 = d.J12;
        d.J22 = Mat::Constant(1, 1, (g1 * g1 - r * g2) / Q_);
        return d;
    }
    Vec predict(const Vec& b) const override { return Vec::Constant(1, g(b(0))); }
    static double g(double b) { return 0.9 * std::tanh(b); }

private:
    double Q_;
};

}  // namespace

TEST(UpdateLg, LinearGaussianMatchesKalman) {
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 30; ++rep) {
        const int m = 1 + rep % 3, p = 1 + (rep / 3) % 3;
        const LinearGaussianDynamics dyn{random_vector(rng, m), random_stable(rng, m), random_spd(rng, m)};
        const LinearGaussianObservation lg{random_vector(rng, p), random_matrix(rng, p, m), random_spd(rng, p)};
        const ObservationModel obs(lg);
        const StateBelief prev{random_vector(rng, m), random_spd(rng, m)};
        const Vec y = random_vector(rng, p, 2.0);
        const KalmanStep k = kalman_step(lg, dyn, prev, y);
        const FilterStepOutput u = update_lg(obs, y, k.predicted, UpdateOptions{});
        EXPECT_TRUE(u.converged);
        EXPECT_LT(rel_err(u.updated.mean, k.updated.mean), 1e-10);
        EXPECT_LT(rel_err(u.updated.info, k.updated.info), 1e-10);
    }
}

TEST(UpdateLg, PoissonMatchesGridArgmax) {
    const ObservationModel obs(Family::Poisson, {});
    const Vec y = Vec::Constant(1, 3.0);
    const double I = 1.76;
    double best = -INFINITY, arg = 0.0;
    for (long i = 0; i <= 100000; ++i) {
        const double a = -5.0 + 1e-4 * static_cast<double>(i);
        const double v = 3.0 * a - std::exp(a) - 0.5 * I * a * a;
        if (v > best) {
            best = v;
            arg = a;
        }
    }
    const FilterStepOutput u = update_lg(obs, y, scalar_belief(0.0, I), UpdateOptions{});
    EXPECT_NEAR(u.updated.mean(0), arg, 1e-4);
}

TEST(UpdateLg, MissingObservationIsIdentity) {
    for (Family f : scalar_families()) {
        const ObservationModel obs = family_model(f);
        const StateBelief pred = scalar_belief(0.3, 2.5);
        const FilterStepOutput u = update_lg(obs, Vec::Constant(obs.obs_dim(), NAN), pred, UpdateOptions{});
        EXPECT_TRUE(u.missing);
        EXPECT_EQ(u.updated.mean, pred.mean);
        EXPECT_EQ(u.updated.info, pred.info);
        EXPECT_EQ(u.loglik_term(), 0.0);
    }
}

TEST(UpdateLg, LocalLevelOutlierStaysBounded) {
    const ObservationModel obs = family_model(Family::LocalLevelT);
    const double sigma = obs.shape().sigma, nu = obs.shape().nu;
    for (double I : {0.5, 2.0, 10.0}) {
        const FilterStepOutput u = update_lg(obs, Vec::Constant(1, 100.0 * sigma), scalar_belief(0.0, I),
                                             UpdateOptions::defaults_for(obs));
        ASSERT_TRUE(std::isfinite(u.updated.mean(0)));
        // Largest score of the t location model bounds the implicit step.
        const double max_score = (nu + 1.0) / (2.0 * sigma * std::sqrt(nu - 2.0));
        EXPECT_LE(std::abs(u.updated.mean(0)), max_score / I + 1e-6);
        EXPECT_LT(std::abs(u.updated.mean(0)), 1.0);
    }
}

TEST(UpdateLg, MethodsShareTheArgmaxAndDifferInInformation) {
    std::mt19937_64 rng(5);
    for (Family f : {Family::Poisson, Family::NegBin, Family::Exponential, Family::Gamma, Family::Weibull,
                     Family::SvGauss, Family::SvT}) {
        const ObservationModel obs = family_model(f);
        for (int rep = 0; rep < 10; ++rep) {
            const double a0 = std::normal_distribution<double>(0.0, 0.5)(rng);
            const Vec y = draw(obs, a0, rng);
            const StateBelief pred = scalar_belief(0.2, 1.5);
            const FilterStepOutput nw = update_lg(obs, y, pred, tight(Method::Newton));
            const double a = nw.updated.mean(0);
            const ObsEval ev = obs.eval(y, nw.updated.mean);
            EXPECT_NEAR(nw.updated.info(0, 0), 1.5 + ev.realised(0, 0), 1e-10);
            for (Method m : {Method::Fisher, Method::BHHH, Method::Hybrid}) {
                UpdateOptions o = tight(m);
                if (m == Method::Hybrid) o.weight = 0.3;
                const FilterStepOutput u = update_lg(obs, y, pred, o);
                ASSERT_TRUE(u.converged) << family_id(f) << " " << method_name(m);
                EXPECT_NEAR(u.updated.mean(0), a, 1e-8) << family_id(f) << " " << method_name(m);
                const ObsEval e = obs.eval(y, u.updated.mean);
                double expect = 1.5;
                if (m == Method::Fisher) expect += e.expected(0, 0);
                if (m == Method::BHHH) expect += e.score(0) * e.score(0);
                if (m == Method::Hybrid) expect += 0.3 * e.expected(0, 0) + 0.7 * e.realised(0, 0);
                EXPECT_NEAR(u.updated.info(0, 0), expect, 1e-10);
            }
        }
    }
}

TEST(UpdateLg, FirstOrderConditionAtConvergence) {
    std::mt19937_64 rng(8);
    for (Family f : scalar_families()) {
        const ObservationModel obs = family_model(f);
        const UpdateOptions o = UpdateOptions::defaults_for(obs);
        for (int rep = 0; rep < 20; ++rep) {
            const double a0 = std::normal_distribution<double>(0.0, 0.5)(rng);
            const Vec y = draw(obs, a0, rng);
            const StateBelief pred = scalar_belief(a0 + 0.3, 2.0);
            const FilterStepOutput u = update_lg(obs, y, pred, o);
            if (!u.converged) continue;
            const ObsEval ev = obs.eval(y, u.updated.mean);
            const double resid = ev.score(0) - 2.0 * (u.updated.mean(0) - pred.mean(0));
            const double scale = 2.0 + std::abs(ev.realised(0, 0)) + std::abs(ev.expected(0, 0));
            EXPECT_LE(std::abs(resid), 10.0 * o.tol * scale) << family_id(f);
        }
    }
}

TEST(UpdateLg, HybridIsWeaklyMoreInformative) {
    std::mt19937_64 rng(9);
    for (Family f : {Family::DepGauss, Family::DepT, Family::LocalLevelT}) {
        const ObservationModel obs = family_model(f);
        const UpdateOptions o = UpdateOptions::defaults_for(obs);
        ASSERT_EQ(o.method, Method::Hybrid);
        for (int rep = 0; rep < 500; ++rep) {
            const double a0 = std::normal_distribution<double>(0.0, 1.0)(rng);
            Vec y = draw(obs, a0, rng);
            if (rep % 5 == 0) y *= 8.0;
            const double Ip = std::exp(std::uniform_real_distribution<double>(-3.0, 3.0)(rng));
            const FilterStepOutput u = update_lg(obs, y, scalar_belief(a0, Ip), o);
            EXPECT_GE(u.updated.info(0, 0) - Ip, -1e-12) << family_id(f);
        }
    }
}

TEST(UpdateLg, ConcaveFamiliesNeverLoseObjective) {
    std::mt19937_64 rng(10);
    for (Family f : {Family::Poisson, Family::NegBin, Family::Exponential, Family::Gamma, Family::Weibull,
                     Family::SvGauss, Family::SvT}) {
        const ObservationModel obs = family_model(f);
        for (int rep = 0; rep < 50; ++rep) {
            const double a0 = std::normal_distribution<double>(0.0, 1.0)(rng);
            const Vec y = draw(obs, a0, rng);
            const FilterStepOutput u = update_lg(obs, y, scalar_belief(a0 - 1.0, 0.5), UpdateOptions{});
            EXPECT_GE(u.gain, -1e-12) << family_id(f);
        }
    }
}

TEST(FilterLg, EmptySeries) {
    const ObservationModel obs(Family::Poisson, {});
    const FilterRun r = filter_lg(obs, LinearGaussianDynamics::scalar(0, 0.9, 0.1), Series(0, 1), UpdateOptions{});
    EXPECT_TRUE(r.steps.empty());
    EXPECT_EQ(r.objective, 0.0);
}

TEST(FilterLg, LinearGaussianPathEqualsKalman) {
    std::mt19937_64 rng(12);
    for (int rep = 0; rep < 10; ++rep) {
        const int m = 1 + rep % 3, p = 1 + rep % 2;
        const LinearGaussianDynamics dyn{random_vector(rng, m), random_stable(rng, m), random_spd(rng, m)};
        const LinearGaussianObservation lg{random_vector(rng, p), random_matrix(rng, p, m), random_spd(rng, p)};
        Series y(100, p);
        for (int t = 0; t < 100; ++t) y.row(t) = random_vector(rng, p, 2.0).transpose();
        y(40, 0) = NAN;
        const FilterRun b = filter_lg(ObservationModel(lg), dyn, y, UpdateOptions{});
        const KalmanRun k = kalman_filter(lg, dyn, y, unconditional_belief(dyn));
        ASSERT_EQ(b.steps.size(), k.steps.size());
        for (size_t t = 0; t < b.steps.size(); ++t) {
            EXPECT_LT(rel_err(b.steps[t].updated.mean, k.steps[t].updated.mean), 1e-10);
            EXPECT_LT(rel_err(b.steps[t].updated.info, k.steps[t].updated.info), 1e-10);
        }
        EXPECT_LT(rel_err(b.objective, k.loglik), 1e-8);
    }
}

TEST(FilterLg, ScalarTraceMatchesGeneralPath) {
    std::mt19937_64 rng(13);
    for (Family f : scalar_families()) {
        const ObservationModel obs = family_model(f);
        const auto dyn = LinearGaussianDynamics::scalar(0.05, 0.95, 0.05);
        Series y(200, obs.obs_dim());
        double a = 1.0;
        for (int t = 0; t < 200; ++t) {
            a = 0.05 + 0.95 * a + std::sqrt(0.05) * std::normal_distribution<double>()(rng);
            y.row(t) = draw(obs, a, rng).transpose();
        }
        y(77, 0) = NAN;
        const UpdateOptions o = UpdateOptions::defaults_for(obs);
        const FilterRun r = filter_lg(obs, dyn, y, o);
        const ScalarTrace s = filter_lg_scalar(obs, 0.05, 0.95, 0.05, y, o);
        for (size_t t = 0; t < 200; ++t) {
            EXPECT_NEAR(s.a_upd[t], r.steps[t].updated.mean(0), 1e-12) << family_id(f);
            EXPECT_NEAR(s.i_pred[t], r.steps[t].predicted.info(0, 0), 1e-10);
            EXPECT_NEAR(s.loglik[t], r.steps[t].loglik_term(), 1e-10);
        }
        EXPECT_NEAR(s.objective, r.objective, 1e-8);
    }
}

TEST(FilterLg, PoissonNeedsFewIterations) {
    const ObservationModel obs(Family::Poisson, {});
    std::mt19937_64 rng(14);
    Series y(5000, 1);
    double a = 0.0;
    for (int t = 0; t < 5000; ++t) {
        a = 0.98 * a + 0.15 * std::normal_distribution<double>()(rng);
        y(t, 0) = draw(obs, a, rng)(0);
    }
    const ScalarTrace s = filter_lg_scalar(obs, 0.0, 0.98, 0.0225, y, UpdateOptions{});
    double total = 0.0;
    for (int it : s.iterations) total += it;
    const double mean_it = total / 5000.0;
    EXPECT_GE(mean_it, 2.0);
    EXPECT_LE(mean_it, 6.0);
    EXPECT_EQ(s.nonconverged, 0);
}

TEST(FilterLg, ErrorsCarryTimeIndex) {
    const ObservationModel obs(Family::Poisson, {});
    Series y(5, 1);
    y << 1, 2, -1, 0, 1;
    try {
        filter_lg(obs, LinearGaussianDynamics::scalar(0, 0.9, 0.1), y, UpdateOptions{});
        FAIL();
    } catch (const FilterError& e) {
        EXPECT_EQ(e.time(), 2);
    }
}

TEST(StepGeneral, AgreesWithLgStepForEveryFamily) {
    std::mt19937_64 rng(15);
    const auto dyn = LinearGaussianDynamics::scalar(0.1, 0.8, 0.3);
    const LinearGaussianTransition trans(dyn);
    for (Family f : scalar_families()) {
        const ObservationModel obs = family_model(f);
        UpdateOptions o = UpdateOptions::defaults_for(obs);
        o.tol = 1e-12;
        o.max_iter = 200;
        for (int rep = 0; rep < 10; ++rep) {
            const StateBelief prev = scalar_belief(std::normal_distribution<double>(0.0, 0.5)(rng), 1.0 + rep);
            const Vec y = draw(obs, prev.mean(0), rng);
            const StateBelief pred{predict_state(dyn, prev.mean), predict_info_lg(dyn.T, dyn.Q, prev.info)};
            const FilterStepOutput a = update_lg(obs, y, pred, o);
            const FilterStepOutput b = step_general(bind_observation(obs, y), trans, prev, o);
            EXPECT_LT(rel_err(b.predicted.info, a.predicted.info), 1e-10);
            EXPECT_LT(rel_err(b.updated.mean, a.updated.mean), 1e-8) << family_id(f);
            EXPECT_LT(rel_err(b.updated.info, a.updated.info), 1e-8) << family_id(f);
            EXPECT_LT(rel_err(b.loglik_term(), a.loglik_term()), 1e-8) << family_id(f);
        }
    }
}

TEST(StepGeneral, ThreeWayAgreementOnLinearGaussian) {
    std::mt19937_64 rng(16);
    for (int rep = 0; rep < 20; ++rep) {
        const int m = 1 + rep % 3, p = 1 + (rep / 3) % 2;
        const LinearGaussianDynamics dyn{random_vector(rng, m), random_stable(rng, m), random_spd(rng, m)};
        const LinearGaussianObservation lg{random_vector(rng, p), random_matrix(rng, p, m), random_spd(rng, p)};
        const ObservationModel obs(lg);
        const LinearGaussianTransition trans(dyn);
        StateBelief gb = unconditional_belief(dyn), kb = gb;
        for (int t = 0; t < 30; ++t) {
            Vec y = random_vector(rng, p, 2.0);
            if (t == 7) y(0) = NAN;
            const KalmanStep k = kalman_step(lg, dyn, kb, y);
            const FilterStepOutput l = update_lg(obs, y, k.predicted, UpdateOptions{});
            const FilterStepOutput g = step_general(bind_observation(obs, y), trans, gb, UpdateOptions{});
            EXPECT_LT(rel_err(g.updated.mean, k.updated.mean), 1e-8);
            EXPECT_LT(rel_err(g.updated.info, k.updated.info), 1e-8);
            EXPECT_LT(rel_err(l.updated.mean, k.updated.mean), 1e-8);
            // The envelope update reduces to I_pred + Z'H^{-1}Z.
            if (!has_missing(y)) {
                const Mat expect = k.predicted.info + lg.Z.transpose() * inverse_pd(lg.H) * lg.Z;
                EXPECT_LT(rel_err(g.updated.info, expect), 1e-8);
            }
            gb = g.updated;
            kb = k.updated;
        }
    }
}

TEST(StepGeneral, MissingObservationGivesPrediction) {
    const auto dyn = LinearGaussianDynamics::scalar(0.0, 0.5, 0.2);
    const LinearGaussianTransition trans(dyn);
    const StateBelief prev = scalar_belief(1.0, 4.0);
    const FilterStepOutput g = step_general(nullptr, trans, prev, UpdateOptions{});
    EXPECT_TRUE(g.missing);
    EXPECT_NEAR(g.predicted.mean(0), 0.5, 1e-15);
    EXPECT_NEAR(g.predicted.info(0, 0), 1.0 / (0.25 / 4.0 + 0.2), 1e-12);
    EXPECT_EQ(g.updated.mean, g.predicted.mean);
    EXPECT_EQ(g.updated.info, g.predicted.info);
}

TEST(StepGeneral, ConstantStateIsImplicitGradientStep) {
    const ObservationModel obs(Family::Poisson, {});
    const ConstantTransition trans(1);
    const StateBelief prev = scalar_belief(0.2, 3.0);
    const Vec y = Vec::Constant(1, 4.0);
    const FilterStepOutput g = step_general(bind_observation(obs, y), trans, prev, tight());
    EXPECT_EQ(g.predicted.mean, prev.mean);
    EXPECT_NEAR(g.predicted.info(0, 0), 3.0, 1e-14);
    // a = a_prev + I^{-1} score(y | a).
    const double a = g.updated.mean(0);
    EXPECT_NEAR(a, 0.2 + (4.0 - std::exp(a)) / 3.0, 1e-10);
    EXPECT_NEAR(g.updated.info(0, 0), 3.0 + std::exp(a), 1e-10);
    const FilterStepOutput l = update_lg(obs, y, prev, tight());
    EXPECT_NEAR(l.updated.mean(0), a, 1e-10);
}

TEST(StepGeneral, PinnedCoordinatesCopyPreviousState) {
    // State (x_t, x_{t-1}) with x_t = 0.5 x_{t-1} + 0.2 x_{t-2} + noise.
    class Ar2 : public TransitionModel {
    public:
        int dim() const override { return 2; }
        DegeneracyMask mask() const override { return {2, {{1, 0}}}; }
        double logpdf(const Vec& u, const Vec& b) const override {
            const double r = u(0) - 0.5 * b(0) - 0.2 * b(1);
            return -0.5 * (std::log(2.0 * M_PI * 0.3) + r * r / 0.3);
        }
        TransitionDerivatives derivatives(const Vec& u, const Vec& b) const override {
            const double r = u(0) - 0.5 * b(0) - 0.2 * b(1);
            Vec t(2);
            t << 0.5, 0.2;
            TransitionDerivatives d;
            d.J1 = Vec::Constant(1, -r / 0.3);
            d.J2 = t * (r / 0.3);
            d.J11 = Mat::Constant(1, 1, 1.0 / 0.3);
            d.J12 = -t.transpose() / 0.3;
            d.J21 = d.J12.transpose();
            d.J22 = t * t.transpose() / 0.3;
            return d;
        }
        Vec predict(const Vec& b) const override {
            Vec a(2);
            a << 0.5 * b(0) + 0.2 * b(1), b(0);
            return a;
        }
    };
    // The same model written as linear-Gaussian dynamics with a tiny Q
    // on the copied coordinate serves as the reference.
    LinearGaussianDynamics dyn{Vec::Zero(2), Mat(2, 2), Mat(2, 2)};
    dyn.T << 0.5, 0.2, 1.0, 0.0;
    dyn.Q << 0.3, 0.0, 0.0, 1e-12;
    const LinearGaussianObservation lg{Vec::Zero(1), (Mat(1, 2) << 1.0, 0.0).finished(), Mat::Constant(1, 1, 0.5)};
    const ObservationModel obs(lg);
    StateBelief prev{(Vec(2) << 0.4, -0.1).finished(), (Mat(2, 2) << 3.0, 0.5, 0.5, 2.0).finished()};
    const Vec y = Vec::Constant(1, 1.2);
    const FilterStepOutput g = step_general(bind_observation(obs, y), Ar2{}, prev, UpdateOptions{});
    const KalmanStep k = kalman_step(lg, dyn, prev, y);
    EXPECT_NEAR(g.updated.mean(1), g.revised_prev(0), 1e-14);
    EXPECT_LT(rel_err(g.updated.mean, k.updated.mean), 1e-8);
    EXPECT_LT(rel_err(inverse_pd(g.updated.info), inverse_pd(k.updated.info)), 1e-8);
}

TEST(StepGeneral, EnvelopeInformationMatchesNestedOptimisation) {
    const TanhTransition trans(0.2);
    const ObservationModel obs(Family::Poisson, {});
    std::mt19937_64 rng(17);
    for (int rep = 0; rep < 10; ++rep) {
        const double ap = std::normal_distribution<double>(0.0, 0.7)(rng);
        const double Ip = 0.5 + rep;
        const Vec y = draw(obs, ap, rng);
        const StateBelief prev = scalar_belief(ap, Ip);
        const FilterStepOutput g = step_general(bind_observation(obs, y), trans, prev, tight());
        ASSERT_TRUE(g.converged);
        // Value of a_t after maximising out a_{t-1} by Newton.
        auto inner = [&](double a, double& b) {
            b = ap;
            for (int it = 0; it < 100; ++it) {
                const Vec u = Vec::Constant(1, a), bv = Vec::Constant(1, b);
                const TransitionDerivatives d = trans.derivatives(u, bv);
                const double step = (d.J2(0) - Ip * (b - ap)) / (d.J22(0, 0) + Ip);
                b += step;
                if (std::abs(step) < 1e-14) break;
            }
            return trans.logpdf(Vec::Constant(1, a), Vec::Constant(1, b)) - 0.5 * Ip * (b - ap) * (b - ap);
        };
        double bstar = 0.0;
        inner(g.updated.mean(0), bstar);
        EXPECT_NEAR(g.revised_prev(0), bstar, 1e-8);
        const ScalarField V = [&](const Vec& a) {
            double b;
            return obs.logpdf(y, a) + inner(a(0), b);
        };
        const Mat H = fd_hessian(V, g.updated.mean, 1e-4);
        EXPECT_NEAR(g.updated.info(0, 0), -H(0, 0), 1e-3);
        const Vec G = fd_gradient(V, g.updated.mean);
        EXPECT_NEAR(G(0), 0.0, 1e-6);
    }
}

TEST(StepGeneral, PredictionInformationWithoutObservation) {
    const TanhTransition trans(0.2);
    const StateBelief prev = scalar_belief(0.3, 2.0);
    const FilterStepOutput g = step_general(nullptr, trans, prev, UpdateOptions{});
    const double th = std::tanh(0.3), g1 = 0.9 * (1.0 - th * th);
    EXPECT_NEAR(g.predicted.mean(0), TanhTransition::g(0.3), 1e-15);
    // At r = 0 the curvature of the inner problem is g1^2 / Q.
    const double J11 = 5.0, J12 = -g1 * 5.0, J22 = g1 * g1 * 5.0;
    EXPECT_NEAR(g.predicted.info(0, 0), J11 - J12 * J12 / (2.0 + J22), 1e-12);
    EXPECT_NEAR(g.predicted.info(0, 0), 1.0 / (0.2 + g1 * g1 / 2.0), 1e-12);
}

TEST(Stability, JacobianExamples) {
    const ObservationModel lg(LinearGaussianObservation{Vec::Zero(1), Mat::Identity(1, 1), Mat::Identity(1, 1)});
    const StabilityJacobian s = stability_jacobian(lg, Vec::Constant(1, 0.7), scalar_belief(0.0, 1.0), Vec::Zero(1));
    EXPECT_NEAR(s.eigenvalues(0), 0.5, 1e-14);
    EXPECT_NEAR(s.jacobian(0, 0), 0.5, 1e-14);

    const ObservationModel flat(LinearGaussianObservation{Vec::Zero(2), Mat::Zero(2, 2), Mat::Identity(2, 2)});
    StateBelief pred{Vec::Zero(2), (Mat(2, 2) << 2.0, 0.3, 0.3, 1.0).finished()};
    const StabilityJacobian f = stability_jacobian(flat, Vec::Zero(2), pred, Vec::Zero(2));
    EXPECT_EQ(f.eigenvalues(0), 1.0);
    EXPECT_EQ(f.eigenvalues(1), 1.0);

    const ObservationModel pois(Family::Poisson, {});
    std::mt19937_64 rng(18);
    for (int rep = 0; rep < 100; ++rep) {
        const double Ip = std::exp(std::uniform_real_distribution<double>(-3, 3)(rng));
        const Vec y = Vec::Constant(1, 1.0 + rep % 7);
        const FilterStepOutput u = update_lg(pois, y, scalar_belief(0.0, Ip), UpdateOptions{});
        const StabilityJacobian p = stability_jacobian(pois, y, u.predicted, u.updated.mean);
        EXPECT_GT(p.eigenvalues(0), 0.0);
        EXPECT_LT(p.eigenvalues(0), 1.0);
    }
}

TEST(Stability, JacobianMatchesFiniteDifferenceOfUpdate) {
    const ObservationModel obs = family_model(Family::Gamma);
    const Vec y = Vec::Constant(1, 1.3);
    auto upd = [&](double ap) { return update_lg(obs, y, scalar_belief(ap, 1.7), tight()).updated.mean(0); };
    const double ap = 0.1, h = 1e-5;
    const double fd = (upd(ap + h) - upd(ap - h)) / (2 * h);
    const StabilityJacobian s = stability_jacobian(obs, y, scalar_belief(ap, 1.7), Vec::Constant(1, upd(ap)));
    EXPECT_NEAR(s.jacobian(0, 0), fd, 1e-6);
}

TEST(Stability, UpdateInequalitiesHoldForConcaveFamilies) {
    std::mt19937_64 rng(19);
    for (Family f : {Family::Poisson, Family::NegBin, Family::Exponential, Family::Gamma, Family::Weibull,
                     Family::SvGauss, Family::SvT}) {
        const ObservationModel obs = family_model(f);
        for (int rep = 0; rep < 200; ++rep) {
            const double a0 = std::normal_distribution<double>(0.0, 1.0)(rng);
            const Vec y = draw(obs, a0, rng);
            const StateBelief pred = scalar_belief(a0 + std::normal_distribution<double>()(rng),
                                                   std::exp(std::uniform_real_distribution<double>(-2, 2)(rng)));
            const FilterStepOutput u = update_lg(obs, y, pred, tight());
            ASSERT_TRUE(u.converged);
            const UpdateInequalities q = update_inequalities(obs, y, pred, u.updated.mean);
            EXPECT_GE(q.boundedness, -1e-9) << family_id(f);
            EXPECT_GE(q.direction, -1e-9) << family_id(f);
            EXPECT_GE(q.step_length, -1e-9) << family_id(f);
        }
    }
}

// Corrupted predictions a_pred = alpha + 2 with fixed information I:
// E|a_upd - alpha|^2 (I + 2 eps) <= E|a_pred - alpha|^2 I + sigma^2 / I,
// with eps the smallest curvature met between alpha and a_upd and
// sigma^2 = E exp(alpha) the score variance.
TEST(Stability, ContractivityInQuadraticMean) {
    const ObservationModel obs(Family::Poisson, {});
    std::mt19937_64 rng(20);
    const int n = 10000;
    const double I = 1.76;
    std::vector<double> alpha(n), aupd(n);
    double a = 0.0, sigma2 = 0.0;
    for (int t = 0; t < n; ++t) {
        a = 0.98 * a + 0.15 * std::normal_distribution<double>()(rng);
        alpha[t] = a;
        const Vec y = draw(obs, a, rng);
        aupd[t] = update_lg(obs, y, scalar_belief(a + 2.0, I), tight()).updated.mean(0);
        sigma2 += std::exp(a) / n;
    }
    double eps = INFINITY;
    for (int t = 0; t < n; ++t) eps = std::min(eps, std::exp(std::min(alpha[t], aupd[t])));
    double mean = 0.0, sq = 0.0;
    for (int t = 0; t < n; ++t) {
        const double lhs = (I + 2.0 * eps) * (aupd[t] - alpha[t]) * (aupd[t] - alpha[t]);
        const double rhs = I * 4.0 + sigma2 / I;
        const double d = lhs - rhs;
        mean += d / n;
        sq += d * d / n;
    }
    const double se = std::sqrt((sq - mean * mean) / n);
    EXPECT_LE(mean, 3.0 * se);
}
