#pragma once

#include <utility>
#include <vector>

#include "bf/errors.hpp"
#include "bf/numerics.hpp"

namespace bf {

// Mean and information (inverse covariance) of a Gaussian-shaped belief.
struct StateBelief {
    Vec mean;
    Mat info;
};

struct LinearGaussianDynamics {
    Vec c;
    Mat T;
    Mat Q;

    int dim() const { return static_cast<int>(T.rows()); }
    bool stationary() const { return spectral_radius(T) < 1.0 - kStationaryMargin; }

    static LinearGaussianDynamics scalar(double c, double T, double Q) {
        return {Vec::Constant(1, c), Mat::Constant(1, 1, T), Mat::Constant(1, 1, Q)};
    }
};

// Gradient blocks J1 (current state), J2 (previous state) and the blocks of
// the NEGATIVE Hessian of log p(a_t | a_{t-1}).
struct TransitionDerivatives {
    Vec J1, J2;
    Mat J11, J12, J21, J22;
};

inline double lg_transition_logpdf(const LinearGaussianDynamics& dyn, const Vec& a_t, const Vec& a_prev) {
    if (!is_pd(dyn.Q)) throw Error(Errc::SingularQ, "Q must be positive definite");
    const Vec r = a_t - dyn.c - dyn.T * a_prev;
    Eigen::LLT<Mat> llt(dyn.Q);
    const double ld = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return -0.5 * (static_cast<double>(r.size()) * 1.8378770664093454836 + ld + r.dot(llt.solve(r)));
}

inline TransitionDerivatives lg_transition_derivatives(const LinearGaussianDynamics& dyn, const Vec& a_t,
                                                       const Vec& a_prev) {
    if (!is_pd(dyn.Q)) throw Error(Errc::SingularQ, "Q must be positive definite");
    const Mat Qi = inverse_pd(dyn.Q);
    const Vec w = Qi * (a_t - dyn.c - dyn.T * a_prev);
    TransitionDerivatives d;
    d.J1 = -w;
    d.J2 = dyn.T.transpose() * w;
    d.J11 = Qi;
    d.J12 = -Qi * dyn.T;
    d.J21 = d.J12.transpose();
    d.J22 = symmetrize(dyn.T.transpose() * Qi * dyn.T);
    return d;
}

inline TransitionDerivatives transition_derivatives(const LinearGaussianDynamics& dyn, const Vec& a_t,
                                                    const Vec& a_prev) {
    return lg_transition_derivatives(dyn, a_t, a_prev);
}

inline Vec predict_state(const LinearGaussianDynamics& dyn, const Vec& a_prev) { return dyn.c + dyn.T * a_prev; }

// Coordinates of a_t that are deterministic copies of a_{t-1}
// coordinates: a_t[to] = a_{t-1}[from]. The rest are free.
struct DegeneracyMask {
    int dim = 0;
    std::vector<std::pair<int, int>> pinned;  // (to, from)

    static DegeneracyMask none(int m) { return {m, {}}; }

    std::vector<int> free_indices() const {
        std::vector<bool> is_pinned(dim, false);
        for (const auto& p : pinned) is_pinned[p.first] = true;
        std::vector<int> out;
        for (int i = 0; i < dim; ++i)
            if (!is_pinned[i]) out.push_back(i);
        return out;
    }

    // a_t = A u + B a_{t-1}, u the free coordinates.
    Mat A() const {
        const auto f = free_indices();
        Mat out = Mat::Zero(dim, static_cast<Eigen::Index>(f.size()));
        for (size_t j = 0; j < f.size(); ++j) out(f[j], static_cast<Eigen::Index>(j)) = 1.0;
        return out;
    }
    Mat B() const {
        Mat out = Mat::Zero(dim, dim);
        for (const auto& p : pinned) out(p.first, p.second) = 1.0;
        return out;
    }
};

// General transition density over the free coordinates u of a_t.
// derivatives() returns blocks with respect to (u, a_{t-1}).
class TransitionModel {
public:
    virtual ~TransitionModel() = default;
    virtual int dim() const = 0;
    virtual DegeneracyMask mask() const { return DegeneracyMask::none(dim()); }
    virtual double logpdf(const Vec& u, const Vec& a_prev) const = 0;
    virtual TransitionDerivatives derivatives(const Vec& u, const Vec& a_prev) const = 0;
    // Full argmax a_t of the transition density given a_{t-1}.
    virtual Vec predict(const Vec& a_prev) const = 0;
};

class LinearGaussianTransition : public TransitionModel {
public:
    explicit LinearGaussianTransition(LinearGaussianDynamics dyn) : dyn_(std::move(dyn)) {}
    int dim() const override { return dyn_.dim(); }
    double logpdf(const Vec& u, const Vec& a_prev) const override { return lg_transition_logpdf(dyn_, u, a_prev); }
    TransitionDerivatives derivatives(const Vec& u, const Vec& a_prev) const override {
        return lg_transition_derivatives(dyn_, u, a_prev);
    }
    Vec predict(const Vec& a_prev) const override { return predict_state(dyn_, a_prev); }
    const LinearGaussianDynamics& dynamics() const { return dyn_; }

private:
    LinearGaussianDynamics dyn_;
};

// a_t = a_{t-1}: every coordinate pinned, no density on free coordinates.
class ConstantTransition : public TransitionModel {
public:
    explicit ConstantTransition(int m) : m_(m) {}
    int dim() const override { return m_; }
    DegeneracyMask mask() const override {
        DegeneracyMask mk{m_, {}};
        for (int i = 0; i < m_; ++i) mk.pinned.emplace_back(i, i);
        return mk;
    }
    double logpdf(const Vec&, const Vec&) const override { return 0.0; }
    TransitionDerivatives derivatives(const Vec&, const Vec&) const override {
        return {Vec(0), Vec::Zero(m_), Mat(0, 0), Mat(0, m_), Mat(m_, 0), Mat::Zero(m_, m_)};
    }
    Vec predict(const Vec& a_prev) const override { return a_prev; }

private:
    int m_;
};

}  // namespace bf
