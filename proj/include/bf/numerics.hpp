#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "bf/errors.hpp"

namespace bf {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Series = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kPdPivotTol = 1e-12;
inline constexpr double kSingularTol = 1e-12;
inline constexpr double kStationaryMargin = 1e-10;

inline Mat symmetrize(const Mat& A) { return 0.5 * (A + A.transpose()); }

// Cholesky-based positive-definiteness test. A pivot below
// kPdPivotTol times the largest diagonal entry counts as failure.
inline bool is_pd(const Mat& A) {
    if (A.rows() == 0) return true;
    if (!A.allFinite()) return false;
    const double dmax = A.diagonal().maxCoeff();
    if (!(dmax > 0.0)) return false;
    Eigen::LLT<Mat> llt(symmetrize(A));
    if (llt.info() != Eigen::Success) return false;
    const Mat& L = llt.matrixLLT();
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        const double pivot = L(i, i) * L(i, i);
        if (!(pivot >= kPdPivotTol * dmax)) return false;
    }
    return true;
}

inline bool is_psd(const Mat& A, double tol = 1e-10) {
    if (A.rows() == 0) return true;
    Eigen::SelfAdjointEigenSolver<Mat> es(symmetrize(A), Eigen::EigenvaluesOnly);
    const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    return es.eigenvalues().minCoeff() >= -tol * scale;
}

// log det of a PD matrix; NaN when the matrix is not PD.
inline double logdet_pd(const Mat& A) {
    Eigen::LLT<Mat> llt(symmetrize(A));
    if (llt.info() != Eigen::Success) return std::numeric_limits<double>::quiet_NaN();
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline Mat inverse_pd(const Mat& A) {
    Eigen::LLT<Mat> llt(symmetrize(A));
    return symmetrize(llt.solve(Mat::Identity(A.rows(), A.cols())));
}

inline double smallest_singular_value(const Mat& A) {
    if (A.size() == 0) return std::numeric_limits<double>::infinity();
    Eigen::JacobiSVD<Mat> svd(A);
    return svd.singularValues().minCoeff();
}

inline double spectral_radius(const Mat& T) {
    if (T.size() == 0) return 0.0;
    Eigen::EigenSolver<Mat> es(T, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

struct BlockSystem {
    Mat A11, A12, A21, A22;
};

struct BlockInverse {
    Mat B11, B12, B21, B22;

    Mat assemble() const {
        Mat out(B11.rows() + B21.rows(), B11.cols() + B12.cols());
        out << B11, B12, B21, B22;
        return out;
    }
};

inline Mat assemble(const BlockSystem& s) {
    Mat out(s.A11.rows() + s.A21.rows(), s.A11.cols() + s.A12.cols());
    out << s.A11, s.A12, s.A21, s.A22;
    return out;
}

// Inverse of [[A11, A12], [A21, A22]] via the Schur complement of A22.
inline BlockInverse block_inverse(const BlockSystem& s) {
    const double scale = std::max(1.0, assemble(s).norm());
    if (smallest_singular_value(s.A22) < kSingularTol * scale)
        throw Error(Errc::SingularBlock, "A22 is numerically singular");
    Eigen::FullPivLU<Mat> dlu(s.A22);
    const Mat Dinv_A21 = dlu.solve(s.A21);
    const Mat Dinv = dlu.inverse();
    const Mat S = s.A11 - s.A12 * Dinv_A21;
    if (smallest_singular_value(S) < kSingularTol * scale)
        throw Error(Errc::SingularBlock, "Schur complement is numerically singular");
    const Mat Sinv = Eigen::FullPivLU<Mat>(S).inverse();
    const Mat A12_Dinv = s.A12 * Dinv;
    BlockInverse r;
    r.B11 = Sinv;
    r.B12 = -Sinv * A12_Dinv;
    r.B21 = -Dinv_A21 * Sinv;
    r.B22 = Dinv + Dinv_A21 * Sinv * A12_Dinv;
    return r;
}

// Predicted information (T I_prev^{-1} T' + Q)^{-1}; valid for singular Q.
inline Mat predict_info_lg(const Mat& T, const Mat& Q, const Mat& I_prev) {
    if (!is_pd(I_prev)) throw Error(Errc::SingularPrediction, "previous information not PD");
    const Mat P = symmetrize(T * inverse_pd(I_prev) * T.transpose() + Q);
    if (!is_pd(P)) throw Error(Errc::SingularPrediction, "predicted covariance not invertible");
    return inverse_pd(P);
}

// Woodbury form Q^{-1} - Q^{-1}T(I_prev + T'Q^{-1}T)^{-1}T'Q^{-1}; needs Q invertible.
inline Mat predict_info_woodbury(const Mat& T, const Mat& Q, const Mat& I_prev) {
    if (!is_pd(Q)) throw Error(Errc::SingularPrediction, "Q not invertible");
    const Mat Qi = inverse_pd(Q);
    const Mat QiT = Qi * T;
    const Mat D = symmetrize(I_prev + T.transpose() * QiT);
    if (!is_pd(D)) throw Error(Errc::SingularPrediction, "I_prev + T'Q^{-1}T not PD");
    return symmetrize(Qi - QiT * Eigen::LLT<Mat>(D).solve(QiT.transpose()));
}

struct Moments {
    Vec mean;
    Mat cov;
};

inline Moments stationary_moments(const Vec& c, const Mat& T, const Mat& Q) {
    const Eigen::Index m = T.rows();
    if (spectral_radius(T) >= 1.0 - kStationaryMargin)
        throw Error(Errc::NonStationary, "spectral radius of T is not below one");
    Moments out;
    out.mean = (Mat::Identity(m, m) - T).fullPivLu().solve(c);
    Mat K(m * m, m * m);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j) K.block(i * m, j * m, m, m) = T(i, j) * T;
    const Mat A = Mat::Identity(m * m, m * m) - K;
    const Vec vq = Eigen::Map<const Vec>(Q.data(), m * m);
    const Vec vs = A.fullPivLu().solve(vq);
    out.cov = symmetrize(Eigen::Map<const Mat>(vs.data(), m, m));
    return out;
}

using ScalarField = std::function<double(const Vec&)>;

inline double default_fd_step(double x) { return 1e-5 * std::max(1.0, std::abs(x)); }

namespace detail {
inline double checked(const ScalarField& f, const Vec& x) {
    const double v = f(x);
    if (!std::isfinite(v)) throw Error(Errc::NonFinite, "function not finite near evaluation point");
    return v;
}
}  // namespace detail

// Central-difference gradient. h <= 0 selects the default per-coordinate step.
inline Vec fd_gradient(const ScalarField& f, const Vec& x, double h = 0.0) {
    Vec g(x.size());
    Vec xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double hi = h > 0.0 ? h : default_fd_step(x(i));
        xp(i) = x(i) + hi;
        const double fp = detail::checked(f, xp);
        xp(i) = x(i) - hi;
        const double fm = detail::checked(f, xp);
        xp(i) = x(i);
        g(i) = (fp - fm) / (2.0 * hi);
    }
    return g;
}

// Central-difference Hessian. The default step is 1e-4 scaled, which
// balances truncation against cancellation for second differences.
inline Mat fd_hessian(const ScalarField& f, const Vec& x, double h = 0.0) {
    const Eigen::Index n = x.size();
    Mat H(n, n);
    Vec hs(n);
    for (Eigen::Index i = 0; i < n; ++i) hs(i) = h > 0.0 ? h : 1e-4 * std::max(1.0, std::abs(x(i)));
    const double f0 = detail::checked(f, x);
    Vec xp = x;
    for (Eigen::Index i = 0; i < n; ++i) {
        xp(i) = x(i) + hs(i);
        const double fp = detail::checked(f, xp);
        xp(i) = x(i) - hs(i);
        const double fm = detail::checked(f, xp);
        xp(i) = x(i);
        H(i, i) = (fp - 2.0 * f0 + fm) / (hs(i) * hs(i));
        for (Eigen::Index j = 0; j < i; ++j) {
            double acc = 0.0;
            for (int si : {1, -1})
                for (int sj : {1, -1}) {
                    xp(i) = x(i) + si * hs(i);
                    xp(j) = x(j) + sj * hs(j);
                    acc += si * sj * detail::checked(f, xp);
                }
            xp(i) = x(i);
            xp(j) = x(j);
            H(i, j) = H(j, i) = acc / (4.0 * hs(i) * hs(j));
        }
    }
    return H;
}

// Relative discrepancy with an absolute floor of one.
inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

inline double rel_err(const Mat& a, const Mat& b) {
    double e = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) e = std::max(e, rel_err(a.data()[i], b.data()[i]));
    return e;
}

}  // namespace bf
