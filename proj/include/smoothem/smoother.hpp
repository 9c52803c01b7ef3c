#pragma once

#include <smoothem/bspline.hpp>

#include <Eigen/Dense>

#include <stdexcept>
#include <vector>

namespace smoothem {

struct singular_system : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct degenerate_smoother : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SmoothFit {
    Eigen::VectorXd coefficients;
    double lambda = 0.0;
    std::vector<bool> included;   // observation mask used for the solve
    Eigen::VectorXd fitted;       // all observations, masked or not
    int n_used = 0;
};

namespace detail {

// The penalized problem min (1/n)|y_inc - N_inc a|^2 + lambda a'Pa is solved
// in stacked least-squares form [N_inc/sqrt(n); sqrt(lambda) C] with C'C = P,
// which keeps the conditioning at sqrt of the normal-equations kappa. The
// normal-equations residual is still checked at the 1e-8 tolerance.
inline Eigen::VectorXd solve_penalized(const Eigen::MatrixXd& Ninc, const Eigen::VectorXd& yinc,
                                       double lambda, const PenaltyMatrix& P) {
    const int n_used = int(Ninc.rows());
    const int K = int(Ninc.cols());
    const int extra = int(P.root.rows());
    const double scale = 1.0 / std::sqrt(double(n_used));
    Eigen::MatrixXd A(n_used + extra, K);
    A.topRows(n_used) = Ninc * scale;
    A.bottomRows(extra) = std::sqrt(lambda) * P.root;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n_used + extra);
    b.head(n_used) = yinc * scale;
    Eigen::VectorXd a = A.householderQr().solve(b);

    Eigen::MatrixXd H = Ninc.transpose() * Ninc / double(n_used) + lambda * P.matrix;
    Eigen::VectorXd rhs = Ninc.transpose() * yinc / double(n_used);
    auto residual_ok = [&](const Eigen::VectorXd& v, double tol) {
        double floor = std::numeric_limits<double>::epsilon() * H.cwiseAbs().maxCoeff() *
                       std::max(1.0, v.cwiseAbs().maxCoeff()) * K;
        return (H * v - rhs).norm() <= std::max(tol * rhs.norm(), 8.0 * floor);
    };
    if (a.allFinite() && residual_ok(a, 1e-8)) return a;
    // one retry with a diagonal jitter (extra sqrt(jitter) I rows) before giving up
    double jitter = 1e-10 * H.trace() / K;
    Eigen::MatrixXd A2(n_used + extra + K, K);
    A2.topRows(n_used + extra) = A;
    A2.bottomRows(K) = std::sqrt(jitter) * Eigen::MatrixXd::Identity(K, K);
    Eigen::VectorXd b2 = Eigen::VectorXd::Zero(n_used + extra + K);
    b2.head(n_used) = yinc * scale;
    a = A2.householderQr().solve(b2);
    if (a.allFinite() && residual_ok(a, 1e-6)) return a;
    throw singular_system("penalized system is singular");
}

} // namespace detail

// Penalized least squares on the included observations:
// min (1/n_used) |y - N a|^2 + lambda a' P a.
inline SmoothFit fit(const Eigen::MatrixXd& N, const Eigen::VectorXd& y, double lambda,
                     const PenaltyMatrix& P, const std::vector<bool>& mask) {
    if (N.rows() != y.size() || size_t(N.rows()) != mask.size())
        throw std::invalid_argument("fit: size mismatch");
    if (!(lambda >= 0.0)) throw std::invalid_argument("fit: lambda must be >= 0");
    int n_used = 0;
    for (bool b : mask)
        if (b) ++n_used;
    if (n_used < 1) throw std::invalid_argument("fit: mask selects no observations");
    Eigen::MatrixXd Ninc(n_used, N.cols());
    Eigen::VectorXd yinc(n_used);
    for (int i = 0, r = 0; i < N.rows(); ++i) {
        if (!mask[i]) continue;
        Ninc.row(r) = N.row(i);
        yinc[r] = y[i];
        ++r;
    }
    SmoothFit out;
    out.coefficients = detail::solve_penalized(Ninc, yinc, lambda, P);
    out.lambda = lambda;
    out.included = mask;
    out.fitted = N * out.coefficients;
    out.n_used = n_used;
    return out;
}

inline SmoothFit fit(const Eigen::MatrixXd& N, const Eigen::VectorXd& y, double lambda,
                     const PenaltyMatrix& P) {
    return fit(N, y, lambda, P, std::vector<bool>(N.rows(), true));
}

inline Eigen::VectorXd predict(const SmoothFit& f, const KnotVector& kv,
                               const std::vector<double>& xs) {
    return design_matrix(kv, xs) * f.coefficients;
}

inline Eigen::VectorXd residuals(const SmoothFit& f, const Eigen::VectorXd& y) {
    if (y.size() != f.fitted.size()) throw std::invalid_argument("residuals: size mismatch");
    return y - f.fitted;
}

// Generalized cross-validation n RSS / (n - tr(S))^2 for the unmasked fit,
// with the hat-matrix trace computed exactly.
inline double gcv(const Eigen::MatrixXd& N, const Eigen::VectorXd& y, double lambda,
                  const PenaltyMatrix& P) {
    const int n = int(N.rows());
    Eigen::MatrixXd H = N.transpose() * N / double(n) + lambda * P.matrix;
    Eigen::VectorXd rhs = N.transpose() * y / double(n);
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) throw singular_system("gcv: singular system");
    Eigen::MatrixXd NtN = N.transpose() * N / double(n);
    double trace = llt.solve(NtN).trace();
    if (trace >= n) throw degenerate_smoother("gcv: effective df reaches data size");
    Eigen::VectorXd a = llt.solve(rhs);
    double rss = (y - N * a).squaredNorm();
    double denom = double(n) - trace;
    return double(n) * rss / (denom * denom);
}

// Exact hat-matrix trace at the given lambda (diagnostic companion to gcv).
inline double hat_trace(const Eigen::MatrixXd& N, double lambda, const PenaltyMatrix& P) {
    const int n = int(N.rows());
    Eigen::MatrixXd NtN = N.transpose() * N / double(n);
    Eigen::MatrixXd H = NtN + lambda * P.matrix;
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) throw singular_system("hat_trace: singular system");
    return llt.solve(NtN).trace();
}

} // namespace smoothem
