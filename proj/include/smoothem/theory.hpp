#pragma once

#include <smoothem/rng.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace smoothem {

struct invalid_radius : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct no_contraction : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Which parameters the curvature constants treat as unknown: the full
// (alpha, mu, sigma2) block, or only (mu, sigma2) with the weight known.
enum class ConstantSet { FullUnknown, KnownAlpha };

// Operating point for the curvature constants of the population EM objective,
// taken over a Euclidean ball of radius r around the true parameters.
struct TheoryInputs {
    double alpha_star = 0.9;
    double sigma_star2 = 1.0;
    double r = 0.1;
    double mu_star = 0.0;
    double omega = 1e-3;    // floor for the weight denominator in L
    double omega0 = 1e-3;   // slack in the separation exponent of gamma_bound
    ConstantSet constant_set = ConstantSet::FullUnknown;
};

namespace detail {

inline void check_theory(const TheoryInputs& in) {
    if (!(in.alpha_star > 0.0 && in.alpha_star < 1.0))
        throw std::invalid_argument("theory: alpha_star must lie in (0,1)");
    if (!(in.sigma_star2 > 0.0)) throw std::invalid_argument("theory: sigma_star2 must be > 0");
    if (!(in.r > 0.0)) throw std::invalid_argument("theory: r must be > 0");
    if (!(in.omega > 0.0 && in.omega0 > 0.0))
        throw std::invalid_argument("theory: slack constants must be > 0");
    if (in.r >= in.sigma_star2) throw invalid_radius("theory: r must be smaller than sigma_star2");
}

} // namespace detail

// Smallest curvature of the population objective over the radius-r ball.
// May come out nonpositive when the ball is too large; returned as computed.
inline double nu(const TheoryInputs& in) {
    detail::check_theory(in);
    const double s2 = in.sigma_star2;
    const double r = in.r;
    const double q = 1.0 - in.alpha_star;
    double var1 = (s2 - r) / (2.0 * std::pow(s2 + r, 3)) - q * r / std::pow(s2 - r, 2);
    double var2 = q / (s2 + r) - q * r / std::pow(s2 - r, 2);
    double v = std::min(var1, var2);
    if (in.constant_set == ConstantSet::FullUnknown) {
        // the weight term floors at 1 once alpha_star + r exceeds 1
        double weight = 1.0 / std::pow(std::min(in.alpha_star + r, 1.0), 2);
        v = std::min(v, weight);
    }
    return v;
}

// Largest curvature of the population objective over the radius-r ball.
inline double lipschitz_L(const TheoryInputs& in) {
    detail::check_theory(in);
    const double s2 = in.sigma_star2;
    const double r = in.r;
    const double q = 1.0 - in.alpha_star;
    double var1 = q * s2 / std::pow(s2 - r, 2);
    double var2 = (s2 + r) / (2.0 * std::pow(s2 - r, 3)) + q / (s2 - r);
    double L = std::max(var1, var2);
    if (in.constant_set == ConstantSet::FullUnknown) {
        double weight = in.alpha_star / std::pow(std::max(in.alpha_star - r, 0.7), 2) +
                        q / std::pow(std::max(1.0 - in.alpha_star - r, in.omega), 2);
        L = std::max(L, weight);
    }
    return L;
}

// Order-of-magnitude bound on the coupling between the weight and location
// blocks, with the unknown leading constant set to 1. The idealized mode is
// the well-separated limit where the coupling is taken as exactly zero.
inline double gamma_bound(const TheoryInputs& in, bool idealized = false) {
    detail::check_theory(in);
    if (idealized) return 0.0;
    if (!(in.mu_star > in.r))
        throw std::invalid_argument("gamma_bound: mu_star must exceed the ball radius");
    const double s2 = in.sigma_star2;
    double poly = std::pow(in.mu_star, 5) / std::pow(s2, 4);
    double expo = std::exp(-((in.mu_star - in.r) / (s2 + in.r)) * in.omega0);
    return poly * expo;
}

// Per-iteration contraction factor 1 - (2 nu - gamma) / (L + nu).
inline double convergence_rate(double nu_value, double lipschitz, double gamma) {
    if (!(gamma >= 0.0) || !(gamma < nu_value) || !(nu_value <= lipschitz))
        throw no_contraction("convergence_rate: requires 0 <= gamma < nu <= L");
    return 1.0 - (2.0 * nu_value - gamma) / (lipschitz + nu_value);
}

// Smallest k with rate^k strictly below target.
inline int iterations_to(double rate, double target) {
    if (!(rate > 0.0 && rate < 1.0)) throw no_contraction("iterations_to: rate must lie in (0,1)");
    if (!(target > 0.0 && target < 1.0))
        throw std::invalid_argument("iterations_to: target must lie in (0,1)");
    long long k = std::llround(std::ceil(std::log(target) / std::log(rate))) - 2;
    if (k < 1) k = 1;
    while (std::pow(rate, double(k)) >= target) ++k;
    return int(k);
}

// Closed-form Hessian of the population objective f = -q at theta, for truth
// theta_star; coordinates are (alpha, mu, sigma2) of the equal-variance model.
// The (sigma2, sigma2) entry uses the on-target location, so away from
// mu = mu_star it is the displayed simplification rather than the full second
// derivative.
inline Eigen::Matrix3d q_hessian(const Eigen::Vector3d& theta, const Eigen::Vector3d& theta_star) {
    const double a = theta[0], mu = theta[1], s2 = theta[2];
    const double as = theta_star[0], mus = theta_star[1], s2s = theta_star[2];
    if (!(a > 0.0 && a < 1.0 && s2 > 0.0))
        throw std::invalid_argument("q_hessian: theta outside the valid region");
    if (!(as > 0.0 && as < 1.0 && s2s > 0.0))
        throw std::invalid_argument("q_hessian: theta_star outside the valid region");
    const double q = 1.0 - as;
    Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
    H(0, 0) = as / (a * a) + q / ((1.0 - a) * (1.0 - a));
    H(1, 1) = q / s2;
    H(1, 2) = H(2, 1) = q * (mus - mu) / (s2 * s2);
    H(2, 2) = -1.0 / (2.0 * s2 * s2) + s2s / (s2 * s2 * s2);
    return H;
}

struct BoundsReport {
    int n_samples = 0;
    double nu = 0.0;
    double lipschitz = 0.0;
    double min_eigenvalue = 0.0;
    double max_eigenvalue = 0.0;
    int violations = 0;   // samples with an eigenvalue outside [nu - 1e-9, L + 1e-9]
};

// Sample the Hessian over the radius-r ball around theta_star and check its
// eigenvalues against [nu, L]. KnownAlpha restricts both the sampling and the
// eigenvalue check to the (mu, sigma2) block; FullUnknown uses all three
// coordinates, rejecting draws that leave the valid region.
inline BoundsReport verify_bounds(const TheoryInputs& in, int n_samples,
                                  std::uint64_t seed = 0x5eed5eedULL) {
    detail::check_theory(in);
    BoundsReport rep;
    rep.n_samples = n_samples;
    rep.nu = nu(in);
    rep.lipschitz = lipschitz_L(in);
    rep.min_eigenvalue = std::numeric_limits<double>::infinity();
    rep.max_eigenvalue = -std::numeric_limits<double>::infinity();
    Eigen::Vector3d star(in.alpha_star, in.mu_star, in.sigma_star2);
    std::mt19937_64 rng = make_engine(seed, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const bool known = in.constant_set == ConstantSet::KnownAlpha;
    const int dim = known ? 2 : 3;
    for (int s = 0; s < n_samples; ++s) {
        Eigen::Vector3d theta = star;
        for (;;) {
            Eigen::VectorXd dir(dim);
            for (int k = 0; k < dim; ++k) dir[k] = gauss(rng);
            dir *= in.r * std::pow(unif(rng), 1.0 / dim) / dir.norm();
            theta = star;
            if (known) {
                theta[1] += dir[0];
                theta[2] += dir[1];
            } else {
                theta += dir;
            }
            if (theta[0] > 0.0 && theta[0] < 1.0 && theta[2] > 0.0) break;
        }
        Eigen::Matrix3d H = q_hessian(theta, star);
        double lo, hi;
        if (known) {
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(H.bottomRightCorner<2, 2>());
            lo = es.eigenvalues().minCoeff();
            hi = es.eigenvalues().maxCoeff();
        } else {
            Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(H);
            lo = es.eigenvalues().minCoeff();
            hi = es.eigenvalues().maxCoeff();
        }
        rep.min_eigenvalue = std::min(rep.min_eigenvalue, lo);
        rep.max_eigenvalue = std::max(rep.max_eigenvalue, hi);
        if (lo < rep.nu - 1e-9 || hi > rep.lipschitz + 1e-9) ++rep.violations;
    }
    return rep;
}

} // namespace smoothem
