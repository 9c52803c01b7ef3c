#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

namespace smoothem {

struct component_collapse : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Variant { EqualVariance, InflatedVariance };

// Two-component residual mixture
//   xi ~ alpha N(0, sigma2) + (1 - alpha) N(mu, v1),
// where the spike variance v1 is sigma2 for EqualVariance and sigma2 + sigma_h2
// for InflatedVariance. alpha weights the smooth (non-spike) component.
struct MixtureParams {
    double alpha = 0.5;
    double mu = 0.0;
    double sigma2 = 1.0;
    std::optional<double> sigma_h2;   // InflatedVariance only
    Variant variant = Variant::EqualVariance;
};

inline double spike_variance(const MixtureParams& p) {
    if (p.variant == Variant::InflatedVariance) return p.sigma2 + p.sigma_h2.value_or(0.0);
    return p.sigma2;
}

namespace detail {

inline void check_params(const MixtureParams& p) {
    bool ok = std::isfinite(p.alpha) && p.alpha > 0.0 && p.alpha < 1.0 && std::isfinite(p.mu) &&
              std::isfinite(p.sigma2) && p.sigma2 > 0.0;
    if (p.variant == Variant::EqualVariance) {
        ok = ok && !p.sigma_h2.has_value();
    } else if (p.sigma_h2) {
        ok = ok && std::isfinite(*p.sigma_h2) && *p.sigma_h2 >= 0.0;
    }
    if (!ok) throw std::invalid_argument("mixture: invalid parameters");
}

inline void check_data(const Eigen::VectorXd& xi) {
    if (xi.size() == 0) throw std::invalid_argument("mixture: empty data");
    if (!xi.allFinite()) throw std::invalid_argument("mixture: non-finite data");
}

inline void check_weights(const Eigen::VectorXd& xi, const Eigen::VectorXd& gamma) {
    if (gamma.size() != xi.size()) throw std::invalid_argument("mixture: weight size mismatch");
    if (!gamma.allFinite() || gamma.minCoeff() < 0.0 || gamma.maxCoeff() > 1.0)
        throw std::invalid_argument("mixture: weights must lie in [0,1]");
}

inline double log_normal(double x, double mean, double var) {
    double d = x - mean;
    return -0.5 * std::log(2.0 * M_PI * var) - d * d / (2.0 * var);
}

// log of each weighted component density at one point
inline std::pair<double, double> component_logs(double x, const MixtureParams& p) {
    double a = std::log(p.alpha) + log_normal(x, 0.0, p.sigma2);
    double b = std::log1p(-p.alpha) + log_normal(x, p.mu, spike_variance(p));
    return {a, b};
}

} // namespace detail

// Mean log mixture density, evaluated via log-sum-exp.
inline double loglik(const Eigen::VectorXd& xi, const MixtureParams& p) {
    detail::check_params(p);
    detail::check_data(xi);
    double total = 0.0;
    for (int i = 0; i < xi.size(); ++i) {
        auto [a, b] = detail::component_logs(xi[i], p);
        double m = std::max(a, b);
        total += m + std::log(std::exp(a - m) + std::exp(b - m));
    }
    return total / double(xi.size());
}

// Posterior spike probabilities gamma_i = B_i / (A_i + B_i), computed in log space.
inline Eigen::VectorXd responsibilities(const Eigen::VectorXd& xi, const MixtureParams& p) {
    detail::check_params(p);
    detail::check_data(xi);
    Eigen::VectorXd g(xi.size());
    for (int i = 0; i < xi.size(); ++i) {
        auto [a, b] = detail::component_logs(xi[i], p);
        g[i] = 1.0 / (1.0 + std::exp(a - b));
    }
    return g;
}

// Weighted maximizer of the expected complete-data objective. The inflated
// variant fits the two component variances freely and reports the excess
// v1 - v0 as sigma_h2; when that is negative it is clamped to zero and the
// pooled equal-variance estimate is used instead.
inline MixtureParams m_step(const Eigen::VectorXd& xi, const Eigen::VectorXd& gamma,
                            Variant variant) {
    detail::check_data(xi);
    detail::check_weights(xi, gamma);
    const double n = double(xi.size());
    const double sum_g = gamma.sum();
    const double sum_ng = n - sum_g;
    if (sum_g < 1e-8 * n || sum_ng < 1e-8 * n)
        throw component_collapse("m_step: a mixture component has collapsed");
    MixtureParams p;
    p.variant = variant;
    p.alpha = sum_ng / n;
    p.mu = (gamma.array() * xi.array()).sum() / sum_g;
    double s0 = ((1.0 - gamma.array()) * xi.array().square()).sum();
    double s1 = (gamma.array() * (xi.array() - p.mu).square()).sum();
    if (variant == Variant::EqualVariance) {
        p.sigma2 = (s0 + s1) / n;
    } else {
        double v0 = s0 / sum_ng;
        double v1 = s1 / sum_g;
        if (v1 > v0) {
            p.sigma2 = v0;
            p.sigma_h2 = v1 - v0;
        } else {
            p.sigma2 = (s0 + s1) / n;
            p.sigma_h2 = 0.0;
        }
    }
    return p;
}

struct EMResult {
    MixtureParams params;
    Eigen::VectorXd responsibilities;
    std::vector<double> loglik_trace;   // entry 0 is the initialization
    int iterations = 0;
    bool converged = false;
    bool collapsed = false;
};

// Closed-form EM: alternate responsibilities and m_step until the mean
// log-likelihood changes by less than tol. On component collapse the best
// parameters so far are returned with the collapse flag set.
inline EMResult run_em(const Eigen::VectorXd& xi, const MixtureParams& init, double tol = 1e-8,
                       int max_iter = 500) {
    detail::check_params(init);
    detail::check_data(xi);
    EMResult out;
    out.params = init;
    out.loglik_trace.push_back(loglik(xi, init));
    for (int t = 1; t <= max_iter; ++t) {
        Eigen::VectorXd g = responsibilities(xi, out.params);
        MixtureParams next;
        try {
            next = m_step(xi, g, init.variant);
            detail::check_params(next);
        } catch (const std::exception&) {
            out.collapsed = true;
            break;
        }
        double ll = loglik(xi, next);
        out.params = next;
        out.loglik_trace.push_back(ll);
        out.iterations = t;
        if (std::abs(ll - out.loglik_trace[t - 1]) < tol) {
            out.converged = true;
            break;
        }
    }
    out.responsibilities = responsibilities(xi, out.params);
    return out;
}

// Expected complete-data objective Q(theta | gamma): the mean of
// (1-gamma_i) log[alpha phi(xi_i; 0, sigma2)] + gamma_i log[(1-alpha) phi(xi_i; mu, v1)]
// with the weights held fixed.
inline double q_function(const Eigen::VectorXd& xi, const Eigen::VectorXd& gamma,
                         const MixtureParams& p) {
    detail::check_params(p);
    detail::check_data(xi);
    detail::check_weights(xi, gamma);
    double total = 0.0;
    for (int i = 0; i < xi.size(); ++i) {
        auto [a, b] = detail::component_logs(xi[i], p);
        total += (1.0 - gamma[i]) * a + gamma[i] * b;
    }
    return total / double(xi.size());
}

// Gradient of Q(. | gamma) in (alpha, mu, sigma2); equal-variance model only.
inline Eigen::Vector3d q_gradient(const Eigen::VectorXd& xi, const Eigen::VectorXd& gamma,
                                  const MixtureParams& p) {
    if (p.variant != Variant::EqualVariance)
        throw std::invalid_argument("q_gradient: equal-variance model only");
    detail::check_params(p);
    detail::check_data(xi);
    detail::check_weights(xi, gamma);
    const double s2 = p.sigma2;
    const double s4 = s2 * s2;
    double ga = 0.0, gm = 0.0, gs = 0.0;
    for (int i = 0; i < xi.size(); ++i) {
        double g = gamma[i];
        double x = xi[i];
        double d = x - p.mu;
        ga += (1.0 - g) / p.alpha - g / (1.0 - p.alpha);
        gm += g * d / s2;
        gs += (1.0 - g) * x * x / (2.0 * s4) + g * d * d / (2.0 * s4) - 1.0 / (2.0 * s2);
    }
    const double n = double(xi.size());
    return Eigen::Vector3d(ga / n, gm / n, gs / n);
}

struct GradientStep {
    MixtureParams params;
    bool projected = false;   // step left the valid region and was pulled back
};

// One first-order update theta + stepsize * grad Q(theta | theta). Steps that
// exit the valid region are projected to the boundary plus 1e-6.
inline GradientStep gradient_em_step(const Eigen::VectorXd& xi, const MixtureParams& p,
                                     double stepsize) {
    if (!(stepsize > 0.0)) throw std::invalid_argument("gradient_em_step: stepsize must be > 0");
    Eigen::VectorXd g = responsibilities(xi, p);
    Eigen::Vector3d grad = q_gradient(xi, g, p);
    GradientStep out;
    out.params = p;
    out.params.alpha = p.alpha + stepsize * grad[0];
    out.params.mu = p.mu + stepsize * grad[1];
    out.params.sigma2 = p.sigma2 + stepsize * grad[2];
    const double edge = 1e-6;
    if (!(out.params.alpha > 0.0 && out.params.alpha < 1.0)) {
        out.params.alpha = std::clamp(out.params.alpha, edge, 1.0 - edge);
        out.projected = true;
    }
    if (!(out.params.sigma2 > 0.0)) {
        out.params.sigma2 = edge;
        out.projected = true;
    }
    return out;
}

// Hard classification: spike iff gamma_i >= threshold.
inline std::vector<bool> classify(const Eigen::VectorXd& gamma, double threshold) {
    if (!(threshold >= 0.5 && threshold < 1.0))
        throw std::invalid_argument("classify: threshold must lie in [0.5, 1)");
    std::vector<bool> out(size_t(gamma.size()));
    for (int i = 0; i < gamma.size(); ++i) out[size_t(i)] = gamma[i] >= threshold;
    return out;
}

// Complete-data MLE treating labels as memberships. A one-class labeling falls
// back to a nearly-all-smooth initialization.
inline MixtureParams init_from_labels(const Eigen::VectorXd& xi, const std::vector<bool>& labels,
                                      Variant variant) {
    detail::check_data(xi);
    if (labels.size() != size_t(xi.size()))
        throw std::invalid_argument("init_from_labels: label size mismatch");
    const int n = int(xi.size());
    int spikes = int(std::count(labels.begin(), labels.end(), true));
    if (spikes == 0 || spikes == n) {
        MixtureParams p;
        p.variant = variant;
        p.alpha = 1.0 - 1.0 / double(n);
        p.mu = xi.cwiseAbs().maxCoeff();
        p.sigma2 = (xi.array() - xi.mean()).square().sum() / double(n);
        if (variant == Variant::InflatedVariance) p.sigma_h2 = 0.0;
        return p;
    }
    Eigen::VectorXd g(n);
    for (int i = 0; i < n; ++i) g[i] = labels[size_t(i)] ? 1.0 : 0.0;
    return m_step(xi, g, variant);
}

// Mean complete-data log-likelihood under hard labels.
inline double complete_loglik(const Eigen::VectorXd& xi, const std::vector<bool>& labels,
                              const MixtureParams& p) {
    detail::check_params(p);
    detail::check_data(xi);
    if (labels.size() != size_t(xi.size()))
        throw std::invalid_argument("complete_loglik: label size mismatch");
    double total = 0.0;
    for (int i = 0; i < xi.size(); ++i) {
        auto [a, b] = detail::component_logs(xi[i], p);
        total += labels[size_t(i)] ? b : a;
    }
    return total / double(xi.size());
}

inline std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int k = 0; k <= 9; ++k) t.push_back(0.50 + 0.05 * k);
    t.push_back(0.99);
    return t;
}

struct ThresholdChoice {
    double threshold = 0.0;
    std::vector<bool> labels;
    bool no_spikes = false;   // every candidate produced a one-class labeling
};

// Pick the cutoff whose hard labels maximize the complete-data log-likelihood
// at their own complete-data MLE. Candidates yielding a one-class labeling are
// skipped; ties break toward the smallest threshold.
inline ThresholdChoice select_threshold(const Eigen::VectorXd& xi, const Eigen::VectorXd& gamma,
                                        Variant variant,
                                        const std::vector<double>& candidates = default_thresholds()) {
    detail::check_data(xi);
    detail::check_weights(xi, gamma);
    if (candidates.empty()) throw std::invalid_argument("select_threshold: no candidates");
    const int n = int(xi.size());
    ThresholdChoice best;
    double best_ll = -std::numeric_limits<double>::infinity();
    bool found = false;
    for (double c : candidates) {
        std::vector<bool> labels = classify(gamma, c);
        int spikes = int(std::count(labels.begin(), labels.end(), true));
        if (spikes == 0 || spikes == n) continue;
        MixtureParams p = init_from_labels(xi, labels, variant);
        double ll = complete_loglik(xi, labels, p);
        if (!found || ll > best_ll || (ll == best_ll && c < best.threshold)) {
            found = true;
            best_ll = ll;
            best.threshold = c;
            best.labels = std::move(labels);
        }
    }
    if (!found) {
        best.threshold = candidates.front();
        best.labels.assign(size_t(n), false);
        best.no_spikes = true;
    }
    return best;
}

} // namespace smoothem
