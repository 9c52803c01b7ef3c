#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "smoothem/bspline.hpp"
#include "smoothem/mixture.hpp"
#include "smoothem/rng.hpp"
#include "smoothem/smoother.hpp"

namespace smoothem {

namespace detail {

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median: empty input");
    size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    double lo = *std::max_element(v.begin(), v.begin() + mid);
    return 0.5 * (lo + hi);
}

inline double mad(const Eigen::VectorXd& v) {
    std::vector<double> a(v.data(), v.data() + v.size());
    double med = median(a);
    for (double& x : a) x = std::abs(x - med);
    return median(std::move(a));
}

// Run fn(0..items-1) across a small thread pool. The first exception thrown by
// any item is rethrown after all threads join.
template <typename F>
inline void parallel_for(int items, int threads, F&& fn) {
    threads = std::max(1, std::min(threads, items));
    if (threads <= 1) {
        for (int i = 0; i < items; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < items; i = next.fetch_add(1)) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

struct TwoMeansFit {
    double center_low = 0.0;
    double center_high = 0.0;
    std::vector<bool> in_high;
    double sse = std::numeric_limits<double>::infinity();
};

// 1-d 2-means on raw values, best of 10 seeded Lloyd restarts.
inline TwoMeansFit two_means(const Eigen::VectorXd& v, std::uint64_t seed) {
    const int n = int(v.size());
    std::mt19937_64 rng = make_engine(seed, 0);
    std::uniform_int_distribution<int> pick(0, n - 1);
    TwoMeansFit best;
    for (int restart = 0; restart < 10; ++restart) {
        int i = pick(rng);
        int j = pick(rng);
        while (j == i) j = pick(rng);
        double c0 = std::min(v[i], v[j]);
        double c1 = std::max(v[i], v[j]);
        std::vector<bool> hi(n, false);
        for (int iter = 0; iter < 100; ++iter) {
            int n_hi = 0;
            for (int k = 0; k < n; ++k) {
                hi[k] = std::abs(v[k] - c1) < std::abs(v[k] - c0);
                n_hi += hi[k];
            }
            if (n_hi == 0 || n_hi == n) break;
            double s0 = 0.0, s1 = 0.0;
            for (int k = 0; k < n; ++k) (hi[k] ? s1 : s0) += v[k];
            double m0 = s0 / double(n - n_hi);
            double m1 = s1 / double(n_hi);
            bool settled = std::abs(m0 - c0) < 1e-12 && std::abs(m1 - c1) < 1e-12;
            c0 = m0;
            c1 = m1;
            if (settled) break;
        }
        for (int k = 0; k < n; ++k) hi[k] = std::abs(v[k] - c1) < std::abs(v[k] - c0);
        double sse = 0.0;
        for (int k = 0; k < n; ++k) {
            double d = v[k] - (hi[k] ? c1 : c0);
            sse += d * d;
        }
        if (sse < best.sse) {
            best.center_low = c0;
            best.center_high = c1;
            best.in_high = hi;
            best.sse = sse;
        }
    }
    return best;
}

inline void check_classify_input(const Eigen::VectorXd& residuals, double max_spike_fraction) {
    if (residuals.size() < 4)
        throw std::invalid_argument("classify: need at least 4 residuals");
    if (!residuals.allFinite())
        throw std::invalid_argument("classify: residuals must be finite");
    if (!(max_spike_fraction > 0.0) || !(max_spike_fraction < 1.0))
        throw std::invalid_argument("classify: max_spike_fraction must be in (0, 1)");
}

// Common sanity gates: a cluster only counts as spikes when it is small enough
// and its center sits well clear of the bulk.
inline std::vector<bool> apply_guards(const Eigen::VectorXd& residuals, std::vector<bool> spikes,
                                      double separation, double max_spike_fraction) {
    const int n = int(residuals.size());
    int count = int(std::count(spikes.begin(), spikes.end(), true));
    double scale = mad(residuals);
    if (count == 0 || double(count) > max_spike_fraction * double(n) ||
        separation < 3.0 * scale || separation == 0.0)
        return std::vector<bool>(n, false);
    return spikes;
}

}  // namespace detail

// Split smoothing residuals into bulk vs spike candidates by clustering their
// magnitudes; returns one flag per residual. Deterministic given the seed.
// Falls back to all-false when the split looks spurious (too many points
// flagged, clusters closer than 3 robust scales, or constant input).
inline std::vector<bool> magnitude_classify(const Eigen::VectorXd& residuals,
                                            double max_spike_fraction, std::uint64_t seed) {
    detail::check_classify_input(residuals, max_spike_fraction);
    const int n = int(residuals.size());
    if ((residuals.array() == residuals[0]).all()) return std::vector<bool>(n, false);
    detail::TwoMeansFit km = detail::two_means(residuals, seed);
    bool spike_is_high = std::abs(km.center_high) >= std::abs(km.center_low);
    std::vector<bool> spikes(n);
    for (int k = 0; k < n; ++k) spikes[k] = spike_is_high ? km.in_high[k] : !km.in_high[k];
    double separation = std::abs(km.center_high - km.center_low);
    return detail::apply_guards(residuals, std::move(spikes), separation, max_spike_fraction);
}

// Alternative split: cut the sorted residuals at their single largest gap.
// Same guards as magnitude_classify; no randomness.
inline std::vector<bool> largest_gap_classify(const Eigen::VectorXd& residuals,
                                              double max_spike_fraction) {
    detail::check_classify_input(residuals, max_spike_fraction);
    const int n = int(residuals.size());
    if ((residuals.array() == residuals[0]).all()) return std::vector<bool>(n, false);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return residuals[a] < residuals[b]; });
    int cut = 0;
    double widest = -1.0;
    for (int k = 0; k + 1 < n; ++k) {
        double gap = residuals[order[k + 1]] - residuals[order[k]];
        if (gap > widest) {
            widest = gap;
            cut = k;
        }
    }
    double m_lo = 0.0, m_hi = 0.0;
    for (int k = 0; k <= cut; ++k) m_lo += residuals[order[k]];
    for (int k = cut + 1; k < n; ++k) m_hi += residuals[order[k]];
    m_lo /= double(cut + 1);
    m_hi /= double(n - cut - 1);
    bool spike_is_high = std::abs(m_hi) >= std::abs(m_lo);
    std::vector<bool> spikes(n, false);
    for (int k = 0; k < n; ++k) spikes[order[k]] = (k > cut) == spike_is_high;
    return detail::apply_guards(residuals, std::move(spikes), std::abs(m_hi - m_lo),
                                max_spike_fraction);
}

// Pilot fit used only to calibrate the perturbation scale: local linear
// regression with tricube weights over the k nearest neighbors in x.
inline Eigen::VectorXd local_linear_pilot(const std::vector<double>& xs, const Eigen::VectorXd& ys,
                                          double span = 0.3) {
    const int n = int(xs.size());
    if (n != int(ys.size())) throw std::invalid_argument("local_linear_pilot: size mismatch");
    if (n < 2) throw std::invalid_argument("local_linear_pilot: need at least 2 points");
    if (!(span > 0.0) || !(span <= 1.0))
        throw std::invalid_argument("local_linear_pilot: span must be in (0, 1]");
    int k = std::min(n, std::max(2, int(std::ceil(span * n))));
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return xs[a] < xs[b] || (xs[a] == xs[b] && a < b);
    });
    const double inf = std::numeric_limits<double>::infinity();
    Eigen::VectorXd fitted(n);
    for (int pos = 0; pos < n; ++pos) {
        double x0 = xs[order[pos]];
        int lo = pos, hi = pos;
        while (hi - lo + 1 < k) {
            double dl = lo > 0 ? x0 - xs[order[lo - 1]] : inf;
            double dr = hi < n - 1 ? xs[order[hi + 1]] - x0 : inf;
            if (dl <= dr) --lo;
            else ++hi;
        }
        double h = std::max(x0 - xs[order[lo]], xs[order[hi]] - x0);
        if (h == 0.0) {
            double s = 0.0;
            for (int w = lo; w <= hi; ++w) s += ys[order[w]];
            fitted[order[pos]] = s / double(hi - lo + 1);
            continue;
        }
        double sw = 0.0, sx = 0.0, sxx = 0.0, sy = 0.0, sxy = 0.0;
        for (int w = lo; w <= hi; ++w) {
            double dx = xs[order[w]] - x0;
            double u = 1.0 - std::pow(std::abs(dx) / h, 3.0);
            double wt = u > 0.0 ? u * u * u : 0.0;
            sw += wt;
            sx += wt * dx;
            sxx += wt * dx * dx;
            sy += wt * ys[order[w]];
            sxy += wt * dx * ys[order[w]];
        }
        double det = sw * sxx - sx * sx;
        if (det > 1e-12 * std::max(sw * sxx, sx * sx) && det > 0.0)
            fitted[order[pos]] = (sxx * sy - sx * sxy) / det;
        else
            fitted[order[pos]] = sy / sw;
    }
    return fitted;
}

// Robust noise scale for the perturbation draw: raw MAD of the pilot
// residuals. Deliberately not scaled to Gaussian sigma; the score only needs
// a stable order of magnitude.
inline double robust_scale(const std::vector<double>& xs, const Eigen::VectorXd& ys) {
    if (int(xs.size()) < 10) throw std::invalid_argument("robust_scale: need at least 10 points");
    return detail::mad(ys - local_linear_pilot(xs, ys));
}

// Overfit score relative to an already computed masked fit: perturb the
// smooth-labeled observations with N(0, sigma_tau^2) noise, refit with the
// same mask, and report the RMS difference of the two curves over the
// evaluation grid. A wiggly (under-penalized) fit chases the noise and moves;
// a stiff fit stays put.
inline double overfit_score(const Eigen::MatrixXd& N, const PenaltyMatrix& P,
                            const Eigen::MatrixXd& grid_design, const Eigen::VectorXd& ys,
                            const std::vector<bool>& spike_labels, double lambda,
                            double sigma_tau, std::uint64_t seed, const SmoothFit& base) {
    const int n = int(ys.size());
    if (int(spike_labels.size()) != n)
        throw std::invalid_argument("overfit_score: label size mismatch");
    if (!(sigma_tau >= 0.0) || !std::isfinite(sigma_tau))
        throw std::invalid_argument("overfit_score: sigma_tau must be finite and >= 0");
    if (grid_design.rows() == 0 || grid_design.cols() != N.cols())
        throw std::invalid_argument("overfit_score: grid design does not match basis");
    std::mt19937_64 rng = make_engine(seed, 0);
    std::normal_distribution<double> tau(0.0, std::max(sigma_tau, 1e-8));
    Eigen::VectorXd yp = ys;
    std::vector<bool> mask(n);
    for (int i = 0; i < n; ++i) {
        mask[i] = !spike_labels[i];
        if (mask[i]) yp[i] += tau(rng);
    }
    SmoothFit perturbed = fit(N, yp, lambda, P, mask);
    Eigen::VectorXd diff = grid_design * (base.coefficients - perturbed.coefficients);
    return std::sqrt(diff.squaredNorm() / double(grid_design.rows()));
}

inline double overfit_score(const Eigen::MatrixXd& N, const PenaltyMatrix& P,
                            const Eigen::MatrixXd& grid_design, const Eigen::VectorXd& ys,
                            const std::vector<bool>& spike_labels, double lambda,
                            double sigma_tau, std::uint64_t seed) {
    const int n = int(ys.size());
    if (int(spike_labels.size()) != n)
        throw std::invalid_argument("overfit_score: label size mismatch");
    std::vector<bool> mask(n);
    for (int i = 0; i < n; ++i) mask[i] = !spike_labels[i];
    SmoothFit base = fit(N, ys, lambda, P, mask);
    return overfit_score(N, P, grid_design, ys, spike_labels, lambda, sigma_tau, seed, base);
}

// Model choice criterion: mixture log-likelihood of the residuals minus a
// penalty on curve instability.
inline double criterion(double loglik, double overfit, double beta) {
    if (!(beta >= 0.0)) throw std::invalid_argument("criterion: beta must be >= 0");
    return loglik - beta * overfit;
}

struct PipelineConfig {
    std::vector<double> lambda_grid{1e3, 1e2, 10.0, 1.0, 0.1, 1e-2, 1e-3, 1e-4};
    int spline_order = 4;
    int penalty_order = 2;
    int interior_knots = -1;  // -1 selects min(296, n/2)
    double max_spike_fraction = 0.5;
    Variant variant = Variant::EqualVariance;
    double overfit_weight = 1.0;
    std::uint64_t seed = 0;
    std::vector<double> threshold_candidates = default_thresholds();
    double em_tol = 1e-8;
    int em_max_iter = 500;
    bool use_largest_gap = false;
    int threads = 1;
};

struct LambdaDiagnostics {
    double lambda = 0.0;
    double loglik = 0.0;
    double overfit = 0.0;
    double criterion = 0.0;
    std::vector<bool> labels;
    MixtureParams params;
    Eigen::VectorXd posterior;
    bool no_spikes = false;
    bool collapsed = false;
};

struct PipelineResult {
    double lambda_star = 0.0;
    MixtureParams params;
    std::vector<bool> labels;
    SmoothFit fit;
    KnotVector knots{0.0, 1.0, 0, 4};
    std::vector<LambdaDiagnostics> per_lambda;
    int selected_index = -1;
    double sigma_tau = 0.0;
    bool no_spikes_found = false;
    int collapse_events = 0;
};

namespace detail {

// Grid winner: highest criterion, ties to the larger lambda.
inline int select_row(const std::vector<LambdaDiagnostics>& rows) {
    int best = 0;
    for (int j = 1; j < int(rows.size()); ++j) {
        if (rows[j].criterion > rows[best].criterion ||
            (rows[j].criterion == rows[best].criterion && rows[j].lambda > rows[best].lambda))
            best = j;
    }
    return best;
}

inline void check_pipeline_input(const std::vector<double>& xs, const Eigen::VectorXd& ys,
                                 const PipelineConfig& cfg) {
    if (xs.size() != size_t(ys.size()))
        throw std::invalid_argument("run_smoothem: x/y size mismatch");
    if (xs.size() < 20) throw std::invalid_argument("run_smoothem: need at least 20 points");
    for (double x : xs)
        if (!std::isfinite(x)) throw std::invalid_argument("run_smoothem: x must be finite");
    if (!ys.allFinite()) throw std::invalid_argument("run_smoothem: y must be finite");
    if (cfg.lambda_grid.empty())
        throw std::invalid_argument("run_smoothem: empty lambda grid");
    for (double lam : cfg.lambda_grid)
        if (!(lam > 0.0) || !std::isfinite(lam))
            throw std::invalid_argument("run_smoothem: lambda values must be positive");
    if (!(cfg.max_spike_fraction > 0.0) || !(cfg.max_spike_fraction < 1.0))
        throw std::invalid_argument("run_smoothem: max_spike_fraction must be in (0, 1)");
    if (!(cfg.overfit_weight >= 0.0))
        throw std::invalid_argument("run_smoothem: overfit_weight must be >= 0");
    if (cfg.spline_order < 2)
        throw std::invalid_argument("run_smoothem: spline order must be >= 2");
    if (cfg.penalty_order < 1 || cfg.penalty_order >= cfg.spline_order)
        throw std::invalid_argument("run_smoothem: penalty order must be in [1, order)");
    if (!(cfg.em_tol > 0.0)) throw std::invalid_argument("run_smoothem: em_tol must be > 0");
    if (cfg.em_max_iter < 1)
        throw std::invalid_argument("run_smoothem: em_max_iter must be >= 1");
    if (cfg.threads < 1) throw std::invalid_argument("run_smoothem: threads must be >= 1");
}

}  // namespace detail

// Decompose y over x into a smooth trend plus sparse spikes. For every lambda
// in the grid: fit, bootstrap spike labels from the residual magnitudes, refit
// without the flagged points, model the refit residuals with a two-component
// mixture, and score the pair (residual log-likelihood, curve instability).
// The best-scoring lambda wins; ties go to the stronger penalty.
inline PipelineResult run_smoothem(const std::vector<double>& xs, const Eigen::VectorXd& ys,
                                   const PipelineConfig& cfg = {}) {
    detail::check_pipeline_input(xs, ys, cfg);
    const int n = int(xs.size());
    auto [lo_it, hi_it] = std::minmax_element(xs.begin(), xs.end());
    if (!(*lo_it < *hi_it))
        throw std::invalid_argument("run_smoothem: x values are all equal");

    int k0 = cfg.interior_knots >= 0 ? cfg.interior_knots : std::min(296, n / 2);
    KnotVector kv(*lo_it, *hi_it, k0, cfg.spline_order);
    Eigen::MatrixXd N = design_matrix(kv, xs);
    PenaltyMatrix P = penalty_matrix(kv, cfg.penalty_order);

    std::vector<double> grid(512);
    for (int g = 0; g < 512; ++g)
        grid[g] = *lo_it + (*hi_it - *lo_it) * double(g) / 511.0;
    Eigen::MatrixXd Ng = design_matrix(kv, grid);

    double sigma_tau = robust_scale(xs, ys);

    const int n_lambda = int(cfg.lambda_grid.size());
    std::vector<LambdaDiagnostics> rows(n_lambda);
    detail::parallel_for(n_lambda, cfg.threads, [&](int j) {
        double lam = cfg.lambda_grid[j];
        LambdaDiagnostics row;
        row.lambda = lam;
        SmoothFit initial = fit(N, ys, lam, P);
        Eigen::VectorXd r1 = ys - initial.fitted;
        std::vector<bool> flagged =
            cfg.use_largest_gap
                ? largest_gap_classify(r1, cfg.max_spike_fraction)
                : magnitude_classify(r1, cfg.max_spike_fraction, derive_seed(cfg.seed, j, 1));
        int n_flagged = int(std::count(flagged.begin(), flagged.end(), true));
        SmoothFit masked = initial;
        if (n_flagged > 0) {
            std::vector<bool> keep(n);
            for (int i = 0; i < n; ++i) keep[i] = !flagged[i];
            masked = fit(N, ys, lam, P, keep);
        }
        Eigen::VectorXd r2 = ys - masked.fitted;
        row.overfit = overfit_score(N, P, Ng, ys, flagged, lam, sigma_tau,
                                    derive_seed(cfg.seed, j, 0), masked);
        try {
            MixtureParams init = init_from_labels(r2, flagged, cfg.variant);
            EMResult em = run_em(r2, init, cfg.em_tol, cfg.em_max_iter);
            ThresholdChoice choice =
                select_threshold(r2, em.responsibilities, cfg.variant, cfg.threshold_candidates);
            row.params = em.params;
            row.posterior = em.responsibilities;
            row.labels = choice.labels;
            row.no_spikes = choice.no_spikes;
            row.collapsed = em.collapsed;
            row.loglik = loglik(r2, em.params);
            row.criterion = criterion(row.loglik, row.overfit, cfg.overfit_weight);
        } catch (const std::invalid_argument&) {
            // residuals too degenerate for the mixture; keep the row but make
            // sure it can never win the grid search
            row.labels.assign(n, false);
            row.posterior = Eigen::VectorXd::Zero(n);
            row.no_spikes = true;
            row.loglik = -std::numeric_limits<double>::infinity();
            row.criterion = -std::numeric_limits<double>::infinity();
        }
        rows[j] = std::move(row);
    });

    int best = detail::select_row(rows);

    PipelineResult out;
    out.lambda_star = rows[best].lambda;
    out.params = rows[best].params;
    out.labels = rows[best].labels;
    out.selected_index = best;
    out.sigma_tau = sigma_tau;
    out.no_spikes_found =
        std::count(out.labels.begin(), out.labels.end(), true) == 0;
    for (const auto& row : rows) out.collapse_events += row.collapsed ? 1 : 0;
    std::vector<bool> keep(n);
    for (int i = 0; i < n; ++i) keep[i] = !out.labels[i];
    out.fit = fit(N, ys, out.lambda_star, P, keep);
    out.knots = kv;
    out.per_lambda = std::move(rows);
    return out;
}

}  // namespace smoothem
