#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "smoothem/pipeline.hpp"
#include "smoothem/rng.hpp"

namespace smoothem {

enum class CurveKind { Poly4, Beta41Density, SineFast, SineLiteral };

inline std::vector<double> default_poly4_coefficients() {
    return {-0.252, 16.15, -11.15, -10.0, 5.0};
}

// Test curves on [0, 1]. Poly4 evaluates its coefficient list (ascending
// powers); the two sine variants differ in where the 9*pi factor sits.
struct Curve {
    CurveKind kind = CurveKind::Poly4;
    std::vector<double> coefficients = default_poly4_coefficients();

    double operator()(double x) const {
        switch (kind) {
            case CurveKind::Poly4: {
                double acc = 0.0;
                for (auto it = coefficients.rbegin(); it != coefficients.rend(); ++it)
                    acc = acc * x + *it;
                return acc;
            }
            case CurveKind::Beta41Density:
                return 4.0 * x * x * x;
            case CurveKind::SineFast:
                return std::sin(9.0 * M_PI * x);
            case CurveKind::SineLiteral:
                return 9.0 * M_PI * std::sin(x);
        }
        throw std::logic_error("Curve: unknown kind");
    }
};

enum class SpikeProcess { Uniform, Clustered };

// Gaussian-bump intensity for the clustered spike process. The bumps are
// scaled so the expected event count matches (1 - alpha_star) * n.
struct RateSpec {
    std::vector<double> centers{0.2, 0.5, 0.8};
    std::vector<double> widths{0.05, 0.04, 0.06};
};

struct Scenario {
    int n = 500;
    Curve curve;
    double sigma_star = 1.0;
    double stn = 2.0;
    double alpha_star = 0.9;
    SpikeProcess spike_process = SpikeProcess::Uniform;
    RateSpec rate;
    std::uint64_t seed = 0;
};

inline double spike_mean(const Scenario& s) { return s.stn * 6.0 * s.sigma_star; }

struct Dataset {
    std::vector<double> xs;
    Eigen::VectorXd ys;
    std::vector<bool> true_labels;
    Eigen::VectorXd smooth_values;  // curve evaluated at xs
    Curve curve;
    double alpha_star = 1.0;
    double mu_star = 0.0;
    double sigma_star2 = 1.0;
};

namespace detail {

inline void check_scenario(const Scenario& s) {
    if (s.n < 2) throw std::invalid_argument("generate: n must be >= 2");
    if (!(s.sigma_star > 0.0)) throw std::invalid_argument("generate: sigma_star must be > 0");
    if (!(s.stn >= 0.0)) throw std::invalid_argument("generate: stn must be >= 0");
    if (!(s.alpha_star > 0.0) || !(s.alpha_star <= 1.0))
        throw std::invalid_argument("generate: alpha_star must be in (0, 1]");
    if (s.spike_process == SpikeProcess::Clustered) {
        if (s.rate.centers.empty() || s.rate.centers.size() != s.rate.widths.size())
            throw std::invalid_argument("generate: rate centers/widths mismatch");
        for (double w : s.rate.widths)
            if (!(w > 0.0)) throw std::invalid_argument("generate: rate widths must be > 0");
    }
}

// Inhomogeneous Poisson events on [0, 1] by thinning a constant envelope,
// snapped to the nearest design point (duplicates collapse). The intensity
// scale is chosen so the expected number of labeled points, after snapping,
// hits (1 - alpha_star) * n; calibrating on raw event counts instead would
// undershoot once several events land on the same design point.
inline std::vector<bool> clustered_labels(const Scenario& s, std::mt19937_64& rng) {
    const auto& centers = s.rate.centers;
    const auto& widths = s.rate.widths;
    auto bumps = [&](double x) {
        double r = 0.0;
        for (size_t j = 0; j < centers.size(); ++j) {
            double d = x - centers[j];
            r += std::exp(-d * d / (2.0 * widths[j] * widths[j]));
        }
        return r;
    };
    // expected labeled points at scale c: cell i is hit with probability
    // 1 - exp(-c * bumps(x_i) * cell_width)
    auto expected_labels = [&](double c) {
        double total = 0.0;
        double dx = 1.0 / double(s.n - 1);
        for (int i = 0; i < s.n; ++i) {
            double w = (i == 0 || i == s.n - 1) ? 0.5 * dx : dx;
            total += 1.0 - std::exp(-c * bumps(double(i) * dx) * w);
        }
        return total;
    };
    double target = (1.0 - s.alpha_star) * double(s.n);
    double mass = 0.0;
    for (double w : widths) mass += w * std::sqrt(2.0 * M_PI);
    double hi = target / mass;  // event-count calibration, always undershoots
    while (expected_labels(hi) < target) hi *= 2.0;
    double lo = 0.0;
    for (int it = 0; it < 80; ++it) {
        double mid = 0.5 * (lo + hi);
        (expected_labels(mid) < target ? lo : hi) = mid;
    }
    double c = 0.5 * (lo + hi);
    auto rate = [&](double x) { return c * bumps(x); };
    double envelope = 0.0;
    for (int g = 0; g <= 2000; ++g)
        envelope = std::max(envelope, rate(double(g) / 2000.0));
    envelope *= 1.0001;

    std::vector<bool> labels(s.n, false);
    if (envelope <= 0.0) return labels;
    std::poisson_distribution<int> count(envelope);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    int events = count(rng);
    for (int e = 0; e < events; ++e) {
        double x = unif(rng);
        if (unif(rng) < rate(x) / envelope)
            labels[int(std::lround(x * double(s.n - 1)))] = true;
    }
    return labels;
}

}  // namespace detail

// Draw one dataset: equispaced design on [0, 1], spike labels from the chosen
// point process, then y = curve + mu_star * label + Gaussian noise. Labels and
// noise use independent streams derived from the scenario seed, so the spike
// pattern for a seed does not depend on how the noise is consumed.
inline Dataset generate(const Scenario& s) {
    detail::check_scenario(s);
    Dataset d;
    d.curve = s.curve;
    d.alpha_star = s.alpha_star;
    d.mu_star = spike_mean(s);
    d.sigma_star2 = s.sigma_star * s.sigma_star;

    d.xs.resize(s.n);
    for (int i = 0; i < s.n; ++i) d.xs[i] = double(i) / double(s.n - 1);

    d.true_labels.assign(s.n, false);
    if (s.alpha_star < 1.0) {
        std::mt19937_64 rng_labels = make_engine(s.seed, 1);
        if (s.spike_process == SpikeProcess::Uniform) {
            std::uniform_real_distribution<double> unif(0.0, 1.0);
            for (int i = 0; i < s.n; ++i)
                d.true_labels[i] = unif(rng_labels) < 1.0 - s.alpha_star;
        } else {
            d.true_labels = detail::clustered_labels(s, rng_labels);
        }
    }

    std::mt19937_64 rng_noise = make_engine(s.seed, 2);
    std::normal_distribution<double> noise(0.0, s.sigma_star);
    d.smooth_values.resize(s.n);
    d.ys.resize(s.n);
    for (int i = 0; i < s.n; ++i) {
        d.smooth_values[i] = s.curve(d.xs[i]);
        d.ys[i] = d.smooth_values[i] + (d.true_labels[i] ? d.mu_star : 0.0) + noise(rng_noise);
    }
    return d;
}

struct MetricsRow {
    double l2 = 0.0;
    double linf = 0.0;
    double fnr = 0.0;
    double fpr = 0.0;
    double sse = 0.0;
};

namespace detail {

inline constexpr std::array<double MetricsRow::*, 5> metric_fields{
    &MetricsRow::l2, &MetricsRow::linf, &MetricsRow::fnr, &MetricsRow::fpr, &MetricsRow::sse};

}  // namespace detail

// Score a decomposition against the generating truth: curve error on a dense
// grid, label error rates, and squared parameter error for (alpha, mu,
// sigma^2).
inline MetricsRow metrics(const PipelineResult& result, const Dataset& data,
                          int eval_grid = 1000) {
    if (result.labels.size() != data.true_labels.size())
        throw std::invalid_argument("metrics: label size mismatch");
    if (eval_grid < 2) throw std::invalid_argument("metrics: eval_grid must be >= 2");
    const int n = int(data.true_labels.size());

    std::vector<double> grid(eval_grid);
    double lo = result.knots.lo();
    double hi = result.knots.hi();
    for (int g = 0; g < eval_grid; ++g)
        grid[g] = lo + (hi - lo) * double(g) / double(eval_grid - 1);
    Eigen::VectorXd fitted = predict(result.fit, result.knots, grid);

    MetricsRow row;
    double sq = 0.0;
    for (int g = 0; g < eval_grid; ++g) {
        double diff = fitted[g] - data.curve(grid[g]);
        sq += diff * diff;
        row.linf = std::max(row.linf, std::abs(diff));
    }
    row.l2 = std::sqrt(sq / double(eval_grid));

    int true_spikes = 0, missed = 0, false_alarms = 0;
    for (int i = 0; i < n; ++i) {
        if (data.true_labels[i]) {
            ++true_spikes;
            if (!result.labels[i]) ++missed;
        } else if (result.labels[i]) {
            ++false_alarms;
        }
    }
    row.fnr = true_spikes > 0 ? double(missed) / double(true_spikes) : 0.0;
    row.fpr = n - true_spikes > 0 ? double(false_alarms) / double(n - true_spikes) : 0.0;

    double da = result.params.alpha - data.alpha_star;
    double dm = result.params.mu - data.mu_star;
    double dv = result.params.sigma2 - data.sigma_star2;
    row.sse = da * da + dm * dm + dv * dv;
    return row;
}

struct SweepCell {
    Scenario scenario;
    int replicates = 0;  // completed, not attempted
    int failures = 0;
    MetricsRow mean;
    MetricsRow stddev;
};

// Run every scenario for the given number of replicates and aggregate the
// metrics. Replicate r of a cell reseeds from that cell's own seed, so cells
// are independent: reordering or dropping cells never changes another cell's
// numbers. Failed replicates are counted and excluded from the aggregates.
inline std::vector<SweepCell> sweep(const std::vector<Scenario>& cells, int replicates,
                                    const PipelineConfig& cfg = {}, int threads = 1) {
    if (cells.empty()) throw std::invalid_argument("sweep: no scenarios");
    if (replicates < 1) throw std::invalid_argument("sweep: replicates must be >= 1");
    const int n_cells = int(cells.size());
    const int jobs = n_cells * replicates;
    std::vector<MetricsRow> rows(jobs);
    std::vector<char> ok(jobs, 0);

    detail::parallel_for(jobs, threads, [&](int job) {
        int cell = job / replicates;
        int rep = job % replicates;
        Scenario s = cells[cell];
        s.seed = derive_seed(cells[cell].seed, std::uint64_t(rep), 0);
        PipelineConfig run_cfg = cfg;
        run_cfg.seed = derive_seed(cells[cell].seed, std::uint64_t(rep), 1);
        run_cfg.threads = 1;
        try {
            Dataset data = generate(s);
            PipelineResult result = run_smoothem(data.xs, data.ys, run_cfg);
            rows[job] = metrics(result, data);
            ok[job] = 1;
        } catch (const std::exception&) {
            ok[job] = 0;
        }
    });

    std::vector<SweepCell> out(n_cells);
    for (int cell = 0; cell < n_cells; ++cell) {
        SweepCell& c = out[cell];
        c.scenario = cells[cell];
        for (int rep = 0; rep < replicates; ++rep) {
            int job = cell * replicates + rep;
            if (!ok[job]) {
                ++c.failures;
                continue;
            }
            ++c.replicates;
            for (auto f : detail::metric_fields) c.mean.*f += rows[job].*f;
        }
        if (c.replicates == 0) {
            double nan = std::numeric_limits<double>::quiet_NaN();
            for (auto f : detail::metric_fields) c.mean.*f = nan, c.stddev.*f = nan;
            continue;
        }
        for (auto f : detail::metric_fields) c.mean.*f /= double(c.replicates);
        if (c.replicates > 1) {
            for (int rep = 0; rep < replicates; ++rep) {
                int job = cell * replicates + rep;
                if (!ok[job]) continue;
                for (auto f : detail::metric_fields) {
                    double d = rows[job].*f - c.mean.*f;
                    c.stddev.*f += d * d;
                }
            }
            for (auto f : detail::metric_fields)
                c.stddev.*f = std::sqrt(c.stddev.*f / double(c.replicates - 1));
        }
    }
    return out;
}

}  // namespace smoothem
