// Acceptance gate: seven end-to-end checks of the library's headline claims,
// one pass/fail line each. Exits nonzero if any check fails.

#include <smoothem/smoothem.hpp>

#include "oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace smoothem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

double l2_to_curve(const SmoothFit& f, const KnotVector& kv, const Curve& curve) {
    const int g_count = 1000;
    std::vector<double> grid(g_count);
    for (int g = 0; g < g_count; ++g)
        grid[g] = kv.lo() + (kv.hi() - kv.lo()) * double(g) / double(g_count - 1);
    Eigen::VectorXd fitted = predict(f, kv, grid);
    double sq = 0.0;
    for (int g = 0; g < g_count; ++g) {
        double d = fitted[g] - curve(grid[g]);
        sq += d * d;
    }
    return std::sqrt(sq / double(g_count));
}

Eigen::VectorXd sample_two_component(int n, double alpha, double mu, double sigma2,
                                     std::mt19937_64& rng, std::vector<bool>* labels = nullptr) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, std::sqrt(sigma2));
    Eigen::VectorXd xi(n);
    if (labels) labels->assign(size_t(n), false);
    for (int i = 0; i < n; ++i) {
        bool spike = unif(rng) >= alpha;
        xi[i] = (spike ? mu : 0.0) + gauss(rng);
        if (spike && labels) (*labels)[size_t(i)] = true;
    }
    return xi;
}

struct GridSetting {
    double sigma_star;
    double r;
    double frac;
    double rate;  // reference value
};

const std::vector<GridSetting>& rate_grid() {
    static const std::vector<GridSetting> grid = {
        {1.1, 0.37, 0.10, 0.984}, {2.1, 0.70, 0.10, 0.795}, {3.1, 1.03, 0.10, 0.807},
        {4.1, 1.37, 0.10, 0.852}, {5.1, 1.70, 0.10, 0.894}, {1.1, 0.37, 0.05, 0.991},
        {2.1, 0.70, 0.05, 0.795}, {3.1, 1.03, 0.05, 0.667}, {4.1, 1.37, 0.05, 0.702},
        {5.1, 1.70, 0.05, 0.752},
    };
    return grid;
}

TheoryInputs inputs_for(const GridSetting& s) {
    TheoryInputs in;
    in.alpha_star = 1.0 - s.frac;
    in.sigma_star2 = s.sigma_star * s.sigma_star;
    in.r = s.r;
    in.constant_set = ConstantSet::KnownAlpha;
    return in;
}

// 1. Contraction rates on the published grid, fixed-weight constants, no
//    perturbation term: each within 0.005 of the reference value.
Outcome check_contraction_rates() {
    double worst = 0.0;
    std::string worst_at;
    for (const auto& s : rate_grid()) {
        TheoryInputs in = inputs_for(s);
        double rate = convergence_rate(nu(in), lipschitz_L(in), 0.0);
        double err = std::abs(rate - s.rate);
        if (err > worst) {
            worst = err;
            worst_at = "(" + fmt3(s.sigma_star) + "," + fmt3(s.r) + "," + fmt3(s.frac) + ")";
        }
        if (err > 0.005)
            return {false, "entry " + worst_at + " off by " + fmt3(err)};
    }
    return {true, "10 grid entries, worst gap " + fmt3(worst) + " at " + worst_at};
}

// 2. Sampled Q-Hessian eigenvalues stay inside [nu, L] on the matching block
//    for every grid setting.
Outcome check_eigenvalue_envelope() {
    const int samples = 10000;
    int total_violations = 0;
    for (const auto& s : rate_grid()) {
        BoundsReport report = verify_bounds(inputs_for(s), samples);
        total_violations += report.violations;
    }
    if (total_violations > 0)
        return {false, std::to_string(total_violations) + " eigenvalue violations"};
    return {true, std::to_string(samples * int(rate_grid().size())) +
                      " sampled points, zero violations"};
}

// 3. Mean false-positive rate at most 0.03 in every uniform-spike cell.
Outcome check_false_positive_ceiling() {
    std::vector<Scenario> cells;
    for (int n : {500, 1000})
        for (double stn : {1.0, 2.0})
            for (double frac : {0.05, 0.1}) {
                Scenario s;
                s.n = n;
                s.stn = stn;
                s.alpha_star = 1.0 - frac;
                s.seed = derive_seed(314159, cells.size());
                cells.push_back(s);
            }
    std::vector<SweepCell> table = sweep(cells, 20, PipelineConfig{});
    double worst = 0.0;
    std::string worst_at;
    for (const auto& cell : table) {
        if (cell.failures > 0)
            return {false, "cell n=" + std::to_string(cell.scenario.n) + " had " +
                               std::to_string(cell.failures) + " failed replicates"};
        if (cell.mean.fpr > worst) {
            worst = cell.mean.fpr;
            worst_at = "n=" + std::to_string(cell.scenario.n) + " stn=" +
                       fmt3(cell.scenario.stn) + " frac=" + fmt3(1.0 - cell.scenario.alpha_star);
        }
    }
    if (worst > 0.03) return {false, "mean fpr " + fmt3(worst) + " at " + worst_at};
    return {true, "8 cells x 20 replicates, worst mean fpr " + fmt3(worst)};
}

// 4. Spike recovery at n=500, 20% contamination, spike size 12: low error
//    rates and a curve no worse than 1.5x an oracle refit that knows the
//    true labels.
Outcome check_spike_recovery() {
    std::ostringstream detail;
    for (auto process : {SpikeProcess::Uniform, SpikeProcess::Clustered}) {
        const char* name = process == SpikeProcess::Uniform ? "uniform" : "clustered";
        double sum_fnr = 0.0, sum_fpr = 0.0, sum_l2 = 0.0, sum_oracle = 0.0;
        const int seeds = 20;
        for (int rep = 0; rep < seeds; ++rep) {
            Scenario s;
            s.n = 500;
            s.sigma_star = 1.0;
            s.stn = 2.0;  // spike size 12
            s.alpha_star = 0.8;
            s.spike_process = process;
            s.seed = derive_seed(777, std::uint64_t(process), std::uint64_t(rep));
            Dataset data = generate(s);

            PipelineConfig cfg;
            cfg.seed = derive_seed(778, std::uint64_t(process), std::uint64_t(rep));
            PipelineResult result = run_smoothem(data.xs, data.ys, cfg);
            MetricsRow row = metrics(result, data);
            sum_fnr += row.fnr;
            sum_fpr += row.fpr;
            sum_l2 += row.l2;

            const KnotVector& kv = result.knots;
            Eigen::MatrixXd N = design_matrix(kv, data.xs);
            PenaltyMatrix P = penalty_matrix(kv, 2);
            std::vector<bool> keep(data.true_labels.size());
            for (size_t i = 0; i < keep.size(); ++i) keep[i] = !data.true_labels[i];
            SmoothFit oracle = fit(N, data.ys, result.lambda_star, P, keep);
            sum_oracle += l2_to_curve(oracle, kv, data.curve);
        }
        double fnr = sum_fnr / seeds, fpr = sum_fpr / seeds;
        double l2 = sum_l2 / seeds, l2_oracle = sum_oracle / seeds;
        detail << name << ": fnr " << fmt3(fnr) << " fpr " << fmt3(fpr) << " l2/oracle "
               << fmt3(l2 / l2_oracle) << "  ";
        if (fnr > 0.05) return {false, std::string(name) + " mean fnr " + fmt3(fnr)};
        if (fpr > 0.02) return {false, std::string(name) + " mean fpr " + fmt3(fpr)};
        if (l2 > 1.5 * l2_oracle)
            return {false, std::string(name) + " l2 " + fmt3(l2) + " vs oracle " +
                               fmt3(l2_oracle)};
    }
    return {true, detail.str()};
}

// 5. EM update properties: monotone likelihood, gradient correctness,
//    gradient/closed-form agreement, scale equivariance.
Outcome check_em_properties() {
    std::mt19937_64 rng = make_engine(555, 0);
    Eigen::VectorXd xi = sample_two_component(400, 0.85, 10.0, 1.0, rng);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int rep = 0; rep < 200; ++rep) {
        MixtureParams init;
        init.alpha = 0.05 + 0.9 * unif(rng);
        init.mu = 1.0 + 19.0 * unif(rng);
        init.sigma2 = 0.2 + 3.8 * unif(rng);
        EMResult em = run_em(xi, init, 1e-10, 300);
        for (size_t t = 1; t < em.loglik_trace.size(); ++t)
            if (em.loglik_trace[t] < em.loglik_trace[t - 1] - 1e-9)
                return {false, "log-likelihood decreased on init " + std::to_string(rep)};
    }

    std::mt19937_64 rng_fd = make_engine(556, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int rep = 0; rep < 100; ++rep) {
        const int n = 30;
        Eigen::VectorXd x(n), g(n);
        for (int i = 0; i < n; ++i) {
            x[i] = 3.0 * gauss(rng_fd);
            g[i] = unif(rng_fd);
        }
        MixtureParams p;
        p.alpha = 0.2 + 0.6 * unif(rng_fd);
        p.mu = 6.0 * unif(rng_fd) - 3.0;
        p.sigma2 = 0.5 + 1.5 * unif(rng_fd);
        Eigen::Vector3d grad = q_gradient(x, g, p);
        auto at = [&](double a, double m, double s2) {
            MixtureParams q = p;
            q.alpha = a;
            q.mu = m;
            q.sigma2 = s2;
            return q_function(x, g, q);
        };
        const double h = 1e-5;
        Eigen::Vector3d fd;
        fd[0] = (at(p.alpha + h, p.mu, p.sigma2) - at(p.alpha - h, p.mu, p.sigma2)) / (2 * h);
        fd[1] = (at(p.alpha, p.mu + h, p.sigma2) - at(p.alpha, p.mu - h, p.sigma2)) / (2 * h);
        fd[2] = (at(p.alpha, p.mu, p.sigma2 + h) - at(p.alpha, p.mu, p.sigma2 - h)) / (2 * h);
        for (int k = 0; k < 3; ++k)
            if (std::abs(grad[k] - fd[k]) > 1e-5 * std::max(1.0, std::abs(grad[k])))
                return {false, "gradient component " + std::to_string(k) +
                                   " disagrees with finite differences"};
    }

    std::mt19937_64 rng_sep = make_engine(557, 0);
    std::vector<bool> labels;
    Eigen::VectorXd sep = sample_two_component(500, 0.8, 12.0, 1.0, rng_sep, &labels);
    EMResult em = run_em(sep, init_from_labels(sep, labels, Variant::EqualVariance), 1e-14, 2000);
    MixtureParams theta;
    theta.alpha = 0.7;
    theta.mu = 10.0;
    theta.sigma2 = 1.5;
    for (int t = 0; t < 4000; ++t) theta = gradient_em_step(sep, theta, 0.25).params;
    if (std::abs(theta.alpha - em.params.alpha) > 1e-4 ||
        std::abs(theta.mu - em.params.mu) > 1e-4 ||
        std::abs(theta.sigma2 - em.params.sigma2) > 1e-4)
        return {false, "gradient ascent and closed-form EM disagree beyond 1e-4"};

    std::mt19937_64 rng_scale = make_engine(558, 0);
    std::vector<bool> labels2;
    Eigen::VectorXd base = sample_two_component(300, 0.8, 8.0, 1.0, rng_scale, &labels2);
    const double c = 3.0;
    MixtureParams init1 = init_from_labels(base, labels2, Variant::EqualVariance);
    MixtureParams hat1 = run_em(base, init1, 1e-12, 1000).params;
    MixtureParams init2 = init1;
    init2.mu *= c;
    init2.sigma2 *= c * c;
    MixtureParams hat2 = run_em(base * c, init2, 1e-12, 1000).params;
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
    if (rel(hat2.alpha, hat1.alpha) > 1e-10 || rel(hat2.mu, c * hat1.mu) > 1e-10 ||
        rel(hat2.sigma2, c * c * hat1.sigma2) > 1e-10)
        return {false, "scale equivariance broken beyond 1e-10"};

    return {true, "monotone on 200 inits; gradient checks on 100 points; "
                  "ascent/EM and scaling agree"};
}

// 6. Spline basis and penalty correctness against independent oracles.
Outcome check_spline_correctness() {
    for (int order : {3, 4}) {
        KnotVector kv(0.0, 1.0, 30, order);
        std::vector<double> xs(2001);
        for (int i = 0; i < 2001; ++i) xs[i] = double(i) / 2000.0;
        Eigen::MatrixXd N = design_matrix(kv, xs);
        double worst = (N.rowwise().sum().array() - 1.0).abs().maxCoeff();
        if (worst > 1e-12)
            return {false, "partition of unity off by " + fmt3(worst) + " at order " +
                               std::to_string(order)};
    }

    KnotVector kv(0.0, 1.0, 25, 4);
    const auto& t = kv.knots();
    const int K = kv.dimension();
    {
        // Zero up to cancellation noise: compare against the quadratic form
        // with all signs stripped, the scale the rounding error lives on.
        auto leak = [](const PenaltyMatrix& P, const Eigen::VectorXd& a) {
            double v = std::abs(a.dot(P.matrix * a));
            double scale = a.cwiseAbs().dot(P.matrix.cwiseAbs() * a.cwiseAbs());
            return v / std::max(scale, 1.0);
        };
        PenaltyMatrix P1 = penalty_matrix(kv, 1);
        Eigen::VectorXd constant = Eigen::VectorXd::Constant(K, 5.0);
        if (leak(P1, constant) > 1e-14)
            return {false, "constant leaks through order-1 penalty"};

        PenaltyMatrix P2 = penalty_matrix(kv, 2);
        Eigen::VectorXd linear(K);
        for (int k = 0; k < K; ++k) {
            double greville = (t[k + 1] + t[k + 2] + t[k + 3]) / 3.0;
            linear[k] = 2.0 + 3.0 * greville;
        }
        if (leak(P2, linear) > 1e-14)
            return {false, "line leaks through order-2 penalty"};
    }

    std::mt19937_64 rng = make_engine(660, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int q : {1, 2}) {
        PenaltyMatrix P = penalty_matrix(kv, q);
        for (int rep = 0; rep < 20; ++rep) {
            Eigen::VectorXd a(K);
            for (int k = 0; k < K; ++k) a[k] = gauss(rng);
            double form = a.dot(P.matrix * a);
            double ref = oracles::squared_deriv_integral_oracle(kv, a, q);
            if (std::abs(form - ref) > 1e-8 * std::max(1.0, std::abs(ref)))
                return {false, "quadratic form off by " + fmt3(std::abs(form - ref)) +
                                   " for q=" + std::to_string(q)};
        }
    }

    const int n = 100;
    std::vector<double> xs(n);
    for (int i = 0; i < n; ++i) xs[i] = double(i) / double(n - 1);
    KnotVector kfit(0.0, 1.0, n / 2, 4);
    Eigen::MatrixXd N = design_matrix(kfit, xs);
    PenaltyMatrix P = penalty_matrix(kfit, 2);
    Eigen::VectorXd ys = Eigen::VectorXd::Constant(n, 3.7);
    for (double lam : PipelineConfig{}.lambda_grid) {
        SmoothFit f = fit(N, ys, lam, P);
        double worst = (f.fitted.array() - 3.7).abs().maxCoeff();
        if (worst > 1e-8)
            return {false, "constant fit off by " + fmt3(worst) + " at lambda " + fmt3(lam)};
    }
    return {true, "basis, penalty null spaces, quadrature oracle, constant fits"};
}

// 7. Plain GCV is biased toward the smallest grid penalty on spiked data; the
//    instability-penalized criterion produces a better curve.
Outcome check_selection_bias() {
    const int seeds = 20;
    int wins = 0;
    double sum_gcv_l2 = 0.0, sum_em_l2 = 0.0;
    for (int rep = 0; rep < seeds; ++rep) {
        Scenario s;
        s.n = 500;
        s.alpha_star = 0.9;
        s.stn = 2.0;
        s.seed = derive_seed(999, std::uint64_t(rep));
        Dataset data = generate(s);

        KnotVector kv(0.0, 1.0, std::min(296, s.n / 2), 4);
        Eigen::MatrixXd N = design_matrix(kv, data.xs);
        PenaltyMatrix P = penalty_matrix(kv, 2);
        PipelineConfig cfg;
        double lam_gcv = cfg.lambda_grid.front();
        double best = std::numeric_limits<double>::infinity();
        for (double lam : cfg.lambda_grid) {
            double score = gcv(N, data.ys, lam, P);
            if (score < best) {
                best = score;
                lam_gcv = lam;
            }
        }
        double smallest = *std::min_element(cfg.lambda_grid.begin(), cfg.lambda_grid.end());
        double l2_gcv = l2_to_curve(fit(N, data.ys, lam_gcv, P), kv, data.curve);

        cfg.seed = derive_seed(998, std::uint64_t(rep));
        PipelineResult result = run_smoothem(data.xs, data.ys, cfg);
        double l2_em = l2_to_curve(result.fit, result.knots, data.curve);
        sum_gcv_l2 += l2_gcv;
        sum_em_l2 += l2_em;
        if (lam_gcv == smallest && l2_em < l2_gcv) ++wins;
    }
    std::string detail = std::to_string(wins) + "/" + std::to_string(seeds) +
                         " seeds, mean l2 " + fmt3(sum_em_l2 / seeds) + " vs plain gcv " +
                         fmt3(sum_gcv_l2 / seeds);
    if (wins < 18) return {false, detail};
    return {true, detail};
}

}  // namespace

int main() {
    struct Entry {
        const char* name;
        Outcome (*fn)();
    };
    const Entry entries[] = {
        {"reference contraction rates", check_contraction_rates},
        {"eigenvalue envelope", check_eigenvalue_envelope},
        {"false-positive ceiling", check_false_positive_ceiling},
        {"spike recovery vs oracle refit", check_spike_recovery},
        {"EM update properties", check_em_properties},
        {"spline basis and penalty", check_spline_correctness},
        {"penalty selection beats plain GCV", check_selection_bias},
    };
    const int total = int(sizeof entries / sizeof entries[0]);
    int failed = 0;
    for (int i = 0; i < total; ++i) {
        auto start = std::chrono::steady_clock::now();
        Outcome outcome;
        try {
            outcome = entries[i].fn();
        } catch (const std::exception& e) {
            outcome = {false, std::string("exception: ") + e.what()};
        }
        double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("[%d/%d] %-36s %s  (%.1fs)  %s\n", i + 1, total, entries[i].name,
                    outcome.pass ? "PASS" : "FAIL", secs, outcome.detail.c_str());
        std::fflush(stdout);
        if (!outcome.pass) ++failed;
    }
    if (failed == 0) {
        std::printf("acceptance: all %d checks passed\n", total);
        return 0;
    }
    std::printf("acceptance: %d of %d checks FAILED\n", failed, total);
    return 1;
}
