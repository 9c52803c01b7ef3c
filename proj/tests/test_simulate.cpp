#include <smoothem/rng.hpp>
#include <smoothem/simulate.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

using namespace smoothem;

namespace {

int count_true(const std::vector<bool>& v) {
    return int(std::count(v.begin(), v.end(), true));
}

}  // namespace

TEST_CASE("curve shapes evaluate as documented") {
    Curve poly;
    for (double x : {0.0, 0.3, 0.7, 1.0}) {
        const auto& c = poly.coefficients;
        double direct = c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x + c[4] * x * x * x * x;
        REQUIRE(poly(x) == Catch::Approx(direct).margin(1e-14));
    }

    Curve cubic{CurveKind::Beta41Density, {}};
    REQUIRE(cubic(0.5) == Catch::Approx(0.5));
    REQUIRE(cubic(1.0) == Catch::Approx(4.0));

    Curve fast{CurveKind::SineFast, {}};
    REQUIRE(fast(0.5) == Catch::Approx(1.0));  // sin(4.5 pi)
    REQUIRE(fast(1.0 / 9.0) == Catch::Approx(0.0).margin(1e-12));

    Curve literal{CurveKind::SineLiteral, {}};
    REQUIRE(literal(0.5) == Catch::Approx(9.0 * M_PI * std::sin(0.5)));
}

TEST_CASE("alpha of one generates no spikes") {
    for (auto process : {SpikeProcess::Uniform, SpikeProcess::Clustered}) {
        Scenario s;
        s.n = 500;
        s.alpha_star = 1.0;
        s.spike_process = process;
        s.seed = 9;
        Dataset d = generate(s);
        REQUIRE(count_true(d.true_labels) == 0);
        REQUIRE(d.mu_star == s.stn * 6.0 * s.sigma_star);
    }
}

TEST_CASE("uniform spike fraction matches the rate") {
    Scenario s;
    s.n = 100000;
    s.alpha_star = 0.9;
    s.seed = 123;
    Dataset d = generate(s);
    double fraction = double(count_true(d.true_labels)) / double(s.n);
    REQUIRE(std::abs(fraction - 0.1) <= 0.01);
}

TEST_CASE("clustered spike count is calibrated to the rate mass") {
    Scenario s;
    s.n = 500;
    s.alpha_star = 0.8;
    s.spike_process = SpikeProcess::Clustered;
    double expected = (1.0 - s.alpha_star) * double(s.n);
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        s.seed = seed;
        total += double(count_true(generate(s).true_labels));
    }
    double mean = total / 50.0;
    REQUIRE(std::abs(mean - expected) <= 0.15 * expected);

    SECTION("events concentrate near the bump centers") {
        s.seed = 1;
        Dataset d = generate(s);
        int near = 0, total_spikes = 0;
        for (int i = 0; i < s.n; ++i) {
            if (!d.true_labels[i]) continue;
            ++total_spikes;
            double x = d.xs[i];
            for (size_t j = 0; j < s.rate.centers.size(); ++j)
                if (std::abs(x - s.rate.centers[j]) <= 4.0 * s.rate.widths[j]) {
                    ++near;
                    break;
                }
        }
        REQUIRE(total_spikes > 0);
        REQUIRE(double(near) >= 0.95 * double(total_spikes));
    }
}

TEST_CASE("label stream is independent of the noise stream") {
    Scenario a;
    a.n = 400;
    a.alpha_star = 0.85;
    a.seed = 55;
    Scenario b = a;
    b.sigma_star = 3.0;  // different noise consumption, same label stream
    REQUIRE(generate(a).true_labels == generate(b).true_labels);

    Dataset first = generate(a);
    Dataset second = generate(a);
    REQUIRE(first.ys == second.ys);
    REQUIRE(first.true_labels == second.true_labels);
}

TEST_CASE("generate validates the scenario") {
    Scenario s;
    s.n = 1;
    REQUIRE_THROWS_AS(generate(s), std::invalid_argument);
    s.n = 100;
    s.sigma_star = 0.0;
    REQUIRE_THROWS_AS(generate(s), std::invalid_argument);
    s.sigma_star = 1.0;
    s.alpha_star = 0.0;
    REQUIRE_THROWS_AS(generate(s), std::invalid_argument);
    s.alpha_star = 0.9;
    s.spike_process = SpikeProcess::Clustered;
    s.rate.widths = {0.05};  // mismatched with three centers
    REQUIRE_THROWS_AS(generate(s), std::invalid_argument);
}

TEST_CASE("metrics invariants on a real decomposition") {
    Scenario s;
    s.n = 200;
    s.alpha_star = 0.9;
    s.stn = 2.0;
    s.seed = 21;
    Dataset d = generate(s);
    PipelineConfig cfg;
    cfg.seed = 2;
    PipelineResult result = run_smoothem(d.xs, d.ys, cfg);

    MetricsRow row = metrics(result, d);
    REQUIRE(row.l2 >= 0.0);
    REQUIRE(row.sse >= 0.0);
    REQUIRE(row.l2 <= row.linf + 1e-15);
    REQUIRE(row.fnr >= 0.0);
    REQUIRE(row.fnr <= 1.0);
    REQUIRE(row.fpr >= 0.0);
    REQUIRE(row.fpr <= 1.0);

    SECTION("finer grids refine, not transform, the curve error") {
        MetricsRow coarse = metrics(result, d, 334);  // 333 divides 999: nested grid
        REQUIRE(coarse.linf <= row.linf + 1e-12);
        REQUIRE(coarse.fnr == row.fnr);            // label metrics ignore the grid
        REQUIRE(coarse.fpr == row.fpr);
        REQUIRE(coarse.sse == row.sse);
    }
    SECTION("label size mismatch is rejected") {
        Dataset other = d;
        other.true_labels.push_back(false);
        REQUIRE_THROWS_AS(metrics(result, other), std::invalid_argument);
    }
}

TEST_CASE("sweep of one cell reproduces a direct run") {
    Scenario cell;
    cell.n = 200;
    cell.alpha_star = 0.9;
    cell.stn = 2.0;
    cell.seed = 1234;
    PipelineConfig cfg;

    std::vector<SweepCell> table = sweep({cell}, 1, cfg);
    REQUIRE(table.size() == 1);
    REQUIRE(table[0].replicates == 1);
    REQUIRE(table[0].failures == 0);

    Scenario direct = cell;
    direct.seed = derive_seed(cell.seed, 0, 0);
    PipelineConfig direct_cfg = cfg;
    direct_cfg.seed = derive_seed(cell.seed, 0, 1);
    Dataset d = generate(direct);
    MetricsRow row = metrics(run_smoothem(d.xs, d.ys, direct_cfg), d);

    REQUIRE(table[0].mean.l2 == row.l2);
    REQUIRE(table[0].mean.fnr == row.fnr);
    REQUIRE(table[0].mean.fpr == row.fpr);
    REQUIRE(table[0].mean.sse == row.sse);
    REQUIRE(table[0].stddev.l2 == 0.0);
}

TEST_CASE("sweep cells are independent of ordering and threading") {
    Scenario a;
    a.n = 120;
    a.alpha_star = 0.9;
    a.stn = 2.0;
    a.seed = 10;
    Scenario b = a;
    b.alpha_star = 0.95;
    b.seed = 20;

    std::vector<SweepCell> fwd = sweep({a, b}, 2, {});
    std::vector<SweepCell> rev = sweep({b, a}, 2, {});
    std::vector<SweepCell> par = sweep({a, b}, 2, {}, 4);

    REQUIRE(fwd[0].mean.l2 == rev[1].mean.l2);
    REQUIRE(fwd[1].mean.l2 == rev[0].mean.l2);
    REQUIRE(fwd[0].mean.fpr == rev[1].mean.fpr);
    REQUIRE(fwd[0].mean.l2 == par[0].mean.l2);
    REQUIRE(fwd[1].mean.sse == par[1].mean.sse);
    REQUIRE(fwd[0].stddev.l2 == par[0].stddev.l2);
}

TEST_CASE("sweep records failed replicates instead of aborting") {
    Scenario bad;
    bad.n = 15;  // generates fine, but too short for the decomposition
    bad.seed = 5;
    std::vector<SweepCell> table = sweep({bad}, 3, {});
    REQUIRE(table[0].replicates == 0);
    REQUIRE(table[0].failures == 3);
    REQUIRE(std::isnan(table[0].mean.l2));

    REQUIRE_THROWS_AS(sweep({}, 1, {}), std::invalid_argument);
    REQUIRE_THROWS_AS(sweep({bad}, 0, {}), std::invalid_argument);
}

TEST_CASE("sweep reproduces the headline operating characteristics") {
    Scenario cell;
    cell.n = 500;
    cell.alpha_star = 0.95;
    cell.stn = 2.0;
    cell.seed = 2026;
    std::vector<SweepCell> table = sweep({cell}, 3, {});
    REQUIRE(table[0].replicates == 3);
    REQUIRE(table[0].mean.fnr <= 0.05);
    REQUIRE(table[0].mean.fpr <= 0.02);
}
