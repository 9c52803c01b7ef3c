// Command-line front end: fit a decomposition, generate datasets, run
// replicate sweeps, and tabulate the EM contraction constants.

#include <smoothem/smoothem.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <array>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

struct input_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// shortest decimal text that parses back to the same double
std::string fmt(double v) {
    std::array<char, 32> buf;
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), end);
}

double parse_double(const std::string& s, int line_no, const fs::path& path) {
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last)
        throw input_error(path.string() + ": line " + std::to_string(line_no) +
                          ": cannot parse '" + s + "' as a number");
    if (!std::isfinite(v))
        throw input_error(path.string() + ": line " + std::to_string(line_no) +
                          ": non-finite value '" + s + "'");
    return v;
}

void strip_cr(std::string& line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
}

struct XYData {
    std::vector<double> xs;
    Eigen::VectorXd ys;
};

XYData read_xy_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw input_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw input_error(path.string() + ": empty file");
    strip_cr(line);
    if (line != "x,y")
        throw input_error(path.string() + ": line 1: expected header 'x,y', got '" + line + "'");
    std::vector<double> xs;
    std::vector<double> ys;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        strip_cr(line);
        if (line.empty()) continue;
        size_t comma = line.find(',');
        if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
            throw input_error(path.string() + ": line " + std::to_string(line_no) +
                              ": expected exactly two comma-separated values");
        xs.push_back(parse_double(line.substr(0, comma), line_no, path));
        ys.push_back(parse_double(line.substr(comma + 1), line_no, path));
    }
    XYData data;
    data.xs = std::move(xs);
    data.ys = Eigen::Map<Eigen::VectorXd>(ys.data(), long(ys.size()));
    return data;
}

std::ofstream open_output(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw input_error("cannot write " + path.string());
    return out;
}

json load_config(const std::string& path, const std::set<std::string>& allowed) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw input_error("cannot open config " + path);
    json cfg;
    try {
        cfg = json::parse(in);
    } catch (const json::parse_error& e) {
        throw input_error("config " + path + ": " + std::string(e.what()));
    }
    if (!cfg.is_object()) throw input_error("config " + path + ": expected a JSON object");
    for (const auto& [key, value] : cfg.items())
        if (!allowed.count(key))
            throw input_error("config " + path + ": unknown key '" + key + "'");
    return cfg;
}

std::uint64_t resolve_seed(bool flag_given, std::uint64_t flag_value, const json& cfg) {
    if (flag_given) return flag_value;
    if (cfg.contains("seed")) return cfg.at("seed").get<std::uint64_t>();
    if (const char* env = std::getenv("SMOOTHEM_SEED")) {
        std::uint64_t v = 0;
        std::string s(env);
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || ptr != s.data() + s.size())
            throw input_error("SMOOTHEM_SEED is not an unsigned integer: '" + s + "'");
        return v;
    }
    return 0;
}

smoothem::Variant parse_variant(const std::string& name) {
    if (name == "equal") return smoothem::Variant::EqualVariance;
    if (name == "inflated") return smoothem::Variant::InflatedVariance;
    throw input_error("unknown variant '" + name + "' (expected equal or inflated)");
}

smoothem::CurveKind parse_curve(const std::string& name) {
    if (name == "poly4") return smoothem::CurveKind::Poly4;
    if (name == "beta41") return smoothem::CurveKind::Beta41Density;
    if (name == "sine-fast") return smoothem::CurveKind::SineFast;
    if (name == "sine-literal") return smoothem::CurveKind::SineLiteral;
    throw input_error("unknown curve '" + name +
                      "' (expected poly4, beta41, sine-fast, or sine-literal)");
}

smoothem::SpikeProcess parse_process(const std::string& name) {
    if (name == "uniform") return smoothem::SpikeProcess::Uniform;
    if (name == "clustered") return smoothem::SpikeProcess::Clustered;
    throw input_error("unknown process '" + name + "' (expected uniform or clustered)");
}

const std::set<std::string> kPipelineKeys = {
    "lambda-grid",     "spline-order", "penalty-order",        "interior-knots",
    "max-spike-fraction", "variant",   "beta",                 "seed",
    "threshold-candidates", "em-tol",  "em-max-iter",          "use-largest-gap",
    "threads"};

// config file first, then explicit flags on top
void apply_pipeline_config(smoothem::PipelineConfig& cfg, const json& j) {
    if (j.contains("lambda-grid")) cfg.lambda_grid = j.at("lambda-grid").get<std::vector<double>>();
    if (j.contains("spline-order")) cfg.spline_order = j.at("spline-order").get<int>();
    if (j.contains("penalty-order")) cfg.penalty_order = j.at("penalty-order").get<int>();
    if (j.contains("interior-knots")) cfg.interior_knots = j.at("interior-knots").get<int>();
    if (j.contains("max-spike-fraction"))
        cfg.max_spike_fraction = j.at("max-spike-fraction").get<double>();
    if (j.contains("variant")) cfg.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("beta")) cfg.overfit_weight = j.at("beta").get<double>();
    if (j.contains("threshold-candidates"))
        cfg.threshold_candidates = j.at("threshold-candidates").get<std::vector<double>>();
    if (j.contains("em-tol")) cfg.em_tol = j.at("em-tol").get<double>();
    if (j.contains("em-max-iter")) cfg.em_max_iter = j.at("em-max-iter").get<int>();
    if (j.contains("use-largest-gap")) cfg.use_largest_gap = j.at("use-largest-gap").get<bool>();
    if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();
}

int default_threads() {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

// ---------------------------------------------------------------- fit

struct FitArgs {
    std::string input;
    std::string out_dir = ".";
    std::string config_path;
    std::vector<double> lambda_grid;
    std::string variant;
    double beta = 1.0;
    std::uint64_t seed = 0;
    int threads = default_threads();
    bool lambda_given = false, variant_given = false, beta_given = false, seed_given = false,
         threads_given = false;
};

void run_fit(const FitArgs& args) {
    json file_cfg = load_config(args.config_path, kPipelineKeys);
    smoothem::PipelineConfig cfg;
    cfg.threads = default_threads();
    apply_pipeline_config(cfg, file_cfg);
    if (args.lambda_given) cfg.lambda_grid = args.lambda_grid;
    if (args.variant_given) cfg.variant = parse_variant(args.variant);
    if (args.beta_given) cfg.overfit_weight = args.beta;
    if (args.threads_given) cfg.threads = args.threads;
    cfg.seed = resolve_seed(args.seed_given, args.seed, file_cfg);

    XYData data = read_xy_csv(args.input);
    smoothem::PipelineResult result = smoothem::run_smoothem(data.xs, data.ys, cfg);
    const auto& selected = result.per_lambda[size_t(result.selected_index)];
    const int n = int(data.xs.size());

    fs::path dir(args.out_dir);
    fs::create_directories(dir);

    {
        std::ofstream out = open_output(dir / "fit.csv");
        out << "x,y,fitted,residual,spike,posterior\n";
        for (int i = 0; i < n; ++i) {
            double fitted = result.fit.fitted[i];
            out << fmt(data.xs[i]) << ',' << fmt(data.ys[i]) << ',' << fmt(fitted) << ','
                << fmt(data.ys[i] - fitted) << ',' << (result.labels[i] ? 1 : 0) << ','
                << fmt(selected.posterior[i]) << '\n';
        }
    }
    {
        json params;
        params["lambda-star"] = result.lambda_star;
        params["alpha"] = result.params.alpha;
        params["mu"] = result.params.mu;
        params["sigma2"] = result.params.sigma2;
        params["sigma-h2"] =
            result.params.sigma_h2 ? json(*result.params.sigma_h2) : json(nullptr);
        params["variant"] =
            cfg.variant == smoothem::Variant::EqualVariance ? "equal" : "inflated";
        params["loglik"] = selected.loglik;
        params["overfit"] = selected.overfit;
        params["criterion"] = selected.criterion;
        params["sigma-tau"] = result.sigma_tau;
        params["spike-count"] =
            int(std::count(result.labels.begin(), result.labels.end(), true));
        params["no-spikes-found"] = result.no_spikes_found;
        params["collapse-events"] = result.collapse_events;
        json rows = json::array();
        for (const auto& row : result.per_lambda) {
            rows.push_back({{"lambda", row.lambda},
                            {"loglik", row.loglik},
                            {"overfit", row.overfit},
                            {"criterion", row.criterion},
                            {"no-spikes", row.no_spikes},
                            {"collapsed", row.collapsed}});
        }
        params["per-lambda"] = rows;
        std::ofstream out = open_output(dir / "params.json");
        out << params.dump(2) << '\n';
    }
    {
        std::vector<double> grid(512);
        double lo = result.knots.lo();
        double hi = result.knots.hi();
        for (int g = 0; g < 512; ++g)
            grid[g] = lo + (hi - lo) * double(g) / 511.0;
        Eigen::VectorXd curve = smoothem::predict(result.fit, result.knots, grid);
        std::ofstream out = open_output(dir / "curve.csv");
        out << "x,fitted\n";
        for (int g = 0; g < 512; ++g) out << fmt(grid[g]) << ',' << fmt(curve[g]) << '\n';
    }
}

// ---------------------------------------------------------------- simulate

const std::set<std::string> kScenarioKeys = {"n",           "curve",      "coefficients",
                                             "sigma-star",  "stn",        "alpha-star",
                                             "process",     "rate-centers", "rate-widths",
                                             "seed"};

smoothem::Scenario scenario_from_config(const json& j) {
    smoothem::Scenario s;
    if (j.contains("n")) s.n = j.at("n").get<int>();
    if (j.contains("curve")) s.curve.kind = parse_curve(j.at("curve").get<std::string>());
    if (j.contains("coefficients"))
        s.curve.coefficients = j.at("coefficients").get<std::vector<double>>();
    if (j.contains("sigma-star")) s.sigma_star = j.at("sigma-star").get<double>();
    if (j.contains("stn")) s.stn = j.at("stn").get<double>();
    if (j.contains("alpha-star")) s.alpha_star = j.at("alpha-star").get<double>();
    if (j.contains("process")) s.spike_process = parse_process(j.at("process").get<std::string>());
    if (j.contains("rate-centers")) s.rate.centers = j.at("rate-centers").get<std::vector<double>>();
    if (j.contains("rate-widths")) s.rate.widths = j.at("rate-widths").get<std::vector<double>>();
    return s;
}

struct SimulateArgs {
    std::string out_path = "dataset.csv";
    std::string config_path;
    int n = 500;
    std::string curve;
    double sigma_star = 1.0;
    double stn = 2.0;
    double alpha_star = 0.9;
    std::string process;
    std::uint64_t seed = 0;
    bool n_given = false, curve_given = false, sigma_given = false, stn_given = false,
         alpha_given = false, process_given = false, seed_given = false;
};

void run_simulate(const SimulateArgs& args) {
    json file_cfg = load_config(args.config_path, kScenarioKeys);
    smoothem::Scenario s = scenario_from_config(file_cfg);
    if (args.n_given) s.n = args.n;
    if (args.curve_given) s.curve.kind = parse_curve(args.curve);
    if (args.sigma_given) s.sigma_star = args.sigma_star;
    if (args.stn_given) s.stn = args.stn;
    if (args.alpha_given) s.alpha_star = args.alpha_star;
    if (args.process_given) s.spike_process = parse_process(args.process);
    s.seed = resolve_seed(args.seed_given, args.seed, file_cfg);

    smoothem::Dataset d = smoothem::generate(s);
    std::ofstream out = open_output(args.out_path);
    out << "x,y,spike,f\n";
    for (int i = 0; i < s.n; ++i)
        out << fmt(d.xs[i]) << ',' << fmt(d.ys[i]) << ',' << (d.true_labels[i] ? 1 : 0) << ','
            << fmt(d.smooth_values[i]) << '\n';
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
    std::string out_path = "sweep.csv";
    std::string config_path;
    int replicates = 20;
    int threads = default_threads();
    std::uint64_t seed = 0;
    bool replicates_given = false, threads_given = false, seed_given = false;
};

void run_sweep(const SweepArgs& args) {
    std::set<std::string> keys = kPipelineKeys;
    keys.insert({"n", "stn", "one-minus-alpha", "curve", "coefficients", "sigma-star",
                 "process", "rate-centers", "rate-widths", "replicates"});
    json cfg = load_config(args.config_path, keys);
    if (args.config_path.empty()) throw input_error("sweep requires --config");

    auto get_list = [&](const char* key, std::vector<double> fallback) {
        if (!cfg.contains(key)) return fallback;
        return cfg.at(key).get<std::vector<double>>();
    };
    std::vector<double> n_values = get_list("n", {500});
    std::vector<double> stn_values = get_list("stn", {2.0});
    std::vector<double> frac_values = get_list("one-minus-alpha", {0.1});

    smoothem::Scenario base;
    if (cfg.contains("curve")) base.curve.kind = parse_curve(cfg.at("curve").get<std::string>());
    if (cfg.contains("coefficients"))
        base.curve.coefficients = cfg.at("coefficients").get<std::vector<double>>();
    if (cfg.contains("sigma-star")) base.sigma_star = cfg.at("sigma-star").get<double>();
    if (cfg.contains("process"))
        base.spike_process = parse_process(cfg.at("process").get<std::string>());
    if (cfg.contains("rate-centers"))
        base.rate.centers = cfg.at("rate-centers").get<std::vector<double>>();
    if (cfg.contains("rate-widths"))
        base.rate.widths = cfg.at("rate-widths").get<std::vector<double>>();

    int replicates = args.replicates_given ? args.replicates
                     : cfg.contains("replicates") ? cfg.at("replicates").get<int>()
                                                  : 20;
    std::uint64_t master = resolve_seed(args.seed_given, args.seed, cfg);
    int threads = args.threads_given ? args.threads
                  : cfg.contains("threads") ? cfg.at("threads").get<int>()
                                            : default_threads();

    smoothem::PipelineConfig pipeline_cfg;
    apply_pipeline_config(pipeline_cfg, cfg);

    std::vector<smoothem::Scenario> cells;
    std::vector<double> cell_frac;
    for (double n : n_values)
        for (double stn : stn_values)
            for (double frac : frac_values) {
                smoothem::Scenario s = base;
                s.n = int(n);
                s.stn = stn;
                s.alpha_star = 1.0 - frac;
                s.seed = smoothem::derive_seed(master, cells.size());
                cells.push_back(s);
                cell_frac.push_back(frac);
            }

    std::vector<smoothem::SweepCell> table =
        smoothem::sweep(cells, replicates, pipeline_cfg, threads);

    std::ofstream out = open_output(args.out_path);
    out << "n,stn,one_minus_alpha,replicates,failures,"
           "l2_mean,l2_sd,linf_mean,linf_sd,fnr_mean,fnr_sd,fpr_mean,fpr_sd,sse_mean,sse_sd\n";
    for (size_t c = 0; c < table.size(); ++c) {
        const auto& cell = table[c];
        out << cell.scenario.n << ',' << fmt(cell.scenario.stn) << ',' << fmt(cell_frac[c])
            << ',' << cell.replicates << ',' << cell.failures;
        for (auto f : smoothem::detail::metric_fields)
            out << ',' << fmt(cell.mean.*f) << ',' << fmt(cell.stddev.*f);
        out << '\n';
    }
}

// ---------------------------------------------------------------- theory

const std::set<std::string> kTheoryKeys = {"pairs",  "one-minus-alpha", "constant-set",
                                           "mu-star", "omega",          "omega0",
                                           "rate-target"};

struct TheoryArgs {
    std::string out_path = "theory.csv";
    std::string config_path;
    std::string constant_set;
    bool constant_set_given = false;
};

void run_theory(const TheoryArgs& args) {
    json cfg = load_config(args.config_path, kTheoryKeys);

    std::vector<std::pair<double, double>> pairs = {
        {1.1, 0.37}, {2.1, 0.7}, {3.1, 1.03}, {4.1, 1.37}, {5.1, 1.7}};
    if (cfg.contains("pairs")) {
        pairs.clear();
        for (const auto& p : cfg.at("pairs")) {
            auto v = p.get<std::vector<double>>();
            if (v.size() != 2) throw input_error("theory pairs must be [sigma-star, r]");
            pairs.emplace_back(v[0], v[1]);
        }
    }
    std::vector<double> fracs = {0.05, 0.1};
    if (cfg.contains("one-minus-alpha"))
        fracs = cfg.at("one-minus-alpha").get<std::vector<double>>();

    smoothem::ConstantSet set = smoothem::ConstantSet::KnownAlpha;
    std::string set_name =
        args.constant_set_given ? args.constant_set
        : cfg.contains("constant-set") ? cfg.at("constant-set").get<std::string>()
                                       : "known-alpha";
    if (set_name == "known-alpha") set = smoothem::ConstantSet::KnownAlpha;
    else if (set_name == "full") set = smoothem::ConstantSet::FullUnknown;
    else throw input_error("unknown constant set '" + set_name + "' (known-alpha or full)");

    bool use_gamma_bound = cfg.contains("mu-star");
    double rate_target = cfg.contains("rate-target") ? cfg.at("rate-target").get<double>() : 0.01;

    std::ofstream out = open_output(args.out_path);
    out << "sigma_star,r,one_minus_alpha,nu,lipschitz,gamma,rate,iterations,valid\n";
    for (const auto& [sigma_star, r] : pairs) {
        for (double frac : fracs) {
            out << fmt(sigma_star) << ',' << fmt(r) << ',' << fmt(frac) << ',';
            try {
                smoothem::TheoryInputs in;
                in.alpha_star = 1.0 - frac;
                in.sigma_star2 = sigma_star * sigma_star;
                in.r = r;
                in.constant_set = set;
                if (use_gamma_bound) {
                    in.mu_star = cfg.at("mu-star").get<double>();
                    if (cfg.contains("omega")) in.omega = cfg.at("omega").get<double>();
                    if (cfg.contains("omega0")) in.omega0 = cfg.at("omega0").get<double>();
                }
                double nu_value = smoothem::nu(in);
                double lipschitz = smoothem::lipschitz_L(in);
                double gamma = smoothem::gamma_bound(in, !use_gamma_bound);
                double rate = smoothem::convergence_rate(nu_value, lipschitz, gamma);
                long iterations = smoothem::iterations_to(rate, rate_target);
                out << fmt(nu_value) << ',' << fmt(lipschitz) << ',' << fmt(gamma) << ','
                    << fmt(rate) << ',' << iterations << ",1\n";
            } catch (const std::runtime_error&) {
                out << ",,,,,0\n";
            }
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Decompose a 1-d signal into a smooth trend plus sparse spikes"};
    app.require_subcommand(1);

    FitArgs fit_args;
    CLI::App* fit = app.add_subcommand("fit", "Decompose a CSV signal (columns x,y)");
    fit->add_option("input", fit_args.input, "input CSV with header x,y")->required();
    fit->add_option("-o,--out", fit_args.out_dir, "output directory");
    fit->add_option("--config", fit_args.config_path, "JSON config file");
    fit->add_option("--lambda-grid", fit_args.lambda_grid, "penalty grid")
        ->delimiter(',')
        ->each([&](const std::string&) { fit_args.lambda_given = true; });
    fit->add_option("--variant", fit_args.variant, "mixture variant: equal or inflated")
        ->each([&](const std::string&) { fit_args.variant_given = true; });
    fit->add_option("--beta", fit_args.beta, "overfit penalty weight")
        ->each([&](const std::string&) { fit_args.beta_given = true; });
    fit->add_option("--seed", fit_args.seed, "master seed")
        ->each([&](const std::string&) { fit_args.seed_given = true; });
    fit->add_option("--threads", fit_args.threads, "worker threads")
        ->each([&](const std::string&) { fit_args.threads_given = true; });
    fit->callback([&] { run_fit(fit_args); });

    SimulateArgs sim_args;
    CLI::App* sim = app.add_subcommand("simulate", "Generate a synthetic dataset");
    sim->add_option("-o,--out", sim_args.out_path, "output CSV path");
    sim->add_option("--config", sim_args.config_path, "JSON scenario file");
    sim->add_option("--n", sim_args.n, "sample size")
        ->each([&](const std::string&) { sim_args.n_given = true; });
    sim->add_option("--curve", sim_args.curve, "poly4, beta41, sine-fast, sine-literal")
        ->each([&](const std::string&) { sim_args.curve_given = true; });
    sim->add_option("--sigma-star", sim_args.sigma_star, "noise standard deviation")
        ->each([&](const std::string&) { sim_args.sigma_given = true; });
    sim->add_option("--stn", sim_args.stn, "spike signal-to-noise ratio")
        ->each([&](const std::string&) { sim_args.stn_given = true; });
    sim->add_option("--alpha-star", sim_args.alpha_star, "smooth-component weight")
        ->each([&](const std::string&) { sim_args.alpha_given = true; });
    sim->add_option("--process", sim_args.process, "uniform or clustered")
        ->each([&](const std::string&) { sim_args.process_given = true; });
    sim->add_option("--seed", sim_args.seed, "scenario seed")
        ->each([&](const std::string&) { sim_args.seed_given = true; });
    sim->callback([&] { run_simulate(sim_args); });

    SweepArgs sweep_args;
    CLI::App* sw = app.add_subcommand("sweep", "Replicate study over a scenario grid");
    sw->add_option("-o,--out", sweep_args.out_path, "output CSV path");
    sw->add_option("--config", sweep_args.config_path, "JSON sweep grid file")->required();
    sw->add_option("--replicates", sweep_args.replicates, "replicates per cell")
        ->each([&](const std::string&) { sweep_args.replicates_given = true; });
    sw->add_option("--threads", sweep_args.threads, "worker threads")
        ->each([&](const std::string&) { sweep_args.threads_given = true; });
    sw->add_option("--seed", sweep_args.seed, "master seed")
        ->each([&](const std::string&) { sweep_args.seed_given = true; });
    sw->callback([&] { run_sweep(sweep_args); });

    TheoryArgs theory_args;
    CLI::App* th = app.add_subcommand("theory", "Tabulate EM contraction constants");
    th->add_option("-o,--out", theory_args.out_path, "output CSV path");
    th->add_option("--config", theory_args.config_path, "JSON grid file");
    th->add_option("--constant-set", theory_args.constant_set, "known-alpha or full")
        ->each([&](const std::string&) { theory_args.constant_set_given = true; });
    th->callback([&] { run_theory(theory_args); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitInput;
    } catch (const input_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInput;
    } catch (const json::exception& e) {
        std::cerr << "error: config: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitInput;
    } catch (const std::runtime_error& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    }
    return 0;
}
