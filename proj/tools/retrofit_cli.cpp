// retrofit: design, simulate, sweep and verify retrofit controllers on power-grid models.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "retrofit/controller.hpp"
#include "retrofit/io.hpp"
#include "retrofit/powergrid.hpp"
#include "retrofit/sim.hpp"

namespace fs = std::filesystem;
using namespace retrofit;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kNumerical = 3, kProperty = 4 };

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string bundle;
    std::string rank_grid;
    long trials = 100;
};

/// Everything the subcommands derive from an experiment config.
struct Setup {
    io::ExperimentConfig cfg;
    grid::Network net;
    grid::GridModel model;
    DiscreteLTI sys;
    Matrix K;
    Index alpha = 0;
    Matrix fault_basis;
    Matrix guess;
    Vector x0;
    PortSet ports;
    std::vector<std::string> port_ids;
    std::string out;
    std::uint64_t seed = 1;
};

Index generator_index(const grid::Network& net, const std::string& id, const std::string& what) {
    for (Index g = 0; g < net.generators(); ++g) {
        if (net.appliances[g].id == id) return g;
    }
    throw io::ConfigError(what + " '" + id + "' is not a generator of the network");
}

Setup load_setup(const Options& opt) {
    if (opt.config.empty()) throw io::ConfigError("--config is required");
    Setup s;
    s.cfg = io::load_config(opt.config);
    s.net = io::resolve_network(s.cfg);
    s.model = grid::assemble(s.net);
    if (!s.model.connected) spdlog::warn("network is not connected");
    s.sys = zoh_discretize(s.model.plant, s.cfg.dt);
    const Index N = s.net.generators();

    Vector participation = Vector::Ones(N);
    if (!s.cfg.participation.empty()) {
        if (static_cast<Index>(s.cfg.participation.size()) != N) {
            throw io::ConfigError(opt.config + ": participation has " + std::to_string(s.cfg.participation.size()) +
                                  " entries for " + std::to_string(N) + " generators");
        }
        participation = Eigen::Map<const Vector>(s.cfg.participation.data(), N);
    }
    s.K = grid::broadcast_agc(N, s.cfg.kappa, participation);

    s.alpha = s.cfg.fault_generator.empty() ? 0 : generator_index(s.net, s.cfg.fault_generator, "fault_generator");
    s.fault_basis = grid::fault_domain(s.model, s.alpha);
    s.x0 = s.fault_basis * Eigen::Vector2d(s.cfg.delta_theta, s.cfg.delta_omega);
    switch (s.cfg.guess) {
    case io::GuessRule::zero: s.guess = Matrix::Zero(s.sys.states(), s.sys.states()); break;
    case io::GuessRule::frequency: s.guess = grid::frequency_guess_operator(s.model); break;
    case io::GuessRule::exact: s.guess = Matrix::Identity(s.sys.states(), s.sys.states()); break;
    }

    s.port_ids = s.cfg.ports;
    if (s.port_ids.empty()) s.port_ids.push_back(s.net.appliances[s.alpha].id);
    for (const auto& id : s.port_ids) s.ports.indices.push_back(generator_index(s.net, id, "port"));
    s.ports.validate(N);

    s.out = opt.out.empty() ? s.cfg.output : opt.out;
    s.seed = opt.seed.value_or(s.cfg.seed);
    spdlog::info("network: {} generators, {} loads, {} states", N, s.net.loads(), s.sys.states());
    return s;
}

sim::DesignConfig design_config(const io::ExperimentConfig& c) {
    sim::DesignConfig d;
    d.weights.state_weight = c.state_weight;
    d.weights.input_weight = c.input_weight;
    d.max_tau = c.max_tau;
    return d;
}

sim::RunOptions run_options(const Setup& s) {
    sim::RunOptions r;
    r.steps = s.cfg.steps;
    r.max_steps = s.cfg.max_steps;
    r.theta_index = s.model.index.theta;
    r.omega_index = s.model.index.omega;
    return r;
}

std::string bundle_path(const Options& opt, const std::string& out) {
    return opt.bundle.empty() ? (fs::path(out) / "bundle.json").string() : opt.bundle;
}

// ---------------------------------------------------------------------------
// design
// ---------------------------------------------------------------------------

int cmd_design(const Options& opt) {
    const Setup s = load_setup(opt);
    const auto dc = design_config(s.cfg);
    RetrofitDesign d;
    if (s.cfg.rank) {
        if (*s.cfg.rank > s.sys.states()) throw io::ConfigError(opt.config + ": rank exceeds the state dimension");
        d = sim::design_at_rank(s.sys, s.K, s.ports, s.fault_basis, s.guess, *s.cfg.rank, dc);
    } else {
        const Index max_rank = s.cfg.max_rank.value_or(s.sys.states());
        if (max_rank > s.sys.states()) throw io::ConfigError(opt.config + ": max_rank exceeds the state dimension");
        d = sim::design_escalated(s.sys, s.K, s.ports, s.fault_basis, s.guess, s.cfg.nu, s.cfg.tau, max_rank, dc);
    }
    spdlog::info("design: rank {}, nu {}, tau {}, reduced spectral radius {}", d.rank(), d.nu, d.tau(),
                 d.reduced_spectral_radius);

    io::Bundle b{s.sys, s.K, d, s.port_ids, s.net.appliances[s.alpha].id, s.x0};
    const auto path = bundle_path(opt, s.out);
    io::save_bundle(path, b);
    const auto cert = io::certificate_text(d.bound);
    io::write_text((fs::path(s.out) / "certificate.txt").string(), cert);
    std::cout << "rank = " << d.rank() << "\nnu = " << d.nu << "\ntau = " << d.tau() << "\n" << cert;
    spdlog::info("wrote {}", path);
    return kOk;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

void check_bundle_matches(const io::Bundle& b, const Setup& s, const std::string& path) {
    if (b.plant.states() != s.sys.states() || b.plant.inputs() != s.sys.inputs() ||
        b.plant.outputs() != s.sys.outputs()) {
        throw io::ConfigError(path + ": bundle has " + std::to_string(b.plant.states()) +
                              " states but the configured network has " + std::to_string(s.sys.states()));
    }
    b.design.ports.validate(s.sys.inputs());
}

std::string trajectory_csv(const Setup& s, const sim::RunResult& r, const PortSet& ports,
                           const std::vector<std::string>& port_ids) {
    const auto& apps = s.net.appliances;
    const Index N = s.net.generators();
    std::vector<std::string> header{"t"};
    for (const auto& a : apps) header.push_back("theta_" + a.id);
    for (const auto& a : apps) header.push_back("omega_" + a.id);
    for (Index g = 0; g < N; ++g) header.push_back("v_" + apps[g].id);
    for (Index j = 0; j < ports.size(); ++j) {
        const auto& id = j < static_cast<Index>(port_ids.size()) ? port_ids[j] : apps[ports.indices[j]].id;
        header.push_back("vhat_" + id);
    }
    io::CsvWriter csv(header);
    const auto& states = r.trajectory.states;
    for (std::size_t t = 0; t < states.size(); ++t) {
        std::vector<std::string> row{std::to_string(t)};
        for (Index a = 0; a < s.net.size(); ++a) row.push_back(io::format_double(states[t](s.model.index.theta[a])));
        for (Index a = 0; a < s.net.size(); ++a) row.push_back(io::format_double(states[t](s.model.index.omega[a])));
        const bool has_input = t < r.preexisting.size();
        for (Index g = 0; g < N; ++g) row.push_back(has_input ? io::format_double(r.preexisting[t](g)) : "");
        for (Index j = 0; j < ports.size(); ++j) {
            row.push_back(has_input ? io::format_double(r.retrofit[t](ports.indices[j])) : "");
        }
        csv.row(row);
    }
    return csv.str();
}

std::string run_summary(const sim::RunResult& r) {
    std::ostringstream o;
    o << "omega_l2 = " << io::format_double(r.omega_l2) << "\n";
    o << "theta_l2 = " << io::format_double(r.theta_l2) << "\n";
    o << "x_l2 = " << io::format_double(r.x_l2) << "\n";
    o << "v_l2 = " << io::format_double(r.v_l2) << "\n";
    o << "vhat_l2 = " << io::format_double(r.vhat_l2) << "\n";
    o << "steps = " << r.steps << "\n";
    o << "truncated = " << (r.truncated ? "true" : "false") << "\n";
    o << "diverged = " << (r.diverged ? "true" : "false") << "\n";
    o << "spectral_radius = " << io::format_double(r.spectral_radius) << "\n";
    if (r.bound) {
        o << "bound = " << io::format_double(r.bound_value) << "\n";
        o << "bound_check = " << (r.bound_ok ? "pass" : "fail") << "\n";
    } else {
        o << "bound_check = n/a\n";
    }
    return o.str();
}

int cmd_simulate(const Options& opt) {
    const Setup s = load_setup(opt);
    const auto path = bundle_path(opt, s.out);
    const auto b = io::load_bundle(path);
    check_bundle_matches(b, s, path);
    const auto r = sim::run(s.sys, sim::PreexistingController::static_gain(s.K), std::span(&b.design, 1), s.x0,
                            run_options(s));
    if (r.truncated) spdlog::warn("step cap reached before the tail energy vanished");
    io::write_text((fs::path(s.out) / "trajectory.csv").string(), trajectory_csv(s, r, b.design.ports, b.port_ids));
    const auto summary = run_summary(r);
    io::write_text((fs::path(s.out) / "summary.txt").string(), summary);
    std::cout << summary;
    return r.diverged ? kNumerical : kOk;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

std::vector<Index> parse_rank_grid(const std::string& text) {
    std::vector<Index> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto colon = item.find(':');
        try {
            if (colon == std::string::npos) {
                out.push_back(std::stol(item));
            } else {
                // lo:hi or lo:hi:step
                std::vector<Index> parts;
                std::stringstream rs(item);
                std::string p;
                while (std::getline(rs, p, ':')) parts.push_back(std::stol(p));
                const Index step = parts.size() > 2 ? parts[2] : 1;
                if (parts.size() < 2 || parts.size() > 3 || step < 1) throw std::invalid_argument(item);
                for (Index r = parts[0]; r <= parts[1]; r += step) out.push_back(r);
            }
        } catch (const std::logic_error&) {
            throw io::ConfigError("--rank-grid: cannot parse '" + item + "'");
        }
    }
    return out;
}

std::string sweep_csv(const std::vector<sim::SweepRow>& rows) {
    io::CsvWriter csv({"rank", "nu", "tau", "reduced_spectral_radius", "stable", "designed", "omega_l2", "theta_l2",
                       "x_l2", "vhat_l2", "epsilon", "gamma_K", "bound", "bound_ok", "note"});
    auto num = [](double v) { return std::isnan(v) ? std::string() : io::format_double(v); };
    for (const auto& r : rows) {
        csv.row({std::to_string(r.rank), std::to_string(r.nu), std::to_string(r.tau), num(r.reduced_spectral_radius),
                 r.stable ? "1" : "0", r.designed ? "1" : "0", num(r.omega_l2), num(r.theta_l2), num(r.x_l2),
                 num(r.vhat_l2), num(r.epsilon), num(r.gammaK), num(r.bound), r.designed ? (r.bound_ok ? "1" : "0") : "",
                 r.note});
    }
    return csv.str();
}

int cmd_sweep(const Options& opt) {
    const Setup s = load_setup(opt);
    std::vector<Index> grid = opt.rank_grid.empty() ? s.cfg.rank_grid : parse_rank_grid(opt.rank_grid);
    if (grid.empty()) {
        for (Index r = 1; r <= s.sys.states(); ++r) grid.push_back(r);
    }
    for (Index r : grid) {
        if (r < 1 || r > s.sys.states()) {
            throw io::ConfigError("rank " + std::to_string(r) + " outside 1.." + std::to_string(s.sys.states()));
        }
    }
    auto ro = run_options(s);
    ro.record = false;
    const sim::Scenario sc{s.K, s.ports, s.fault_basis, s.guess, s.x0};
    const auto dc = design_config(s.cfg);
    std::vector<sim::SweepRow> rows;
    for (Index r : grid) {
        rows.push_back(sim::sweep_row(s.sys, sc, r, dc, ro));
        spdlog::info("rank {}: {}", r, rows.back().designed ? "designed" : rows.back().note);
    }
    const auto base = sim::run(s.sys, sim::PreexistingController::static_gain(s.K), s.x0, ro);
    io::write_text((fs::path(s.out) / "sweep.csv").string(), sweep_csv(rows));
    std::ostringstream o;
    o << "broadcast_omega_l2 = " << io::format_double(base.omega_l2) << "\n";
    o << "broadcast_theta_l2 = " << io::format_double(base.theta_l2) << "\n";
    o << "rows = " << rows.size() << "\n";
    io::write_text((fs::path(s.out) / "sweep_baseline.txt").string(), o.str());
    std::cout << o.str();
    return kOk;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct Check {
    std::string name;
    long samples = 0;
    long failures = 0;
    double worst = 0.0;  ///< worst observed ratio or deviation
};

Vector normal_vector(Index n, std::mt19937_64& rng) {
    std::normal_distribution<double> normal;
    Vector v(n);
    for (Index i = 0; i < n; ++i) v(i) = normal(rng);
    return v;
}

Vector unit_ball(Index k, std::mt19937_64& rng) {
    Vector v = normal_vector(k, rng);
    const double r = std::pow(std::uniform_real_distribution<double>(0.0, 1.0)(rng), 1.0 / static_cast<double>(k));
    return v.norm() > 0.0 ? Vector(v * (r / v.norm())) : v;
}

double reduced_loop_l2(const RetrofitDesign& d, Vector xi, Vector z) {
    const auto& r = d.reduced;
    const auto& g = d.gains;
    double acc = 0.0;
    for (long t = 0; t < 1000000; ++t) {
        acc += xi.squaredNorm();
        if (t >= g.tau && xi.squaredNorm() + z.squaredNorm() <= 1e-30 * acc) break;
        const Vector vhat = t < g.tau ? Vector(g.F[t] * z) : Vector(g.G * z);
        Vector z_next = r.A * z + r.B * vhat;
        if (t < g.tau) z_next += g.H[t] * (r.C * (xi - z));
        xi = r.A * xi + r.B * vhat;
        z = std::move(z_next);
    }
    return std::sqrt(acc);
}

int cmd_verify(const Options& opt) {
    std::string out = opt.out;
    std::uint64_t seed = opt.seed.value_or(1);
    if (!opt.config.empty()) {
        const auto cfg = io::load_config(opt.config);
        if (out.empty()) out = cfg.output;
        if (!opt.seed) seed = cfg.seed;
    }
    if (opt.bundle.empty() && opt.config.empty()) throw io::ConfigError("verify needs --bundle or --config");
    if (opt.trials < 0) throw io::ConfigError("--trials must be nonnegative");
    const auto b = io::load_bundle(bundle_path(opt, out));
    const auto& d = b.design;
    const auto& sys = b.plant;
    const Index n = sys.states();
    std::mt19937_64 rng(seed);

    Check cascade{"cascade equivalence"}, matching{"finite-time output matching"}, lemma{"reduced-loop bound"},
        theorem{"plant bound"};
    const auto e = expand(sys, d.projection, d.ports);
    constexpr std::size_t horizon = 200;
    for (long i = 0; i < opt.trials; ++i) {
        std::vector<Vector> v, vhat;
        for (std::size_t t = 0; t < horizon; ++t) {
            v.push_back(normal_vector(sys.inputs(), rng));
            vhat.push_back(normal_vector(d.ports.size(), rng));
        }
        const auto dev = cascade_deviation(e, normal_vector(n, rng), normal_vector(d.rank(), rng), v, vhat);
        const double m = std::max(dev.state, dev.compensator);
        cascade.worst = std::max(cascade.worst, m);
        ++cascade.samples;
        if (!(m <= 1e-8)) ++cascade.failures;

        if (d.tau() > 0) {
            const double dev_m = finite_time_output_matching_check(e, d.tau(), rng());
            matching.worst = std::max(matching.worst, dev_m);
            ++matching.samples;
            if (!(dev_m <= 1e-9)) ++matching.failures;
        }

        const Vector s = unit_ball(d.fault_basis.cols(), rng);
        const Vector xi0 = d.projection.Pdag * d.fault_basis * s;
        const Vector z0 = d.projection.Pdag * d.guess_operator * d.fault_basis * s;
        const double l2 = reduced_loop_l2(d, xi0, z0);
        ++lemma.samples;
        if (d.bound.epsilon > 0.0) lemma.worst = std::max(lemma.worst, l2 / d.bound.epsilon);
        if (!(l2 <= d.bound.epsilon * (1.0 + 1e-6) + 1e-300)) ++lemma.failures;

        sim::RunOptions ro;
        ro.record = false;
        const auto r = sim::run(sys, sim::PreexistingController::static_gain(b.K), std::span(&d, 1),
                                d.fault_basis * s, ro);
        ++theorem.samples;
        const double bound = d.bound.plant_bound() * s.norm();
        if (bound > 0.0) theorem.worst = std::max(theorem.worst, r.x_l2 / bound);
        if (r.diverged || !(r.x_l2 <= bound * (1.0 + 1e-6) + 1e-12)) ++theorem.failures;
    }

    bool ok = true;
    for (const auto* c : {&cascade, &matching, &lemma, &theorem}) {
        const bool pass = c->failures == 0;
        ok = ok && pass;
        std::cout << c->name << ": " << (pass ? "pass" : "FAIL") << " (" << c->samples << " samples, " << c->failures
                  << " failures, worst " << io::format_double(c->worst) << ")\n";
    }
    std::cout << "verify: " << (ok ? "pass" : "FAIL") << "\n";
    return ok ? kOk : kProperty;
}

void configure_logging() {
    auto logger = spdlog::stderr_color_mt("retrofit");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const char* env = std::getenv("RETROFIT_LOG");
    spdlog::set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
}

}  // namespace

int main(int argc, char** argv) {
    configure_logging();
    CLI::App app{"Retrofit controller design for power-grid models"};
    app.require_subcommand(1);
    Options opt;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "Experiment config (YAML)");
        sub->add_option("--seed", opt.seed, "Seed for sampled checks; overrides the config");
        sub->add_option("--out", opt.out, "Output directory; overrides the config");
        sub->add_option("--bundle", opt.bundle, "Design bundle path (default <out>/bundle.json)");
    };
    auto* design = app.add_subcommand("design", "Build the projection, synthesize gains, write a certified bundle");
    common(design);
    auto* simulate = app.add_subcommand("simulate", "Simulate the configured fault with a bundle");
    common(simulate);
    auto* sweep = app.add_subcommand("sweep", "Tabulate norms and bounds versus projection rank");
    common(sweep);
    sweep->add_option("--rank-grid", opt.rank_grid, "Ranks, e.g. 4,8,12 or 2:44:6");
    auto* verify = app.add_subcommand("verify", "Run the property checks on a bundle");
    common(verify);
    verify->add_option("--trials", opt.trials, "Number of random trials per check");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*design) return cmd_design(opt);
        if (*simulate) return cmd_simulate(opt);
        if (*sweep) return cmd_sweep(opt);
        if (*verify) return cmd_verify(opt);
    } catch (const InvalidArgument& e) {
        spdlog::error("{}", e.what());
        return kConfig;
    } catch (const ConditionViolation& e) {
        spdlog::error("{}", e.what());
        return kNumerical;
    } catch (const NumericalError& e) {
        spdlog::error("{}", e.what());
        return kNumerical;
    } catch (const Error& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return kOk;
}
