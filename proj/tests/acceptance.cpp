// Acceptance gate: one line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "retrofit/controller.hpp"
#include "retrofit/powergrid.hpp"
#include "retrofit/sim.hpp"
#include "support.hpp"

using namespace retrofit;
using namespace testing_support;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = true;
    std::string detail;
};

int failures = 0;

void report(const char* tag, const char* name, const std::function<Outcome()>& body) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("[%s] %s %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", tag, name, o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

DesignOptions fast_options() {
    DesignOptions o;
    o.plant_gain = false;
    return o;
}

RetrofitDesign design_for(const Instance& in, const Matrix& K, int tau, const Matrix& guess, bool plant_gain) {
    DesignOptions o;
    o.plant_gain = plant_gain;
    return design_retrofit(in.sys, K, in.built.projection, in.ports, in.built.nu, tau, in.fault_basis, guess, o);
}

Matrix kronecker_dlyap(const Matrix& A) {
    const Index n = A.rows();
    const Matrix At = A.transpose();
    Matrix K = Matrix::Identity(n * n, n * n);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < n; ++j) K.block(i * n, j * n, n, n) -= At(i, j) * At;
    }
    const Matrix I = Matrix::Identity(n, n);
    const Vector q = K.partialPivLu().solve(Eigen::Map<const Vector>(I.data(), n * n));
    return Eigen::Map<const Matrix>(q.data(), n, n);
}

Matrix taylor_exp(const Matrix& M) {
    Matrix sum = Matrix::Identity(M.rows(), M.cols());
    Matrix term = sum;
    for (int k = 1; k < 200; ++k) {
        term = term * M / static_cast<double>(k);
        sum += term;
        if (term.norm() < 1e-18 * sum.norm()) break;
    }
    return sum;
}

double span_residual(const Matrix& basis, const Matrix& M) {
    const Matrix Q = basis.householderQr().householderQ() * Matrix::Identity(basis.rows(), basis.cols());
    Matrix Mn = M;
    for (Index j = 0; j < Mn.cols(); ++j) Mn.col(j).normalize();
    return (Mn - Q * (Q.transpose() * Mn)).norm();
}

/// |xi_hat|_l2 of the reduced loop started at (E s, Z s).
double reduced_loop_l2(const RetrofitDesign& d, Vector xi, Vector z) {
    const auto& r = d.reduced;
    const auto& g = d.gains;
    double acc = 0.0;
    for (long t = 0; t < 1000000; ++t) {
        acc += xi.squaredNorm();
        if (t >= g.tau && xi.squaredNorm() + z.squaredNorm() <= 1e-30 * acc) break;
        const Vector vhat = t < g.tau ? Vector(g.F[t] * z) : Vector(g.G * z);
        const Vector xi_next = r.A * xi + r.B * vhat;
        z = r.A * z + r.B * vhat + (t < g.tau ? Vector(g.H[t] * (r.C * (xi - z))) : Vector::Zero(z.size()));
        xi = xi_next;
    }
    return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

Outcome cascade_equivalence() {
    std::mt19937_64 rng(1001);
    const auto t0 = Clock::now();
    double worst = 0.0;
    int bad = 0;
    for (int i = 0; i < 100; ++i) {
        const auto in = random_instance(rng, 4, 20);
        const auto e = expand(in.sys, in.built.projection, in.ports);
        std::vector<Vector> v, vhat;
        for (int t = 0; t < 200; ++t) {
            v.push_back(gaussian_vector(in.sys.inputs(), rng));
            vhat.push_back(gaussian_vector(in.ports.size(), rng));
        }
        const auto dev = cascade_deviation(e, gaussian_vector(in.sys.states(), rng),
                                           gaussian_vector(in.built.rank(), rng), v, vhat);
        const double m = std::max(dev.state, dev.compensator);
        worst = std::max(worst, m);
        if (!(m <= 1e-8)) ++bad;
    }
    const double elapsed = seconds_since(t0);
    return {bad == 0 && elapsed < 10.0,
            fmt("100 instances x 200 steps, max deviation %.2e (tol 1e-8), %d violations, %.2f s (limit 10 s)", worst,
                bad, elapsed)};
}

Outcome stability_separation() {
    std::mt19937_64 rng(1002);
    int checked = 0, bad = 0;
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto in = random_instance(rng, 4, 16);
        const Matrix K0 = random_stabilizing_gain(in.sys, rng);
        const auto d = design_for(in, K0, in.built.tau, Matrix::Zero(in.sys.states(), in.sys.states()), false);
        const double rho_cl_hat = spectral_radius(d.reduced.A + d.reduced.B * d.gains.G);
        for (int k = 0; k < 6; ++k) {
            const Matrix K = k == 0 ? K0 : random_stabilizing_gain(in.sys, rng);
            const double rhoK = spectral_radius(in.sys.A + in.sys.B * K * in.sys.C);
            if (!(rhoK < 1.0 && rho_cl_hat < 1.0)) continue;
            ++checked;
            const double rho = spectral_radius(closed_loop_matrix(in.sys, K, std::span(&d, 1), SwitchPhase::persistent));
            worst = std::max(worst, rho);
            if (!(rho < 1.0)) ++bad;
        }
    }
    return {bad == 0 && checked == 600,
            fmt("100 instances x (1 + 5 redrawn K), %d closed loops checked, max spectral radius %.6f, %d failures",
                checked, worst, bad)};
}

Outcome output_matching() {
    std::mt19937_64 rng(1003);
    double worst = 0.0;
    int reduced = 0;
    for (int i = 0; i < 100; ++i) {
        const int tau = 1 + i % 3;
        for (;;) {
            const Index n = std::uniform_int_distribution<Index>(6, 16)(rng);
            const Index m = std::uniform_int_distribution<Index>(2, 4)(rng);
            const auto sys = random_plant(n, m, m, 0.9, rng);
            const PortSet ports{{0}};
            const Matrix X = gaussian(n, 1, rng).normalized();
            proj::BuiltProjection b;
            try {
                b = proj::build_projection(sys, ports, 1, tau, X, n);
            } catch (const Error&) {
                continue;
            }
            const auto e = expand(sys, b.projection, ports);
            worst = std::max(worst, finite_time_output_matching_check(e, tau, 100 + i));
            if (b.rank() < n) ++reduced;
            break;
        }
    }
    return {worst <= 1e-9, fmt("100 instances, tau in {1,2,3}, %d with rank < n, max deviation %.2e (tol 1e-9)",
                               reduced, worst)};
}

Outcome subordination() {
    std::mt19937_64 rng(1004);
    int reduced_bad = 0, plant_bad = 0, reduced_n = 0, plant_n = 0;
    double reduced_ratio = 0.0, plant_ratio = 0.0;
    for (int i = 0; i < 20; ++i) {
        const auto in = random_instance(rng, 4, 12);
        const Index n = in.sys.states();
        const Matrix K = random_stabilizing_gain(in.sys, rng);
        const Matrix guess = i % 2 == 0 ? Matrix(Matrix::Zero(n, n)) : Matrix(0.5 * gaussian(n, n, rng));
        const auto d = design_for(in, K, in.built.tau, guess, true);
        const Matrix E = d.projection.Pdag * d.fault_basis;
        const Matrix Z = d.projection.Pdag * d.guess_operator * d.fault_basis;
        for (int s_i = 0; s_i < 1000; ++s_i) {
            const Vector s = unit_ball_sample(d.fault_basis.cols(), rng);
            const double l2 = reduced_loop_l2(d, E * s, Z * s);
            reduced_ratio = std::max(reduced_ratio, l2 / d.bound.epsilon);
            ++reduced_n;
            if (!(l2 <= d.bound.epsilon * (1.0 + 1e-6))) ++reduced_bad;
        }
        sim::RunOptions opts;
        opts.record = false;
        for (int s_i = 0; s_i < 50; ++s_i) {
            const Vector x0 = d.fault_basis * unit_ball_sample(d.fault_basis.cols(), rng);
            const auto r = sim::run(in.sys, sim::PreexistingController::static_gain(K), std::span(&d, 1), x0, opts);
            ++plant_n;
            if (!r.bound || r.diverged || !(r.x_l2 <= d.bound.plant_bound() * (1.0 + 1e-6))) ++plant_bad;
            else plant_ratio = std::max(plant_ratio, r.x_l2 / d.bound.plant_bound());
        }
    }
    return {reduced_bad == 0 && plant_bad == 0,
            fmt("20 designs; reduced bound: %d samples, %d violations, max |xi_hat|/eps %.4f; plant bound: %d runs, "
                "%d violations, max |x|/(gamma_K eps) %.4f",
                reduced_n, reduced_bad, reduced_ratio, plant_n, plant_bad, plant_ratio)};
}

Outcome oracle_equivalence() {
    std::mt19937_64 rng(1005);
    double dlyap_err = 0.0, hinf_err = 0.0, zoh_err = 0.0;
    for (int i = 0; i < 20; ++i) {
        const Index n = 2 + i % 7;
        const Matrix A = random_stable(n, 0.5 + 0.02 * i, rng);
        const Matrix Q = solve_dlyap(A);
        dlyap_err = std::max(dlyap_err, (Q - kronecker_dlyap(A)).norm() / Q.norm());
    }
    for (int i = 0; i < 20; ++i) {
        const Index n = 2 + i % 5;
        const Index m = 1 + i % 2;
        const Index p = 1 + (i / 2) % 2;
        const DiscreteLTI sys(random_stable(n, 0.6 + 0.015 * i, rng), gaussian(n, m, rng), gaussian(p, n, rng),
                              gaussian(p, m, rng), 1.0);
        const double oracle = hinf_grid_oracle(sys, 1000000);
        hinf_err = std::max(hinf_err, std::abs(hinf_norm(sys) - oracle) / oracle);
    }
    for (int i = 0; i < 20; ++i) {
        const Index n = 2 + i % 6;
        const Index m = 1 + i % 3;
        Matrix Ac = gaussian(n, n, rng);
        Ac *= 2.0 / Ac.norm();
        const Matrix Bc = gaussian(n, m, rng);
        const double dt = 0.2 + 0.1 * (i % 9);
        const auto d = zoh_discretize({Ac, Bc, Matrix::Identity(n, n)}, dt);
        Matrix aug = Matrix::Zero(n + m, n + m);
        aug.topLeftCorner(n, n) = Ac * dt;
        aug.topRightCorner(n, m) = Bc * dt;
        const Matrix E = taylor_exp(aug);
        zoh_err = std::max({zoh_err, (d.A - E.topLeftCorner(n, n)).norm(), (d.B - E.topRightCorner(n, m)).norm()});
    }
    return {dlyap_err <= 1e-9 && hinf_err <= 1e-6 && zoh_err <= 1e-10,
            fmt("20 each; dlyap vs Kronecker %.2e (tol 1e-9), hinf vs 1e6-point grid %.2e rel (tol 1e-6), zoh vs "
                "series %.2e (tol 1e-10)",
                dlyap_err, hinf_err, zoh_err)};
}

Outcome biconjugation() {
    std::mt19937_64 rng(1006);
    double defect = 0.0, inverse = 0.0, span = 0.0;
    for (int i = 0; i < 50; ++i) {
        const Index n = std::uniform_int_distribution<Index>(3, 20)(rng);
        const Index k = std::uniform_int_distribution<Index>(1, n)(rng);
        const Matrix U = gaussian(n, k, rng);
        const Matrix V = gaussian(n, k, rng);
        const auto p = proj::biconjugate(U, V);
        defect = std::max(defect, proj::biconjugation_defect(p));
        inverse = std::max(inverse, p.left_inverse_error());
        span = std::max({span, span_residual(U, p.P), span_residual(p.P, U)});
    }
    return {defect <= 1e-12 && inverse <= 1e-10 && span <= 1e-10,
            fmt("50 random bases; off-diagonal mass %.2e (tol 1e-12), |Pdag P - I| %.2e (tol 1e-10), span "
                "residual %.2e (tol 1e-10)",
                defect, inverse, span)};
}

struct Desk {
    grid::Network net;
    grid::GridModel model;
    DiscreteLTI sys;
    Matrix K;
    Matrix X;
    Matrix guess;
    Vector x0;
    sim::RunOptions opts;
};

Desk desk_network(std::uint64_t seed) {
    Desk d;
    d.net = grid::random_network(seed, 10, 12);
    d.model = grid::assemble(d.net);
    d.sys = zoh_discretize(d.model.plant, 1.0);
    d.K = grid::broadcast_agc(10, 0.01, Vector::Ones(10));
    d.X = grid::fault_domain(d.model, 0);
    d.guess = grid::frequency_guess_operator(d.model);
    d.x0 = d.X * Vector::Ones(2);
    d.opts.theta_index = d.model.index.theta;
    d.opts.omega_index = d.model.index.omega;
    d.opts.record = false;
    return d;
}

Outcome full_rank_limit() {
    const Desk desk = desk_network(2);
    const Index n = desk.sys.states();
    double worst = 0.0;
    for (const auto& ports : {std::vector<Index>{0}, grid::nearest_generators(desk.net, 0, 3)}) {
        const sim::Scenario sc{desk.K, PortSet{ports}, desk.X, desk.guess, desk.x0};
        sim::DesignConfig cfg;
        cfg.weights = fast_options();
        const std::vector<Index> grid{n};
        const auto row = sim::rank_sweep(desk.sys, sc, grid, cfg, desk.opts).front();
        if (!row.designed) return {false, "full-rank row was not designed: " + row.note};
        const auto d = design_retrofit(desk.sys, desk.K, proj::Projection::identity(n), sc.ports, static_cast<int>(n),
                                       static_cast<int>(n), desk.X, desk.guess, cfg.weights);
        const auto r =
            sim::run(desk.sys, sim::PreexistingController::static_gain(desk.K), std::span(&d, 1), desk.x0, desk.opts);
        for (auto [a, b] : {std::pair{row.omega_l2, r.omega_l2}, std::pair{row.theta_l2, r.theta_l2},
                            std::pair{row.x_l2, r.x_l2}, std::pair{row.vhat_l2, r.vhat_l2}}) {
            worst = std::max(worst, std::abs(a - b) / std::max(std::abs(b), 1e-300));
        }
    }
    return {worst <= 1e-10,
            fmt("seeded 10+12 network, 1 and 3 ports, rank %ld row vs P = I design, max relative norm gap %.2e (tol "
                "1e-10)",
                static_cast<long>(n), worst)};
}

Outcome desk_reproduction() {
    const auto t0 = Clock::now();
    const Desk desk = desk_network(2);
    const Index n = desk.sys.states();
    const auto pre = sim::PreexistingController::static_gain(desk.K);
    const auto base = sim::run(desk.sys, pre, desk.x0, desk.opts);

    auto evaluate = [&](const std::vector<Index>& ports, double input_weight) {
        sim::DesignConfig cfg;
        cfg.weights = fast_options();
        cfg.weights.input_weight = input_weight;
        const auto d = sim::design_at_rank(desk.sys, desk.K, PortSet{ports}, desk.X, desk.guess, n, cfg);
        return sim::run(desk.sys, pre, std::span(&d, 1), desk.x0, desk.opts);
    };
    const auto one = evaluate({0}, 1.0);
    const auto three_ports = grid::nearest_generators(desk.net, 0, 3);
    const auto cal =
        sim::calibrate_input_weight([&](double w) { return evaluate(three_ports, w).vhat_l2; }, one.vhat_l2);
    const auto three = evaluate(three_ports, cal.input_weight);
    const double elapsed = seconds_since(t0);

    const bool decreases = one.omega_l2 < base.omega_l2 && one.theta_l2 < base.theta_l2 &&
                           three.omega_l2 < base.omega_l2 && three.theta_l2 < base.theta_l2;
    const bool ports_help = three.omega_l2 <= one.omega_l2 && three.theta_l2 <= one.theta_l2;
    const bool comparable = three.vhat_l2 <= one.vhat_l2 * 1.1;
    return {decreases && ports_help && comparable && elapsed < 60.0,
            fmt("broadcast |w| %.3f |th| %.3f; 1 port |w| %.3f |th| %.3f (|v_hat| %.3f); 3 ports |w| %.3f |th| %.3f "
                "(|v_hat| %.3f, weight %.3g); %.1f s (limit 60 s)",
                base.omega_l2, base.theta_l2, one.omega_l2, one.theta_l2, one.vhat_l2, three.omega_l2,
                three.theta_l2, three.vhat_l2, cal.input_weight, elapsed)};
}

}  // namespace

int main() {
    report("C1", "cascade equivalence", cascade_equivalence);
    report("C2", "stability separation", stability_separation);
    report("C3", "finite-time output matching", output_matching);
    report("C4", "bound subordination", subordination);
    report("C5", "oracle equivalence", oracle_equivalence);
    report("C6", "biconjugation", biconjugation);
    report("C7", "full-rank limit", full_rank_limit);
    report("C8", "desk-scale reproduction", desk_reproduction);
    std::printf("%d of 8 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
