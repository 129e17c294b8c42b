#pragma once

// Closed-loop simulation of a plant with its preexisting controller and any
// number of retrofit controllers, plus rank sweeps and the naive local-LQR
// baseline.

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retrofit/controller.hpp"
#include "retrofit/lti.hpp"
#include "retrofit/powergrid.hpp"
#include "retrofit/projection.hpp"

namespace retrofit::sim {

// ---------------------------------------------------------------------------
// Preexisting controller
// ---------------------------------------------------------------------------

/// Static v_t = F y_t, or a dynamic controller sampled every `rate` base steps:
///   eta_{m(t+1)} = G eta_{mt} + H y_{mt},  w_{mt} = F eta_{mt},
/// with v held at w_{mt} for m base steps.
struct PreexistingController {
    Matrix F;
    Matrix G;
    Matrix H;
    int rate = 1;
    bool dynamic = false;

    static PreexistingController static_gain(Matrix F) {
        PreexistingController k;
        k.F = std::move(F);
        return k;
    }

    static PreexistingController dynamic_gain(Matrix G, Matrix H, Matrix F, int rate) {
        PreexistingController k;
        k.G = std::move(G);
        k.H = std::move(H);
        k.F = std::move(F);
        k.rate = rate;
        k.dynamic = true;
        return k;
    }

    Index states() const { return dynamic ? G.rows() : 0; }

    void validate(const DiscreteLTI& sys) const {
        if (!dynamic) {
            if (F.rows() != sys.inputs() || F.cols() != sys.outputs()) {
                throw InvalidArgument("PreexistingController: static gain must be inputs x outputs");
            }
            return;
        }
        if (rate < 1) throw InvalidArgument("PreexistingController: rate must be at least 1");
        if (G.rows() != G.cols()) throw InvalidArgument("PreexistingController: G must be square");
        if (H.rows() != G.rows() || H.cols() != sys.outputs()) {
            throw InvalidArgument("PreexistingController: H must be states x outputs");
        }
        if (F.rows() != sys.inputs() || F.cols() != G.rows()) {
            throw InvalidArgument("PreexistingController: F must be inputs x states");
        }
    }

    /// Closed loop over one controller period:
    /// [[A^m, (sum_{k<m} A^k) B F], [H C, G]]; for a static gain, A + B F C.
    Matrix lifted_matrix(const DiscreteLTI& sys) const {
        validate(sys);
        if (!dynamic) return sys.A + sys.B * F * sys.C;
        const Index n = sys.states();
        const Index q = G.rows();
        Matrix Am = Matrix::Identity(n, n);
        Matrix S = Matrix::Zero(n, n);
        for (int k = 0; k < rate; ++k) {
            S += Am;
            Am = sys.A * Am;
        }
        Matrix M(n + q, n + q);
        M << Am, S * sys.B * F, H * sys.C, G;
        return M;
    }

    bool stabilizes(const DiscreteLTI& sys) const { return spectral_radius(lifted_matrix(sys)) < 1.0; }
};

/// Stateful runtime of a preexisting controller; eta_0 = 0.
class PreexistingRuntime {
public:
    explicit PreexistingRuntime(const PreexistingController& k) : k_(k), eta_(Vector::Zero(k.states())) {}

    Vector step(long t, const Vector& y) {
        if (!k_.dynamic) return k_.F * y;
        if (t % k_.rate == 0) {
            held_ = k_.F * eta_;
            eta_ = k_.G * eta_ + k_.H * y;
        }
        return held_;
    }

    double energy() const { return eta_.squaredNorm(); }

private:
    const PreexistingController& k_;
    Vector eta_;
    Vector held_;
};

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct RunOptions {
    std::size_t steps = 0;           ///< fixed horizon; 0 selects the energy-based stop
    std::size_t max_steps = 100000;  ///< cap for the energy-based stop
    double energy_tolerance = 1e-12; ///< stop once energy <= tolerance * peak energy
    bool record = true;              ///< keep the full trajectory
    std::vector<Index> theta_index;  ///< coordinates summed into theta_l2
    std::vector<Index> omega_index;  ///< coordinates summed into omega_l2
};

struct RunResult {
    Trajectory trajectory;             ///< states x_0..x_T, total inputs u, outputs y
    std::vector<Vector> preexisting;   ///< v_t
    std::vector<Vector> retrofit;      ///< sum of port-mapped v_hat_t
    double x_l2 = 0.0;
    double theta_l2 = 0.0;
    double omega_l2 = 0.0;
    double v_l2 = 0.0;
    double vhat_l2 = 0.0;
    std::size_t steps = 0;
    bool truncated = false;  ///< energy criterion not met before the cap
    bool diverged = false;
    double spectral_radius = std::numeric_limits<double>::quiet_NaN();
    std::optional<CertifiedBound> bound;
    double bound_value = std::numeric_limits<double>::quiet_NaN();  ///< gamma_K eps |s| for x0 = X s
    bool bound_ok = true;
};

namespace detail {

inline constexpr double kDivergenceFactor = 1e20;

/// Generic closed loop. `extra(t, x, y, v)` returns the additional plant input
/// and `extra_energy()` the squared norm of any additional controller state.
template <class Extra, class ExtraEnergy>
RunResult closed_loop_run(const DiscreteLTI& sys, const PreexistingController& K, const Vector& x0,
                          const RunOptions& opts, std::size_t min_steps, Extra&& extra, ExtraEnergy&& extra_energy) {
    sys.validate();
    K.validate(sys);
    if (x0.size() != sys.states()) throw InvalidArgument("run: x0 has wrong dimension");
    PreexistingRuntime pre(K);
    RunResult res;
    res.trajectory.dt = sys.dt;

    auto sum_sq = [](const Vector& x, const std::vector<Index>& idx) {
        double s = 0.0;
        for (Index i : idx) s += x(i) * x(i);
        return s;
    };
    double x_sq = 0.0, th_sq = 0.0, om_sq = 0.0, v_sq = 0.0, vh_sq = 0.0;
    double peak = 0.0;
    const double initial = x0.squaredNorm();

    Vector x = x0;
    for (long t = 0;; ++t) {
        const Vector y = sys.C * x;
        x_sq += x.squaredNorm();
        th_sq += sum_sq(x, opts.theta_index);
        om_sq += sum_sq(x, opts.omega_index);
        if (opts.record) {
            res.trajectory.states.push_back(x);
            res.trajectory.outputs.push_back(y);
        }
        const double energy = x.squaredNorm() + pre.energy() + extra_energy();
        if (!std::isfinite(energy) || (initial > 0.0 && energy > kDivergenceFactor * initial)) {
            res.diverged = true;
            break;
        }
        peak = std::max(peak, energy);
        const auto steps = static_cast<std::size_t>(t);
        if (opts.steps > 0) {
            if (steps >= opts.steps) break;
        } else if (steps >= min_steps && t % K.rate == 0 && energy <= opts.energy_tolerance * peak) {
            break;
        } else if (steps >= opts.max_steps) {
            res.truncated = true;
            break;
        }

        const Vector v = pre.step(t, y);
        const Vector vhat = extra(t, x, y, v);
        const Vector u = v + vhat;
        v_sq += v.squaredNorm();
        vh_sq += vhat.squaredNorm();
        if (opts.record) {
            res.trajectory.inputs.push_back(u);
            res.preexisting.push_back(v);
            res.retrofit.push_back(vhat);
        }
        x = sys.A * x + sys.B * u;
        res.steps = steps + 1;
    }

    if (res.diverged) {
        const double inf = std::numeric_limits<double>::infinity();
        res.x_l2 = res.theta_l2 = res.omega_l2 = inf;
    } else {
        res.x_l2 = std::sqrt(x_sq);
        res.theta_l2 = std::sqrt(th_sq);
        res.omega_l2 = std::sqrt(om_sq);
    }
    res.v_l2 = std::sqrt(v_sq);
    res.vhat_l2 = std::sqrt(vh_sq);
    return res;
}

}  // namespace detail

/// Plant + preexisting controller + retrofit controllers. Each retrofit starts
/// from x_hat_0 = 0 and z_hat_0 = Pdag (guess_operator x0).
inline RunResult run(const DiscreteLTI& sys, const PreexistingController& K, std::span<const RetrofitDesign> designs,
                     const Vector& x0, const RunOptions& opts = {}) {
    std::vector<RetrofitController> ctrls;
    std::size_t min_steps = 0;
    for (const auto& d : designs) {
        ctrls.push_back(make_controller(d, d.guess_operator * x0));
        min_steps = std::max<std::size_t>(min_steps, static_cast<std::size_t>(d.tau()));
    }
    RetrofitBank bank(std::move(ctrls), sys.inputs(), sys.outputs());
    auto extra = [&](long, const Vector&, const Vector& y, const Vector& v) { return bank.step(y, v); };
    auto energy = [&]() {
        double e = 0.0;
        for (std::size_t i = 0; i < bank.size(); ++i) e += bank[i].zhat().squaredNorm();
        return e;
    };
    RunResult res = detail::closed_loop_run(sys, K, x0, opts, min_steps, extra, energy);

    if (!K.dynamic) {
        res.spectral_radius = spectral_radius(closed_loop_matrix(sys, K.F, designs, SwitchPhase::persistent));
    } else if (designs.empty()) {
        res.spectral_radius = std::pow(spectral_radius(K.lifted_matrix(sys)), 1.0 / K.rate);
    }

    if (!K.dynamic && designs.size() == 1) {
        const auto& d = designs.front();
        const Vector s = d.fault_basis.transpose() * x0;
        if ((d.fault_basis * s - x0).norm() <= 1e-10 * std::max(1.0, x0.norm())) {
            res.bound = d.bound;
            res.bound_value = d.bound.plant_bound() * s.norm();
            res.bound_ok = res.x_l2 <= res.bound_value * (1.0 + 1e-6) + 1e-12;
        }
    }
    return res;
}

inline RunResult run(const DiscreteLTI& sys, const PreexistingController& K, const Vector& x0,
                     const RunOptions& opts = {}) {
    return run(sys, K, std::span<const RetrofitDesign>{}, x0, opts);
}

// ---------------------------------------------------------------------------
// Design helpers
// ---------------------------------------------------------------------------

struct DesignConfig {
    DesignOptions weights;
    int max_tau = 0;  ///< cap on the observation horizon; 0 means the state dimension
};

inline int effective_tau_cap(const DiscreteLTI& sys, const DesignConfig& cfg) {
    return cfg.max_tau > 0 ? cfg.max_tau : static_cast<int>(sys.states());
}

/// Retrofit design on a rank-targeted projection. Throws UnstableError when
/// the reduced matrix is not stable.
inline RetrofitDesign design_at_rank(const DiscreteLTI& sys, const Matrix& K, const PortSet& ports,
                                     const Matrix& fault_basis, const Matrix& guess_operator, Index rank,
                                     const DesignConfig& cfg) {
    const int cap = effective_tau_cap(sys, cfg);
    const auto built = proj::build_projection_at_rank(sys, ports, fault_basis, rank, cap);
    if (!built.stable()) throw UnstableError("design_at_rank: reduced model is not stable", built.spectral_radius);
    return design_retrofit(sys, K, built.projection, ports, built.nu, std::min(built.tau, cap), fault_basis,
                           guess_operator, cfg.weights);
}

/// Retrofit design on a projection escalated from (nu, tau) until stable.
inline RetrofitDesign design_escalated(const DiscreteLTI& sys, const Matrix& K, const PortSet& ports,
                                       const Matrix& fault_basis, const Matrix& guess_operator, int nu, int tau,
                                       Index max_rank, const DesignConfig& cfg) {
    const auto built = proj::build_projection(sys, ports, nu, tau, fault_basis, max_rank);
    int tau_used = built.tau;
    if (built.rank() == sys.states()) tau_used = effective_tau_cap(sys, cfg);
    return design_retrofit(sys, K, built.projection, ports, built.nu, tau_used, fault_basis, guess_operator,
                           cfg.weights);
}

// ---------------------------------------------------------------------------
// Rank sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    Index rank = 0;
    int nu = 0;
    int tau = 0;
    double reduced_spectral_radius = std::numeric_limits<double>::quiet_NaN();
    bool stable = false;
    bool designed = false;
    double omega_l2 = std::numeric_limits<double>::quiet_NaN();
    double theta_l2 = std::numeric_limits<double>::quiet_NaN();
    double x_l2 = std::numeric_limits<double>::quiet_NaN();
    double vhat_l2 = std::numeric_limits<double>::quiet_NaN();
    double epsilon = std::numeric_limits<double>::quiet_NaN();
    double gammaK = std::numeric_limits<double>::quiet_NaN();
    double bound = std::numeric_limits<double>::quiet_NaN();
    bool bound_ok = false;
    std::string note;
};

/// Scenario shared by every row: static preexisting gain, ports, fault domain,
/// guess rule, and the simulated initial deflection.
struct Scenario {
    Matrix K;
    PortSet ports;
    Matrix fault_basis;
    Matrix guess_operator;
    Vector x0;
};

inline SweepRow sweep_row(const DiscreteLTI& sys, const Scenario& sc, Index rank, const DesignConfig& cfg,
                          const RunOptions& run_opts) {
    SweepRow row;
    row.rank = rank;
    const int cap = effective_tau_cap(sys, cfg);
    proj::BuiltProjection built;
    try {
        built = proj::build_projection_at_rank(sys, sc.ports, sc.fault_basis, rank, cap);
    } catch (const Error& e) {
        row.note = e.what();
        return row;
    }
    row.nu = built.nu;
    row.tau = std::min(built.tau, cap);
    row.reduced_spectral_radius = built.spectral_radius;
    row.stable = built.stable();
    if (!row.stable) {
        row.note = "reduced model unstable";
        return row;
    }
    try {
        const auto d = design_retrofit(sys, sc.K, built.projection, sc.ports, built.nu, row.tau, sc.fault_basis,
                                       sc.guess_operator, cfg.weights);
        const auto r = run(sys, PreexistingController::static_gain(sc.K), std::span(&d, 1), sc.x0, run_opts);
        row.designed = true;
        row.omega_l2 = r.omega_l2;
        row.theta_l2 = r.theta_l2;
        row.x_l2 = r.x_l2;
        row.vhat_l2 = r.vhat_l2;
        row.epsilon = d.bound.epsilon;
        row.gammaK = d.bound.gammaK;
        row.bound = r.bound_value;
        row.bound_ok = r.bound_ok && !r.diverged;
        if (r.truncated) row.note = "horizon cap reached";
    } catch (const Error& e) {
        row.note = e.what();
    }
    return row;
}

/// One row per grid entry; rows with unstable reduced models carry no norms.
inline std::vector<SweepRow> rank_sweep(const DiscreteLTI& sys, const Scenario& sc, std::span<const Index> grid,
                                        const DesignConfig& cfg, const RunOptions& run_opts) {
    for (Index r : grid) {
        if (r < 1 || r > sys.states()) throw InvalidArgument("rank_sweep: rank " + std::to_string(r) + " out of range");
    }
    std::vector<SweepRow> rows;
    rows.reserve(grid.size());
    for (Index r : grid) rows.push_back(sweep_row(sys, sc, r, cfg, run_opts));
    return rows;
}

// ---------------------------------------------------------------------------
// Naive baseline
// ---------------------------------------------------------------------------

struct BaselineResult {
    RunResult run;
    Matrix gain;  ///< |J| x n_area state feedback on the area coordinates
};

/// LQR designed on the isolated area model (boundary edges dropped), applied
/// as state feedback on the area coordinates of the full plant alongside the
/// preexisting static gain K. Zero state weight gives a zero gain.
inline BaselineResult naive_baseline(const DiscreteLTI& sys, const Matrix& K, const grid::AreaModel& area,
                                     const std::vector<Index>& port_generators, double state_weight,
                                     double input_weight, const Vector& x0, const RunOptions& opts = {}) {
    const auto& gens = area.generators;
    std::vector<Index> local;
    for (Index g : port_generators) {
        const auto it = std::find(gens.begin(), gens.end(), g);
        if (it == gens.end()) throw InvalidArgument("naive_baseline: port generator outside the area");
        local.push_back(static_cast<Index>(it - gens.begin()));
    }
    const DiscreteLTI area_sys = zoh_discretize(area.model.plant, sys.dt);
    const Index na = area_sys.states();
    const PortSet local_ports{local};
    const Matrix BJ = area_sys.B * local_ports.selector(area_sys.inputs());

    BaselineResult out;
    if (state_weight == 0.0) {
        out.gain = Matrix::Zero(static_cast<Index>(local.size()), na);
    } else {
        out.gain = solve_dare(area_sys.A, BJ, state_weight * Matrix::Identity(na, na),
                              input_weight * Matrix::Identity(BJ.cols(), BJ.cols()))
                       .F;
    }
    const Matrix EJ = PortSet{port_generators}.selector(sys.inputs());
    const Matrix feedback = EJ * out.gain * area.embedding.transpose();
    auto extra = [&](long, const Vector& x, const Vector&, const Vector&) -> Vector { return feedback * x; };
    auto energy = []() { return 0.0; };
    out.run = detail::closed_loop_run(sys, PreexistingController::static_gain(K), x0, opts, 0, extra, energy);
    out.run.spectral_radius = spectral_radius(sys.A + sys.B * (K * sys.C + feedback));
    return out;
}

// ---------------------------------------------------------------------------
// Input-energy normalization
// ---------------------------------------------------------------------------

struct Calibration {
    double input_weight = 1.0;
    double input_l2 = 0.0;
    bool matched = false;
    int evaluations = 0;
};

/// Log-scale bisection on the input weight so that `input_l2(weight)` (assumed
/// nonincreasing in the weight) lands within `rel_tol` of `target`.
inline Calibration calibrate_input_weight(const std::function<double(double)>& input_l2, double target,
                                          double rel_tol = 0.1, double lo = 1e-6, double hi = 1e6,
                                          int max_evaluations = 60) {
    if (!(target > 0.0)) throw InvalidArgument("calibrate_input_weight: target must be positive");
    Calibration best;
    double best_err = std::numeric_limits<double>::infinity();
    auto consider = [&](double w) {
        const double val = input_l2(w);
        ++best.evaluations;
        const double err = std::abs(val - target) / target;
        if (err < best_err) {
            best_err = err;
            best.input_weight = w;
            best.input_l2 = val;
        }
        return val;
    };
    double llo = std::log(lo);
    double lhi = std::log(hi);
    while (best.evaluations < max_evaluations && best_err > rel_tol) {
        const double mid = 0.5 * (llo + lhi);
        const double val = consider(std::exp(mid));
        if (val > target) llo = mid;
        else lhi = mid;
        if (lhi - llo < 1e-9) break;
    }
    best.matched = best_err <= rel_tol;
    return best;
}

}  // namespace retrofit::sim
