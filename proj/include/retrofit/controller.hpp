#pragma once

// Hierarchical state-space expansion, retrofit gain synthesis, performance
// certificates, and the switching retrofit controller runtime.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "retrofit/lti.hpp"
#include "retrofit/projection.hpp"

namespace retrofit {

using proj::PortSet;
using proj::Projection;
using proj::ReducedModel;

// ---------------------------------------------------------------------------
// Expansion
// ---------------------------------------------------------------------------

/// Cascade realization of the plant seen through a projection:
///   xi_hat' = A_hat xi_hat + B_hat v_hat
///   xi'     = A xi + B v + (A P - P A_hat) xi_hat,      x = xi + P xi_hat.
struct Expansion {
    DiscreteLTI plant;
    Projection projection;
    PortSet ports;
    ReducedModel reduced;
    Matrix Gamma;     ///< Pdag A - A_hat Pdag
    Matrix coupling;  ///< A P - P A_hat
    Matrix PdagB;     ///< compensator input matrix
};

/// Refuses projections that violate im B e_J in im P or ker Pdag in ker e_J^T C.
inline Expansion expand(const DiscreteLTI& sys, const Projection& proj, const PortSet& ports) {
    sys.validate();
    const auto report = proj::check_conditions(proj, sys, ports, 1, 1, Matrix(sys.states(), 0));
    if (!report.conBC_ok) {
        throw ConditionViolation("expand: subspace-matching conditions violated", report.input_image_residual,
                                 report.output_kernel_residual);
    }
    Expansion e;
    e.plant = sys;
    e.projection = proj;
    e.ports = ports;
    e.reduced = proj::reduced_triple(proj, sys, ports);
    e.Gamma = proj.Pdag * sys.A - e.reduced.A * proj.Pdag;
    e.coupling = sys.A * proj.P - proj.P * e.reduced.A;
    e.PdagB = proj.Pdag * sys.B;
    return e;
}

struct CascadeDeviation {
    double state = 0.0;       ///< max_t |x_t - (xi_t + P xi_hat_t)|
    double compensator = 0.0; ///< max_t |x_hat_t - Pdag xi_t|
};

/// Runs the redundant pair (plant, compensator with the Gamma x channel) and
/// the cascade independently from consistent initial states and compares them.
inline CascadeDeviation cascade_deviation(const Expansion& e, const Vector& x0, const Vector& xhat0,
                                          std::span<const Vector> v, std::span<const Vector> vhat) {
    if (v.size() != vhat.size()) throw InvalidArgument("cascade_deviation: input sequences differ in length");
    const auto& sys = e.plant;
    const auto& p = e.projection;
    const Matrix BJ = sys.B * e.ports.selector(sys.inputs());

    Vector x = x0;
    Vector xhat = xhat0;
    Vector xi_hat = p.Pdag * x0 - xhat0;
    Vector xi = p.Pbar * (p.Pbar_dag * x0) + p.P * xhat0;

    CascadeDeviation dev;
    for (std::size_t t = 0;; ++t) {
        dev.state = std::max(dev.state, (x - (xi + p.P * xi_hat)).norm());
        dev.compensator = std::max(dev.compensator, (xhat - p.Pdag * xi).norm());
        if (t == v.size()) break;
        const Vector x_next = sys.A * x + sys.B * v[t] + BJ * vhat[t];
        const Vector xhat_next = e.reduced.A * xhat + e.PdagB * v[t] + e.Gamma * x;
        const Vector xi_hat_next = e.reduced.A * xi_hat + e.reduced.B * vhat[t];
        const Vector xi_next = sys.A * xi + sys.B * v[t] + e.coupling * xi_hat;
        x = x_next;
        xhat = xhat_next;
        xi_hat = xi_hat_next;
        xi = xi_next;
    }
    return dev;
}

/// |C_hat (x_hat_t - x_hat'_t)| for t = 0..horizon, where x_hat is driven by
/// Gamma x_t and x_hat' is not, over random unit-norm x_t and random v_t.
inline std::vector<double> output_matching_deviation(const Expansion& e, int horizon, std::mt19937_64& rng) {
    const auto& sys = e.plant;
    std::normal_distribution<double> normal;
    auto random_vector = [&](Index n) {
        Vector r(n);
        for (Index i = 0; i < n; ++i) r(i) = normal(rng);
        return r;
    };
    Vector with = random_vector(e.reduced.A.rows());
    Vector without = with;
    std::vector<double> dev;
    for (int t = 0; t <= horizon; ++t) {
        dev.push_back((e.reduced.C * (with - without)).norm());
        Vector x = random_vector(sys.states());
        if (x.norm() > 0.0) x.normalize();
        const Vector v = random_vector(sys.inputs());
        with = e.reduced.A * with + e.PdagB * v + e.Gamma * x;
        without = e.reduced.A * without + e.PdagB * v;
    }
    return dev;
}

/// Max compensator output deviation over t < tau.
inline double finite_time_output_matching_check(const Expansion& e, int tau, std::uint64_t seed = 1) {
    if (tau < 1) throw InvalidArgument("finite_time_output_matching_check: tau must be at least 1");
    std::mt19937_64 rng(seed);
    const auto dev = output_matching_deviation(e, tau - 1, rng);
    return *std::max_element(dev.begin(), dev.end());
}

// ---------------------------------------------------------------------------
// Gain synthesis
// ---------------------------------------------------------------------------

/// Quadratic weights in reduced coordinates.
struct LqrWeights {
    Matrix state;
    Matrix input;
};

/// State weight P^T W P, so the cost penalizes P xi_hat.
inline LqrWeights reduced_weights(const Matrix& P, const Matrix& W, const Matrix& R) {
    if (W.rows() != P.rows() || W.cols() != P.rows()) throw InvalidArgument("reduced_weights: W must be n x n");
    return {symmetrize(P.transpose() * W * P), R};
}

/// Infinite-horizon gain G_hat from the reduced DARE.
inline Matrix design_infinite_gain(const Matrix& Ahat, const Matrix& Bhat, const Matrix& P, const Matrix& W,
                                   const Matrix& R) {
    const auto w = reduced_weights(P, W, R);
    return solve_dare(Ahat, Bhat, w.state, w.input).F;
}

struct FiniteGains {
    std::vector<Matrix> F;  ///< F_hat_t, t = 0..tau-1
    std::vector<Matrix> H;  ///< H_hat_t, t = 0..tau-1
};

/// F_hat_t from the backward Riccati recursion over [0, tau) with terminal
/// cost equal to the stabilizing DARE solution; H_hat_t from the forward
/// predictor recursion with unit noise and initial covariances.
inline FiniteGains design_finite_gains(const Matrix& Ahat, const Matrix& Bhat, const Matrix& Chat, int tau,
                                       const LqrWeights& w) {
    if (tau < 0) throw InvalidArgument("design_finite_gains: tau must be nonnegative");
    const Index n = Ahat.rows();
    const Index m = Bhat.cols();
    const Index p = Chat.rows();
    FiniteGains out;
    out.F.resize(tau);
    out.H.resize(tau);
    if (tau == 0) return out;

    Matrix X = solve_dare(Ahat, Bhat, w.state, w.input).X;
    for (int t = tau - 1; t >= 0; --t) {
        const Matrix BtX = Bhat.transpose() * X;
        out.F[t] = -(w.input + BtX * Bhat).ldlt().solve(BtX * Ahat);
        X = symmetrize(w.state + Ahat.transpose() * X * (Ahat + Bhat * out.F[t]));
    }

    Matrix S = Matrix::Identity(n, n);
    const Matrix Ip = Matrix::Identity(p, p);
    for (int t = 0; t < tau; ++t) {
        const Matrix CS = Chat * S;
        // H = A S C^T (C S C^T + I)^{-1}
        out.H[t] = (CS * Chat.transpose() + Ip).ldlt().solve(CS * Ahat.transpose()).transpose();
        S = symmetrize(Ahat * S * Ahat.transpose() + Matrix::Identity(n, n) - out.H[t] * CS * Ahat.transpose());
    }
    if (m == 0) {
        for (auto& f : out.F) f = Matrix::Zero(0, n);
    }
    return out;
}

/// Gains of the switching controller: F_hat_t and H_hat_t are active while
/// t < tau, G_hat afterwards.
struct RetrofitGains {
    std::vector<Matrix> F;
    std::vector<Matrix> H;
    Matrix G;
    int tau = 0;

    void validate(const ReducedModel& r) const {
        const Index n = r.A.rows();
        if (static_cast<int>(F.size()) != tau || static_cast<int>(H.size()) != tau) {
            throw InvalidArgument("RetrofitGains: gain sequences must have length tau");
        }
        for (const auto& f : F) {
            if (f.rows() != r.B.cols() || f.cols() != n) throw InvalidArgument("RetrofitGains: F has wrong shape");
        }
        for (const auto& h : H) {
            if (h.rows() != n || h.cols() != r.C.rows()) throw InvalidArgument("RetrofitGains: H has wrong shape");
        }
        if (G.rows() != r.B.cols() || G.cols() != n) throw InvalidArgument("RetrofitGains: G has wrong shape");
    }

    static RetrofitGains inert(const ReducedModel& r, int tau) {
        RetrofitGains g;
        g.tau = tau;
        g.F.assign(tau, Matrix::Zero(r.B.cols(), r.A.rows()));
        g.H.assign(tau, Matrix::Zero(r.A.rows(), r.C.rows()));
        g.G = Matrix::Zero(r.B.cols(), r.A.rows());
        return g;
    }
};

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

struct CertifiedBound {
    double gamma1 = 0.0;  ///< finite-horizon l2 gain of the observation error
    double gamma2 = 0.0;  ///< finite-horizon l2 gain of the observer state
    double gamma3 = 0.0;  ///< infinite-horizon gain of A_hat + B_hat G_hat
    double delta1 = 0.0;  ///< terminal observation error gain
    double delta2 = 0.0;  ///< terminal observer state gain
    double q0 = 0.0;      ///< largest eigenvalue of the Gramian of (I, A_hat)
    double epsilon = 0.0;
    double gammaK = 0.0;

    /// Plant-level bound on |x_t|_l2 for unit-ball initial deflections.
    double plant_bound() const { return gammaK * epsilon; }
};

/// sqrt((g1 + g2)^2 + (sqrt(q0) d1 + g3 d2)^2).
inline double compose_epsilon(double g1, double g2, double g3, double d1, double d2, double q0) {
    const double a = g1 + g2;
    const double b = std::sqrt(q0) * d1 + g3 * d2;
    return std::sqrt(a * a + b * b);
}

/// Exact induced norms of the closed reduced loop over the initial-condition
/// ellipsoid xi_hat_0 = E s, z_hat_0 = Z s with |s| <= 1.
inline CertifiedBound certify(const ReducedModel& r, const RetrofitGains& g, const Matrix& initial_map,
                              const Matrix& guess_map) {
    g.validate(r);
    const Index n = r.A.rows();
    if (initial_map.rows() != n || guess_map.rows() != n || guess_map.cols() != initial_map.cols()) {
        throw InvalidArgument("certify: initial/guess maps must be n_hat x k with equal k");
    }
    const Index k = initial_map.cols();
    const double rho_hat = spectral_radius(r.A);
    if (!(rho_hat < 1.0)) throw UnstableError("certify: reduced model is not stable", rho_hat);
    const Matrix Acl = r.A + r.B * g.G;
    const double rho_cl = spectral_radius(Acl);
    if (!(rho_cl < 1.0)) throw UnstableError("certify: reduced closed loop is not stable", rho_cl);

    Matrix Xi = initial_map;
    Matrix Z = guess_map;
    Matrix err_stack(n * g.tau, k);
    Matrix z_stack(n * g.tau, k);
    for (int t = 0; t < g.tau; ++t) {
        err_stack.middleRows(t * n, n) = Xi - Z;
        z_stack.middleRows(t * n, n) = Z;
        const Matrix Xi_next = r.A * Xi + r.B * g.F[t] * Z;
        const Matrix Z_next = g.H[t] * r.C * Xi + (r.A + r.B * g.F[t] - g.H[t] * r.C) * Z;
        Xi = Xi_next;
        Z = Z_next;
    }

    CertifiedBound b;
    b.gamma1 = max_singular_value(err_stack);
    b.gamma2 = max_singular_value(z_stack);
    b.delta1 = max_singular_value(Xi - Z);
    b.delta2 = max_singular_value(Z);
    b.gamma3 = n > 0 ? std::sqrt(max_symmetric_eigenvalue(solve_dlyap(Acl))) : 0.0;
    b.q0 = n > 0 ? max_symmetric_eigenvalue(solve_dlyap(r.A)) : 0.0;
    b.epsilon = compose_epsilon(b.gamma1, b.gamma2, b.gamma3, b.delta1, b.delta2, b.q0);
    return b;
}

/// h-infinity norm of W_K(z) = (zI - A_K)^{-1}(A_K - P Pdag A) P + P with
/// A_K = A + B F C.
inline double gamma_K(const DiscreteLTI& sys, const Matrix& F, const Projection& proj) {
    sys.validate();
    if (F.rows() != sys.inputs() || F.cols() != sys.outputs()) {
        throw InvalidArgument("gamma_K: preexisting gain must be inputs x outputs");
    }
    const Matrix AK = sys.A + sys.B * F * sys.C;
    const double rho = spectral_radius(AK);
    if (!(rho < 1.0)) throw UnstableError("gamma_K: preexisting closed loop is not stable", rho);
    const Index n = sys.states();
    const DiscreteLTI W(AK, (AK - proj.P * proj.Pdag * sys.A) * proj.P, Matrix::Identity(n, n), proj.P, sys.dt);
    return hinf_norm(W);
}

// ---------------------------------------------------------------------------
// Complete designs
// ---------------------------------------------------------------------------

struct DesignOptions {
    double state_weight = 1.0;  ///< W = state_weight * I on plant coordinates
    double input_weight = 1.0;  ///< R = input_weight * I
    bool plant_gain = true;     ///< compute gamma_K (an h-infinity norm on the full plant)
};

/// Everything needed to instantiate and certify one retrofit controller.
struct RetrofitDesign {
    Projection projection;
    PortSet ports;
    ReducedModel reduced;
    Matrix PdagB;
    Matrix Gamma;
    RetrofitGains gains;
    CertifiedBound bound;
    int nu = 0;
    Matrix fault_basis;     ///< orthonormal basis of the deflection domain X
    Matrix guess_operator;  ///< x_guess = guess_operator * x0
    double reduced_spectral_radius = 0.0;

    Index rank() const { return projection.rank(); }
    int tau() const { return gains.tau; }
};

/// Synthesizes G_hat, F_hat_t, H_hat_t for a given projection and certifies the
/// result, including gamma_K for the preexisting static gain `K`.
inline RetrofitDesign design_retrofit(const DiscreteLTI& sys, const Matrix& K, const Projection& proj,
                                      const PortSet& ports, int nu, int tau, const Matrix& fault_basis,
                                      const Matrix& guess_operator, const DesignOptions& opts = {}) {
    const Expansion e = expand(sys, proj, ports);
    const Index n = sys.states();
    const Index nj = ports.size();
    if (guess_operator.rows() != n || guess_operator.cols() != n) {
        throw InvalidArgument("design_retrofit: guess operator must be n x n");
    }
    RetrofitDesign d;
    d.projection = proj;
    d.ports = ports;
    d.reduced = e.reduced;
    d.PdagB = e.PdagB;
    d.Gamma = e.Gamma;
    d.nu = nu;
    d.fault_basis = fault_basis;
    d.guess_operator = guess_operator;
    d.reduced_spectral_radius = spectral_radius(e.reduced.A);

    const Matrix W = opts.state_weight * Matrix::Identity(n, n);
    const Matrix R = opts.input_weight * Matrix::Identity(nj, nj);
    const auto w = reduced_weights(proj.P, W, R);
    d.gains.tau = tau;
    d.gains.G = solve_dare(e.reduced.A, e.reduced.B, w.state, w.input).F;
    auto finite = design_finite_gains(e.reduced.A, e.reduced.B, e.reduced.C, tau, w);
    d.gains.F = std::move(finite.F);
    d.gains.H = std::move(finite.H);

    const Matrix E = proj.Pdag * fault_basis;
    const Matrix Z = proj.Pdag * guess_operator * fault_basis;
    d.bound = certify(e.reduced, d.gains, E, Z);
    if (opts.plant_gain) d.bound.gammaK = gamma_K(sys, K, proj);
    return d;
}

// ---------------------------------------------------------------------------
// Runtime
// ---------------------------------------------------------------------------

/// Switching retrofit controller: compensator state x_hat and observer state
/// z_hat. While t < tau the observer injects the filtered port output and
/// v_hat = F_hat_t z_hat; afterwards v_hat = G_hat z_hat, the injection is off,
/// and x_hat is frozen. One owner advances a controller.
class RetrofitController {
public:
    RetrofitController(ReducedModel reduced, Matrix PdagB, RetrofitGains gains, PortSet ports, Vector z0)
        : r_(std::move(reduced)), PdagB_(std::move(PdagB)), g_(std::move(gains)), ports_(std::move(ports)),
          xhat_(Vector::Zero(r_.A.rows())), zhat_(std::move(z0)) {
        g_.validate(r_);
        if (zhat_.size() != r_.A.rows()) throw InvalidArgument("RetrofitController: z0 has wrong dimension");
        if (PdagB_.rows() != r_.A.rows()) throw InvalidArgument("RetrofitController: Pdag B has wrong rows");
        if (r_.B.cols() != ports_.size() || r_.C.rows() != ports_.size()) {
            throw InvalidArgument("RetrofitController: port count does not match the reduced model");
        }
    }

    /// sigma_t.
    bool switching() const { return t_ < g_.tau; }

    /// v_hat_t from the current observer state.
    Vector control() const {
        return switching() ? Vector(g_.F[t_] * zhat_) : Vector(g_.G * zhat_);
    }

    /// Advances both states given the port measurement e_J^T y_t, the
    /// preexisting input v_t seen by the compensator, and the issued v_hat_t.
    void advance(const Vector& y_ports, const Vector& v, const Vector& vhat) {
        if (y_ports.size() != ports_.size()) throw InvalidArgument("RetrofitController: port output has wrong dimension");
        if (v.size() != PdagB_.cols()) throw InvalidArgument("RetrofitController: preexisting input has wrong dimension");
        if (vhat.size() != ports_.size()) throw InvalidArgument("RetrofitController: v_hat has wrong dimension");
        if (switching()) {
            const Vector innovation = y_ports - r_.C * (zhat_ + xhat_);
            zhat_ = r_.A * zhat_ + r_.B * vhat + g_.H[t_] * innovation;
            xhat_ = r_.A * xhat_ + PdagB_ * v;
        } else {
            zhat_ = r_.A * zhat_ + r_.B * vhat;
        }
        ++t_;
    }

    Vector step(const Vector& y_ports, const Vector& v) {
        const Vector vhat = control();
        advance(y_ports, v, vhat);
        return vhat;
    }

    const Vector& xhat() const { return xhat_; }
    const Vector& zhat() const { return zhat_; }
    long time() const { return t_; }
    int tau() const { return g_.tau; }
    const PortSet& ports() const { return ports_; }
    Index input_dim() const { return PdagB_.cols(); }
    const ReducedModel& reduced() const { return r_; }
    const RetrofitGains& gains() const { return g_; }

private:
    ReducedModel r_;
    Matrix PdagB_;
    RetrofitGains g_;
    PortSet ports_;
    Vector xhat_;
    Vector zhat_;
    long t_ = 0;
};

/// Controller with x_hat_0 = 0 and z_hat_0 = Pdag x_guess.
inline RetrofitController make_controller(const RetrofitDesign& d, const Vector& x_guess) {
    if (x_guess.size() != d.projection.states()) throw InvalidArgument("make_controller: guess has wrong dimension");
    return RetrofitController(d.reduced, d.PdagB, d.gains, d.ports, d.projection.Pdag * x_guess);
}

/// Controller with an explicit observer initial state.
inline RetrofitController make_controller(const ReducedModel& r, const Matrix& PdagB, const RetrofitGains& g,
                                          const PortSet& ports, const Vector& z0) {
    return RetrofitController(r, PdagB, g, ports, z0);
}

/// Several retrofit controllers on disjoint port sets. Each compensator sees
/// the preexisting input plus every other controller's port-mapped input.
class RetrofitBank {
public:
    RetrofitBank() = default;
    RetrofitBank(std::vector<RetrofitController> ctrls, Index inputs, Index outputs)
        : ctrls_(std::move(ctrls)), inputs_(inputs), outputs_(outputs) {
        for (std::size_t i = 0; i < ctrls_.size(); ++i) {
            ctrls_[i].ports().validate(std::min(inputs, outputs));
            if (ctrls_[i].input_dim() != inputs) {
                throw InvalidArgument("RetrofitBank: controller input dimension does not match the plant");
            }
            for (std::size_t j = 0; j < i; ++j) {
                if (ctrls_[i].ports().overlaps(ctrls_[j].ports())) {
                    throw InvalidArgument("RetrofitBank: port sets overlap");
                }
            }
        }
        last_.resize(ctrls_.size());
    }

    /// Total retrofit input sum_i e_{J_i} v_hat_i for output y and preexisting input v.
    Vector step(const Vector& y, const Vector& v) {
        if (y.size() != outputs_ || v.size() != inputs_) throw InvalidArgument("RetrofitBank: signal dimension mismatch");
        Vector total = Vector::Zero(inputs_);
        for (std::size_t i = 0; i < ctrls_.size(); ++i) {
            last_[i] = ctrls_[i].control();
            scatter(ctrls_[i].ports(), last_[i], total);
        }
        for (std::size_t i = 0; i < ctrls_.size(); ++i) {
            Vector seen = v + total;
            Vector own = Vector::Zero(inputs_);
            scatter(ctrls_[i].ports(), last_[i], own);
            seen -= own;
            ctrls_[i].advance(gather(ctrls_[i].ports(), y), seen, last_[i]);
        }
        return total;
    }

    std::size_t size() const { return ctrls_.size(); }
    bool empty() const { return ctrls_.empty(); }
    const RetrofitController& operator[](std::size_t i) const { return ctrls_[i]; }
    const std::vector<Vector>& last_inputs() const { return last_; }

    static Vector gather(const PortSet& ports, const Vector& y) {
        Vector out(ports.size());
        for (Index j = 0; j < ports.size(); ++j) out(j) = y(ports.indices[j]);
        return out;
    }

    static void scatter(const PortSet& ports, const Vector& vals, Vector& into) {
        for (Index j = 0; j < ports.size(); ++j) into(ports.indices[j]) += vals(j);
    }

private:
    std::vector<RetrofitController> ctrls_;
    Index inputs_ = 0;
    Index outputs_ = 0;
    std::vector<Vector> last_;
};

inline RetrofitBank compose_retrofits(std::vector<RetrofitController> ctrls, Index inputs, Index outputs) {
    return RetrofitBank(std::move(ctrls), inputs, outputs);
}

// ---------------------------------------------------------------------------
// Closed-loop assembly
// ---------------------------------------------------------------------------

enum class SwitchPhase {
    observing,   ///< sigma = 1 with F_hat_0, H_hat_0 frozen
    persistent,  ///< sigma = 0
};

/// State matrix of plant + static preexisting gain K + retrofit controllers,
/// each realized with its full compensator (including the Gamma x channel),
/// over the state [x; x_hat_1; z_hat_1; x_hat_2; z_hat_2; ...].
inline Matrix closed_loop_matrix(const DiscreteLTI& sys, const Matrix& K, std::span<const RetrofitDesign> designs,
                                 SwitchPhase phase) {
    sys.validate();
    const Index n = sys.states();
    const Index m = sys.inputs();
    std::vector<Index> offset;
    Index total = n;
    for (const auto& d : designs) {
        offset.push_back(total);
        total += 2 * d.rank();
    }
    // v_hat_i = L_i z_hat_i.
    auto law = [&](const RetrofitDesign& d) -> Matrix {
        if (phase == SwitchPhase::observing && d.gains.tau > 0) return d.gains.F[0];
        return d.gains.G;
    };

    // Total plant input u = K C x + sum_i E_i L_i z_hat_i, as a row block over the full state.
    Matrix U = Matrix::Zero(m, total);
    U.leftCols(n) = K * sys.C;
    for (std::size_t i = 0; i < designs.size(); ++i) {
        const auto& d = designs[i];
        U.middleCols(offset[i] + d.rank(), d.rank()) = d.ports.selector(m) * law(d);
    }

    Matrix M = Matrix::Zero(total, total);
    M.topRows(n) = sys.B * U;
    M.topLeftCorner(n, n) += sys.A;
    for (std::size_t i = 0; i < designs.size(); ++i) {
        const auto& d = designs[i];
        const Index k = d.rank();
        const Index ox = offset[i];
        const Index oz = offset[i] + k;
        const Matrix Ei = d.ports.selector(m);
        // Compensator input: everything the plant receives except this controller's own injection.
        Matrix seen = U;
        seen.middleCols(oz, k) -= Ei * law(d);
        M.middleRows(ox, k) = d.PdagB * seen;
        M.block(ox, 0, k, n) += d.Gamma;
        M.block(ox, ox, k, k) += d.reduced.A;

        M.block(oz, oz, k, k) = d.reduced.A + d.reduced.B * law(d);
        if (phase == SwitchPhase::observing && d.gains.tau > 0) {
            const Matrix& H = d.gains.H[0];
            const Matrix CJ = d.ports.selector(sys.outputs()).transpose() * sys.C;
            M.block(oz, 0, k, n) += H * CJ;
            M.block(oz, ox, k, k) -= H * d.reduced.C;
            M.block(oz, oz, k, k) -= H * d.reduced.C;
        }
    }
    return M;
}

/// Reduced observer-feedback loop [[A, B F], [H C, A + B F - H C]] with the
/// first-step gains (sigma = 1), or A_hat + B_hat G_hat (sigma = 0).
inline Matrix reduced_loop_matrix(const RetrofitDesign& d, SwitchPhase phase) {
    const auto& r = d.reduced;
    if (phase == SwitchPhase::persistent || d.gains.tau == 0) return r.A + r.B * d.gains.G;
    const Index k = r.A.rows();
    const Matrix& F = d.gains.F[0];
    const Matrix& H = d.gains.H[0];
    Matrix M(2 * k, 2 * k);
    M << r.A, r.B * F, H * r.C, r.A + r.B * F - H * r.C;
    return M;
}

// ---------------------------------------------------------------------------
// Deflections outside im P
// ---------------------------------------------------------------------------

struct GeneralizedBound {
    Vector controllable;  ///< P xi_hat_0
    Vector residual;      ///< Pbar xi_hat_0'
    double residual_l2 = 0.0;
    double value = 0.0;   ///< |A_K^t Pbar xi_hat_0'|_l2 + gamma_K epsilon
};

inline GeneralizedBound generalized_bound(const DiscreteLTI& sys, const Matrix& K, const Projection& proj,
                                          const Vector& x0, double epsilon, double gammaK) {
    sys.validate();
    if (x0.size() != sys.states()) throw InvalidArgument("generalized_bound: x0 has wrong dimension");
    const Matrix AK = sys.A + sys.B * K * sys.C;
    GeneralizedBound g;
    g.controllable = proj.P * (proj.Pdag * x0);
    g.residual = proj.Pbar * (proj.Pbar_dag * x0);
    g.residual_l2 = free_response_l2(AK, g.residual);
    g.value = g.residual_l2 + gammaK * epsilon;
    return g;
}

}  // namespace retrofit
