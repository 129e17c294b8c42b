#pragma once

// Linear time-invariant systems: representations, zero-order-hold
// discretization, discrete Lyapunov/Riccati solvers, h-infinity and l2 norms,
// and open-loop simulation.

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "retrofit/errors.hpp"

namespace retrofit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using ComplexMatrix = Eigen::MatrixXcd;

// ---------------------------------------------------------------------------
// Small dense helpers shared by every module
// ---------------------------------------------------------------------------

inline bool all_finite(const Matrix& M) { return M.allFinite(); }

inline Matrix symmetrize(const Matrix& M) { return 0.5 * (M + M.transpose()); }

/// Largest eigenvalue modulus; 0 for an empty matrix.
inline double spectral_radius(const Matrix& A) {
    if (A.rows() != A.cols()) {
        throw InvalidArgument("spectral_radius: matrix must be square");
    }
    if (A.size() == 0) return 0.0;
    if (!A.allFinite()) return std::numeric_limits<double>::infinity();
    Eigen::EigenSolver<Matrix> es(A, /*computeEigenvectors=*/false);
    if (es.info() != Eigen::Success) {
        throw NumericalError("spectral_radius: eigenvalue iteration failed");
    }
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Largest singular value (induced 2-norm); 0 for an empty matrix.
inline double max_singular_value(const Matrix& M) {
    if (M.size() == 0) return 0.0;
    Eigen::JacobiSVD<Matrix> svd(M);
    return svd.singularValues()(0);
}

/// Largest eigenvalue of a symmetric matrix.
inline double max_symmetric_eigenvalue(const Matrix& S) {
    if (S.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(S), Eigen::EigenvaluesOnly);
    return es.eigenvalues().maxCoeff();
}

/// Orthonormal basis of the orthogonal complement of im(M) (n x (n - rank)).
inline Matrix orthogonal_complement(const Matrix& M) {
    const Index n = M.rows();
    if (M.cols() == 0) return Matrix::Identity(n, n);
    Eigen::JacobiSVD<Matrix> svd(M, Eigen::ComputeFullU);
    const auto& s = svd.singularValues();
    const double tol = std::max<double>(M.rows(), M.cols()) * s(0) *
                       std::numeric_limits<double>::epsilon();
    Index rank = 0;
    while (rank < s.size() && s(rank) > tol) ++rank;
    return svd.matrixU().rightCols(n - rank);
}

inline Index numerical_rank(const Matrix& M, double rel_tol = 1e-10) {
    if (M.size() == 0) return 0;
    Eigen::JacobiSVD<Matrix> svd(M);
    const auto& s = svd.singularValues();
    if (s(0) == 0.0) return 0;
    Index r = 0;
    while (r < s.size() && s(r) > rel_tol * s(0)) ++r;
    return r;
}

// ---------------------------------------------------------------------------
// System representations
// ---------------------------------------------------------------------------

/// x' = A x + B u, y = C x (continuous time, units 1/sec).
struct ContinuousLTI {
    Matrix A;
    Matrix B;
    Matrix C;

    Index states() const { return A.rows(); }
    Index inputs() const { return B.cols(); }
    Index outputs() const { return C.rows(); }

    void validate() const {
        if (A.rows() != A.cols()) throw InvalidArgument("ContinuousLTI: A must be square");
        if (B.rows() != A.rows()) throw InvalidArgument("ContinuousLTI: B rows must equal the state dimension");
        if (C.cols() != A.rows()) throw InvalidArgument("ContinuousLTI: C columns must equal the state dimension");
        if (!A.allFinite() || !B.allFinite() || !C.allFinite()) {
            throw InvalidArgument("ContinuousLTI: non-finite entries");
        }
    }
};

/// x_{t+1} = A x_t + B u_t, y_t = C x_t + D u_t with sampling period dt.
///
/// D defaults to zero and is only used by frequency-domain norms.
struct DiscreteLTI {
    Matrix A;
    Matrix B;
    Matrix C;
    Matrix D;
    double dt = 1.0;

    DiscreteLTI() = default;
    DiscreteLTI(Matrix a, Matrix b, Matrix c, double sample = 1.0)
        : A(std::move(a)), B(std::move(b)), C(std::move(c)), dt(sample) {
        D = Matrix::Zero(C.rows(), B.cols());
    }
    DiscreteLTI(Matrix a, Matrix b, Matrix c, Matrix d, double sample)
        : A(std::move(a)), B(std::move(b)), C(std::move(c)), D(std::move(d)), dt(sample) {}

    Index states() const { return A.rows(); }
    Index inputs() const { return B.cols(); }
    Index outputs() const { return C.rows(); }

    void validate() const {
        if (A.rows() != A.cols()) throw InvalidArgument("DiscreteLTI: A must be square");
        if (B.rows() != A.rows()) throw InvalidArgument("DiscreteLTI: B rows must equal the state dimension");
        if (C.cols() != A.rows()) throw InvalidArgument("DiscreteLTI: C columns must equal the state dimension");
        if (D.rows() != C.rows() || D.cols() != B.cols()) {
            throw InvalidArgument("DiscreteLTI: D must be outputs x inputs");
        }
        if (!(dt > 0.0)) throw InvalidArgument("DiscreteLTI: sampling period must be positive");
        if (!A.allFinite() || !B.allFinite() || !C.allFinite() || !D.allFinite()) {
            throw InvalidArgument("DiscreteLTI: non-finite entries");
        }
    }
};

/// Recorded signals of a discrete-time run. `states` holds x_0..x_T, so it has
/// one more entry than `inputs`; `outputs` is sampled alongside `states`.
struct Trajectory {
    std::vector<Vector> states;
    std::vector<Vector> inputs;
    std::vector<Vector> outputs;
    double dt = 1.0;

    std::size_t steps() const { return inputs.size(); }
};

// ---------------------------------------------------------------------------
// Discretization
// ---------------------------------------------------------------------------

/// Zero-order-hold equivalent: A = exp(Ac dt), B = (int_0^dt exp(Ac s) ds) Bc.
///
/// Both blocks come from one exponential of the augmented matrix
/// [[Ac, Bc], [0, 0]] dt (scaling and squaring with Pade approximants).
inline DiscreteLTI zoh_discretize(const ContinuousLTI& sys, double dt) {
    sys.validate();
    if (!(dt > 0.0) || !std::isfinite(dt)) {
        throw InvalidArgument("zoh_discretize: dt must be positive and finite");
    }
    const Index n = sys.states();
    const Index m = sys.inputs();
    Matrix aug = Matrix::Zero(n + m, n + m);
    aug.topLeftCorner(n, n) = sys.A * dt;
    aug.topRightCorner(n, m) = sys.B * dt;
    const Matrix E = aug.exp();
    if (!E.allFinite()) {
        throw NumericalError("zoh_discretize: matrix exponential overflowed");
    }
    return DiscreteLTI(E.topLeftCorner(n, n), E.topRightCorner(n, m), sys.C, dt);
}

// ---------------------------------------------------------------------------
// Matrix equations
// ---------------------------------------------------------------------------

/// Solves A^T Q A + W = Q for Schur-stable A by the doubling iteration
///   A_{k+1} = A_k^2,  Q_{k+1} = A_k^T Q_k A_k + Q_k.
inline Matrix solve_dlyap(const Matrix& A, const Matrix& W) {
    if (A.rows() != A.cols()) throw InvalidArgument("solve_dlyap: A must be square");
    if (W.rows() != A.rows() || W.cols() != A.cols()) {
        throw InvalidArgument("solve_dlyap: weight must match A");
    }
    if (A.size() == 0) return Matrix(0, 0);
    const double rho = spectral_radius(A);
    if (rho >= 1.0) throw UnstableError("solve_dlyap: A is not Schur stable", rho);

    constexpr int kMaxIterations = 128;
    constexpr double kTolerance = 1e-14;
    Matrix Q = symmetrize(W);
    Matrix Ak = A;
    for (int k = 0; k < kMaxIterations; ++k) {
        const Matrix increment = Ak.transpose() * Q * Ak;
        Q += increment;
        if (!Q.allFinite()) throw NumericalError("solve_dlyap: iteration overflowed");
        if (increment.norm() <= kTolerance * Q.norm()) return symmetrize(Q);
        Ak = Ak * Ak;
    }
    throw SolverFailure("solve_dlyap: doubling iteration did not converge", kMaxIterations);
}

/// Solves A^T Q A + I = Q.
inline Matrix solve_dlyap(const Matrix& A) {
    return solve_dlyap(A, Matrix::Identity(A.rows(), A.cols()));
}

struct DareOptions {
    double tolerance = 1e-12;
    int max_iterations = 100000;
};

struct DareSolution {
    Matrix X;  ///< stabilizing solution of the Riccati equation
    Matrix F;  ///< feedback gain, u = F x
    int iterations = 0;
};

/// Discrete algebraic Riccati equation
///   X = A^T X A - A^T X B (R + B^T X B)^{-1} B^T X A + Q,
/// with F = -(R + B^T X B)^{-1} B^T X A.
///
/// The Riccati fixed-point map is iterated in its structure-preserving doubling
/// form: iterate k of the doubling sequence equals iterate 2^k of the plain
/// recursion started at X = Q, so convergence is quadratic.
inline DareSolution solve_dare(const Matrix& A, const Matrix& B, const Matrix& Qw, const Matrix& Rw,
                               const DareOptions& opts = {}) {
    const Index n = A.rows();
    const Index m = B.cols();
    if (A.cols() != n || B.rows() != n) throw InvalidArgument("solve_dare: inconsistent A/B");
    if (Qw.rows() != n || Qw.cols() != n) throw InvalidArgument("solve_dare: state weight must be n x n");
    if (Rw.rows() != m || Rw.cols() != m) throw InvalidArgument("solve_dare: input weight must be m x m");

    Eigen::LLT<Matrix> r_llt(symmetrize(Rw));
    if (r_llt.info() != Eigen::Success) {
        throw InvalidArgument("solve_dare: input weight must be positive definite");
    }
    const Matrix I = Matrix::Identity(n, n);
    Matrix Ak = A;
    Matrix G = B * r_llt.solve(B.transpose());
    Matrix H = symmetrize(Qw);

    DareSolution out;
    bool converged = false;
    for (int k = 0; k < opts.max_iterations; ++k) {
        Eigen::PartialPivLU<Matrix> lu(I + G * H);
        const Matrix W_A = lu.solve(Ak);
        const Matrix W_G = lu.solve(G);
        const Matrix H_next = symmetrize(H + Ak.transpose() * H * W_A);
        G = symmetrize(G + Ak * W_G * Ak.transpose());
        Ak = Ak * W_A;
        const double change = (H_next - H).norm();
        H = H_next;
        out.iterations = k + 1;
        if (!H.allFinite() || !G.allFinite() || !Ak.allFinite()) {
            throw SolverFailure("solve_dare: iteration diverged", out.iterations);
        }
        if (change <= opts.tolerance * std::max(1.0, H.norm())) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        throw SolverFailure("solve_dare: no convergence within the iteration budget", out.iterations);
    }
    out.X = H;
    const Matrix BtX = B.transpose() * out.X;
    out.F = -(Rw + BtX * B).ldlt().solve(BtX * A);
    const double rho = spectral_radius(A + B * out.F);
    if (!(rho < 1.0)) {
        throw SolverFailure("solve_dare: solution is not stabilizing (closed-loop spectral radius " +
                                std::to_string(rho) + ")",
                            out.iterations);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Frequency response and h-infinity norm
// ---------------------------------------------------------------------------

namespace detail {

/// Evaluates C (zI - A)^{-1} B + D on the unit circle through a Hessenberg
/// reduction of A, so each point costs O(n^2 m) instead of a dense LU.
class UnitCircleResponse {
public:
    explicit UnitCircleResponse(const DiscreteLTI& sys) : D_(sys.D.cast<std::complex<double>>()) {
        Eigen::HessenbergDecomposition<Matrix> hd(sys.A);
        H_ = hd.matrixH();
        const Matrix Qh = hd.matrixQ();
        Bt_ = (Qh.transpose() * sys.B).cast<std::complex<double>>();
        Ct_ = (sys.C * Qh).cast<std::complex<double>>();
    }

    ComplexMatrix response(double theta) const {
        using cplx = std::complex<double>;
        const Index n = H_.rows();
        const cplx z = std::polar(1.0, theta);
        ComplexMatrix M = -H_.cast<cplx>();
        M.diagonal().array() += z;
        ComplexMatrix X = Bt_;
        // Gaussian elimination on an upper Hessenberg matrix: only the
        // sub-diagonal entry needs eliminating, pivoting between adjacent rows.
        for (Index k = 0; k + 1 < n; ++k) {
            if (std::abs(M(k + 1, k)) > std::abs(M(k, k))) {
                M.row(k).tail(n - k).swap(M.row(k + 1).tail(n - k));
                X.row(k).swap(X.row(k + 1));
            }
            if (M(k + 1, k) == cplx(0.0)) continue;
            const cplx l = M(k + 1, k) / M(k, k);
            M.row(k + 1).tail(n - k) -= l * M.row(k).tail(n - k);
            X.row(k + 1) -= l * X.row(k);
        }
        for (Index k = n - 1; k >= 0; --k) {
            if (k + 1 < n) X.row(k) -= M.row(k).tail(n - k - 1) * X.bottomRows(n - k - 1);
            X.row(k) /= M(k, k);
        }
        return Ct_ * X + D_;
    }

    double gain(double theta) const {
        const ComplexMatrix G = response(theta);
        if (G.size() == 0) return 0.0;
        // Largest singular value from the smaller Gram matrix.
        const ComplexMatrix gram = G.rows() >= G.cols() ? ComplexMatrix(G.adjoint() * G)
                                                        : ComplexMatrix(G * G.adjoint());
        Eigen::SelfAdjointEigenSolver<ComplexMatrix> es(gram, Eigen::EigenvaluesOnly);
        return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
    }

private:
    Matrix H_;
    ComplexMatrix Bt_;
    ComplexMatrix Ct_;
    ComplexMatrix D_;
};

inline double golden_section_max(const UnitCircleResponse& f, double a, double b, double tol,
                                 double& best_theta) {
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = f.gain(c);
    double fd = f.gain(d);
    while (b - a > tol) {
        if (fc >= fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f.gain(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f.gain(d);
        }
    }
    best_theta = fc >= fd ? c : d;
    return std::max(fc, fd);
}

}  // namespace detail

/// C (e^{j theta} I - A)^{-1} B + D.
inline ComplexMatrix frequency_response(const DiscreteLTI& sys, double theta) {
    sys.validate();
    return detail::UnitCircleResponse(sys).response(theta);
}

struct HinfOptions {
    int grid_points = 4096;
    int refine_candidates = 8;
    double angle_tolerance = 1e-10;
};

/// sup over theta of the largest singular value of the frequency response.
///
/// Coarse grid on [0, pi] (real systems are conjugate symmetric), seeded with
/// the pole angles, followed by golden-section refinement of the best local
/// maxima.
inline double hinf_norm(const DiscreteLTI& sys, const HinfOptions& opts = {}) {
    sys.validate();
    const double rho = spectral_radius(sys.A);
    if (!(rho < 1.0)) throw UnstableError("hinf_norm: system is not stable", rho);
    if (sys.outputs() == 0 || sys.inputs() == 0) return 0.0;

    const detail::UnitCircleResponse f(sys);
    const double pi = std::numbers::pi;
    const int npts = std::max(opts.grid_points, 3);
    const double h = pi / (npts - 1);

    std::vector<double> grid(npts);
    for (int k = 0; k < npts; ++k) grid[k] = f.gain(h * k);

    struct Candidate {
        double theta;
        double value;
    };
    std::vector<Candidate> cands;
    for (int k = 0; k < npts; ++k) {
        const bool left_ok = k == 0 || grid[k] >= grid[k - 1];
        const bool right_ok = k == npts - 1 || grid[k] >= grid[k + 1];
        if (left_ok && right_ok) cands.push_back({h * k, grid[k]});
    }
    if (sys.states() > 0) {
        Eigen::EigenSolver<Matrix> es(sys.A, false);
        for (Index i = 0; i < es.eigenvalues().size(); ++i) {
            const double th = std::abs(std::arg(es.eigenvalues()(i)));
            cands.push_back({th, f.gain(th)});
        }
    }
    std::sort(cands.begin(), cands.end(),
              [](const Candidate& a, const Candidate& b) { return a.value > b.value; });
    if (static_cast<int>(cands.size()) > opts.refine_candidates) cands.resize(opts.refine_candidates);

    double best = *std::max_element(grid.begin(), grid.end());
    for (const auto& c : cands) {
        best = std::max(best, c.value);
        const double a = std::max(0.0, c.theta - h);
        const double b = std::min(pi, c.theta + h);
        double theta_star = c.theta;
        best = std::max(best, detail::golden_section_max(f, a, b, opts.angle_tolerance, theta_star));
    }
    return best;
}

// ---------------------------------------------------------------------------
// Simulation and l2 norms
// ---------------------------------------------------------------------------

/// Applies x_{t+1} = A x_t + B u_t, y_t = C x_t for every supplied input.
inline Trajectory simulate(const DiscreteLTI& sys, const Vector& x0, std::span<const Vector> inputs) {
    sys.validate();
    if (x0.size() != sys.states()) throw InvalidArgument("simulate: x0 has wrong dimension");
    Trajectory traj;
    traj.dt = sys.dt;
    traj.states.reserve(inputs.size() + 1);
    traj.outputs.reserve(inputs.size() + 1);
    traj.inputs.reserve(inputs.size());
    Vector x = x0;
    for (const auto& u : inputs) {
        if (u.size() != sys.inputs()) throw InvalidArgument("simulate: input has wrong dimension");
        traj.states.push_back(x);
        traj.outputs.push_back(sys.C * x);
        traj.inputs.push_back(u);
        x = sys.A * x + sys.B * u;
    }
    traj.states.push_back(x);
    traj.outputs.push_back(sys.C * x);
    return traj;
}

/// Finite-horizon l2 norm sqrt(sum_{t=0}^{T} |f_t|^2).
inline double l2_norm(std::span<const Vector> seq, std::size_t horizon) {
    if (horizon >= seq.size()) {
        throw InvalidArgument("l2_norm: horizon exceeds the sequence length");
    }
    double acc = 0.0;
    for (std::size_t t = 0; t <= horizon; ++t) acc += seq[t].squaredNorm();
    return std::sqrt(acc);
}

inline constexpr double kTailEnergyTolerance = 1e-12;

/// Infinite-horizon l2 norm of a recorded sequence. The recording must reach a
/// point where the trailing energy is below 1e-12 of the accumulated energy;
/// otherwise the sequence is treated as non-convergent.
inline double l2_norm(std::span<const Vector> seq) {
    double total = 0.0;
    for (const auto& f : seq) total += f.squaredNorm();
    if (!std::isfinite(total)) throw NumericalError("l2_norm: sequence energy is not finite");
    if (total == 0.0) return 0.0;
    if (seq.back().squaredNorm() > kTailEnergyTolerance * total) {
        throw NumericalError("l2_norm: sequence energy has not converged");
    }
    return std::sqrt(total);
}

/// l2 norm of the free response x_{t+1} = A x_t, truncated once the remaining
/// tail energy x_t^T Q x_t (Q the observability Gramian of (I, A)) is below
/// 1e-12 of the accumulated energy. Hard cap of `max_steps`.
inline double free_response_l2(const Matrix& A, const Vector& x0, std::size_t max_steps = 1000000) {
    if (A.rows() != A.cols() || x0.size() != A.rows()) {
        throw InvalidArgument("free_response_l2: dimension mismatch");
    }
    if (x0.size() == 0 || x0.squaredNorm() == 0.0) return 0.0;
    const Matrix Q = solve_dlyap(A);
    Vector x = x0;
    double acc = 0.0;
    for (std::size_t t = 0; t < max_steps; ++t) {
        const double tail = x.dot(Q * x);
        if (tail <= kTailEnergyTolerance * acc) return std::sqrt(acc);
        acc += x.squaredNorm();
        if (!std::isfinite(acc)) throw NumericalError("free_response_l2: response diverged");
        x = A * x;
    }
    throw NumericalError("free_response_l2: energy did not converge within the step cap");
}

}  // namespace retrofit
