#pragma once

// Left-invertible projections P with left inverse P^dagger built from Krylov
// bases of the port input/output channels through biconjugation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "retrofit/lti.hpp"

namespace retrofit::proj {

/// Ordered set of input/output channel indices (0-based) used as ports.
struct PortSet {
    std::vector<Index> indices;

    Index size() const { return static_cast<Index>(indices.size()); }

    void validate(Index channels) const {
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] < 0 || indices[i] >= channels) {
                throw InvalidArgument("PortSet: index " + std::to_string(indices[i]) + " out of range");
            }
            for (std::size_t j = 0; j < i; ++j) {
                if (indices[i] == indices[j]) {
                    throw InvalidArgument("PortSet: duplicate index " + std::to_string(indices[i]));
                }
            }
        }
    }

    /// Columns of the identity associated with the ports (channels x |J|).
    Matrix selector(Index channels) const {
        validate(channels);
        Matrix E = Matrix::Zero(channels, size());
        for (Index j = 0; j < size(); ++j) E(indices[j], j) = 1.0;
        return E;
    }

    bool overlaps(const PortSet& other) const {
        for (Index a : indices) {
            if (std::find(other.indices.begin(), other.indices.end(), a) != other.indices.end()) return true;
        }
        return false;
    }
};

/// P (n x k), its left inverse Pdag = D^{-1} Q^T, the biconjugation pivots D,
/// and a complement pair with P Pdag + Pbar Pbar_dag = I.
struct Projection {
    Matrix P;
    Matrix Pdag;
    Vector D;
    Matrix Pbar;
    Matrix Pbar_dag;

    Index states() const { return P.rows(); }
    Index rank() const { return P.cols(); }

    static Projection identity(Index n) {
        Projection p;
        p.P = Matrix::Identity(n, n);
        p.Pdag = Matrix::Identity(n, n);
        p.D = Vector::Ones(n);
        p.Pbar = Matrix(n, 0);
        p.Pbar_dag = Matrix(0, n);
        return p;
    }

    /// Oblique projector onto im P along ker Pdag.
    Matrix projector() const { return P * Pdag; }

    double left_inverse_error() const {
        return (Pdag * P - Matrix::Identity(rank(), rank())).norm();
    }

    double resolution_error() const {
        return (P * Pdag + Pbar * Pbar_dag - Matrix::Identity(states(), states())).norm();
    }
};

struct ReducedModel {
    Matrix A;  ///< Pdag A P
    Matrix B;  ///< Pdag B e_J
    Matrix C;  ///< e_J^T C P
};

namespace detail {

inline constexpr double kDependenceTolerance = 1e-10;

/// Incrementally grown orthonormal basis. Candidates whose residual after
/// projection onto the current span is below `tol` of their norm are dropped.
class SpanBuilder {
public:
    explicit SpanBuilder(Index n, double tol = kDependenceTolerance) : n_(n), tol_(tol) {}

    /// Adds `v`; returns the new unit vector, or an empty vector if dependent.
    Vector add(const Vector& v) {
        const double norm = v.norm();
        if (!(norm > 0.0) || !std::isfinite(norm)) return {};
        Vector r = v;
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& q : basis_) r -= q.dot(r) * q;
        }
        const double rn = r.norm();
        if (rn <= tol_ * norm) return {};
        r /= rn;
        basis_.push_back(r);
        return r;
    }

    Index size() const { return static_cast<Index>(basis_.size()); }

    Matrix matrix() const {
        Matrix M(n_, size());
        for (Index j = 0; j < size(); ++j) M.col(j) = basis_[j];
        return M;
    }

private:
    Index n_;
    double tol_;
    std::vector<Vector> basis_;
};

/// Orthonormal basis of span(prefix) + span{S, A S, ..., A^{depth-1} S} with
/// the cumulative size after each Krylov level recorded.
struct LeveledBasis {
    Matrix basis;
    std::vector<Index> level_end;  ///< basis size after level k (prefix counted in level 0)
    bool saturated = false;        ///< Krylov space stopped growing before `depth`
};

inline LeveledBasis leveled_krylov(const Matrix& A, const Matrix& start, int depth, const Matrix& prefix,
                                   Index stop_after = std::numeric_limits<Index>::max()) {
    const Index n = A.rows();
    SpanBuilder propagation(n);  // Krylov space alone; deflation is only valid here
    SpanBuilder out(n);
    for (Index j = 0; j < prefix.cols(); ++j) out.add(prefix.col(j));

    LeveledBasis result;
    std::vector<Vector> seeds;
    for (Index j = 0; j < start.cols(); ++j) seeds.push_back(start.col(j));
    for (int level = 0; level < depth; ++level) {
        std::vector<Vector> accepted;
        for (const auto& c : seeds) {
            Vector q = propagation.add(level == 0 ? c : Vector(A * c));
            if (q.size() == 0) continue;
            out.add(q);
            accepted.push_back(std::move(q));
        }
        result.level_end.push_back(out.size());
        if (accepted.empty()) {
            result.saturated = true;
            break;
        }
        if (out.size() >= stop_after) break;
        seeds = std::move(accepted);
    }
    if (depth > 0 && !result.saturated && static_cast<int>(result.level_end.size()) == depth) {
        // One look-ahead product decides whether the space is already invariant.
        bool grows = false;
        SpanBuilder probe = propagation;
        for (const auto& c : seeds) {
            if (probe.add(Vector(A * c)).size() != 0) {
                grows = true;
                break;
            }
        }
        result.saturated = !grows;
    }
    result.basis = out.matrix();
    return result;
}

/// [S, A S, ..., A^{levels-1} S] with every column scaled to unit length.
inline Matrix normalized_krylov_stack(const Matrix& A, const Matrix& start, int levels) {
    Matrix stack(A.rows(), start.cols() * levels);
    Matrix block = start;
    for (int k = 0; k < levels; ++k) {
        for (Index j = 0; j < block.cols(); ++j) {
            const double nrm = block.col(j).norm();
            if (nrm > 0.0) block.col(j) /= nrm;
        }
        stack.middleCols(k * start.cols(), start.cols()) = block;
        block = A * block;
    }
    return stack;
}

/// Extends the orthonormal `basis` to `target` columns. Each tier of candidate
/// vectors is projected onto the orthogonal complement of the current span and
/// its leading left singular vectors are taken first; identity columns close
/// any remaining gap.
inline Matrix pad_basis(const Matrix& basis, Index target, const std::vector<Matrix>& tiers) {
    const Index n = basis.rows();
    SpanBuilder b(n);
    for (Index j = 0; j < basis.cols(); ++j) b.add(basis.col(j));
    for (const auto& tier : tiers) {
        if (b.size() >= target) break;
        if (tier.cols() == 0) continue;
        const Matrix Qb = b.matrix();
        Matrix cand = tier;
        for (Index j = 0; j < cand.cols(); ++j) {
            const double nrm = cand.col(j).norm();
            if (nrm > 0.0) cand.col(j) /= nrm;
        }
        cand -= Qb * (Qb.transpose() * cand);
        Eigen::JacobiSVD<Matrix> svd(cand, Eigen::ComputeThinU);
        const auto& s = svd.singularValues();
        for (Index i = 0; i < s.size() && b.size() < target; ++i) {
            if (s(i) <= 1e-8) break;
            b.add(svd.matrixU().col(i));
        }
    }
    if (b.size() < target) {
        const Matrix Qb = b.matrix();
        const Matrix resid = Matrix::Identity(n, n) - Qb * Qb.transpose();
        std::vector<Index> order(n);
        std::iota(order.begin(), order.end(), Index{0});
        std::stable_sort(order.begin(), order.end(), [&](Index a, Index c) {
            return resid.col(a).norm() > resid.col(c).norm();
        });
        for (Index i : order) {
            if (b.size() >= target) break;
            b.add(Matrix::Identity(n, n).col(i));
        }
    }
    return b.matrix();
}

inline double relative_image_residual(const Matrix& projector, const Matrix& M) {
    if (M.cols() == 0) return 0.0;
    Matrix normalized = M;
    for (Index j = 0; j < normalized.cols(); ++j) {
        const double nrm = normalized.col(j).norm();
        if (nrm > 0.0) normalized.col(j) /= nrm;
    }
    const double denom = normalized.norm();
    if (denom == 0.0) return 0.0;
    const Matrix I = Matrix::Identity(projector.rows(), projector.cols());
    return ((I - projector) * normalized).norm() / denom;
}

inline double relative_kernel_residual(const Matrix& projector, const Matrix& N) {
    return relative_image_residual(projector.transpose(), N.transpose());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Krylov bases
// ---------------------------------------------------------------------------

/// Orthonormal basis of X + im[B e_J, A B e_J, ..., A^{nu-1} B e_J].
inline Matrix input_basis(const DiscreteLTI& sys, const PortSet& ports, int nu, const Matrix& X_basis) {
    sys.validate();
    if (nu < 1) throw InvalidArgument("input_basis: nu must be at least 1");
    if (X_basis.cols() > 0 && X_basis.rows() != sys.states()) {
        throw InvalidArgument("input_basis: X basis has wrong row count");
    }
    const Matrix prefix = X_basis.cols() > 0 ? X_basis : Matrix(sys.states(), 0);
    const Matrix start = sys.B * ports.selector(sys.inputs());
    return detail::leveled_krylov(sys.A, start, nu, prefix).basis;
}

/// Orthonormal basis of the row space of [e_J^T C; e_J^T C A; ...; e_J^T C A^{tau-1}],
/// returned as columns.
inline Matrix output_basis(const DiscreteLTI& sys, const PortSet& ports, int tau) {
    sys.validate();
    if (tau < 1) throw InvalidArgument("output_basis: tau must be at least 1");
    const Matrix start = sys.C.transpose() * ports.selector(sys.outputs());
    return detail::leveled_krylov(sys.A.transpose(), start, tau, Matrix(sys.states(), 0)).basis;
}

// ---------------------------------------------------------------------------
// Biconjugation
// ---------------------------------------------------------------------------

inline constexpr double kBreakdownTolerance = 1e-12;

/// Biconjugation of two vector lists:
///   p_i = u_i - sum_{j<i} (u_i^T q_j / p_j^T q_j) p_j,
///   q_i = v_i - sum_{j<i} (p_j^T v_i / p_j^T q_j) q_j,
/// giving Q^T P = D diagonal, im P = span U, im Q = span V, Pdag = D^{-1} Q^T.
///
/// Pairs are processed in order of the largest relative pivot among the
/// remaining vectors (complete pivoting of V^T U), so a breakdown is reported
/// only when no remaining pair is usable. The chosen pair gets one extra
/// sweep against the earlier pairs.
inline Projection biconjugate(const Matrix& U, const Matrix& V) {
    if (U.rows() != V.rows() || U.cols() != V.cols()) {
        throw InvalidArgument("biconjugate: U and V must have identical shapes");
    }
    const Index n = U.rows();
    const Index k = U.cols();
    if (k > n) throw InvalidArgument("biconjugate: more vectors than the ambient dimension");

    Matrix Uw = U;
    Matrix Vw = V;
    Matrix M = Vw.transpose() * Uw;  // M(b, a) = v_b^T u_a over the remaining vectors
    std::vector<Index> left_u(k), left_v(k);
    for (Index i = 0; i < k; ++i) left_u[i] = left_v[i] = i;

    Matrix P(n, k);
    Matrix Q(n, k);
    Vector D(k);
    for (Index i = 0; i < k; ++i) {
        Vector un(static_cast<Index>(left_u.size())), vn(static_cast<Index>(left_v.size()));
        for (std::size_t a = 0; a < left_u.size(); ++a) {
            un(a) = Uw.col(left_u[a]).norm();
            if (un(a) <= kBreakdownTolerance * U.col(left_u[a]).norm() || un(a) == 0.0) {
                throw InvalidArgument("biconjugate: U is not of full column rank (vector " +
                                      std::to_string(left_u[a]) + ")");
            }
        }
        for (std::size_t b = 0; b < left_v.size(); ++b) {
            vn(b) = Vw.col(left_v[b]).norm();
            if (vn(b) <= kBreakdownTolerance * V.col(left_v[b]).norm() || vn(b) == 0.0) {
                throw InvalidArgument("biconjugate: V is not of full column rank (vector " +
                                      std::to_string(left_v[b]) + ")");
            }
        }
        double best = -1.0;
        std::size_t ba = 0, bb = 0;
        for (std::size_t a = 0; a < left_u.size(); ++a) {
            for (std::size_t b = 0; b < left_v.size(); ++b) {
                const double rel = std::abs(M(left_v[b], left_u[a])) / (un(a) * vn(b));
                if (rel > best) {
                    best = rel;
                    ba = a;
                    bb = b;
                }
            }
        }
        if (best < kBreakdownTolerance) throw BreakdownError(static_cast<int>(i), best);

        const Index ia = left_u[ba];
        const Index ib = left_v[bb];
        Vector p = Uw.col(ia);
        Vector q = Vw.col(ib);
        for (Index j = 0; j < i; ++j) {
            p -= (p.dot(Q.col(j)) / D(j)) * P.col(j);
            q -= (P.col(j).dot(q) / D(j)) * Q.col(j);
        }
        const double pivot = p.dot(q);
        if (std::abs(pivot) < kBreakdownTolerance * p.norm() * q.norm()) {
            throw BreakdownError(static_cast<int>(i), std::abs(pivot) / (p.norm() * q.norm()));
        }
        P.col(i) = p;
        Q.col(i) = q;
        D(i) = pivot;
        left_u.erase(left_u.begin() + static_cast<std::ptrdiff_t>(ba));
        left_v.erase(left_v.begin() + static_cast<std::ptrdiff_t>(bb));

        // Eliminate the new pair from the remaining vectors; M follows as a Schur complement.
        const Vector mu = M.col(ia);  // v_b^T p (before elimination)
        const Vector mv = M.row(ib).transpose();  // q^T u_a
        for (Index a : left_u) Uw.col(a) -= (Uw.col(a).dot(q) / pivot) * p;
        for (Index b : left_v) Vw.col(b) -= (p.dot(Vw.col(b)) / pivot) * q;
        const double m_piv = M(ib, ia);
        for (Index a : left_u) {
            for (Index b : left_v) M(b, a) -= mu(b) * mv(a) / m_piv;
        }
    }

    Projection out;
    out.P = P;
    out.D = D;
    out.Pdag = D.cwiseInverse().asDiagonal() * Q.transpose();
    out.Pbar = orthogonal_complement(Q);
    out.Pbar_dag = out.Pbar.transpose() * (Matrix::Identity(n, n) - out.P * out.Pdag);
    return out;
}

/// Off-diagonal mass of Q^T P relative to |P| |Q|, recovered from the stored
/// left inverse (Q = Pdag^T D).
inline double biconjugation_defect(const Projection& proj) {
    const Matrix Q = proj.Pdag.transpose() * proj.D.asDiagonal();
    Matrix M = Q.transpose() * proj.P;
    M.diagonal().setZero();
    const double scale = proj.P.norm() * Q.norm();
    return scale > 0.0 ? M.norm() / scale : 0.0;
}

/// (Pdag A P, Pdag B e_J, e_J^T C P).
inline ReducedModel reduced_triple(const Projection& proj, const DiscreteLTI& sys, const PortSet& ports) {
    sys.validate();
    if (proj.states() != sys.states()) throw InvalidArgument("reduced_triple: projection/system mismatch");
    return {proj.Pdag * sys.A * proj.P, proj.Pdag * sys.B * ports.selector(sys.inputs()),
            ports.selector(sys.outputs()).transpose() * sys.C * proj.P};
}

// ---------------------------------------------------------------------------
// Subspace-matching diagnostics
// ---------------------------------------------------------------------------

inline constexpr double kConditionTolerance = 1e-8;

struct ConditionReport {
    double input_image_residual = 0.0;    ///< im B e_J in im P
    double output_kernel_residual = 0.0;  ///< ker Pdag in ker e_J^T C
    double conC_residual = 0.0;           ///< tau-step observability kernel inclusion
    double conB_residual = 0.0;           ///< X + nu-step Krylov image inclusion
    bool conBC_ok = false;
    bool conC_ok = false;
    bool conB_ok = false;
};

/// Residuals |(I - P Pdag) M|_F / |M|_F and |N (I - P Pdag)|_F / |N|_F, with
/// the columns of M (rows of N) scaled to unit length first so that deep
/// Krylov powers do not vanish from the ratio.
inline ConditionReport check_conditions(const Projection& proj, const DiscreteLTI& sys, const PortSet& ports,
                                        int nu, int tau, const Matrix& X_basis) {
    sys.validate();
    const Matrix Pi = proj.projector();
    const Matrix BJ = sys.B * ports.selector(sys.inputs());
    const Matrix CJ = ports.selector(sys.outputs()).transpose() * sys.C;

    ConditionReport r;
    r.input_image_residual = detail::relative_image_residual(Pi, BJ);
    r.output_kernel_residual = detail::relative_kernel_residual(Pi, CJ);

    const Matrix obs = detail::normalized_krylov_stack(sys.A.transpose(), CJ.transpose(), std::max(tau, 0));
    r.conC_residual = detail::relative_kernel_residual(Pi, obs.transpose());

    const Matrix ctrb = detail::normalized_krylov_stack(sys.A, BJ, std::max(nu, 0));
    Matrix M(sys.states(), X_basis.cols() + ctrb.cols());
    if (X_basis.cols() > 0) M.leftCols(X_basis.cols()) = X_basis;
    M.rightCols(ctrb.cols()) = ctrb;
    r.conB_residual = detail::relative_image_residual(Pi, M);

    r.conBC_ok = r.input_image_residual <= kConditionTolerance && r.output_kernel_residual <= kConditionTolerance;
    r.conC_ok = r.conC_residual <= kConditionTolerance;
    r.conB_ok = r.conB_residual <= kConditionTolerance;
    return r;
}

// ---------------------------------------------------------------------------
// Projection construction with stability escalation
// ---------------------------------------------------------------------------

struct BuiltProjection {
    Projection projection;
    int nu = 0;   ///< Krylov input depth whose span is contained in im P
    int tau = 0;  ///< output depth for which the kernel inclusion holds
    double spectral_radius = 0.0;  ///< of the reduced matrix Pdag A P

    Index rank() const { return projection.rank(); }
    bool stable() const { return spectral_radius < 1.0; }
};

namespace detail {

struct PortStacks {
    Matrix controllability;  // normalized [B_J, A B_J, ...], n levels
    Matrix observability;    // normalized [C_J^T, A^T C_J^T, ...], n levels
};

inline PortStacks port_stacks(const DiscreteLTI& sys, const PortSet& ports) {
    const int levels = static_cast<int>(std::max<Index>(sys.states(), 1));
    return {normalized_krylov_stack(sys.A, sys.B * ports.selector(sys.inputs()), levels),
            normalized_krylov_stack(sys.A.transpose(), sys.C.transpose() * ports.selector(sys.outputs()), levels)};
}

/// Pads U and V to a common size `k` and biconjugates them.
inline Projection match_and_biconjugate(const Matrix& U, const Matrix& V, Index k, const PortStacks& stacks) {
    const Matrix Uk = pad_basis(U, k, {stacks.controllability, V});
    const Matrix Vk = pad_basis(V, k, {stacks.observability, U});
    return biconjugate(Uk, Vk);
}

/// Number of complete Krylov levels contained in the first `r` basis vectors;
/// `unbounded` when the whole (saturated) space fits.
inline int complete_levels(const LeveledBasis& lb, Index r, int unbounded) {
    if (lb.saturated && lb.basis.cols() <= r) return unbounded;
    int levels = 0;
    for (Index end : lb.level_end) {
        if (end <= r) ++levels;
        else break;
    }
    return levels;
}

}  // namespace detail

/// Builds P from input_basis(nu) (as U) and output_basis(tau) (as V), padding
/// the shorter list, and escalates nu and tau together until Pdag A P is Schur
/// stable. The full-rank limit is P = I.
inline BuiltProjection build_projection(const DiscreteLTI& sys, const PortSet& ports, int nu, int tau,
                                        const Matrix& X_basis, Index max_rank) {
    sys.validate();
    const Index n = sys.states();
    if (max_rank > n) throw InvalidArgument("build_projection: max_rank exceeds the state dimension");
    if (nu < 1 || tau < 1) throw InvalidArgument("build_projection: nu and tau must be at least 1");
    ports.validate(std::min(sys.inputs(), sys.outputs()));
    const auto stacks = detail::port_stacks(sys, ports);

    double last_rho = std::numeric_limits<double>::infinity();
    Index floor = 0;
    for (;;) {
        const Matrix U = input_basis(sys, ports, nu, X_basis);
        const Matrix V = output_basis(sys, ports, tau);
        const Index k = std::max({U.cols(), V.cols(), floor});
        if (k > max_rank) throw EscalationFailure(last_rho, k);
        if (k >= n) {
            BuiltProjection full{Projection::identity(n), nu, tau, spectral_radius(sys.A)};
            if (full.stable()) return full;
            throw EscalationFailure(full.spectral_radius, n);
        }
        try {
            Projection p = detail::match_and_biconjugate(U, V, k, stacks);
            const double rho = spectral_radius(p.Pdag * sys.A * p.P);
            if (rho < 1.0) return {std::move(p), nu, tau, rho};
            last_rho = rho;
        } catch (const BreakdownError&) {
            // escalate past the degenerate pair
        }
        floor = k + 1;
        ++nu;
        ++tau;
    }
}

/// Builds P of exactly `rank` columns from the leading input/output Krylov
/// vectors (fault basis first), without escalation. The achieved depths are
/// the number of complete Krylov levels retained; when a Krylov space is fully
/// contained the depth is reported as `max_depth`. rank >= n yields P = I.
inline BuiltProjection build_projection_at_rank(const DiscreteLTI& sys, const PortSet& ports,
                                                const Matrix& X_basis, Index rank, int max_depth) {
    sys.validate();
    const Index n = sys.states();
    ports.validate(std::min(sys.inputs(), sys.outputs()));
    if (rank < 1) throw InvalidArgument("build_projection_at_rank: rank must be positive");
    if (rank >= n) return {Projection::identity(n), max_depth, max_depth, spectral_radius(sys.A)};

    const int depth_cap = static_cast<int>(n) + 1;
    const Matrix prefix = X_basis.cols() > 0 ? X_basis : Matrix(n, 0);
    const auto U = detail::leveled_krylov(sys.A, sys.B * ports.selector(sys.inputs()), depth_cap, prefix, rank + 1);
    const auto V = detail::leveled_krylov(sys.A.transpose(), sys.C.transpose() * ports.selector(sys.outputs()),
                                          depth_cap, Matrix(n, 0), rank + 1);
    const int nu = detail::complete_levels(U, rank, max_depth);
    const int tau = detail::complete_levels(V, rank, max_depth);
    if (nu < 1 || tau < 1) {
        throw InvalidArgument("build_projection_at_rank: rank " + std::to_string(rank) +
                              " cannot hold the fault domain and the port channels");
    }
    const auto stacks = detail::port_stacks(sys, ports);
    Projection p = detail::match_and_biconjugate(U.basis.leftCols(std::min(rank, U.basis.cols())),
                                                 V.basis.leftCols(std::min(rank, V.basis.cols())), rank, stacks);
    const double rho = spectral_radius(p.Pdag * sys.A * p.P);
    return {std::move(p), nu, tau, rho};
}

}  // namespace retrofit::proj
