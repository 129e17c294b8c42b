#pragma once

// Random instance generators shared by the unit tests and the acceptance suite.

#include <cmath>
#include <complex>
#include <random>
#include <vector>

#include <Eigen/Eigenvalues>

#include "retrofit/controller.hpp"
#include "retrofit/lti.hpp"
#include "retrofit/projection.hpp"

namespace testing_support {

using retrofit::DiscreteLTI;
using retrofit::Index;
using retrofit::Matrix;
using retrofit::Vector;

inline Matrix gaussian(Index rows, Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> normal;
    Matrix M(rows, cols);
    for (Index j = 0; j < cols; ++j) {
        for (Index i = 0; i < rows; ++i) M(i, j) = normal(rng);
    }
    return M;
}

inline Vector gaussian_vector(Index n, std::mt19937_64& rng) { return gaussian(n, 1, rng); }

/// Uniform sample from the unit ball in R^k.
inline Vector unit_ball_sample(Index k, std::mt19937_64& rng) {
    Vector v = gaussian_vector(k, rng);
    const double nv = v.norm();
    if (nv == 0.0) return v;
    const double r = std::pow(std::uniform_real_distribution<double>(0.0, 1.0)(rng), 1.0 / static_cast<double>(k));
    return v * (r / nv);
}

/// Random square matrix rescaled to the given spectral radius.
inline Matrix random_stable(Index n, double rho, std::mt19937_64& rng) {
    Matrix A = gaussian(n, n, rng);
    const double r = retrofit::spectral_radius(A);
    return r > 0.0 ? Matrix(A * (rho / r)) : A;
}

/// Random stable plant with square port-compatible input/output dimensions.
inline DiscreteLTI random_plant(Index n, Index m, Index p, double rho, std::mt19937_64& rng) {
    return DiscreteLTI(random_stable(n, rho, rng), gaussian(n, m, rng), gaussian(p, n, rng), 1.0);
}

/// Static output-feedback gain small enough that A + B F C keeps spectral
/// radius below one; retries with shrinking scale.
inline Matrix random_stabilizing_gain(const DiscreteLTI& sys, std::mt19937_64& rng) {
    Matrix F = gaussian(sys.inputs(), sys.outputs(), rng);
    for (double scale = 0.3;; scale *= 0.5) {
        const Matrix Fs = scale * F / std::max(1.0, F.norm() * sys.B.norm() * sys.C.norm());
        if (retrofit::spectral_radius(sys.A + sys.B * Fs * sys.C) < 1.0) return Fs;
    }
}

/// Dense-grid oracle for the h-infinity norm through the eigendecomposition
/// G(z) = C V (zI - Lambda)^{-1} V^{-1} B + D, independent of the library's
/// Hessenberg route.
inline double hinf_grid_oracle(const DiscreteLTI& sys, int points) {
    using cplx = std::complex<double>;
    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(sys.A.cast<cplx>());
    const Eigen::MatrixXcd V = es.eigenvectors();
    const Eigen::VectorXcd lambda = es.eigenvalues();
    const Eigen::MatrixXcd CV = sys.C.cast<cplx>() * V;
    const Eigen::MatrixXcd VB = V.partialPivLu().solve(sys.B.cast<cplx>());
    const Eigen::MatrixXcd D = sys.D.cast<cplx>();
    double best = 0.0;
    const double pi = std::acos(-1.0);
    for (int k = 0; k < points; ++k) {
        const cplx z = std::polar(1.0, pi * k / (points - 1));
        Eigen::VectorXcd w = (z - lambda.array()).inverse();
        const Eigen::MatrixXcd G = CV * w.asDiagonal() * VB + D;
        const Eigen::MatrixXcd gram = G.adjoint() * G;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> se(gram, Eigen::EigenvaluesOnly);
        best = std::max(best, std::sqrt(std::max(0.0, se.eigenvalues().maxCoeff())));
    }
    return best;
}

/// A valid retrofit instance: random stable plant, ports, fault basis inside
/// the input Krylov span, and a projection with stable reduced matrix.
struct Instance {
    DiscreteLTI sys;
    retrofit::PortSet ports;
    Matrix fault_basis;
    retrofit::proj::BuiltProjection built;
};

inline Instance random_instance(std::mt19937_64& rng, Index n_min = 6, Index n_max = 20) {
    for (;;) {
        const Index n = std::uniform_int_distribution<Index>(n_min, n_max)(rng);
        const Index m = std::uniform_int_distribution<Index>(2, 4)(rng);
        const double rho = std::uniform_real_distribution<double>(0.5, 0.95)(rng);
        Instance in;
        in.sys = random_plant(n, m, m, rho, rng);
        const Index nports = std::uniform_int_distribution<Index>(1, std::min<Index>(2, m))(rng);
        for (Index j = 0; j < nports; ++j) in.ports.indices.push_back(j);
        const Matrix X = gaussian(n, 1, rng);
        in.fault_basis = X / X.norm();
        const int nu = std::uniform_int_distribution<int>(1, 3)(rng);
        const int tau = std::uniform_int_distribution<int>(1, 3)(rng);
        try {
            in.built = retrofit::proj::build_projection(in.sys, in.ports, nu, tau, in.fault_basis, n);
        } catch (const retrofit::Error&) {
            continue;
        }
        return in;
    }
}

}  // namespace testing_support
