#pragma once

#include <stdexcept>
#include <string>

namespace retrofit {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Precondition violated by the caller (bad dimensions, dt <= 0, ...).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Floating-point failure: overflow, non-finite result, ill-conditioned solve.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// A matrix required to be Schur stable has spectral radius >= 1.
class UnstableError : public NumericalError {
public:
    UnstableError(const std::string& what, double spectral_radius)
        : NumericalError(what + " (spectral radius " + std::to_string(spectral_radius) + ")"),
          spectral_radius_(spectral_radius) {}

    double spectral_radius() const noexcept { return spectral_radius_; }

private:
    double spectral_radius_;
};

/// An iterative solver did not converge within its iteration budget.
class SolverFailure : public NumericalError {
public:
    SolverFailure(const std::string& what, int iterations)
        : NumericalError(what), iterations_(iterations) {}

    int iterations() const noexcept { return iterations_; }

private:
    int iterations_;
};

/// Biconjugation pivot p_j^T q_j vanished at vector pair `index` (0-based).
class BreakdownError : public NumericalError {
public:
    BreakdownError(int index, double pivot)
        : NumericalError("biconjugation breakdown at vector pair " + std::to_string(index) +
                         " (relative pivot " + std::to_string(pivot) + ")"),
          index_(index), pivot_(pivot) {}

    int index() const noexcept { return index_; }
    double pivot() const noexcept { return pivot_; }

private:
    int index_;
    double pivot_;
};

/// No stable reduced matrix was found before the rank budget ran out.
class EscalationFailure : public NumericalError {
public:
    EscalationFailure(double last_spectral_radius, long last_rank)
        : NumericalError("no stable reduced model within the rank budget (last rank " +
                         std::to_string(last_rank) + ", spectral radius " +
                         std::to_string(last_spectral_radius) + ")"),
          last_spectral_radius_(last_spectral_radius), last_rank_(last_rank) {}

    double last_spectral_radius() const noexcept { return last_spectral_radius_; }
    long last_rank() const noexcept { return last_rank_; }

private:
    double last_spectral_radius_;
    long last_rank_;
};

/// Subspace-matching conditions required by the expansion do not hold.
class ConditionViolation : public Error {
public:
    ConditionViolation(const std::string& what, double image_residual, double kernel_residual)
        : Error(what + " (image residual " + std::to_string(image_residual) +
                ", kernel residual " + std::to_string(kernel_residual) + ")"),
          image_residual_(image_residual), kernel_residual_(kernel_residual) {}

    double image_residual() const noexcept { return image_residual_; }
    double kernel_residual() const noexcept { return kernel_residual_; }

private:
    double image_residual_;
    double kernel_residual_;
};

}  // namespace retrofit
