#pragma once

#include "vcmm/core.hpp"

#include <cstdint>

namespace vcmm {

/// How to decompose a symmetric PSD matrix.
///   Full       — exact symmetric eigendecomposition, nonpositive values dropped.
///   Truncated  — keep S_i > tau * S_1, or the top `rank` when rank > 0.
///   Randomized — Halko-style sketch of the top `rank` components.
struct SpectralMode {
    enum class Kind { Full, Truncated, Randomized };
    Kind kind = Kind::Full;
    double tau = 1e-10;    // relative threshold (Truncated with rank == 0)
    int rank = 0;          // fixed rank (Truncated/Randomized)
    int oversample = 10;   // Randomized
    int power_iters = 2;   // Randomized
    std::uint64_t seed = 0;

    static SpectralMode full() { return {}; }
    static SpectralMode truncated_tau(double tau) {
        SpectralMode m;
        m.kind = Kind::Truncated;
        m.tau = tau;
        return m;
    }
    static SpectralMode truncated_rank(int rank) {
        SpectralMode m;
        m.kind = Kind::Truncated;
        m.rank = rank;
        return m;
    }
    static SpectralMode randomized(int rank, std::uint64_t seed,
                                   int oversample = 10, int power_iters = 2) {
        SpectralMode m;
        m.kind = Kind::Randomized;
        m.rank = rank;
        m.seed = seed;
        m.oversample = oversample;
        m.power_iters = power_iters;
        return m;
    }
};

/// Retained spectral components of a symmetric PSD matrix (U = V).
/// Keeps the symmetrized input so solves can run iterative refinement
/// (restricted to the retained subspace, so truncation semantics hold).
struct SpectralFactors {
    MatrixXd U;  // n x r, orthonormal columns
    VectorXd S;  // length r, positive, nonincreasing
    MatrixXd A;  // symmetrized input
    double truncation_threshold = 0.0;
    int rank() const { return static_cast<int>(S.size()); }

    MatrixXd reconstruct() const;
};

/// A is symmetrized on input; asymmetry beyond 1e-10 (relative) is an error.
SpectralFactors spectral_decompose(const MatrixXd& A, const SpectralMode& mode);

/// U S^-1 U' rhs: the exact inverse at full rank, the spectral pseudo-inverse
/// solution under truncation.
VectorXd stabilized_solve(const SpectralFactors& factors, const VectorXd& rhs);
MatrixXd stabilized_solve(const SpectralFactors& factors, const MatrixXd& rhs);

/// Relative Frobenius distance ||A - U S U'||_F / ||A||_F.
double reconstruction_error(const SpectralFactors& factors, const MatrixXd& A);

}  // namespace vcmm
