#include "vcmm/linalg.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <random>

namespace vcmm {

namespace {

void check_symmetric(const MatrixXd& A) {
    if (A.rows() != A.cols()) throw DimensionError("spectral_decompose: matrix not square");
    if (!A.allFinite()) throw NumericError("spectral_decompose: non-finite entries");
    if (A.size() == 0) return;
    const double scale = std::max(A.cwiseAbs().maxCoeff(), 1.0);
    const double asym = (A - A.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-10 * scale)
        throw NumericError("spectral_decompose: input asymmetric beyond tolerance (" +
                           std::to_string(asym / scale) + " relative)");
}

SpectralFactors keep_components(const MatrixXd& U, const VectorXd& S, double tau, int rank) {
    // S arrives ascending from Eigen; flip to descending and apply the cut.
    const int n = static_cast<int>(S.size());
    const double s1 = n > 0 ? S(n - 1) : 0.0;
    const double cut = tau > 0.0 ? tau * s1 : 0.0;
    std::vector<int> keep;
    for (int i = n - 1; i >= 0; --i) {
        if (S(i) <= cut || S(i) <= 0.0) continue;
        keep.push_back(i);
        if (rank > 0 && static_cast<int>(keep.size()) >= rank) break;
    }
    SpectralFactors f;
    f.truncation_threshold = tau;
    f.U.resize(U.rows(), keep.size());
    f.S.resize(keep.size());
    for (size_t j = 0; j < keep.size(); ++j) {
        f.U.col(j) = U.col(keep[j]);
        f.S(j) = S(keep[j]);
    }
    return f;
}

}  // namespace

MatrixXd SpectralFactors::reconstruct() const {
    return U * S.asDiagonal() * U.transpose();
}

SpectralFactors spectral_decompose(const MatrixXd& A, const SpectralMode& mode) {
    check_symmetric(A);
    const MatrixXd As = 0.5 * (A + A.transpose());
    const int n = static_cast<int>(As.rows());

    if (mode.kind == SpectralMode::Kind::Randomized) {
        if (mode.rank <= 0) throw ConfigError("randomized mode requires rank > 0");
        const int l = std::min(mode.rank + mode.oversample, n);
        std::mt19937_64 rng(mode.seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        MatrixXd omega(n, l);
        for (int j = 0; j < l; ++j)
            for (int i = 0; i < n; ++i) omega(i, j) = gauss(rng);
        MatrixXd Y = As * omega;
        auto orth = [](const MatrixXd& M) {
            Eigen::HouseholderQR<MatrixXd> qr(M);
            return MatrixXd(qr.householderQ() * MatrixXd::Identity(M.rows(), M.cols()));
        };
        MatrixXd Qm = orth(Y);
        for (int t = 0; t < mode.power_iters; ++t) {
            Qm = orth(As * Qm);  // symmetric, so A'Q = AQ
        }
        const MatrixXd Bsmall = Qm.transpose() * As * Qm;
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(Bsmall);
        if (es.info() != Eigen::Success)
            throw NumericError("randomized decomposition: small eigensolve failed");
        const MatrixXd Ufull = Qm * es.eigenvectors();
        SpectralFactors f = keep_components(Ufull, es.eigenvalues(), 0.0, mode.rank);
        f.truncation_threshold = 0.0;
        f.A = As;
        return f;
    }

    Eigen::SelfAdjointEigenSolver<MatrixXd> es(As);
    if (es.info() != Eigen::Success)
        throw NumericError("spectral_decompose: eigensolver failed");
    SpectralFactors f;
    switch (mode.kind) {
        case SpectralMode::Kind::Full:
            f = keep_components(es.eigenvectors(), es.eigenvalues(), 0.0, 0);
            break;
        case SpectralMode::Kind::Truncated:
            f = mode.rank > 0
                    ? keep_components(es.eigenvectors(), es.eigenvalues(), 0.0, mode.rank)
                    : keep_components(es.eigenvectors(), es.eigenvalues(), mode.tau, 0);
            break;
        default:
            throw ConfigError("unreachable spectral mode");
    }
    f.A = As;
    return f;
}

namespace {

VectorXd apply_pinv(const SpectralFactors& factors, const VectorXd& rhs) {
    const VectorXd proj = factors.U.transpose() * rhs;
    return factors.U * (proj.array() / factors.S.array()).matrix();
}

// b - A x with the dot products carried in doubled precision (two-prod /
// two-sum cascades). A plain double residual bottoms out at eps * kappa,
// which is above the contract for kappa near 1e12.
VectorXd residual_dd(const MatrixXd& A, const VectorXd& x, const VectorXd& b) {
    const int n = static_cast<int>(A.rows());
    VectorXd r(n);
    for (int i = 0; i < n; ++i) {
        double hi = b(i), lo = 0.0;
        for (int j = 0; j < A.cols(); ++j) {
            const double p = -A(i, j) * x(j);
            const double perr = std::fma(-A(i, j), x(j), -p);
            // two-sum of hi and p
            const double s = hi + p;
            const double bb = s - hi;
            const double err = (hi - (s - bb)) + (p - bb);
            hi = s;
            lo += err + perr;
        }
        r(i) = hi + lo;
    }
    return r;
}

}  // namespace

VectorXd stabilized_solve(const SpectralFactors& factors, const VectorXd& rhs) {
    if (rhs.size() != factors.U.rows())
        throw DimensionError("stabilized_solve: rhs length " + std::to_string(rhs.size()) +
                             " vs matrix dimension " + std::to_string(factors.U.rows()));
    VectorXd x = apply_pinv(factors, rhs);
    // refinement against the true matrix recovers the accuracy the small
    // eigenvalues lose; the correction lives in the retained subspace, so
    // truncated solves keep their pseudo-inverse meaning
    if (factors.A.size() > 0) {
        for (int pass = 0; pass < 2; ++pass)
            x += apply_pinv(factors, residual_dd(factors.A, x, rhs));
    }
    return x;
}

MatrixXd stabilized_solve(const SpectralFactors& factors, const MatrixXd& rhs) {
    if (rhs.rows() != factors.U.rows())
        throw DimensionError("stabilized_solve: rhs rows vs matrix dimension");
    MatrixXd out(rhs.rows(), rhs.cols());
    for (int j = 0; j < rhs.cols(); ++j) out.col(j) = stabilized_solve(factors, VectorXd(rhs.col(j)));
    return out;
}

double reconstruction_error(const SpectralFactors& factors, const MatrixXd& A) {
    const double denom = A.norm();
    if (denom == 0.0) return factors.reconstruct().norm();
    return (A - factors.reconstruct()).norm() / denom;
}

}  // namespace vcmm
