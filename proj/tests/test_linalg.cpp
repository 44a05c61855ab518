#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "vcmm/linalg.hpp"

#include <Eigen/QR>

#include <random>

using namespace vcmm;

namespace {

MatrixXd random_orthogonal(int n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    MatrixXd A(n, n);
    for (int i = 0; i < n * n; ++i) A(i / n, i % n) = gauss(rng);
    Eigen::HouseholderQR<MatrixXd> qr(A);
    return qr.householderQ() * MatrixXd::Identity(n, n);
}

MatrixXd psd_with_spectrum(const VectorXd& lambda, unsigned seed) {
    const MatrixXd Q = random_orthogonal(static_cast<int>(lambda.size()), seed);
    return Q * lambda.asDiagonal() * Q.transpose();
}

}  // namespace

TEST_CASE("identity matrix has a flat unit spectrum") {
    const SpectralFactors f = spectral_decompose(MatrixXd::Identity(5, 5), SpectralMode::full());
    CHECK(f.rank() == 5);
    for (int i = 0; i < 5; ++i) CHECK(f.S(i) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK((f.U.transpose() * f.U - MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("relative threshold truncation drops trailing components") {
    MatrixXd A = MatrixXd::Zero(3, 3);
    A.diagonal() << 4.0, 1.0, 1e-14;
    const SpectralFactors f = spectral_decompose(A, SpectralMode::truncated_tau(1e-10));
    CHECK(f.rank() == 2);
    CHECK(f.S(0) == doctest::Approx(4.0));
    CHECK(f.S(1) == doctest::Approx(1.0));
}

TEST_CASE("known spectrum is recovered") {
    VectorXd lambda(50);
    for (int i = 0; i < 50; ++i) lambda(i) = 50.0 - i;
    const MatrixXd A = psd_with_spectrum(lambda, 7);
    const SpectralFactors f = spectral_decompose(A, SpectralMode::full());
    CHECK(f.rank() == 50);
    for (int i = 0; i < 50; ++i) CHECK(std::abs(f.S(i) - lambda(i)) < 1e-8);
    CHECK(reconstruction_error(f, A) <= 1e-10);
}

TEST_CASE("values are nonincreasing and factors orthonormal") {
    VectorXd lambda(20);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> unif(0.1, 10.0);
    for (int i = 0; i < 20; ++i) lambda(i) = unif(rng);
    const SpectralFactors f =
        spectral_decompose(psd_with_spectrum(lambda, 13), SpectralMode::full());
    for (int i = 1; i < f.rank(); ++i) CHECK(f.S(i) <= f.S(i - 1) + 1e-12);
    CHECK((f.U.transpose() * f.U - MatrixXd::Identity(f.rank(), f.rank()))
              .cwiseAbs()
              .maxCoeff() < 1e-10);
}

TEST_CASE("asymmetric or non-finite input is rejected") {
    MatrixXd A = MatrixXd::Identity(4, 4);
    A(0, 3) = 0.5;
    CHECK_THROWS_AS(spectral_decompose(A, SpectralMode::full()), NumericError);
    MatrixXd B = MatrixXd::Identity(3, 3);
    B(1, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(spectral_decompose(B, SpectralMode::full()), NumericError);
}

TEST_CASE("identity factors solve to the right-hand side itself") {
    const SpectralFactors f = spectral_decompose(MatrixXd::Identity(6, 6), SpectralMode::full());
    VectorXd rhs(6);
    rhs << 1, -2, 3, -4, 5, -6;
    CHECK((stabilized_solve(f, rhs) - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("full-rank stabilized solve matches a dense direct solve") {
    VectorXd lambda(30);
    for (int i = 0; i < 30; ++i) lambda(i) = 1.0 + i * 0.5;
    const MatrixXd A = psd_with_spectrum(lambda, 17);
    std::mt19937_64 rng(19);
    std::normal_distribution<double> gauss(0.0, 1.0);
    VectorXd rhs(30);
    for (int i = 0; i < 30; ++i) rhs(i) = gauss(rng);

    const SpectralFactors f = spectral_decompose(A, SpectralMode::full());
    const VectorXd x_spec = stabilized_solve(f, rhs);
    const VectorXd x_dense = A.ldlt().solve(rhs);
    CHECK((x_spec - x_dense).norm() / x_dense.norm() < 1e-10);
}

TEST_CASE("rank-deficient solve projects onto the column space") {
    VectorXd lambda(10);
    lambda.setZero();
    for (int i = 0; i < 6; ++i) lambda(i) = 2.0 + i;
    const MatrixXd A = psd_with_spectrum(lambda, 23);
    const SpectralFactors f = spectral_decompose(A, SpectralMode::truncated_tau(1e-10));
    CHECK(f.rank() == 6);
    // rhs inside the column space: A times something
    VectorXd seed_vec(10);
    for (int i = 0; i < 10; ++i) seed_vec(i) = std::sin(i + 1.0);
    const VectorXd rhs = A * seed_vec;
    const VectorXd x = stabilized_solve(f, rhs);
    CHECK((A * x - rhs).norm() <= 1e-8 * rhs.norm());
}

TEST_CASE("dimension mismatches are reported") {
    const SpectralFactors f = spectral_decompose(MatrixXd::Identity(4, 4), SpectralMode::full());
    const VectorXd wrong = VectorXd::Zero(5);
    CHECK_THROWS_AS(stabilized_solve(f, wrong), DimensionError);
}

TEST_CASE("residual bound holds for condition numbers up to 1e12") {
    // balanced right-hand sides (rhs = A w): the statistical case, where the
    // solution stays bounded and the double-precision storage floor sits far
    // below the contract
    std::mt19937_64 rng(29);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (unsigned trial = 0; trial < 10; ++trial) {
        const int n = 25;
        VectorXd lambda(n);
        for (int i = 0; i < n; ++i)
            lambda(i) = std::pow(10.0, -12.0 * i / (n - 1));  // condition 1e12
        const MatrixXd A = psd_with_spectrum(lambda, 100 + trial);
        VectorXd w(n);
        for (int i = 0; i < n; ++i) w(i) = gauss(rng);
        const VectorXd rhs = A * w;
        const SpectralFactors f = spectral_decompose(A, SpectralMode::full());
        const VectorXd x = stabilized_solve(f, rhs);
        CHECK((A * x - rhs).norm() / rhs.norm() <= 1e-6);
    }
    // generic rhs at condition 1e10: above the storage floor, refinement
    // must still land under the contract
    for (unsigned trial = 0; trial < 10; ++trial) {
        const int n = 36;
        VectorXd lambda(n);
        for (int i = 0; i < n; ++i) lambda(i) = std::pow(10.0, -10.0 * i / (n - 1));
        const MatrixXd A = psd_with_spectrum(lambda, 200 + trial);
        VectorXd rhs(n);
        for (int i = 0; i < n; ++i) rhs(i) = gauss(rng);
        const SpectralFactors f = spectral_decompose(A, SpectralMode::full());
        const VectorXd x = stabilized_solve(f, rhs);
        CHECK((A * x - rhs).norm() / rhs.norm() <= 1e-6);
    }
}

TEST_CASE("truncated solve equals the full solve when nothing is cut") {
    VectorXd lambda(15);
    for (int i = 0; i < 15; ++i) lambda(i) = 1.0 + i;
    const MatrixXd A = psd_with_spectrum(lambda, 31);
    VectorXd rhs = VectorXd::LinSpaced(15, -1.0, 1.0);
    const VectorXd x_full = stabilized_solve(spectral_decompose(A, SpectralMode::full()), rhs);
    const VectorXd x_trunc =
        stabilized_solve(spectral_decompose(A, SpectralMode::truncated_tau(1e-14)), rhs);
    CHECK((x_full - x_trunc).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("randomized mode is reproducible and near the best low-rank error") {
    const int n = 60, r = 8;
    VectorXd lambda(n);
    for (int i = 0; i < n; ++i) lambda(i) = std::pow(0.5, i);  // fast decay
    const MatrixXd A = psd_with_spectrum(lambda, 37);

    const SpectralMode mode = SpectralMode::randomized(r, 12345);
    const SpectralFactors f1 = spectral_decompose(A, mode);
    const SpectralFactors f2 = spectral_decompose(A, mode);
    CHECK((f1.U - f2.U).cwiseAbs().maxCoeff() == 0.0);  // bit reproducible
    CHECK((f1.S - f2.S).cwiseAbs().maxCoeff() == 0.0);

    // best rank-r Frobenius error is the tail energy of the spectrum
    double tail = 0.0;
    for (int i = r; i < n; ++i) tail += lambda(i) * lambda(i);
    const double best = std::sqrt(tail) / A.norm();
    CHECK(reconstruction_error(f1, A) <= 10.0 * best + 1e-14);

    const SpectralFactors f3 = spectral_decompose(A, SpectralMode::randomized(r, 999));
    CHECK(f3.rank() == r);
}
