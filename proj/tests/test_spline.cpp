#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "vcmm/spline.hpp"

#include <Eigen/QR>

#include <cmath>
#include <random>

using namespace vcmm;

namespace {

// independent Bernstein oracle: C(3,i) x^i (1-x)^(3-i)
VectorXd bernstein3(double x) {
    VectorXd b(4);
    const double u = 1.0 - x;
    b << u * u * u, 3.0 * x * u * u, 3.0 * x * x * u, x * x * x;
    return b;
}

}  // namespace

TEST_CASE("degree 0 basis is the cell indicator") {
    UnivariateBasis basis(0, {0.5});
    const VectorXd v = eval_univariate(basis, 0.25);
    CHECK(v.size() == 2);
    CHECK(v(0) == 1.0);
    CHECK(v(1) == 0.0);
    const VectorXd w = eval_univariate(basis, 0.75);
    CHECK(w(0) == 0.0);
    CHECK(w(1) == 1.0);
}

TEST_CASE("partition of unity at random points") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const UnivariateBasis cubic = UnivariateBasis::uniform(3, 7);
    const UnivariateBasis quad = UnivariateBasis::uniform(2, 4);
    for (int trial = 0; trial < 1000; ++trial) {
        const double x = unif(rng);
        CHECK(std::abs(cubic.eval(x).sum() - 1.0) <= 1e-12);
        CHECK(std::abs(quad.eval(x).sum() - 1.0) <= 1e-12);
    }
    CHECK(std::abs(cubic.eval(0.37).sum() - 1.0) <= 1e-12);
}

TEST_CASE("cubic Bernstein case matches the closed form") {
    const UnivariateBasis basis(3, {});
    const VectorXd v = basis.eval(0.5);
    CHECK(v(0) == doctest::Approx(0.125).epsilon(1e-14));
    CHECK(v(1) == doctest::Approx(0.375).epsilon(1e-14));
    CHECK(v(2) == doctest::Approx(0.375).epsilon(1e-14));
    CHECK(v(3) == doctest::Approx(0.125).epsilon(1e-14));

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const double x = unif(rng);
        CHECK((basis.eval(x) - bernstein3(x)).cwiseAbs().maxCoeff() <= 1e-13);
    }
}

TEST_CASE("evaluation outside the domain is an error") {
    const UnivariateBasis basis = UnivariateBasis::uniform(3, 4);
    CHECK_THROWS_AS(basis.eval(1.5), DomainError);
    CHECK_THROWS_AS(basis.eval(-0.1), DomainError);
}

TEST_CASE("right boundary assigns the last basis function") {
    const UnivariateBasis basis = UnivariateBasis::uniform(3, 6);
    const VectorXd v = basis.eval(1.0);
    CHECK(v(basis.size() - 1) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(v.sum() == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("local support: at most degree+1 nonzero entries") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const UnivariateBasis basis = UnivariateBasis::uniform(3, 11);
    for (int trial = 0; trial < 200; ++trial) {
        const VectorXd v = basis.eval(unif(rng));
        int nonzero = 0;
        for (int i = 0; i < v.size(); ++i) nonzero += v(i) != 0.0;
        CHECK(nonzero <= 4);
        CHECK(v.minCoeff() >= 0.0);
    }
}

TEST_CASE("tensor basis with one margin equals the univariate basis") {
    TensorSplineBasis basis({UnivariateBasis::uniform(3, 5)});
    VectorXd h(1);
    h << 0.42;
    CHECK((basis.eval(h) - basis.margin(0).eval(0.42)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("two indicator margins give a one-hot cell with the last margin fastest") {
    TensorSplineBasis basis({UnivariateBasis(0, {0.5}), UnivariateBasis(0, {0.5})});
    VectorXd h(2);
    h << 0.25, 0.75;  // cell (0, 1) -> flat index 0*2 + 1
    const VectorXd v = basis.eval(h);
    CHECK(v.size() == 4);
    CHECK(v(1) == 1.0);
    CHECK(v.sum() == 1.0);
    CHECK(v.cwiseAbs().sum() == 1.0);
}

TEST_CASE("tensor evaluation is the flattened outer product of margins") {
    TensorSplineBasis basis({UnivariateBasis(3, {}), UnivariateBasis(3, {})});
    VectorXd h(2);
    h << 0.5, 0.5;
    const VectorXd v = basis.eval(h);
    const VectorXd a = bernstein3(0.5), b = bernstein3(0.5);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(v(i * 4 + j) == doctest::Approx(a(i) * b(j)).epsilon(1e-14));
}

TEST_CASE("tensor partition of unity") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    TensorSplineBasis basis({UnivariateBasis::uniform(3, 4), UnivariateBasis::uniform(2, 3)});
    for (int trial = 0; trial < 1000; ++trial) {
        VectorXd h(2);
        h << unif(rng), unif(rng);
        CHECK(std::abs(basis.eval(h).sum() - 1.0) <= 1e-12);
    }
}

TEST_CASE("expand_design lays out intercept block then scaled covariate blocks") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    TensorSplineBasis basis({UnivariateBasis::uniform(3, 3)});
    const int Q = basis.size();

    SUBCASE("p = 0 gives the bare evaluation matrix") {
        MatrixXd H(3, 1), X(3, 0);
        H << 0.1, 0.5, 0.9;
        const MatrixXd Xt = expand_design(X, H, basis);
        CHECK(Xt.cols() == Q);
        for (int r = 0; r < 3; ++r)
            CHECK((Xt.row(r).transpose() - basis.eval(H.row(r).transpose()))
                      .cwiseAbs()
                      .maxCoeff() == 0.0);
    }

    SUBCASE("zero covariate zeroes its block") {
        MatrixXd H(1, 1), X(1, 1);
        H << 0.3;
        X << 0.0;
        const MatrixXd Xt = expand_design(X, H, basis);
        CHECK(Xt.cols() == 2 * Q);
        CHECK(Xt.row(0).tail(Q).cwiseAbs().maxCoeff() == 0.0);
    }

    SUBCASE("matches a naive row-by-row construction") {
        const long n = 3;
        MatrixXd X(n, 1), H(n, 1);
        for (long r = 0; r < n; ++r) {
            X(r, 0) = unif(rng);
            H(r, 0) = unif(rng);
        }
        const MatrixXd Xt = expand_design(X, H, basis);
        for (long r = 0; r < n; ++r) {
            const VectorXd phi = basis.eval(H.row(r).transpose());
            for (int c = 0; c < Q; ++c) {
                CHECK(Xt(r, c) == phi(c));
                CHECK(Xt(r, Q + c) == X(r, 0) * phi(c));
            }
        }
    }

    SUBCASE("covariate blocks are scaled copies of the p = 0 expansion") {
        const long n = 20;
        MatrixXd X(n, 2), H(n, 1);
        for (long r = 0; r < n; ++r) {
            X(r, 0) = unif(rng);
            X(r, 1) = unif(rng);
            H(r, 0) = unif(rng);
        }
        const MatrixXd full = expand_design(X, H, basis);
        const MatrixXd bare = expand_design(MatrixXd(n, 0), H, basis);
        CHECK((full.leftCols(Q) - bare).cwiseAbs().maxCoeff() == 0.0);
        for (int k = 0; k < 2; ++k)
            CHECK((full.middleCols((k + 1) * Q, Q) - X.col(k).asDiagonal() * bare)
                      .cwiseAbs()
                      .maxCoeff() == 0.0);
    }
}

TEST_CASE("linear functions are reproduced exactly for degree >= 1") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int degree : {1, 3}) {
        TensorSplineBasis basis({UnivariateBasis::uniform(degree, 5)});
        const long n = 400;
        MatrixXd H(n, 1), X(n, 0);
        VectorXd y(n);
        for (long r = 0; r < n; ++r) {
            H(r, 0) = unif(rng);
            y(r) = 0.7 + 1.3 * H(r, 0);
        }
        const MatrixXd Xt = expand_design(X, H, basis);
        const VectorXd coef = Xt.colPivHouseholderQr().solve(y);
        CHECK((Xt * coef - y).cwiseAbs().maxCoeff() <= 1e-10);
    }
}

TEST_CASE("basis config text round trips") {
    TensorSplineBasis basis({UnivariateBasis::uniform(3, 4), UnivariateBasis(2, {0.25, 0.5})});
    const std::string cfg = basis.to_config_string();
    const TensorSplineBasis back = TensorSplineBasis::from_config_string(cfg);
    CHECK(back.margins() == 2);
    CHECK(back.size() == basis.size());
    std::mt19937_64 rng(33);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        VectorXd h(2);
        h << unif(rng), unif(rng);
        CHECK((back.eval(h) - basis.eval(h)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("orthogonalized basis has orthonormal sample columns") {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    TensorSplineBasis basis({UnivariateBasis::uniform(3, 4)});
    const int Q = basis.size();
    const long n = 500;
    MatrixXd H(n, 1);
    for (long r = 0; r < n; ++r) H(r, 0) = unif(rng);

    const TensorSplineBasis ortho = orthogonalize(basis, H);
    MatrixXd Bmat(n, Q);
    for (long r = 0; r < n; ++r) Bmat.row(r) = ortho.eval(H.row(r).transpose()).transpose();
    const MatrixXd gram = Bmat.transpose() * Bmat / static_cast<double>(n);
    CHECK((gram - MatrixXd::Identity(Q, Q)).cwiseAbs().maxCoeff() < 1e-10);

    // same function space: mapped coefficients reproduce raw-basis values
    VectorXd gamma(Q);
    for (int i = 0; i < Q; ++i) gamma(i) = unif(rng);
    const VectorXd raw_gamma = ortho.coefficient_backmap(gamma);
    for (int trial = 0; trial < 20; ++trial) {
        VectorXd h(1);
        h << unif(rng);
        CHECK(ortho.eval(h).dot(gamma) ==
              doctest::Approx(basis.eval(h).dot(raw_gamma)).epsilon(1e-10));
    }
}
