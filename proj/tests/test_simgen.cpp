#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "vcmm/simgen.hpp"

#include <numeric>
#include <random>

using namespace vcmm;

TEST_CASE("generation is deterministic in the seed") {
    ScenarioSpec spec;
    spec.example = 1;
    spec.n = 300;
    spec.seed = 5;
    const GeneratedData a = generate(spec);
    const GeneratedData b = generate(spec);
    CHECK((a.partitions[0].y - b.partitions[0].y).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.truth.alpha - b.truth.alpha).cwiseAbs().maxCoeff() == 0.0);
    spec.seed = 6;
    const GeneratedData c = generate(spec);
    CHECK((a.partitions[0].y - c.partitions[0].y).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("example 1 defaults follow the stated configuration") {
    ScenarioSpec spec;
    spec.example = 1;
    spec.seed = 9;
    const GeneratedData data = generate(spec);
    CHECK(data.dims.N == 1000);
    CHECK(data.dims.p == 1);
    CHECK(data.dims.M == 1);
    CHECK(data.dims.Q == 19);
    CHECK(data.dims.q == 10);
    CHECK(data.truth.beta0 == 2.0);
    long total = 0;
    for (const auto& part : data.partitions) {
        validate_partition(part, data.dims);
        total += part.rows();
    }
    CHECK(total == 1000);
    CHECK(data.partitions.size() == 4);
    CHECK(data.test.rows() == 200);
    // Z is one-hot group membership
    for (const auto& part : data.partitions)
        for (long i = 0; i < std::min<long>(part.rows(), 20); ++i)
            CHECK(part.Z.row(i).sum() == 1.0);
}

TEST_CASE("zero noise reproduces the mean surface plus random effects exactly") {
    ScenarioSpec spec;
    spec.example = 1;
    spec.n = 150;
    spec.seed = 13;
    spec.noise_sd = 0.0;
    const GeneratedData data = generate(spec);
    for (const auto& part : data.partitions) {
        for (long i = 0; i < part.rows(); ++i) {
            const VectorXd h = part.H.row(i).transpose();
            double mean = true_beta(1, 0, h) + part.X(i, 0) * true_beta(1, 1, h);
            mean += part.Z.row(i) * data.truth.alpha;
            CHECK(part.y(i) == doctest::Approx(mean).epsilon(1e-14));
        }
    }
}

TEST_CASE("example 2 alpha draws show the specified adjacent correlation") {
    ScenarioSpec spec;
    spec.example = 2;
    // adjacent products across 500 independent draws
    double sum_prod = 0.0, sum_sq = 0.0;
    long count = 0, count_sq = 0;
    for (unsigned seed = 0; seed < 500; ++seed) {
        const VectorXd alpha = sample_random_effects(spec, 1000 + seed);
        for (int i = 0; i + 1 < alpha.size(); ++i) {
            sum_prod += alpha(i) * alpha(i + 1);
            ++count;
        }
        sum_sq += alpha.squaredNorm();
        count_sq += alpha.size();
    }
    const double corr = (sum_prod / count) / (sum_sq / count_sq);
    CHECK(corr == doctest::Approx(0.1).epsilon(0.3));  // 0.1 +- 0.03
}

TEST_CASE("generator moments match the documented centered law") {
    ScenarioSpec spec;
    spec.example = 1;
    spec.n = 20000;
    spec.seed = 17;
    const GeneratedData data = generate(spec);
    double t_sum = 0.0, t_sq = 0.0, x_sum = 0.0;
    long n = 0;
    for (const auto& part : data.partitions) {
        t_sum += part.H.col(0).sum();
        t_sq += part.H.col(0).squaredNorm();
        x_sum += part.X.col(0).sum();
        n += part.rows();
    }
    CHECK(t_sum / n == doctest::Approx(0.5).epsilon(0.02));
    CHECK(t_sq / n - 0.25 == doctest::Approx(1.0 / 12.0).epsilon(0.05));
    CHECK(x_sum / n == doctest::Approx(0.5).epsilon(0.02));

    // centered alpha: mean exactly zero, variance sigma^2 (1 - 1/G)
    double mean_sq = 0.0;
    const int reps = 400;
    for (unsigned seed = 0; seed < reps; ++seed) {
        const VectorXd alpha = sample_random_effects(spec, 2000 + seed);
        CHECK(std::abs(alpha.mean()) < 1e-12);
        mean_sq += alpha.squaredNorm() / alpha.size();
    }
    mean_sq /= reps;
    CHECK(mean_sq == doctest::Approx(0.25 * (1.0 - 0.1)).epsilon(0.08));
}

TEST_CASE("invalid scenario configuration is rejected") {
    ScenarioSpec spec;
    spec.example = 9;
    CHECK_THROWS_AS(generate(spec), ConfigError);
    spec.example = 1;
    spec.test_fraction = 1.5;
    CHECK_THROWS_AS(generate(spec), ConfigError);
}

TEST_CASE("direct oracle agrees with the summary path") {
    ScenarioSpec spec;
    spec.example = 1;
    spec.n = 300;
    spec.seed = 19;
    spec.lambda = 3.0;
    const GeneratedData data = generate(spec);
    const ModelParams init = initial_params(data, 3.0);
    FitConfig cfg;
    const FitResult direct = direct_oracle(data.partitions, data.basis, init, cfg);
    std::vector<SuffStats> stats;
    for (const auto& p : data.partitions) stats.push_back(compute_local(p, data.basis));
    const FitResult ss = block_fit(aggregate(stats), init, cfg);
    const double scale = std::max(1.0, direct.theta.beta.cwiseAbs().maxCoeff());
    CHECK((direct.theta.beta - ss.theta.beta).cwiseAbs().maxCoeff() / scale < 1e-8);
    CHECK((direct.theta.alpha - ss.theta.alpha).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(direct.theta.sigma2_eps == doctest::Approx(ss.theta.sigma2_eps).epsilon(1e-8));
}

TEST_CASE("direct oracle is invariant to row order") {
    ScenarioSpec spec;
    spec.example = 1;
    spec.n = 200;
    spec.seed = 23;
    spec.lambda = 2.0;
    const GeneratedData data = generate(spec);
    const ModelParams init = initial_params(data, 2.0);
    FitConfig cfg;
    cfg.variance_update = VarianceUpdate::Fixed;
    const FitResult a = direct_oracle(data.partitions, data.basis, init, cfg);

    // permute rows by reversing each partition
    std::vector<Partition> reversed = data.partitions;
    for (auto& part : reversed) {
        part.y = part.y.reverse().eval();
        part.X = part.X.colwise().reverse().eval();
        part.H = part.H.colwise().reverse().eval();
        part.Z = part.Z.colwise().reverse().eval();
    }
    const FitResult b = direct_oracle(reversed, data.basis, init, cfg);
    CHECK((a.theta.beta - b.theta.beta).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("oracle recovers representable noiseless data with the penalty off") {
    std::mt19937_64 rng(29);
    std::normal_distribution<double> gauss(0.0, 1.0);
    ScenarioSpec spec;
    spec.example = 1;
    spec.n = 500;
    spec.seed = 29;
    spec.noise_sd = 0.0;
    spec.lambda = 0.0;
    GeneratedData data = generate(spec);
    // overwrite the response with an exactly representable function
    VectorXd beta_true(data.dims.fe_len());
    for (int i = 0; i < beta_true.size(); ++i) beta_true(i) = gauss(rng);
    for (auto& part : data.partitions) {
        const MatrixXd Xt = expand_design(part.X, part.H, data.basis);
        part.y = Xt * beta_true;
        part.Z.setZero();  // no random-effect contribution
    }
    ModelParams init = initial_params(data, 0.0);
    init.sigma_alpha = RandomEffectCov::isotropic(data.dims.q, 1e8);
    FitConfig cfg;
    cfg.variance_update = VarianceUpdate::Fixed;
    const FitResult fit = direct_oracle(data.partitions, data.basis, init, cfg);
    CHECK((fit.theta.beta - beta_true).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("cross-validation picks a grid value deterministically") {
    ScenarioSpec spec;
    spec.example = 1;
    spec.n = 400;
    spec.seed = 31;
    const GeneratedData data = generate(spec);
    const double l1 = select_lambda_cv(data.partitions, data.basis, data, 5, 8, 1e-4, 1e2);
    const double l2 = select_lambda_cv(data.partitions, data.basis, data, 5, 8, 1e-4, 1e2);
    CHECK(l1 == l2);
    CHECK(l1 >= 1e-4);
    CHECK(l1 <= 1e2);
}

TEST_CASE("evaluate reports coherent metrics") {
    ScenarioSpec spec;
    spec.example = 1;
    spec.n = 400;
    spec.seed = 37;
    spec.lambda = 1.0;
    const GeneratedData data = generate(spec);
    FitConfig cfg;
    std::vector<SuffStats> stats;
    for (const auto& p : data.partitions) stats.push_back(compute_local(p, data.basis));
    const FitResult fit = block_fit(aggregate(stats), initial_params(data, 1.0), cfg);
    const MetricsReport rep = evaluate(fit, data);

    CHECK(rep.fn_grid_mse.size() == 2);
    CHECK(rep.fn_grid_mse[0] >= 0.0);
    CHECK(rep.beta0_sqerr ==
          doctest::Approx((rep.beta0_hat - 2.0) * (rep.beta0_hat - 2.0)).epsilon(1e-12));
    CHECK(rep.alpha_mspe.size() == 1);
    CHECK(rep.y_test_mspe > 0.0);
    CHECK(rep.theta_stacked.size() == data.dims.fe_len() + data.dims.q);
    CHECK(pearson(rep.theta_stacked, rep.theta_stacked) == doctest::Approx(1.0));

    // repeated evaluation of the same fit is identical
    const MetricsReport rep2 = evaluate(fit, data);
    CHECK(rep.fn_grid_mse[1] == rep2.fn_grid_mse[1]);
    CHECK(rep.y_test_mspe == rep2.y_test_mspe);
}

TEST_CASE("estimation errors from independent datasets are nearly uncorrelated") {
    auto residual_fn = [](unsigned seed) {
        ScenarioSpec spec;
        spec.example = 1;
        spec.n = 400;
        spec.seed = seed;
        spec.lambda = 1.0;
        const GeneratedData data = generate(spec);
        FitConfig cfg;
        std::vector<SuffStats> stats;
        for (const auto& p : data.partitions) stats.push_back(compute_local(p, data.basis));
        const FitResult fit = block_fit(aggregate(stats), initial_params(data, 1.0), cfg);
        const MetricsReport rep = evaluate(fit, data);
        const MatrixXd grid = evaluation_grid(1);
        VectorXd resid(grid.rows());
        for (long r = 0; r < grid.rows(); ++r)
            resid(r) = rep.fn_grid_values(r, 1) - true_beta(1, 1, grid.row(r).transpose());
        return resid;
    };
    // average across several independent pairs: errors share no signal
    double mean_abs = 0.0;
    for (unsigned s = 0; s < 4; ++s)
        mean_abs += std::abs(pearson(residual_fn(100 + s), residual_fn(200 + s)));
    mean_abs /= 4.0;
    CHECK(mean_abs < 0.5);
}

TEST_CASE("evaluation grids match the stated sizes") {
    CHECK(evaluation_grid(1).rows() == 1000);
    CHECK(evaluation_grid(2).rows() == 2500);
    CHECK(evaluation_grid(2).cols() == 2);
    CHECK_THROWS_AS(evaluation_grid(3), ConfigError);
}
