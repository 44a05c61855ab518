#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "vcmm/estimator.hpp"

#include <random>

using namespace vcmm;

namespace {

struct Instance {
    Partition part;
    TensorSplineBasis basis;
    SuffStats stats;
    ModelParams theta0;  // valid variance components, zero coefficients
};

Instance random_instance(long n, int p, int q, unsigned seed, double lambda = 0.2) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Instance inst{Partition{}, TensorSplineBasis({UnivariateBasis::uniform(3, 2)}),
                  SuffStats{}, ModelParams{}};
    inst.part.y.resize(n);
    inst.part.X.resize(n, p);
    inst.part.H.resize(n, 1);
    inst.part.Z.resize(n, q);
    for (long i = 0; i < n; ++i) {
        inst.part.y(i) = gauss(rng);
        for (int j = 0; j < p; ++j) inst.part.X(i, j) = gauss(rng);
        inst.part.H(i, 0) = unif(rng);
        for (int j = 0; j < q; ++j) inst.part.Z(i, j) = gauss(rng);
    }
    inst.stats = compute_local(inst.part, inst.basis);
    inst.theta0.beta = VectorXd::Zero(inst.stats.fe_len());
    inst.theta0.alpha = VectorXd::Zero(q);
    inst.theta0.sigma2_eps = 0.5;
    inst.theta0.sigma_alpha = RandomEffectCov::isotropic(q, 0.8);
    inst.theta0.penalty = PenaltySpec::ridge(lambda);
    return inst;
}

// independent oracle: assemble and solve the joint normal equations densely
VectorXd joint_solve_oracle(const Instance& inst) {
    const MatrixXd Xt = expand_design(inst.part.X, inst.part.H, inst.basis);
    const int fe = static_cast<int>(Xt.cols());
    const int q = static_cast<int>(inst.part.Z.cols());
    const double s2 = inst.theta0.sigma2_eps;
    MatrixXd J(fe + q, fe + q);
    J.topLeftCorner(fe, fe) =
        Xt.transpose() * Xt / s2 + penalty_matrix(inst.theta0.penalty, fe);
    J.topRightCorner(fe, q) = Xt.transpose() * inst.part.Z / s2;
    J.bottomLeftCorner(q, fe) = J.topRightCorner(fe, q).transpose();
    J.bottomRightCorner(q, q) =
        inst.part.Z.transpose() * inst.part.Z / s2 + inst.theta0.sigma_alpha.inverse();
    VectorXd rhs(fe + q);
    rhs << Xt.transpose() * inst.part.y / s2, inst.part.Z.transpose() * inst.part.y / s2;
    return J.ldlt().solve(rhs);
}

}  // namespace

TEST_CASE("posterior mean shrinks monotonically with the ridge weight") {
    Instance inst = random_instance(120, 1, 3, 5);
    double prev = std::numeric_limits<double>::infinity();
    for (double lambda : {1.0, 10.0, 100.0, 1000.0}) {
        inst.theta0.penalty = PenaltySpec::ridge(lambda);
        const PosteriorBlocks pb = posterior_blocks(inst.theta0, inst.stats);
        const double norm = pb.mu_beta.norm();
        CHECK(norm < prev);
        prev = norm;
    }
}

TEST_CASE("posterior mean matches the dense joint normal-equations oracle") {
    const Instance inst = random_instance(8 * 5, 0, 2, 7);
    const PosteriorBlocks pb = posterior_blocks(inst.theta0, inst.stats);
    const VectorXd mu = joint_solve_oracle(inst);
    const int fe = inst.stats.fe_len();
    CHECK((pb.mu_beta - mu.head(fe)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK((pb.mu_alpha - mu.tail(2)).cwiseAbs().maxCoeff() < 1e-9);
    // precision blocks follow the stated identities
    CHECK((pb.V_beta - (inst.stats.C / inst.theta0.sigma2_eps +
                        penalty_matrix(inst.theta0.penalty, fe)))
              .cwiseAbs()
              .maxCoeff() < 1e-12);
    CHECK((pb.V_beta_alpha - inst.stats.B / inst.theta0.sigma2_eps).cwiseAbs().maxCoeff() <
          1e-12);
}

TEST_CASE("orthogonal designs decouple the posterior blocks") {
    Instance inst = random_instance(60, 0, 3, 9);
    inst.stats.B.setZero();  // force orthogonality
    const PosteriorBlocks pb = posterior_blocks(inst.theta0, inst.stats);
    const double s2 = inst.theta0.sigma2_eps;
    const VectorXd mu_beta_solo =
        (inst.stats.C / s2 + penalty_matrix(inst.theta0.penalty, inst.stats.fe_len()))
            .ldlt()
            .solve(inst.stats.b / s2);
    const VectorXd mu_alpha_solo =
        (inst.stats.H / s2 + inst.theta0.sigma_alpha.inverse()).ldlt().solve(inst.stats.d / s2);
    CHECK((pb.mu_beta - mu_beta_solo).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((pb.mu_alpha - mu_alpha_solo).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("block_fit recovers representable noiseless data") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Instance inst = random_instance(400, 1, 2, 11, 0.0);
    VectorXd beta_true(inst.stats.fe_len());
    for (int i = 0; i < beta_true.size(); ++i) beta_true(i) = gauss(rng);
    const MatrixXd Xt = expand_design(inst.part.X, inst.part.H, inst.basis);
    inst.part.y = Xt * beta_true;  // alpha = 0, no noise
    inst.stats = compute_local(inst.part, inst.basis);

    ModelParams init = inst.theta0;
    init.penalty.lambda = 0.0;
    init.sigma_alpha = RandomEffectCov::isotropic(2, 1e8);  // prior off
    FitConfig cfg;
    cfg.variance_update = VarianceUpdate::Fixed;
    const FitResult fit = block_fit(inst.stats, init, cfg);
    CHECK(fit.converged);
    CHECK((fit.theta.beta - beta_true).cwiseAbs().maxCoeff() < 1e-8);
    (void)unif;
}

TEST_CASE("block_fit at fixed variances reaches the posterior mode") {
    for (unsigned seed = 40; seed < 44; ++seed) {
        const Instance inst = random_instance(150, 1, 4, seed);
        FitConfig cfg;
        cfg.variance_update = VarianceUpdate::Fixed;
        const FitResult fit = block_fit(inst.stats, inst.theta0, cfg);
        CHECK(fit.converged);
        const PosteriorBlocks pb = posterior_blocks(inst.theta0, inst.stats);
        const double scale = std::max(1.0, pb.mu_beta.cwiseAbs().maxCoeff());
        CHECK((fit.theta.beta - pb.mu_beta).cwiseAbs().maxCoeff() / scale < 1e-8);
        CHECK((fit.theta.alpha - pb.mu_alpha).cwiseAbs().maxCoeff() / scale < 1e-8);
    }
}

TEST_CASE("objective trace is nonincreasing") {
    for (unsigned seed = 50; seed < 56; ++seed) {
        const Instance inst = random_instance(100, 1, 3, seed);
        for (auto vu : {VarianceUpdate::Fixed, VarianceUpdate::Iterate}) {
            FitConfig cfg;
            cfg.variance_update = vu;
            const FitResult fit = block_fit(inst.stats, inst.theta0, cfg);
            for (size_t i = 1; i < fit.objective_trace.size(); ++i)
                CHECK(fit.objective_trace[i] <= fit.objective_trace[i - 1] + 1e-10);
        }
    }
}

TEST_CASE("svd_fit with full decomposition matches block_fit") {
    const Instance inst = random_instance(200, 1, 3, 61);
    FitConfig cfg;
    const FitResult a = block_fit(inst.stats, inst.theta0, cfg);
    const FitResult b = svd_fit(inst.stats, inst.theta0, cfg);
    CHECK((a.theta.beta - b.theta.beta).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((a.theta.alpha - b.theta.alpha).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(a.theta.sigma2_eps == doctest::Approx(b.theta.sigma2_eps).epsilon(1e-10));
    CHECK(b.recon_error_G <= 1e-10);
}

TEST_CASE("svd_fit survives a singular Gram matrix where Cholesky fails") {
    // duplicate covariate column makes C exactly singular with lambda = 0
    Instance inst = random_instance(300, 2, 2, 67, 0.0);
    inst.part.X.col(1) = inst.part.X.col(0);
    inst.stats = compute_local(inst.part, inst.basis);
    ModelParams init = inst.theta0;
    init.penalty.lambda = 0.0;

    FitConfig cfg;
    cfg.variance_update = VarianceUpdate::Fixed;
    CHECK_THROWS_AS(block_fit(inst.stats, init, cfg), NumericError);

    FitConfig svd_cfg = cfg;
    svd_cfg.svd_beta = SpectralMode::truncated_tau(1e-10);
    const FitResult fit = svd_fit(inst.stats, init, svd_cfg);
    // pseudo-inverse path converges and fits the data
    const double rss = residual_quadform(fit.theta, inst.stats);
    CHECK(std::isfinite(rss));
    CHECK(fit.iterations >= 1);
}

TEST_CASE("one-step with a single node stays at the pilot") {
    const Instance inst = random_instance(250, 1, 3, 71);
    FitConfig cfg;
    const FitResult fit = onestep_fit({inst.stats}, inst.theta0, cfg);
    // theta0 is the full-data mode, so the correction is ~0
    FitConfig ss_cfg;
    const FitResult ss = block_fit(inst.stats, inst.theta0, ss_cfg);
    CHECK((fit.theta.beta - ss.theta.beta).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(fit.iterations == ss.iterations + 1);
}

TEST_CASE("one-step errors on an empty or missing pivot") {
    const Instance inst = random_instance(50, 1, 2, 73);
    FitConfig cfg;
    cfg.pivot_node = 5;
    CHECK_THROWS_AS(onestep_fit({inst.stats}, inst.theta0, cfg), ConfigError);
    SuffStats empty = SuffStats::zero(inst.stats.fe_len(), inst.stats.q_len());
    FitConfig cfg2;
    CHECK_THROWS_AS(onestep_fit({empty, inst.stats}, inst.theta0, cfg2), NumericError);
}

TEST_CASE("gibbs draws concentrate at the mode when the noise is tiny") {
    Instance inst = random_instance(120, 0, 2, 79);
    inst.theta0.sigma2_eps = 1e-8;
    FitConfig cfg;
    cfg.gibbs.n_iter = 3000;
    cfg.gibbs.burn_in = 500;
    cfg.gibbs.seed = 4;
    const GibbsResult chain = gibbs_sample(inst.theta0, inst.stats, cfg);
    const PosteriorBlocks pb = posterior_blocks(inst.theta0, inst.stats);
    CHECK((chain.mean_beta - pb.mu_beta).cwiseAbs().maxCoeff() < 1e-3);
    // posterior sd scales with sigma; draws are nearly degenerate
    VectorXd sd = (chain.draws_beta.rowwise() - chain.mean_beta.transpose())
                      .colwise()
                      .norm() /
                  std::sqrt(static_cast<double>(chain.draws_beta.rows()));
    CHECK(sd.maxCoeff() < 1e-3);
}

TEST_CASE("independent gibbs seeds agree within combined Monte Carlo error") {
    const Instance inst = random_instance(100, 0, 3, 83);
    FitConfig cfg;
    cfg.gibbs.n_iter = 8000;
    cfg.gibbs.burn_in = 1000;
    cfg.gibbs.seed = 11;
    const GibbsResult a = gibbs_sample(inst.theta0, inst.stats, cfg);
    cfg.gibbs.seed = 17;
    const GibbsResult b = gibbs_sample(inst.theta0, inst.stats, cfg);
    for (int i = 0; i < a.mean_beta.size(); ++i) {
        const double tol = 4.0 * std::hypot(a.mcse_beta(i), b.mcse_beta(i));
        CHECK(std::abs(a.mean_beta(i) - b.mean_beta(i)) <= tol);
    }
}

TEST_CASE("variance update equals the raw residual mean square") {
    const Instance inst = random_instance(100, 1, 2, 89);
    std::mt19937_64 rng(90);
    std::normal_distribution<double> gauss(0.0, 1.0);
    ModelParams theta = inst.theta0;
    for (int i = 0; i < theta.beta.size(); ++i) theta.beta(i) = gauss(rng);
    for (int i = 0; i < theta.alpha.size(); ++i) theta.alpha(i) = gauss(rng);

    const MatrixXd Xt = expand_design(inst.part.X, inst.part.H, inst.basis);
    const double rss =
        (inst.part.y - Xt * theta.beta - inst.part.Z * theta.alpha).squaredNorm();
    const VarianceEstimate est = update_variance(theta, inst.stats);
    CHECK(est.sigma2_eps == doctest::Approx(rss / inst.stats.n).epsilon(1e-12));
}

TEST_CASE("variance update edge cases") {
    Instance inst = random_instance(150, 1, 0, 97, 0.0);
    // exact fit: zero residual clamps to the floor
    VectorXd beta_true(inst.stats.fe_len());
    beta_true.setConstant(0.3);
    inst.part.y = expand_design(inst.part.X, inst.part.H, inst.basis) * beta_true;
    inst.stats = compute_local(inst.part, inst.basis);
    ModelParams theta = inst.theta0;
    theta.beta = beta_true;
    theta.sigma_alpha = RandomEffectCov::isotropic(0, 1.0);
    const VarianceEstimate est = update_variance(theta, inst.stats);
    CHECK(est.sigma2_eps <= 1e-10);

    // zero parameters: plain mean square of y
    theta.beta.setZero();
    const VarianceEstimate est2 = update_variance(theta, inst.stats);
    CHECK(est2.sigma2_eps == doctest::Approx(inst.stats.a / inst.stats.n).epsilon(1e-12));
}

TEST_CASE("fisher information is the curvature of the joint objective") {
    const Instance inst = random_instance(90, 1, 2, 101);
    const MatrixXd info = fisher_info(inst.stats, inst.theta0);
    const int fe = inst.stats.fe_len();
    const int D = fe + inst.stats.q_len();
    // finite differences of the analytic gradient
    ModelParams theta = inst.theta0;
    std::mt19937_64 rng(102);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int i = 0; i < theta.beta.size(); ++i) theta.beta(i) = gauss(rng);
    for (int i = 0; i < theta.alpha.size(); ++i) theta.alpha(i) = gauss(rng);
    const double h = 1e-5;
    for (int j = 0; j < D; j += 3) {
        ModelParams up = theta, dn = theta;
        if (j < fe) {
            up.beta(j) += h;
            dn.beta(j) -= h;
        } else {
            up.alpha(j - fe) += h;
            dn.alpha(j - fe) -= h;
        }
        const VectorXd fd =
            (gradient(up, inst.stats, true).stacked() - gradient(dn, inst.stats, true).stacked()) /
            (2.0 * h);
        const double scale = std::max(1.0, info.col(j).cwiseAbs().maxCoeff());
        CHECK((fd - info.col(j)).cwiseAbs().maxCoeff() / scale < 1e-6);
    }
}

TEST_CASE("fisher information block structure and scaling") {
    Instance inst = random_instance(70, 0, 3, 103);
    inst.stats.B.setZero();
    const int fe = inst.stats.fe_len();
    const MatrixXd info = fisher_info(inst.stats, inst.theta0);
    CHECK(info.topRightCorner(fe, 3).cwiseAbs().maxCoeff() == 0.0);

    ModelParams scaled = inst.theta0;
    scaled.sigma2_eps *= 4.0;
    const MatrixXd info4 = fisher_info(inst.stats, scaled);
    const MatrixXd P = penalty_matrix(inst.theta0.penalty, fe);
    const MatrixXd data_block = info.topLeftCorner(fe, fe) - P;
    const MatrixXd data_block4 = info4.topLeftCorner(fe, fe) - P;
    CHECK((data_block4 - 0.25 * data_block).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("fit_from_aggregate dispatches and attaches gibbs chains") {
    const Instance inst = random_instance(80, 1, 2, 107);
    FitConfig cfg;
    cfg.method = FitMethod::Gibbs;
    cfg.gibbs.n_iter = 500;
    cfg.gibbs.burn_in = 100;
    const FitOutput out = fit_from_aggregate(inst.stats, inst.theta0, cfg);
    CHECK(out.gibbs.has_value());
    CHECK(out.fit.method == "gibbs");
    CHECK(out.fit.theta.beta.size() == inst.stats.fe_len());
}
