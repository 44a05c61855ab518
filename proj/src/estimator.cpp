#include "vcmm/estimator.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <chrono>
#include <cmath>
#include <random>

namespace vcmm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

Eigen::LLT<MatrixXd> chol_or_throw(const MatrixXd& A, const char* label) {
    Eigen::LLT<MatrixXd> llt(A);
    if (llt.info() != Eigen::Success)
        throw NumericError(std::string(label) + " block system is not positive definite "
                           "(singular or indefinite); consider the svd method");
    return llt;
}

double param_delta(const VectorXd& a, const VectorXd& b) {
    if (a.size() == 0) return 0.0;
    return (a - b).cwiseAbs().maxCoeff();
}

constexpr double kVarFloor = 1e-12;

double clamped_sigma2(double quad, long n) {
    if (n <= 0) throw NumericError("variance update needs N > 0");
    const double v = quad / static_cast<double>(n);
    if (v < -1e-10)
        throw NumericError("variance update produced " + std::to_string(v) +
                           " (inconsistent summaries)");
    return std::max(v, kVarFloor);
}

}  // namespace

MatrixXd assemble_joint_precision(const MatrixXd& C, const MatrixXd& B, const MatrixXd& H,
                                  double sigma2_eps, const MatrixXd& P,
                                  const MatrixXd& sigma_alpha_inv) {
    const int fe = static_cast<int>(C.rows());
    const int q = static_cast<int>(H.rows());
    const double inv_s2 = 1.0 / sigma2_eps;
    MatrixXd J(fe + q, fe + q);
    J.topLeftCorner(fe, fe) = inv_s2 * C + P;
    J.topRightCorner(fe, q) = inv_s2 * B;
    J.bottomLeftCorner(q, fe) = inv_s2 * B.transpose();
    J.bottomRightCorner(q, q) = inv_s2 * H + sigma_alpha_inv;
    return J;
}

MatrixXd fisher_info(const SuffStats& agg, const ModelParams& theta_var) {
    if (!(theta_var.sigma2_eps > 0.0)) throw NumericError("fisher_info: sigma2_eps <= 0");
    const MatrixXd P = penalty_matrix(theta_var.penalty, agg.fe_len());
    const MatrixXd Sinv = agg.q_len() > 0 ? theta_var.sigma_alpha.inverse()
                                          : MatrixXd::Zero(0, 0);
    return assemble_joint_precision(agg.C, agg.B, agg.H, theta_var.sigma2_eps, P, Sinv);
}

PosteriorBlocks posterior_blocks(const ModelParams& theta, const SuffStats& agg) {
    const int fe = agg.fe_len();
    const int q = agg.q_len();
    PosteriorBlocks out;
    const MatrixXd J = fisher_info(agg, theta);
    out.V_beta = J.topLeftCorner(fe, fe);
    out.V_beta_alpha = J.topRightCorner(fe, q);
    out.V_alpha = J.bottomRightCorner(q, q);

    VectorXd rhs(fe + q);
    rhs << agg.b / theta.sigma2_eps, agg.d / theta.sigma2_eps;
    Eigen::LLT<MatrixXd> llt(J);
    if (llt.info() != Eigen::Success) {
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(J, Eigen::EigenvaluesOnly);
        throw NumericError("posterior_blocks: joint precision singular (smallest eigenvalue " +
                           std::to_string(es.eigenvalues().minCoeff()) + ")");
    }
    const VectorXd mu = llt.solve(rhs);
    out.mu_beta = mu.head(fe);
    out.mu_alpha = mu.tail(q);
    return out;
}

VarianceEstimate update_variance(const ModelParams& theta, const SuffStats& agg) {
    VarianceEstimate est{clamped_sigma2(residual_quadform(theta, agg), agg.n),
                         theta.sigma_alpha.projected_from(theta.alpha)};
    return est;
}

// ---------------------------------------------------------------------------
// Blockwise sweeps (Algorithms 1 and 2 share this loop; the solver differs)
// ---------------------------------------------------------------------------

namespace {

struct BlockSolvers {
    // Rebuilt whenever the variance components change.
    virtual void refresh(const SuffStats& agg, const ModelParams& theta, const MatrixXd& P) = 0;
    virtual VectorXd solve_beta(const VectorXd& rhs) = 0;
    virtual VectorXd solve_alpha(const VectorXd& rhs) = 0;
    virtual ~BlockSolvers() = default;
};

struct CholeskySolvers final : BlockSolvers {
    Eigen::LLT<MatrixXd> llt_G, llt_H;
    bool has_alpha = false;
    void refresh(const SuffStats& agg, const ModelParams& theta, const MatrixXd& P) override {
        llt_G = chol_or_throw(agg.C + theta.sigma2_eps * P, "fixed-effect");
        has_alpha = agg.q_len() > 0;
        if (has_alpha)
            llt_H = chol_or_throw(agg.H + theta.sigma2_eps * theta.sigma_alpha.inverse(),
                                  "random-effect");
    }
    VectorXd solve_beta(const VectorXd& rhs) override { return llt_G.solve(rhs); }
    VectorXd solve_alpha(const VectorXd& rhs) override { return llt_H.solve(rhs); }
};

struct SpectralSolvers final : BlockSolvers {
    SpectralMode mode_G, mode_H;
    SpectralFactors fac_G, fac_H;
    double recon_G = 0.0, recon_H = 0.0;
    void refresh(const SuffStats& agg, const ModelParams& theta, const MatrixXd& P) override {
        const MatrixXd G = agg.C + theta.sigma2_eps * P;
        fac_G = spectral_decompose(G, mode_G);
        recon_G = reconstruction_error(fac_G, G);
        if (agg.q_len() > 0) {
            const MatrixXd Haug = agg.H + theta.sigma2_eps * theta.sigma_alpha.inverse();
            fac_H = spectral_decompose(Haug, mode_H);
            recon_H = reconstruction_error(fac_H, Haug);
        }
    }
    VectorXd solve_beta(const VectorXd& rhs) override { return stabilized_solve(fac_G, rhs); }
    VectorXd solve_alpha(const VectorXd& rhs) override { return stabilized_solve(fac_H, rhs); }
};

FitResult run_block_sweeps(const SuffStats& agg, const ModelParams& init, const FitConfig& cfg,
                           const PartitionsMeta& meta, BlockSolvers& solvers,
                           const char* method_label) {
    (void)meta;
    const auto t0 = Clock::now();
    const int fe = agg.fe_len();
    const int q = agg.q_len();

    ModelParams theta = init;
    if (theta.beta.size() == 0) theta.beta = VectorXd::Zero(fe);
    if (theta.alpha.size() == 0) theta.alpha = VectorXd::Zero(q);
    if (theta.beta.size() != fe || theta.alpha.size() != q)
        throw DimensionError("block_fit: init parameter dims vs summary dims");

    const MatrixXd P = penalty_matrix(theta.penalty, fe);
    solvers.refresh(agg, theta, P);

    FitResult res;
    res.method = method_label;
    bool converged = false;
    int it = 0;
    // The two collinear coefficient blocks (the intercept basis reproduces
    // constants, grouping designs contain the same direction) give the sweep
    // map a dominant mode with ratio near 1. When consecutive sweep deltas
    // align, extrapolate past that mode; keep the step only if the objective
    // does not increase.
    VectorXd prev_delta;
    for (; it < cfg.max_iter; ++it) {
        const VectorXd beta_prev = theta.beta;
        const VectorXd alpha_prev = theta.alpha;

        theta.beta = solvers.solve_beta(agg.b - agg.B * theta.alpha);
        if (q > 0) theta.alpha = solvers.solve_alpha(agg.d - agg.B.transpose() * theta.beta);

        const double dtheta =
            std::max(param_delta(theta.beta, beta_prev), param_delta(theta.alpha, alpha_prev));

        VectorXd delta(fe + q);
        delta << theta.beta - beta_prev, theta.alpha - alpha_prev;
        if (prev_delta.size() == delta.size()) {
            const double nd = delta.norm(), np = prev_delta.norm();
            if (nd > 0.0 && np > 0.0) {
                const double rho = nd / np;
                const double cosine = delta.dot(prev_delta) / (nd * np);
                if (rho > 0.2 && rho < 0.9999 && cosine > 0.9) {
                    const double obj_now = joint_objective(theta, agg);
                    ModelParams trial = theta;
                    const double factor = rho / (1.0 - rho);
                    trial.beta += factor * delta.head(fe);
                    trial.alpha += factor * delta.tail(q);
                    if (joint_objective(trial, agg) <= obj_now) {
                        theta.beta = trial.beta;
                        theta.alpha = trial.alpha;
                        delta.resize(0);  // restart ratio estimation
                    }
                }
            }
        }
        prev_delta = delta;

        if (cfg.variance_update == VarianceUpdate::Iterate) {
            const VarianceEstimate est = update_variance(theta, agg);
            theta.sigma2_eps = est.sigma2_eps;
            theta.sigma_alpha = est.sigma_alpha;
            solvers.refresh(agg, theta, P);
        }

        res.objective_trace.push_back(joint_objective(theta, agg));
        const double g_norm = gradient(theta, agg, true).inf_norm();
        if (g_norm <= cfg.tol_grad || dtheta <= cfg.tol_param) {
            converged = true;
            ++it;
            break;
        }
    }

    res.theta = theta;
    res.iterations = it;
    res.converged = converged;
    res.gradient_norm = gradient(theta, agg, true).inf_norm();
    res.info_matrix = fisher_info(agg, theta);
    res.seconds = seconds_since(t0);
    return res;
}

}  // namespace

FitResult block_fit(const SuffStats& agg, const ModelParams& init, const FitConfig& cfg,
                    const PartitionsMeta& meta) {
    CholeskySolvers solvers;
    return run_block_sweeps(agg, init, cfg, meta, solvers, "ss");
}

FitResult svd_fit(const SuffStats& agg, const ModelParams& init, const FitConfig& cfg,
                  const PartitionsMeta& meta) {
    SpectralSolvers solvers;
    solvers.mode_G = cfg.svd_beta;
    solvers.mode_H = cfg.svd_alpha;
    FitResult res = run_block_sweeps(agg, init, cfg, meta, solvers, "svd");
    res.recon_error_G = solvers.recon_G;
    res.recon_error_H = solvers.recon_H;
    return res;
}

// ---------------------------------------------------------------------------
// One-step estimator
// ---------------------------------------------------------------------------

double clamp_variance(double quad, long n) { return clamped_sigma2(quad, n); }

MatrixXd data_curvature_joint(const SuffStats& stats) {
    const int fe = stats.fe_len();
    const int q = stats.q_len();
    MatrixXd D(fe + q, fe + q);
    D.topLeftCorner(fe, fe) = stats.C;
    D.topRightCorner(fe, q) = stats.B;
    D.bottomLeftCorner(q, fe) = stats.B.transpose();
    D.bottomRightCorner(q, q) = stats.H;
    return D;
}

ModelParams onestep_apply(const ModelParams& theta0, VectorXd g_beta_sum, VectorXd g_alpha_sum,
                          const MatrixXd& pivot_curvature, long n_pivot, long N) {
    const int fe = static_cast<int>(theta0.beta.size());
    const int q = static_cast<int>(theta0.alpha.size());
    if (pivot_curvature.rows() != fe + q)
        throw DimensionError("onestep_apply: curvature dimension vs theta dims");
    if (n_pivot <= 0) throw NumericError("onestep_apply: pivot node is empty");

    const MatrixXd P = penalty_matrix(theta0.penalty, fe);
    const MatrixXd Sinv = q > 0 ? theta0.sigma_alpha.inverse() : MatrixXd::Zero(0, 0);
    g_beta_sum += P * theta0.beta;
    if (q > 0) g_alpha_sum += Sinv * theta0.alpha;
    VectorXd g(fe + q);
    g << g_beta_sum, g_alpha_sum;

    const double scale =
        static_cast<double>(N) / static_cast<double>(n_pivot) / theta0.sigma2_eps;
    MatrixXd K1 = scale * pivot_curvature;
    K1.topLeftCorner(fe, fe) += P;
    if (q > 0) K1.bottomRightCorner(q, q) += Sinv;

    const SpectralFactors facK = spectral_decompose(K1, SpectralMode::full());
    if (facK.rank() < fe + q || facK.S(facK.rank() - 1) <= 1e-12 * facK.S(0))
        throw NumericError("one-step pivot Hessian is singular");

    const VectorXd step = stabilized_solve(facK, g);
    ModelParams theta1 = theta0;
    theta1.beta = theta0.beta - step.head(fe);
    theta1.alpha = theta0.alpha - step.tail(q);
    return theta1;
}

FitResult onestep_fit(const std::vector<SuffStats>& local_stats, const ModelParams& init,
                      const FitConfig& cfg) {
    const auto t0 = Clock::now();
    if (local_stats.empty()) throw DimensionError("onestep_fit: no partitions");
    const int pivot = cfg.pivot_node;
    if (pivot < 0 || pivot >= static_cast<int>(local_stats.size()))
        throw ConfigError("onestep_fit: pivot node " + std::to_string(pivot) +
                          " does not exist");
    const SuffStats& piv = local_stats[pivot];
    if (piv.n == 0) throw NumericError("onestep_fit: pivot node is empty");
    const int fe = piv.fe_len();
    const int q = piv.q_len();

    long N = 0;
    for (const auto& s : local_stats) {
        if (s.fe_len() != fe || s.q_len() != q)
            throw DimensionError("onestep_fit: partition summary dims disagree");
        N += s.n;
    }

    // (1) pilot from the pivot node alone
    FitConfig pilot_cfg = cfg;
    pilot_cfg.method = FitMethod::SS;
    const FitResult pilot = block_fit(piv, init, pilot_cfg);
    ModelParams theta0 = pilot.theta;

    // (2) per-node unpenalized scores at theta0, summed in node order
    VectorXd g_beta = VectorXd::Zero(fe);
    VectorXd g_alpha = VectorXd::Zero(q);
    for (const auto& s : local_stats) {
        const ScoreVector sk = gradient(theta0, s, false);
        g_beta += sk.g_beta;
        g_alpha += sk.g_alpha;
    }

    // (3)-(4) shared correction step
    ModelParams theta1 =
        onestep_apply(theta0, std::move(g_beta), std::move(g_alpha),
                      data_curvature_joint(piv), piv.n, N);

    // (5) second round: per-node residual scalars at theta1
    double rss = 0.0;
    for (const auto& s : local_stats) rss += residual_quadform(theta1, s);
    theta1.sigma2_eps = clamped_sigma2(rss, N);

    // (6) structure-projected covariance from the corrected alpha
    if (q > 0) theta1.sigma_alpha = theta1.sigma_alpha.projected_from(theta1.alpha);

    FitResult res;
    res.method = "onestep";
    res.theta = theta1;
    res.iterations = pilot.iterations + 1;
    res.converged = pilot.converged;
    const SuffStats agg = aggregate(local_stats);
    res.objective_trace = {joint_objective(theta0, agg), joint_objective(theta1, agg)};
    res.gradient_norm = gradient(theta1, agg, true).inf_norm();
    res.info_matrix = fisher_info(agg, theta1);
    res.seconds = seconds_since(t0);
    return res;
}

FitOutput fit_from_aggregate(const SuffStats& agg, const ModelParams& init, const FitConfig& cfg,
                             const PartitionsMeta& meta) {
    FitOutput out;
    switch (cfg.method) {
        case FitMethod::SS:
            out.fit = block_fit(agg, init, cfg, meta);
            break;
        case FitMethod::SVD:
            out.fit = svd_fit(agg, init, cfg, meta);
            break;
        case FitMethod::Gibbs: {
            // point-estimate the variance components first, then sample at them
            FitResult base = block_fit(agg, init, cfg, meta);
            GibbsResult chain = gibbs_sample(base.theta, agg, cfg);
            base.method = "gibbs";
            base.theta.beta = chain.mean_beta;
            base.theta.alpha = chain.mean_alpha;
            out.fit = std::move(base);
            out.gibbs = std::move(chain);
            break;
        }
        default:
            throw ConfigError("fit_from_aggregate handles ss, svd and gibbs only");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gibbs sampler
// ---------------------------------------------------------------------------

GibbsResult gibbs_sample(const ModelParams& theta_var, const SuffStats& agg,
                         const FitConfig& cfg) {
    const int fe = agg.fe_len();
    const int q = agg.q_len();
    const int total = cfg.gibbs.n_iter;
    const int burn = cfg.gibbs.burn_in;
    if (total <= burn) throw ConfigError("gibbs: n_iter must exceed burn_in");
    const int kept = total - burn;

    const double s2 = theta_var.sigma2_eps;
    const MatrixXd P = penalty_matrix(theta_var.penalty, fe);
    const MatrixXd prec_beta = agg.C / s2 + P;
    Eigen::LLT<MatrixXd> llt_beta(prec_beta);
    if (llt_beta.info() != Eigen::Success)
        throw NumericError("gibbs: beta conditional precision not positive definite");
    Eigen::LLT<MatrixXd> llt_alpha;
    if (q > 0) {
        const MatrixXd prec_alpha = agg.H / s2 + theta_var.sigma_alpha.inverse();
        llt_alpha.compute(prec_alpha);
        if (llt_alpha.info() != Eigen::Success)
            throw NumericError("gibbs: alpha conditional precision not positive definite");
    }

    std::mt19937_64 rng(cfg.gibbs.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto draw_gaussian = [&](const Eigen::LLT<MatrixXd>& llt, const VectorXd& rhs) {
        // mean m solves (LL') m = rhs; then x = m + L^-T z has covariance (LL')^-1
        const VectorXd m = llt.solve(rhs);
        VectorXd z(rhs.size());
        for (int i = 0; i < z.size(); ++i) z(i) = gauss(rng);
        return VectorXd(m + llt.matrixU().solve(z));
    };

    VectorXd beta = theta_var.beta.size() == fe ? theta_var.beta : VectorXd::Zero(fe);
    VectorXd alpha = theta_var.alpha.size() == q ? theta_var.alpha : VectorXd::Zero(q);

    GibbsResult out;
    if (cfg.gibbs.store_draws) {
        out.draws_beta.resize(kept, fe);
        out.draws_alpha.resize(kept, q);
    }
    VectorXd sum_beta = VectorXd::Zero(fe), sum_alpha = VectorXd::Zero(q);

    for (int t = 0; t < total; ++t) {
        beta = draw_gaussian(llt_beta, (agg.b - agg.B * alpha) / s2);
        if (q > 0) alpha = draw_gaussian(llt_alpha, (agg.d - agg.B.transpose() * beta) / s2);
        if (t >= burn) {
            const int k = t - burn;
            if (cfg.gibbs.store_draws) {
                out.draws_beta.row(k) = beta.transpose();
                out.draws_alpha.row(k) = alpha.transpose();
            }
            sum_beta += beta;
            sum_alpha += alpha;
        }
    }
    out.mean_beta = sum_beta / kept;
    out.mean_alpha = sum_alpha / kept;

    if (cfg.gibbs.store_draws) {
        // batch-means MCSE with ~sqrt(kept) batches
        const int nb = std::max(2, static_cast<int>(std::sqrt(static_cast<double>(kept))));
        const int bl = kept / nb;
        auto mcse = [&](const MatrixXd& draws, const VectorXd& mean) {
            VectorXd se(draws.cols());
            for (int j = 0; j < draws.cols(); ++j) {
                double ssq = 0.0;
                for (int bidx = 0; bidx < nb; ++bidx) {
                    const double bm = draws.col(j).segment(bidx * bl, bl).mean();
                    ssq += (bm - mean(j)) * (bm - mean(j));
                }
                se(j) = std::sqrt(ssq / (nb - 1) / nb);
            }
            return se;
        };
        out.mcse_beta = mcse(out.draws_beta, out.mean_beta);
        out.mcse_alpha = mcse(out.draws_alpha, out.mean_alpha);
    }
    return out;
}

}  // namespace vcmm
