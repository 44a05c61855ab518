#pragma once

#include "vcmm/linalg.hpp"
#include "vcmm/suffstats.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace vcmm {

/// Posterior mean and precision blocks of (beta, alpha) at fixed variance
/// components: V_beta = C/s2 + P, V_alpha = H/s2 + Sigma^-1, V_ba = B/s2.
struct PosteriorBlocks {
    VectorXd mu_beta;
    VectorXd mu_alpha;
    MatrixXd V_beta;
    MatrixXd V_alpha;
    MatrixXd V_beta_alpha;
};

enum class FitMethod { Direct, SS, SVD, OneStep, Gibbs };
enum class VarianceUpdate { Fixed, Iterate };

struct GibbsConfig {
    int n_iter = 20000;
    int burn_in = 2000;
    std::uint64_t seed = 1;
    bool store_draws = true;
};

struct FitConfig {
    FitMethod method = FitMethod::SS;
    int max_iter = 200;
    double tol_grad = 1e-8;
    double tol_param = 1e-10;
    VarianceUpdate variance_update = VarianceUpdate::Iterate;
    SpectralMode svd_beta = SpectralMode::full();   // applied to G = C + s2 P
    SpectralMode svd_alpha = SpectralMode::full();  // applied to H_aug = H + s2 Sigma^-1
    int pivot_node = 0;
    GibbsConfig gibbs;
};

struct PartitionsMeta {
    int K = 1;
    std::vector<long> n_k;
};

struct FitResult {
    ModelParams theta;
    int iterations = 0;
    bool converged = false;
    std::vector<double> objective_trace;
    double gradient_norm = 0.0;
    std::optional<MatrixXd> info_matrix;
    double seconds = 0.0;
    std::string method;
    // SVD diagnostics (svd method only): relative Frobenius reconstruction
    // error of the factors used for the last sweep.
    double recon_error_G = 0.0;
    double recon_error_H = 0.0;
};

struct GibbsResult {
    MatrixXd draws_beta;   // (kept iterations) x (p+1)Q
    MatrixXd draws_alpha;  // (kept iterations) x q
    VectorXd mean_beta;
    VectorXd mean_alpha;
    VectorXd mcse_beta;   // batch-means Monte Carlo standard errors
    VectorXd mcse_alpha;
};

PosteriorBlocks posterior_blocks(const ModelParams& theta, const SuffStats& agg);

/// Blockwise Gauss-Seidel on the aggregated summaries: alternate
///   beta  <- (C + s2 P)^-1 (b - B alpha)
///   alpha <- (H + s2 Sigma^-1)^-1 (d - B' beta)
/// with optional variance refresh between sweeps.
FitResult block_fit(const SuffStats& agg, const ModelParams& init, const FitConfig& cfg,
                    const PartitionsMeta& meta = {});

/// Same iteration with every block solve routed through the spectral factors
/// of G and H_aug (decomposed once per variance refresh).
FitResult svd_fit(const SuffStats& agg, const ModelParams& init, const FitConfig& cfg,
                  const PartitionsMeta& meta = {});

/// Single Newton correction from a pivot-estimated global Hessian:
/// pilot theta0 = block_fit on the pivot node alone; global score summed
/// over nodes (penalty added once); K1 = (N/n_pivot) * pivot data curvature
/// + prior blocks; theta1 = theta0 - K1^-1 g(theta0); s2 from the Eq-9
/// quadratic form collected per node at theta1.
FitResult onestep_fit(const std::vector<SuffStats>& local_stats, const ModelParams& init,
                      const FitConfig& cfg);

/// Alternating Gaussian draws from the two full conditionals at fixed
/// variance components.
GibbsResult gibbs_sample(const ModelParams& theta_var, const SuffStats& agg,
                         const FitConfig& cfg);

struct VarianceEstimate {
    double sigma2_eps;
    RandomEffectCov sigma_alpha;
};

VarianceEstimate update_variance(const ModelParams& theta, const SuffStats& agg);

/// [[C/s2 + P, B/s2], [B'/s2, H/s2 + Sigma^-1]] — plug-in curvature whose
/// inverse supplies standard errors and pointwise bands.
MatrixXd fisher_info(const SuffStats& agg, const ModelParams& theta_var);

/// Assembled once here so posterior_blocks, fisher_info and the one-step
/// pivot Hessian stay consistent.
MatrixXd assemble_joint_precision(const MatrixXd& C, const MatrixXd& B, const MatrixXd& H,
                                  double sigma2_eps, const MatrixXd& P,
                                  const MatrixXd& sigma_alpha_inv);

/// [[C, B], [B', H]] — the sigma-free data curvature of one node, the
/// quantity a pivot transmits.
MatrixXd data_curvature_joint(const SuffStats& stats);

/// The Newton correction shared verbatim by onestep_fit and the wire
/// protocol, so both produce bit-identical estimates: adds the prior terms
/// to the summed unpenalized scores, scales the pivot curvature by N/n_pivot,
/// augments with the priors, solves, and steps.
ModelParams onestep_apply(const ModelParams& theta0, VectorXd g_beta_sum, VectorXd g_alpha_sum,
                          const MatrixXd& pivot_curvature, long n_pivot, long N);

/// Theorem-2 variance estimate from an accumulated quadratic form; negative
/// values beyond -1e-10 are an error, small negatives clamp to 1e-12.
double clamp_variance(double quad, long n);

/// Estimator dispatch over an aggregated summary (ss, svd, gibbs). Used by
/// the CLI's in-process path and by the protocol coordinator so the two are
/// the same code.
struct FitOutput {
    FitResult fit;
    std::optional<GibbsResult> gibbs;
};

FitOutput fit_from_aggregate(const SuffStats& agg, const ModelParams& init, const FitConfig& cfg,
                             const PartitionsMeta& meta = {});

}  // namespace vcmm
