#pragma once

#include "vcmm/distrib.hpp"

#include <cstdint>

namespace vcmm {

/// One of the four built-in synthetic scenarios plus overrides. Defaults
/// (value <= 0 or < 0 means "use the example default"):
///   example 1: N=1000,  p=1, M=1, 19 cubic basis fns, one 10-level factor
///   example 2: N=4000,  as 1 but q=200 one-hot levels, adjacent corr 0.1
///   example 3: N=10000, as 1 but two independent 10-level factors
///   example 4: N=10000, M=2, 12x12 tensor basis, one 10-level factor
/// sigma_alpha defaults 0.5, sigma_eps 0.25 everywhere.
struct ScenarioSpec {
    int example = 1;
    long n = 0;
    std::uint64_t seed = 1;
    int k = 0;
    int q_override = 0;        // example 2 level count
    double noise_sd = -1.0;    // sigma_eps
    double sigma_alpha = -1.0;
    double adjacent_corr = -1.0;
    int basis_size = 0;        // per-margin basis functions
    double test_fraction = 0.2;
    double lambda = -1.0;      // < 0: select by cross-validation
    bool orthogonalize = false;
};

struct TruthInfo {
    int example = 1;
    double beta0 = 2.0;
    VectorXd alpha;
    double sigma_alpha = 0.5;
    double sigma_eps = 0.25;
};

/// True coefficient function k (0 = intercept) at index value h.
double true_beta(int example, int k, const VectorXd& h);

struct GeneratedData {
    ScenarioSpec spec;        // with defaults resolved
    ModelDims dims;
    TensorSplineBasis basis;
    std::vector<Partition> partitions;  // K training partitions
    Partition test;                     // extra held-out rows (same process)
    TruthInfo truth;
    RandomEffectCov cov_structure;      // fitting structure (unit variances)
    PenaltySpec penalty;                // kind/blocks resolved; lambda resolved
                                        // only when spec.lambda >= 0
};

GeneratedData generate(const ScenarioSpec& spec);

/// The alpha draw alone (for generator-faithfulness checks).
VectorXd sample_random_effects(const ScenarioSpec& spec, std::uint64_t seed);

/// Starting parameters for any fit of this scenario.
ModelParams initial_params(const GeneratedData& data, double lambda);

/// Centralized brute-force reference: stacks the pooled raw design and
/// iterates dense joint normal-equation solves with raw-residual variance
/// refreshes. No per-partition summaries anywhere.
FitResult direct_oracle(const std::vector<Partition>& partitions,
                        const TensorSplineBasis& basis, const ModelParams& init,
                        const FitConfig& cfg);

/// 5-fold CV over a log-spaced lambda grid, evaluated entirely through
/// fold summaries (held-out residual quadratic form).
double select_lambda_cv(const std::vector<Partition>& partitions,
                        const TensorSplineBasis& basis, const GeneratedData& data,
                        int n_folds = 5, int grid_size = 20,
                        double lambda_min = 1e-6, double lambda_max = 1e3);

struct MetricsReport {
    std::string method;
    double beta0_hat = 0.0;
    double beta0_sqerr = 0.0;
    std::vector<double> sigma2_alpha_hat;
    std::vector<double> sigma2_alpha_sqerr;
    double sigma2_eps_hat = 0.0;
    double sigma2_eps_sqerr = 0.0;
    std::vector<double> fn_grid_mse;    // per function, 0 = intercept
    std::vector<double> fn_train_mse;
    std::vector<double> fn_test_mspe;
    std::vector<double> alpha_mspe;     // per factor block
    double y_test_mspe = 0.0;
    double seconds = 0.0;
    int iterations = 0;
    bool converged = false;
    double recon_error_G = 0.0;
    double recon_error_H = 0.0;
    MatrixXd fn_grid_values;  // grid rows x (p+1) functions
    VectorXd theta_stacked;   // (beta, alpha) for cross-method correlation
};

MetricsReport evaluate(const FitResult& fit, const GeneratedData& data);

/// Evaluation grid for coefficient functions: 1000 points for M = 1,
/// 50 x 50 for M = 2.
MatrixXd evaluation_grid(int M);

double pearson(const VectorXd& a, const VectorXd& b);

}  // namespace vcmm
