#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

namespace vcmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Error taxonomy. Everything derives from std::runtime_error so callers can
// catch coarsely; the distinct types exist because the contracts distinguish
// dimension problems, domain problems, numerical failures and wire failures.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};
struct WireError : std::runtime_error {
    explicit WireError(const std::string& what) : std::runtime_error(what) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Dimension bookkeeping shared by every module.
///   p — non-intercept covariates, Q — total tensor basis size,
///   q — random-effect dimension, M — index-variable components,
///   K — partitions, N — total observations.
struct ModelDims {
    int p = 0;
    int Q = 1;
    int q = 0;
    int M = 1;
    int K = 1;
    long N = 0;

    int fe_len() const { return (p + 1) * Q; }
    int joint_len() const { return fe_len() + q; }
};

void validate_dims(const ModelDims& dims);

/// One node's raw data. All row counts must agree; H columns live in [0,1].
struct Partition {
    VectorXd y;
    MatrixXd X;  // n x p
    MatrixXd H;  // n x M, each column within the basis domain [0,1]
    MatrixXd Z;  // n x q
    int partition_id = 0;

    long rows() const { return y.size(); }
};

void validate_partition(const Partition& part, const ModelDims& dims);

/// Ridge-type smoothness prior on the spline coefficients.
/// Realized per coefficient block (intercept block plus one per covariate);
/// block_size = Q, num_blocks = p+1. block_size 0 means one block spanning
/// the whole coefficient vector.
struct PenaltySpec {
    enum class Kind { Ridge, SecondDifference };
    Kind kind = Kind::Ridge;
    double lambda = 0.0;
    int block_size = 0;
    int num_blocks = 1;

    static PenaltySpec ridge(double lambda, int Q = 0, int blocks = 1) {
        return PenaltySpec{Kind::Ridge, lambda, Q, blocks};
    }
    static PenaltySpec second_difference(double lambda, int Q, int blocks = 1) {
        return PenaltySpec{Kind::SecondDifference, lambda, Q, blocks};
    }
};

MatrixXd realize_penalty(const PenaltySpec& spec, const ModelDims& dims);
/// Same realization keyed on the coefficient length alone (block layout from
/// the spec itself).
MatrixXd penalty_matrix(const PenaltySpec& spec, int fe_len);

/// Random-effect covariance under one of three structures. The full structure
/// keeps an explicit ridge so that the realized matrix is always invertible.
class RandomEffectCov {
  public:
    enum class Kind { Isotropic, BlockIsotropic, Full };

    static RandomEffectCov isotropic(int q, double sigma2_alpha);
    static RandomEffectCov block_isotropic(std::vector<int> block_sizes,
                                           std::vector<double> block_sigma2);
    static RandomEffectCov full(MatrixXd sigma, double ridge_eps);

    Kind kind() const { return kind_; }
    int q() const { return q_; }
    const std::vector<int>& block_sizes() const { return block_sizes_; }
    const std::vector<double>& block_sigma2() const { return block_sigma2_; }

    MatrixXd realize() const;
    MatrixXd inverse() const;
    double log_det() const;

    /// Structure-projected update from a fitted alpha. Isotropic maps to
    /// |a|^2/q, block-isotropic per block, full to a a^T/q plus the ridge
    /// 1e-8 * trace/q (floored at 1e-12 so the result stays invertible).
    RandomEffectCov projected_from(const VectorXd& alpha) const;

    void validate() const;

  private:
    RandomEffectCov() = default;
    Kind kind_ = Kind::Isotropic;
    int q_ = 0;
    double sigma2_ = 1.0;               // isotropic
    std::vector<int> block_sizes_;      // block-isotropic
    std::vector<double> block_sigma2_;  // block-isotropic
    MatrixXd full_;                     // full (already ridged)
    double ridge_eps_ = 0.0;
};

/// theta = (beta, alpha) plus variance components and the penalty spec.
struct ModelParams {
    VectorXd beta;   // length (p+1)Q
    VectorXd alpha;  // length q
    double sigma2_eps = 1.0;
    RandomEffectCov sigma_alpha = RandomEffectCov::isotropic(0, 1.0);
    PenaltySpec penalty;
};

void validate_params(const ModelParams& theta, const ModelDims& dims);

/// Per-margin affine map taking raw index variables onto [0,1].
/// Identity when the data already lives there; fitted min/max otherwise.
struct IndexScaling {
    VectorXd lo;
    VectorXd hi;

    static IndexScaling identity(int m);
    static IndexScaling fit(const MatrixXd& H);
    MatrixXd apply(const MatrixXd& H) const;
};

// Columnar text ingestion: header row y,x1..xp,h1..hM,z1..zq, one row per
// observation. Values are written round-trippable (max_digits10).
Partition read_partition_csv(const std::string& path, const ModelDims& dims);
void write_partition_csv(const std::string& path, const Partition& part);
// Header introspection so the CLI can infer (p, M, q) from a file.
ModelDims sniff_csv_dims(const std::string& path);

}  // namespace vcmm
