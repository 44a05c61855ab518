#pragma once

#include "vcmm/core.hpp"
#include "vcmm/spline.hpp"

#include <span>

namespace vcmm {

/// Per-partition summary: a = sum y^2, b = Xt'y, C = Xt'Xt, d = Z'y,
/// B = Xt'Z, H = Z'Z, n rows (Xt is the basis-expanded design).
/// Closed under addition; size depends only on ((p+1)Q, q).
struct SuffStats {
    double a = 0.0;
    VectorXd b;
    MatrixXd C;
    VectorXd d;
    MatrixXd B;
    MatrixXd H;
    long n = 0;

    static SuffStats zero(int fe_len, int q);
    int fe_len() const { return static_cast<int>(b.size()); }
    int q_len() const { return static_cast<int>(d.size()); }

    SuffStats& operator+=(const SuffStats& other);
};

/// Gradient of the penalized joint objective, split by block. When
/// `penalized` is false the prior terms (P beta and Sigma^-1 alpha) are
/// omitted — that is the node-local score convention; the aggregator adds
/// the prior terms exactly once.
struct ScoreVector {
    VectorXd g_beta;
    VectorXd g_alpha;
    bool penalized = false;

    VectorXd stacked() const;
    double inf_norm() const;
};

/// Single pass over the partition rows. Chunked BLAS accumulation; the
/// scalar a and the vector b are combined across chunks with Kahan
/// compensation so partition-order sums stay additive at 1e-12 for n = 1e6.
SuffStats compute_local(const Partition& part, const TensorSplineBasis& basis);

/// Componentwise sum, order independent up to floating-point reordering.
SuffStats aggregate(std::span<const SuffStats> stats);
SuffStats aggregate(const std::vector<SuffStats>& stats);

/// Negative penalized joint log-likelihood up to additive constants:
///   (1/2s2)[a - 2b'B + ...] + (N/2) log s2 + pen(beta) + prior(alpha).
/// Computable from the summaries alone.
double joint_objective(const ModelParams& theta, const SuffStats& agg);

ScoreVector gradient(const ModelParams& theta, const SuffStats& agg, bool include_penalty);

/// Residual sum of squares ||y - Xt beta - Z alpha||^2 expressed through the
/// summaries; shared by the variance update and the wire protocol.
double residual_quadform(const ModelParams& theta, const SuffStats& stats);

/// Raw-data counterparts used by one-step workers: O(n d) single pass, no
/// quadratic summaries formed.
ScoreVector raw_score(const Partition& part, const TensorSplineBasis& basis,
                      const ModelParams& theta);
double raw_rss(const Partition& part, const TensorSplineBasis& basis, const ModelParams& theta);

}  // namespace vcmm
