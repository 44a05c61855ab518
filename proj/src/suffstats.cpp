#include "vcmm/suffstats.hpp"

#include <cmath>

namespace vcmm {

SuffStats SuffStats::zero(int fe_len, int q) {
    SuffStats s;
    s.a = 0.0;
    s.b = VectorXd::Zero(fe_len);
    s.C = MatrixXd::Zero(fe_len, fe_len);
    s.d = VectorXd::Zero(q);
    s.B = MatrixXd::Zero(fe_len, q);
    s.H = MatrixXd::Zero(q, q);
    s.n = 0;
    return s;
}

SuffStats& SuffStats::operator+=(const SuffStats& other) {
    if (fe_len() != other.fe_len() || q_len() != other.q_len())
        throw DimensionError("SuffStats sum: dims (" + std::to_string(fe_len()) + "," +
                             std::to_string(q_len()) + ") vs (" +
                             std::to_string(other.fe_len()) + "," +
                             std::to_string(other.q_len()) + ")");
    a += other.a;
    b += other.b;
    C += other.C;
    d += other.d;
    B += other.B;
    H += other.H;
    n += other.n;
    return *this;
}

VectorXd ScoreVector::stacked() const {
    VectorXd g(g_beta.size() + g_alpha.size());
    g << g_beta, g_alpha;
    return g;
}

double ScoreVector::inf_norm() const {
    double m = g_beta.size() ? g_beta.cwiseAbs().maxCoeff() : 0.0;
    if (g_alpha.size()) m = std::max(m, g_alpha.cwiseAbs().maxCoeff());
    return m;
}

namespace {

struct Kahan {
    double sum = 0.0;
    double carry = 0.0;
    void add(double v) {
        const double y = v - carry;
        const double t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
};

constexpr long kChunk = 1024;

}  // namespace

SuffStats compute_local(const Partition& part, const TensorSplineBasis& basis) {
    const int p = static_cast<int>(part.X.cols());
    const int q = static_cast<int>(part.Z.cols());
    const int fe = (p + 1) * basis.size();
    if (part.H.cols() != basis.margins())
        throw DimensionError("compute_local: H margins vs basis margins");
    const long n = part.rows();
    if (n > 0 && (!part.y.allFinite() || !part.X.allFinite() || !part.H.allFinite() ||
                  !part.Z.allFinite()))
        throw NumericError("compute_local: non-finite input value in partition " +
                           std::to_string(part.partition_id));

    SuffStats s = SuffStats::zero(fe, q);
    Kahan a_acc;
    std::vector<Kahan> b_acc(fe);

    for (long start = 0; start < n; start += kChunk) {
        const long len = std::min(kChunk, n - start);
        const MatrixXd Xt = expand_design(part.X.middleRows(start, len),
                                          part.H.middleRows(start, len), basis);
        const auto yc = part.y.segment(start, len);
        const auto Zc = part.Z.middleRows(start, len);

        a_acc.add(yc.squaredNorm());
        const VectorXd b_part = Xt.transpose() * yc;
        for (int j = 0; j < fe; ++j) b_acc[j].add(b_part(j));

        s.C.selfadjointView<Eigen::Lower>().rankUpdate(Xt.transpose(), 1.0);
        s.B.noalias() += Xt.transpose() * Zc;
        s.H.selfadjointView<Eigen::Lower>().rankUpdate(Zc.transpose(), 1.0);
        s.d.noalias() += Zc.transpose() * yc;
    }

    s.a = a_acc.sum;
    for (int j = 0; j < fe; ++j) s.b(j) = b_acc[j].sum;
    s.C.triangularView<Eigen::StrictlyUpper>() = s.C.transpose();
    s.H.triangularView<Eigen::StrictlyUpper>() = s.H.transpose();
    s.n = n;
    return s;
}

SuffStats aggregate(std::span<const SuffStats> stats) {
    if (stats.empty()) throw DimensionError("aggregate: empty list");
    SuffStats out = stats[0];
    for (size_t k = 1; k < stats.size(); ++k) out += stats[k];
    return out;
}

SuffStats aggregate(const std::vector<SuffStats>& stats) {
    return aggregate(std::span<const SuffStats>(stats.data(), stats.size()));
}

double residual_quadform(const ModelParams& theta, const SuffStats& stats) {
    const VectorXd& be = theta.beta;
    const VectorXd& al = theta.alpha;
    return stats.a - 2.0 * be.dot(stats.b) + be.dot(stats.C * be) - 2.0 * al.dot(stats.d) +
           2.0 * be.dot(stats.B * al) + al.dot(stats.H * al);
}

ScoreVector raw_score(const Partition& part, const TensorSplineBasis& basis,
                      const ModelParams& theta) {
    if (!(theta.sigma2_eps > 0.0)) throw NumericError("raw_score: sigma2_eps <= 0");
    const long n = part.rows();
    const int fe = (static_cast<int>(part.X.cols()) + 1) * basis.size();
    ScoreVector g;
    g.g_beta = VectorXd::Zero(fe);
    g.g_alpha = VectorXd::Zero(part.Z.cols());
    g.penalized = false;
    for (long start = 0; start < n; start += kChunk) {
        const long len = std::min(kChunk, n - start);
        const MatrixXd Xt = expand_design(part.X.middleRows(start, len),
                                          part.H.middleRows(start, len), basis);
        const auto Zc = part.Z.middleRows(start, len);
        const VectorXd resid =
            Xt * theta.beta + Zc * theta.alpha - part.y.segment(start, len);
        g.g_beta.noalias() += Xt.transpose() * resid;
        g.g_alpha.noalias() += Zc.transpose() * resid;
    }
    g.g_beta /= theta.sigma2_eps;
    g.g_alpha /= theta.sigma2_eps;
    return g;
}

double raw_rss(const Partition& part, const TensorSplineBasis& basis, const ModelParams& theta) {
    const long n = part.rows();
    double rss = 0.0;
    for (long start = 0; start < n; start += kChunk) {
        const long len = std::min(kChunk, n - start);
        const MatrixXd Xt = expand_design(part.X.middleRows(start, len),
                                          part.H.middleRows(start, len), basis);
        rss += (part.y.segment(start, len) - Xt * theta.beta -
                part.Z.middleRows(start, len) * theta.alpha)
                   .squaredNorm();
    }
    return rss;
}

double joint_objective(const ModelParams& theta, const SuffStats& agg) {
    if (!(theta.sigma2_eps > 0.0)) throw NumericError("joint_objective: sigma2_eps <= 0");
    if (theta.beta.size() != agg.fe_len() || theta.alpha.size() != agg.q_len())
        throw DimensionError("joint_objective: theta dims vs summary dims");
    const double quad = residual_quadform(theta, agg);
    const MatrixXd P = penalty_matrix(theta.penalty, agg.fe_len());
    double obj = quad / (2.0 * theta.sigma2_eps) +
                 0.5 * agg.n * std::log(theta.sigma2_eps) +
                 0.5 * theta.beta.dot(P * theta.beta);
    if (agg.q_len() > 0) {
        obj += 0.5 * theta.alpha.dot(theta.sigma_alpha.inverse() * theta.alpha) +
               0.5 * theta.sigma_alpha.log_det();
    }
    return obj;
}

ScoreVector gradient(const ModelParams& theta, const SuffStats& agg, bool include_penalty) {
    if (!(theta.sigma2_eps > 0.0)) throw NumericError("gradient: sigma2_eps <= 0");
    if (theta.beta.size() != agg.fe_len() || theta.alpha.size() != agg.q_len())
        throw DimensionError("gradient: theta dims vs summary dims");
    const double inv_s2 = 1.0 / theta.sigma2_eps;
    ScoreVector g;
    g.g_beta = inv_s2 * (agg.C * theta.beta + agg.B * theta.alpha - agg.b);
    g.g_alpha = inv_s2 * (agg.B.transpose() * theta.beta + agg.H * theta.alpha - agg.d);
    g.penalized = include_penalty;
    if (include_penalty) {
        const MatrixXd P = penalty_matrix(theta.penalty, agg.fe_len());
        g.g_beta += P * theta.beta;
        if (agg.q_len() > 0) g.g_alpha += theta.sigma_alpha.inverse() * theta.alpha;
    }
    return g;
}

}  // namespace vcmm
