#include "vcmm/simgen.hpp"

#include <Eigen/Cholesky>

#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace vcmm {

namespace {

using Clock = std::chrono::steady_clock;

struct ScenarioLayout {
    ScenarioSpec spec;  // resolved
    int p = 1;
    int M = 1;
    int per_margin = 19;
    std::vector<int> factor_levels;  // one entry per grouping factor
    int q() const {
        int total = 0;
        for (int g : factor_levels) total += g;
        return total;
    }
};

ScenarioLayout resolve(const ScenarioSpec& in) {
    ScenarioLayout lay;
    lay.spec = in;
    ScenarioSpec& s = lay.spec;
    if (s.example < 1 || s.example > 4)
        throw ConfigError("example must be one of 1, 2, 3, 4 (got " +
                          std::to_string(s.example) + ")");
    if (s.noise_sd < 0.0) s.noise_sd = 0.25;
    if (s.sigma_alpha < 0.0) s.sigma_alpha = 0.5;
    if (!(s.test_fraction >= 0.0 && s.test_fraction < 1.0))
        throw ConfigError("test_fraction must lie in [0,1)");
    switch (s.example) {
        case 1:
            if (s.n <= 0) s.n = 1000;
            if (s.k <= 0) s.k = 4;
            if (s.basis_size <= 0) s.basis_size = 19;
            lay.factor_levels = {10};
            break;
        case 2:
            if (s.n <= 0) s.n = 4000;
            if (s.k <= 0) s.k = 4;
            if (s.basis_size <= 0) s.basis_size = 19;
            if (s.adjacent_corr < 0.0) s.adjacent_corr = 0.1;
            lay.factor_levels = {s.q_override > 0 ? s.q_override : 200};
            break;
        case 3:
            if (s.n <= 0) s.n = 10000;
            if (s.k <= 0) s.k = 8;
            if (s.basis_size <= 0) s.basis_size = 19;
            lay.factor_levels = {10, 10};
            break;
        case 4:
            if (s.n <= 0) s.n = 10000;
            if (s.k <= 0) s.k = 4;
            if (s.basis_size <= 0) s.basis_size = 12;
            lay.M = 2;
            lay.factor_levels = {10};
            break;
    }
    if (s.q_override > 0 && s.example != 2)
        lay.factor_levels = {s.q_override};
    return lay;
}

TensorSplineBasis make_basis(const ScenarioLayout& lay) {
    std::vector<UnivariateBasis> margins;
    for (int m = 0; m < lay.M; ++m)
        margins.push_back(UnivariateBasis::uniform(3, lay.spec.basis_size - 4));
    return TensorSplineBasis(std::move(margins));
}

void group_columns(const ScenarioLayout& lay, long row, std::vector<int>& cols) {
    cols.clear();
    int offset = 0;
    long div = 1;
    for (int g : lay.factor_levels) {
        cols.push_back(offset + static_cast<int>((row / div) % g));
        div *= g;
        offset += g;
    }
}

VectorXd draw_alpha(const ScenarioLayout& lay, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int q = lay.q();
    VectorXd alpha(q);
    if (lay.spec.example == 2) {
        // tridiagonal correlation: Corr(a_i, a_{i+1}) = adjacent_corr
        const double s2 = lay.spec.sigma_alpha * lay.spec.sigma_alpha;
        MatrixXd Sigma = MatrixXd::Identity(q, q) * s2;
        for (int i = 0; i + 1 < q; ++i) {
            Sigma(i, i + 1) = lay.spec.adjacent_corr * s2;
            Sigma(i + 1, i) = Sigma(i, i + 1);
        }
        Eigen::LLT<MatrixXd> llt(Sigma);
        if (llt.info() != Eigen::Success)
            throw NumericError("example 2 covariance is not positive definite");
        VectorXd z(q);
        for (int i = 0; i < q; ++i) z(i) = gauss(rng);
        alpha = llt.matrixL() * z;
    } else {
        for (int i = 0; i < q; ++i) alpha(i) = lay.spec.sigma_alpha * gauss(rng);
    }
    // center within each factor: the factor mean is not identifiable from the
    // intercept, so the generator removes it
    int off = 0;
    for (int g : lay.factor_levels) {
        alpha.segment(off, g).array() -= alpha.segment(off, g).mean();
        off += g;
    }
    return alpha;
}

}  // namespace

double true_beta(int example, int k, const VectorXd& h) {
    if (k == 0) return 2.0;
    if (k != 1) throw ConfigError("built-in scenarios have one covariate");
    constexpr double two_pi = 2.0 * std::numbers::pi;
    if (example == 4) return std::sin(two_pi * (h(0) + h(1)));
    return std::sin(two_pi * h(0));
}

VectorXd sample_random_effects(const ScenarioSpec& spec, std::uint64_t seed) {
    const ScenarioLayout lay = resolve(spec);
    std::mt19937_64 rng(seed);
    return draw_alpha(lay, rng);
}

GeneratedData generate(const ScenarioSpec& spec) {
    const ScenarioLayout lay = resolve(spec);
    const ScenarioSpec& s = lay.spec;
    const long n_test = static_cast<long>(std::ceil(s.test_fraction * s.n));
    const long n_all = s.n + n_test;
    const int q = lay.q();

    std::mt19937_64 rng(s.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const VectorXd alpha = draw_alpha(lay, rng);

    VectorXd y(n_all);
    MatrixXd X(n_all, lay.p), H(n_all, lay.M), Z = MatrixXd::Zero(n_all, q);
    std::vector<int> zcols;
    for (long i = 0; i < n_all; ++i) {
        for (int m = 0; m < lay.M; ++m) H(i, m) = unif(rng);
        for (int j = 0; j < lay.p; ++j) X(i, j) = unif(rng);
        group_columns(lay, i, zcols);
        double re = 0.0;
        for (int c : zcols) {
            Z(i, c) = 1.0;
            re += alpha(c);
        }
        const VectorXd h = H.row(i).transpose();
        double mean = true_beta(s.example, 0, h);
        for (int j = 0; j < lay.p; ++j) mean += X(i, j) * true_beta(s.example, j + 1, h);
        y(i) = mean + re + s.noise_sd * gauss(rng);
    }

    GeneratedData data{lay.spec, ModelDims{}, make_basis(lay), {}, {}, TruthInfo{},
                       RandomEffectCov::isotropic(q, 1.0), PenaltySpec{}};
    data.dims.p = lay.p;
    data.dims.Q = data.basis.size();
    data.dims.q = q;
    data.dims.M = lay.M;
    data.dims.K = s.k;
    data.dims.N = s.n;

    if (s.orthogonalize) data.basis = orthogonalize(data.basis, H.topRows(s.n));

    // contiguous balanced split of the training rows into K partitions
    const long base = s.n / s.k, extra = s.n % s.k;
    long row = 0;
    for (int kk = 0; kk < s.k; ++kk) {
        const long nk = base + (kk < extra ? 1 : 0);
        Partition part;
        part.partition_id = kk;
        part.y = y.segment(row, nk);
        part.X = X.middleRows(row, nk);
        part.H = H.middleRows(row, nk);
        part.Z = Z.middleRows(row, nk);
        data.partitions.push_back(std::move(part));
        row += nk;
    }
    data.test.partition_id = s.k;
    data.test.y = y.tail(n_test);
    data.test.X = X.bottomRows(n_test);
    data.test.H = H.bottomRows(n_test);
    data.test.Z = Z.bottomRows(n_test);

    data.truth.example = s.example;
    data.truth.beta0 = 2.0;
    data.truth.alpha = alpha;
    data.truth.sigma_alpha = s.sigma_alpha;
    data.truth.sigma_eps = s.noise_sd;

    if (lay.factor_levels.size() > 1) {
        std::vector<double> unit(lay.factor_levels.size(), 1.0);
        data.cov_structure = RandomEffectCov::block_isotropic(lay.factor_levels, unit);
    } else {
        data.cov_structure = RandomEffectCov::isotropic(q, 1.0);
    }
    // second-difference smoothing: constants stay unpenalized, so the
    // intercept level cannot leak into the random effects under the
    // iterated variance update
    data.penalty = PenaltySpec::second_difference(s.lambda >= 0.0 ? s.lambda : 0.0,
                                                  data.dims.Q, lay.p + 1);
    return data;
}

ModelParams initial_params(const GeneratedData& data, double lambda) {
    ModelParams init;
    init.beta = VectorXd::Zero(data.dims.fe_len());
    init.alpha = VectorXd::Zero(data.dims.q);
    init.sigma2_eps = 1.0;
    init.sigma_alpha = data.cov_structure;
    init.penalty = data.penalty;
    init.penalty.lambda = lambda;
    return init;
}

// ---------------------------------------------------------------------------
// Centralized oracle
// ---------------------------------------------------------------------------

FitResult direct_oracle(const std::vector<Partition>& partitions,
                        const TensorSplineBasis& basis, const ModelParams& init,
                        const FitConfig& cfg) {
    const auto t0 = Clock::now();
    long N = 0;
    for (const auto& p : partitions) N += p.rows();
    if (N == 0) throw DimensionError("direct_oracle: no rows");
    const int p = static_cast<int>(partitions.front().X.cols());
    const int q = static_cast<int>(partitions.front().Z.cols());
    const int fe = (p + 1) * basis.size();

    // pooled stacked design [Xt Z], no per-partition summaries
    MatrixXd W(N, fe + q);
    VectorXd y(N);
    long row = 0;
    for (const auto& part : partitions) {
        const long nk = part.rows();
        W.block(row, 0, nk, fe) = expand_design(part.X, part.H, basis);
        W.block(row, fe, nk, q) = part.Z;
        y.segment(row, nk) = part.y;
        row += nk;
    }

    MatrixXd A = MatrixXd::Zero(fe + q, fe + q);
    A.selfadjointView<Eigen::Lower>().rankUpdate(W.transpose(), 1.0);
    A.triangularView<Eigen::StrictlyUpper>() = A.transpose();
    const VectorXd rhs_data = W.transpose() * y;

    const MatrixXd P = penalty_matrix(init.penalty, fe);
    ModelParams theta = init;
    if (theta.beta.size() == 0) theta.beta = VectorXd::Zero(fe);
    if (theta.alpha.size() == 0) theta.alpha = VectorXd::Zero(q);

    FitResult res;
    res.method = "direct";
    bool converged = false;
    int it = 0;
    for (; it < cfg.max_iter; ++it) {
        MatrixXd J = A / theta.sigma2_eps;
        J.topLeftCorner(fe, fe) += P;
        if (q > 0) J.bottomRightCorner(q, q) += theta.sigma_alpha.inverse();
        Eigen::LLT<MatrixXd> llt(J);
        if (llt.info() != Eigen::Success)
            throw NumericError("direct_oracle: joint system not positive definite");
        const VectorXd mu = llt.solve(rhs_data / theta.sigma2_eps);

        const double dtheta =
            std::max((mu.head(fe) - theta.beta).cwiseAbs().maxCoeff(),
                     q > 0 ? (mu.tail(q) - theta.alpha).cwiseAbs().maxCoeff() : 0.0);
        theta.beta = mu.head(fe);
        theta.alpha = mu.tail(q);

        double var_delta = 0.0;
        if (cfg.variance_update == VarianceUpdate::Iterate) {
            const double rss = (y - W * mu).squaredNorm();
            const double s2_new = std::max(rss / N, 1e-12);
            var_delta = std::abs(s2_new - theta.sigma2_eps);
            theta.sigma2_eps = s2_new;
            theta.sigma_alpha = theta.sigma_alpha.projected_from(theta.alpha);
        }
        if (dtheta <= cfg.tol_param || (dtheta <= cfg.tol_grad && var_delta <= cfg.tol_grad)) {
            converged = true;
            ++it;
            break;
        }
        if (cfg.variance_update == VarianceUpdate::Fixed) {
            converged = true;  // single joint solve is exact at fixed variances
            ++it;
            break;
        }
    }

    res.theta = theta;
    res.iterations = it;
    res.converged = converged;
    res.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    return res;
}

// ---------------------------------------------------------------------------
// Cross-validated smoothing weight
// ---------------------------------------------------------------------------

double select_lambda_cv(const std::vector<Partition>& partitions,
                        const TensorSplineBasis& basis, const GeneratedData& data,
                        int n_folds, int grid_size, double lambda_min, double lambda_max) {
    // fold f takes global row r when r % n_folds == f
    long total = 0;
    for (const auto& part : partitions) total += part.rows();
    std::vector<Partition> fold_parts(n_folds);
    for (int f = 0; f < n_folds; ++f) {
        const long nf = total / n_folds + (f < total % n_folds ? 1 : 0);
        fold_parts[f].partition_id = f;
        fold_parts[f].y.resize(nf);
        fold_parts[f].X.resize(nf, partitions.front().X.cols());
        fold_parts[f].H.resize(nf, partitions.front().H.cols());
        fold_parts[f].Z.resize(nf, partitions.front().Z.cols());
    }
    {
        long global_row = 0;
        std::vector<long> fill(n_folds, 0);
        for (const auto& part : partitions) {
            for (long r = 0; r < part.rows(); ++r, ++global_row) {
                const int f = static_cast<int>(global_row % n_folds);
                const long i = fill[f]++;
                fold_parts[f].y(i) = part.y(r);
                fold_parts[f].X.row(i) = part.X.row(r);
                fold_parts[f].H.row(i) = part.H.row(r);
                fold_parts[f].Z.row(i) = part.Z.row(r);
            }
        }
    }
    std::vector<SuffStats> fold_stats;
    for (const auto& fp : fold_parts) fold_stats.push_back(compute_local(fp, basis));

    FitConfig cfg;
    cfg.method = FitMethod::SS;
    cfg.max_iter = 100;
    cfg.tol_grad = 1e-7;
    cfg.variance_update = VarianceUpdate::Iterate;

    double best_lambda = lambda_min;
    double best_err = std::numeric_limits<double>::infinity();
    for (int gidx = 0; gidx < grid_size; ++gidx) {
        const double t = grid_size == 1 ? 0.0 : static_cast<double>(gidx) / (grid_size - 1);
        const double lambda = lambda_min * std::pow(lambda_max / lambda_min, t);
        double err = 0.0;
        long held = 0;
        for (int f = 0; f < n_folds; ++f) {
            std::vector<SuffStats> train;
            for (int g = 0; g < n_folds; ++g)
                if (g != f) train.push_back(fold_stats[g]);
            const SuffStats agg = aggregate(train);
            const FitResult fit = block_fit(agg, initial_params(data, lambda), cfg);
            err += residual_quadform(fit.theta, fold_stats[f]);
            held += fold_stats[f].n;
        }
        err /= static_cast<double>(held);
        if (err < best_err) {
            best_err = err;
            best_lambda = lambda;
        }
    }
    return best_lambda;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

MatrixXd evaluation_grid(int M) {
    if (M == 1) {
        MatrixXd g(1000, 1);
        for (int i = 0; i < 1000; ++i) g(i, 0) = static_cast<double>(i) / 999.0;
        return g;
    }
    if (M == 2) {
        MatrixXd g(2500, 2);
        int r = 0;
        for (int i = 0; i < 50; ++i)
            for (int j = 0; j < 50; ++j, ++r) {
                g(r, 0) = static_cast<double>(i) / 49.0;
                g(r, 1) = static_cast<double>(j) / 49.0;
            }
        return g;
    }
    throw ConfigError("evaluation grid defined for M = 1 or 2");
}

double pearson(const VectorXd& a, const VectorXd& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw DimensionError("pearson: length mismatch or too short");
    const double ma = a.mean(), mb = b.mean();
    const VectorXd ca = a.array() - ma, cb = b.array() - mb;
    const double denom = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
    if (denom == 0.0) return 0.0;
    return ca.dot(cb) / denom;
}

namespace {

// beta_k on a set of index rows from the fitted coefficients
VectorXd fn_values(const VectorXd& beta, const TensorSplineBasis& basis, const MatrixXd& H,
                   int k) {
    const int Q = basis.size();
    VectorXd out(H.rows());
    for (long r = 0; r < H.rows(); ++r)
        out(r) = basis.eval(H.row(r).transpose()).dot(beta.segment(k * Q, Q));
    return out;
}

VectorXd truth_values(int example, int k, const MatrixXd& H) {
    VectorXd out(H.rows());
    for (long r = 0; r < H.rows(); ++r) out(r) = true_beta(example, k, H.row(r).transpose());
    return out;
}

}  // namespace

MetricsReport evaluate(const FitResult& fit, const GeneratedData& data) {
    MetricsReport rep;
    rep.method = fit.method;
    rep.seconds = fit.seconds;
    rep.iterations = fit.iterations;
    rep.converged = fit.converged;
    rep.recon_error_G = fit.recon_error_G;
    rep.recon_error_H = fit.recon_error_H;

    const int p = data.dims.p;
    const MatrixXd grid = evaluation_grid(data.dims.M);
    rep.fn_grid_values.resize(grid.rows(), p + 1);

    MatrixXd H_train(data.dims.N, data.dims.M);
    {
        long row = 0;
        for (const auto& part : data.partitions) {
            H_train.middleRows(row, part.rows()) = part.H;
            row += part.rows();
        }
    }

    for (int k = 0; k <= p; ++k) {
        const VectorXd est_grid = fn_values(fit.theta.beta, data.basis, grid, k);
        rep.fn_grid_values.col(k) = est_grid;
        const VectorXd tru_grid = truth_values(data.truth.example, k, grid);
        rep.fn_grid_mse.push_back((est_grid - tru_grid).squaredNorm() / grid.rows());

        const VectorXd est_train = fn_values(fit.theta.beta, data.basis, H_train, k);
        const VectorXd tru_train = truth_values(data.truth.example, k, H_train);
        rep.fn_train_mse.push_back((est_train - tru_train).squaredNorm() / H_train.rows());

        if (data.test.rows() > 0) {
            const VectorXd est_test = fn_values(fit.theta.beta, data.basis, data.test.H, k);
            const VectorXd tru_test = truth_values(data.truth.example, k, data.test.H);
            rep.fn_test_mspe.push_back((est_test - tru_test).squaredNorm() / data.test.rows());
        } else {
            rep.fn_test_mspe.push_back(0.0);
        }
    }

    rep.beta0_hat = rep.fn_grid_values.col(0).mean();
    rep.beta0_sqerr = (rep.beta0_hat - data.truth.beta0) * (rep.beta0_hat - data.truth.beta0);

    // variance components per factor block
    const auto& cov = fit.theta.sigma_alpha;
    const double true_s2 = data.truth.sigma_alpha * data.truth.sigma_alpha;
    if (cov.kind() == RandomEffectCov::Kind::BlockIsotropic) {
        for (double s2 : cov.block_sigma2()) {
            rep.sigma2_alpha_hat.push_back(s2);
            rep.sigma2_alpha_sqerr.push_back((s2 - true_s2) * (s2 - true_s2));
        }
    } else {
        const double s2 = cov.realize().diagonal().mean();
        rep.sigma2_alpha_hat.push_back(s2);
        rep.sigma2_alpha_sqerr.push_back((s2 - true_s2) * (s2 - true_s2));
    }
    rep.sigma2_eps_hat = fit.theta.sigma2_eps;
    const double true_e2 = data.truth.sigma_eps * data.truth.sigma_eps;
    rep.sigma2_eps_sqerr = (rep.sigma2_eps_hat - true_e2) * (rep.sigma2_eps_hat - true_e2);

    // alpha prediction error per factor block
    {
        const std::vector<int> blocks =
            data.cov_structure.kind() == RandomEffectCov::Kind::BlockIsotropic
                ? data.cov_structure.block_sizes()
                : std::vector<int>{data.dims.q};
        int off = 0;
        for (int nb : blocks) {
            rep.alpha_mspe.push_back(
                (fit.theta.alpha.segment(off, nb) - data.truth.alpha.segment(off, nb))
                    .squaredNorm() /
                nb);
            off += nb;
        }
    }

    if (data.test.rows() > 0) {
        const MatrixXd Xt = expand_design(data.test.X, data.test.H, data.basis);
        const VectorXd pred = Xt * fit.theta.beta + data.test.Z * fit.theta.alpha;
        rep.y_test_mspe = (data.test.y - pred).squaredNorm() / data.test.rows();
    }

    rep.theta_stacked.resize(fit.theta.beta.size() + fit.theta.alpha.size());
    rep.theta_stacked << fit.theta.beta, fit.theta.alpha;
    return rep;
}

}  // namespace vcmm
