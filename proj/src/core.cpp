#include "vcmm/core.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace vcmm {

void validate_dims(const ModelDims& dims) {
    if (dims.p < 0) throw DimensionError("ModelDims.p must be >= 0");
    if (dims.Q < 1) throw DimensionError("ModelDims.Q must be >= 1");
    if (dims.q < 0) throw DimensionError("ModelDims.q must be >= 0");
    if (dims.M < 1) throw DimensionError("ModelDims.M must be >= 1");
    if (dims.K < 1) throw DimensionError("ModelDims.K must be >= 1");
    if (dims.N < 0) throw DimensionError("ModelDims.N must be >= 0");
}

void validate_partition(const Partition& part, const ModelDims& dims) {
    const long n = part.y.size();
    if (part.X.rows() != n || part.H.rows() != n || part.Z.rows() != n) {
        throw DimensionError("partition " + std::to_string(part.partition_id) +
                             ": row counts disagree (y=" + std::to_string(n) +
                             ", X=" + std::to_string(part.X.rows()) +
                             ", H=" + std::to_string(part.H.rows()) +
                             ", Z=" + std::to_string(part.Z.rows()) + ")");
    }
    if (part.X.cols() != dims.p)
        throw DimensionError("partition field X: expected " + std::to_string(dims.p) +
                             " columns, got " + std::to_string(part.X.cols()));
    if (part.H.cols() != dims.M)
        throw DimensionError("partition field H: expected " + std::to_string(dims.M) +
                             " columns, got " + std::to_string(part.H.cols()));
    if (part.Z.cols() != dims.q)
        throw DimensionError("partition field Z: expected " + std::to_string(dims.q) +
                             " columns, got " + std::to_string(part.Z.cols()));
    if (n > 0) {
        if (!part.y.allFinite() || !part.X.allFinite() || !part.Z.allFinite() ||
            !part.H.allFinite()) {
            throw NumericError("partition " + std::to_string(part.partition_id) +
                               " contains non-finite values");
        }
        const double lo = part.H.minCoeff();
        const double hi = part.H.maxCoeff();
        if (lo < 0.0 || hi > 1.0) {
            throw DomainError("partition " + std::to_string(part.partition_id) +
                              ": index variable outside [0,1] (range [" +
                              std::to_string(lo) + ", " + std::to_string(hi) + "])");
        }
    }
}

namespace {

MatrixXd penalty_from_blocks(const PenaltySpec& spec, int block_size, int num_blocks) {
    const int fe = block_size * num_blocks;
    MatrixXd P = MatrixXd::Zero(fe, fe);
    if (spec.lambda == 0.0) return P;
    switch (spec.kind) {
        case PenaltySpec::Kind::Ridge:
            P.diagonal().setConstant(spec.lambda);
            break;
        case PenaltySpec::Kind::SecondDifference: {
            const int Q = block_size;
            MatrixXd block = MatrixXd::Zero(Q, Q);
            if (Q >= 3) {
                MatrixXd D2 = MatrixXd::Zero(Q - 2, Q);
                for (int r = 0; r < Q - 2; ++r) {
                    D2(r, r) = 1.0;
                    D2(r, r + 1) = -2.0;
                    D2(r, r + 2) = 1.0;
                }
                block = spec.lambda * (D2.transpose() * D2);
            }
            for (int blk = 0; blk < num_blocks; ++blk)
                P.block(blk * Q, blk * Q, Q, Q) = block;
            break;
        }
    }
    return P;
}

}  // namespace

MatrixXd realize_penalty(const PenaltySpec& spec, const ModelDims& dims) {
    if (spec.lambda < 0.0) throw ConfigError("penalty lambda must be nonnegative");
    if (spec.block_size != 0 && spec.block_size != dims.Q)
        throw ConfigError("penalty block_size disagrees with dims.Q");
    return penalty_from_blocks(spec, dims.Q, dims.p + 1);
}

MatrixXd penalty_matrix(const PenaltySpec& spec, int fe_len) {
    if (spec.lambda < 0.0) throw ConfigError("penalty lambda must be nonnegative");
    if (spec.block_size <= 0) return penalty_from_blocks(spec, fe_len, 1);
    if (spec.block_size * spec.num_blocks != fe_len)
        throw DimensionError("penalty blocks (" + std::to_string(spec.block_size) + " x " +
                             std::to_string(spec.num_blocks) + ") vs coefficient length " +
                             std::to_string(fe_len));
    return penalty_from_blocks(spec, spec.block_size, spec.num_blocks);
}

// ---------------------------------------------------------------------------
// RandomEffectCov
// ---------------------------------------------------------------------------

RandomEffectCov RandomEffectCov::isotropic(int q, double sigma2_alpha) {
    RandomEffectCov cov;
    cov.kind_ = Kind::Isotropic;
    cov.q_ = q;
    cov.sigma2_ = sigma2_alpha;
    cov.validate();
    return cov;
}

RandomEffectCov RandomEffectCov::block_isotropic(std::vector<int> block_sizes,
                                                 std::vector<double> block_sigma2) {
    RandomEffectCov cov;
    cov.kind_ = Kind::BlockIsotropic;
    if (block_sizes.size() != block_sigma2.size())
        throw DimensionError("block_isotropic: sizes and variances differ in length");
    cov.q_ = 0;
    for (int b : block_sizes) {
        if (b <= 0) throw DimensionError("block_isotropic: block size must be positive");
        cov.q_ += b;
    }
    cov.block_sizes_ = std::move(block_sizes);
    cov.block_sigma2_ = std::move(block_sigma2);
    cov.validate();
    return cov;
}

RandomEffectCov RandomEffectCov::full(MatrixXd sigma, double ridge_eps) {
    RandomEffectCov cov;
    cov.kind_ = Kind::Full;
    if (sigma.rows() != sigma.cols()) throw DimensionError("full covariance must be square");
    if (ridge_eps < 0.0) throw ConfigError("ridge_eps must be nonnegative");
    cov.q_ = static_cast<int>(sigma.rows());
    cov.ridge_eps_ = ridge_eps;
    cov.full_ = 0.5 * (sigma + sigma.transpose());
    cov.full_.diagonal().array() += ridge_eps;
    cov.validate();
    return cov;
}

MatrixXd RandomEffectCov::realize() const {
    switch (kind_) {
        case Kind::Isotropic:
            return sigma2_ * MatrixXd::Identity(q_, q_);
        case Kind::BlockIsotropic: {
            MatrixXd S = MatrixXd::Zero(q_, q_);
            int off = 0;
            for (size_t b = 0; b < block_sizes_.size(); ++b) {
                for (int i = 0; i < block_sizes_[b]; ++i) S(off + i, off + i) = block_sigma2_[b];
                off += block_sizes_[b];
            }
            return S;
        }
        case Kind::Full:
            return full_;
    }
    throw NumericError("unreachable covariance kind");
}

MatrixXd RandomEffectCov::inverse() const {
    switch (kind_) {
        case Kind::Isotropic:
            return (1.0 / sigma2_) * MatrixXd::Identity(q_, q_);
        case Kind::BlockIsotropic: {
            MatrixXd S = MatrixXd::Zero(q_, q_);
            int off = 0;
            for (size_t b = 0; b < block_sizes_.size(); ++b) {
                for (int i = 0; i < block_sizes_[b]; ++i)
                    S(off + i, off + i) = 1.0 / block_sigma2_[b];
                off += block_sizes_[b];
            }
            return S;
        }
        case Kind::Full: {
            Eigen::LLT<MatrixXd> llt(full_);
            if (llt.info() != Eigen::Success)
                throw NumericError("full random-effect covariance is not positive definite");
            return llt.solve(MatrixXd::Identity(q_, q_));
        }
    }
    throw NumericError("unreachable covariance kind");
}

double RandomEffectCov::log_det() const {
    switch (kind_) {
        case Kind::Isotropic:
            return q_ * std::log(sigma2_);
        case Kind::BlockIsotropic: {
            double ld = 0.0;
            for (size_t b = 0; b < block_sizes_.size(); ++b)
                ld += block_sizes_[b] * std::log(block_sigma2_[b]);
            return ld;
        }
        case Kind::Full: {
            Eigen::LLT<MatrixXd> llt(full_);
            if (llt.info() != Eigen::Success)
                throw NumericError("full random-effect covariance is not positive definite");
            return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        }
    }
    throw NumericError("unreachable covariance kind");
}

RandomEffectCov RandomEffectCov::projected_from(const VectorXd& alpha) const {
    if (alpha.size() != q_)
        throw DimensionError("projected_from: alpha length " + std::to_string(alpha.size()) +
                             " vs q " + std::to_string(q_));
    constexpr double kFloor = 1e-12;
    switch (kind_) {
        case Kind::Isotropic: {
            const double s2 = q_ > 0 ? std::max(alpha.squaredNorm() / q_, kFloor) : sigma2_;
            return isotropic(q_, s2);
        }
        case Kind::BlockIsotropic: {
            std::vector<double> s2(block_sizes_.size());
            int off = 0;
            for (size_t b = 0; b < block_sizes_.size(); ++b) {
                const int nb = block_sizes_[b];
                s2[b] = std::max(alpha.segment(off, nb).squaredNorm() / nb, kFloor);
                off += nb;
            }
            return block_isotropic(block_sizes_, s2);
        }
        case Kind::Full: {
            MatrixXd S = (alpha * alpha.transpose()) / static_cast<double>(q_);
            const double ridge = std::max(1e-8 * S.trace() / q_, kFloor);
            return full(S, ridge);
        }
    }
    throw NumericError("unreachable covariance kind");
}

void RandomEffectCov::validate() const {
    switch (kind_) {
        case Kind::Isotropic:
            if (q_ > 0 && !(sigma2_ > 0.0))
                throw NumericError("isotropic sigma2_alpha must be > 0");
            break;
        case Kind::BlockIsotropic:
            for (double s2 : block_sigma2_)
                if (!(s2 > 0.0)) throw NumericError("block sigma2_alpha must be > 0");
            break;
        case Kind::Full: {
            if (q_ == 0) break;
            Eigen::SelfAdjointEigenSolver<MatrixXd> es(full_, Eigen::EigenvaluesOnly);
            if (es.eigenvalues().minCoeff() <= 0.0)
                throw NumericError("full random-effect covariance has eigenvalue <= 0 "
                                   "(smallest = " + std::to_string(es.eigenvalues().minCoeff()) +
                                   ")");
            break;
        }
    }
}

void validate_params(const ModelParams& theta, const ModelDims& dims) {
    if (theta.beta.size() != dims.fe_len())
        throw DimensionError("beta length " + std::to_string(theta.beta.size()) +
                             " vs (p+1)Q = " + std::to_string(dims.fe_len()));
    if (theta.alpha.size() != dims.q)
        throw DimensionError("alpha length " + std::to_string(theta.alpha.size()) +
                             " vs q = " + std::to_string(dims.q));
    if (!(theta.sigma2_eps > 0.0)) throw NumericError("sigma2_eps must be > 0");
    if (theta.sigma_alpha.q() != dims.q)
        throw DimensionError("sigma_alpha dimension vs dims.q");
    theta.sigma_alpha.validate();
}

// ---------------------------------------------------------------------------
// Index scaling
// ---------------------------------------------------------------------------

IndexScaling IndexScaling::identity(int m) {
    IndexScaling s;
    s.lo = VectorXd::Zero(m);
    s.hi = VectorXd::Ones(m);
    return s;
}

IndexScaling IndexScaling::fit(const MatrixXd& H) {
    IndexScaling s;
    s.lo = H.colwise().minCoeff();
    s.hi = H.colwise().maxCoeff();
    for (int m = 0; m < H.cols(); ++m)
        if (!(s.hi(m) > s.lo(m))) s.hi(m) = s.lo(m) + 1.0;  // constant column
    return s;
}

MatrixXd IndexScaling::apply(const MatrixXd& H) const {
    if (H.cols() != lo.size()) throw DimensionError("IndexScaling: margin count mismatch");
    MatrixXd out = H;
    for (int m = 0; m < H.cols(); ++m)
        out.col(m) = (H.col(m).array() - lo(m)) / (hi(m) - lo(m));
    return out;
}

// ---------------------------------------------------------------------------
// Columnar text format
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

ModelDims sniff_csv_dims(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open partition file: " + path);
    std::string header;
    if (!std::getline(in, header)) throw ConfigError("empty partition file: " + path);
    const auto cols = split_csv_line(header);
    ModelDims dims;
    dims.p = 0;
    dims.M = 0;
    dims.q = 0;
    if (cols.empty() || cols[0] != "y")
        throw ConfigError(path + ": first column must be named 'y'");
    for (size_t i = 1; i < cols.size(); ++i) {
        const std::string& c = cols[i];
        if (c.size() < 2) throw ConfigError(path + ": bad column name '" + c + "'");
        if (c[0] == 'x') ++dims.p;
        else if (c[0] == 'h') ++dims.M;
        else if (c[0] == 'z') ++dims.q;
        else throw ConfigError(path + ": unrecognized column '" + c + "'");
    }
    if (dims.M < 1) throw ConfigError(path + ": needs at least one index column h1");
    long n = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    dims.N = n;
    return dims;
}

Partition read_partition_csv(const std::string& path, const ModelDims& dims) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open partition file: " + path);
    std::string header;
    std::getline(in, header);
    const size_t ncols = 1 + dims.p + dims.M + dims.q;
    if (split_csv_line(header).size() != ncols)
        throw DimensionError(path + ": header column count does not match expected dims");

    std::vector<double> buf;
    std::string line;
    long n = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != ncols)
            throw DimensionError(path + " row " + std::to_string(n + 1) +
                                 ": expected " + std::to_string(ncols) + " fields, got " +
                                 std::to_string(fields.size()));
        for (const auto& f : fields) {
            try {
                buf.push_back(std::stod(f));
            } catch (const std::exception&) {
                throw ConfigError(path + " row " + std::to_string(n + 1) +
                                  ": cannot parse value '" + f + "'");
            }
        }
        ++n;
    }

    Partition part;
    part.y.resize(n);
    part.X.resize(n, dims.p);
    part.H.resize(n, dims.M);
    part.Z.resize(n, dims.q);
    for (long r = 0; r < n; ++r) {
        const double* row = buf.data() + r * ncols;
        part.y(r) = row[0];
        for (int j = 0; j < dims.p; ++j) part.X(r, j) = row[1 + j];
        for (int j = 0; j < dims.M; ++j) part.H(r, j) = row[1 + dims.p + j];
        for (int j = 0; j < dims.q; ++j) part.Z(r, j) = row[1 + dims.p + dims.M + j];
    }
    return part;
}

void write_partition_csv(const std::string& path, const Partition& part) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write partition file: " + path);
    out << "y";
    for (int j = 0; j < part.X.cols(); ++j) out << ",x" << (j + 1);
    for (int j = 0; j < part.H.cols(); ++j) out << ",h" << (j + 1);
    for (int j = 0; j < part.Z.cols(); ++j) out << ",z" << (j + 1);
    out << "\n";
    char num[40];
    auto put = [&](double v, bool last) {
        std::snprintf(num, sizeof(num), "%.17g", v);
        out << num << (last ? '\n' : ',');
    };
    const int tail = static_cast<int>(part.X.cols() + part.H.cols() + part.Z.cols());
    for (long r = 0; r < part.rows(); ++r) {
        int left = tail;
        put(part.y(r), left == 0);
        for (int j = 0; j < part.X.cols(); ++j) put(part.X(r, j), --left == 0);
        for (int j = 0; j < part.H.cols(); ++j) put(part.H(r, j), --left == 0);
        for (int j = 0; j < part.Z.cols(); ++j) put(part.Z(r, j), --left == 0);
    }
}

}  // namespace vcmm
