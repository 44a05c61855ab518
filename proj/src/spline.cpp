#include "vcmm/spline.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vcmm {

UnivariateBasis::UnivariateBasis(int degree, std::vector<double> interior_knots)
    : degree_(degree), interior_(std::move(interior_knots)) {
    if (degree_ < 0) throw ConfigError("spline degree must be >= 0");
    for (size_t i = 0; i < interior_.size(); ++i) {
        if (!(interior_[i] > 0.0 && interior_[i] < 1.0))
            throw ConfigError("interior knots must lie strictly inside (0,1)");
        if (i > 0 && interior_[i] < interior_[i - 1])
            throw ConfigError("interior knots must be sorted");
    }
    knots_.assign(degree_ + 1, 0.0);
    knots_.insert(knots_.end(), interior_.begin(), interior_.end());
    knots_.insert(knots_.end(), degree_ + 1, 1.0);
}

UnivariateBasis UnivariateBasis::uniform(int degree, int num_interior) {
    if (num_interior < 0) throw ConfigError("interior knot count must be >= 0");
    std::vector<double> knots(num_interior);
    for (int i = 0; i < num_interior; ++i)
        knots[i] = static_cast<double>(i + 1) / (num_interior + 1);
    return UnivariateBasis(degree, std::move(knots));
}

UnivariateBasis UnivariateBasis::from_quantiles(int degree, int num_interior,
                                                const VectorXd& sample) {
    if (sample.size() < 2) throw ConfigError("quantile knots need at least 2 sample values");
    std::vector<double> sorted(sample.data(), sample.data() + sample.size());
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> knots;
    knots.reserve(num_interior);
    for (int i = 1; i <= num_interior; ++i) {
        const double u = static_cast<double>(i) / (num_interior + 1);
        const double pos = u * (sorted.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        const double frac = pos - lo;
        double v = sorted[lo] * (1.0 - frac) + sorted[std::min(lo + 1, sorted.size() - 1)] * frac;
        v = std::min(std::max(v, 1e-9), 1.0 - 1e-9);
        if (!knots.empty() && v <= knots.back()) v = knots.back();  // clamp ties
        knots.push_back(v);
    }
    return UnivariateBasis(degree, std::move(knots));
}

VectorXd UnivariateBasis::eval(double x) const {
    if (!(x >= 0.0 && x <= 1.0))
        throw DomainError("spline evaluation at x = " + std::to_string(x) +
                          " outside [0,1]");
    const int d = degree_;
    const int Q = size();
    // span j with knots[j] <= x < knots[j+1]; x = 1 uses the last nonempty span
    int j;
    if (x >= 1.0) {
        j = Q - 1;
    } else {
        j = d;
        while (j < Q - 1 && x >= knots_[j + 1]) ++j;
    }
    // de Boor triangular scheme for the d+1 nonzero functions N_{j-d..j}
    std::vector<double> N(d + 1, 0.0), left(d + 1, 0.0), right(d + 1, 0.0);
    N[0] = 1.0;
    for (int r = 1; r <= d; ++r) {
        left[r] = x - knots_[j + 1 - r];
        right[r] = knots_[j + r] - x;
        double saved = 0.0;
        for (int i = 0; i < r; ++i) {
            const double tmp = N[i] / (right[i + 1] + left[r - i]);
            N[i] = saved + right[i + 1] * tmp;
            saved = left[r - i] * tmp;
        }
        N[r] = saved;
    }
    VectorXd out = VectorXd::Zero(Q);
    for (int i = 0; i <= d; ++i) out(j - d + i) = N[i];
    return out;
}

VectorXd eval_univariate(const UnivariateBasis& basis, double x) { return basis.eval(x); }

TensorSplineBasis::TensorSplineBasis(std::vector<UnivariateBasis> margins)
    : margins_(std::move(margins)) {
    if (margins_.empty()) throw ConfigError("tensor basis needs at least one margin");
    Q_ = 1;
    for (const auto& m : margins_) Q_ *= m.size();
}

VectorXd TensorSplineBasis::eval(const VectorXd& h) const {
    if (h.size() != margins())
        throw DimensionError("tensor eval: h has " + std::to_string(h.size()) +
                             " entries, basis has " + std::to_string(margins()) + " margins");
    VectorXd acc = margins_[0].eval(h(0));
    for (int m = 1; m < margins(); ++m) {
        const VectorXd next = margins_[m].eval(h(m));
        VectorXd kron(acc.size() * next.size());
        for (int i = 0; i < acc.size(); ++i)
            kron.segment(i * next.size(), next.size()) = acc(i) * next;
        acc.swap(kron);
    }
    if (ortho_) return ortho_->transpose() * acc;
    return acc;
}

void TensorSplineBasis::set_ortho_map(const MatrixXd& T) {
    if (T.rows() != Q_ || T.cols() != Q_)
        throw DimensionError("ortho map must be Q x Q");
    ortho_ = T;
}

const MatrixXd& TensorSplineBasis::ortho_map() const {
    if (!ortho_) throw ConfigError("basis is not orthogonalized");
    return *ortho_;
}

VectorXd TensorSplineBasis::coefficient_backmap(const VectorXd& gamma) const {
    if (!ortho_) return gamma;
    return *ortho_ * gamma;
}

VectorXd eval_tensor(const TensorSplineBasis& basis, const VectorXd& h) { return basis.eval(h); }

MatrixXd expand_design(const MatrixXd& X, const MatrixXd& H, const TensorSplineBasis& basis) {
    if (X.rows() != H.rows())
        throw DimensionError("expand_design: X rows " + std::to_string(X.rows()) +
                             " vs H rows " + std::to_string(H.rows()));
    if (H.cols() != basis.margins())
        throw DimensionError("expand_design: H has " + std::to_string(H.cols()) +
                             " margins, basis expects " + std::to_string(basis.margins()));
    const long n = X.rows();
    const int p = static_cast<int>(X.cols());
    const int Q = basis.size();
    MatrixXd out(n, (p + 1) * Q);
    for (long r = 0; r < n; ++r) {
        const VectorXd phi = basis.eval(H.row(r).transpose());
        out.block(r, 0, 1, Q) = phi.transpose();
        for (int k = 0; k < p; ++k)
            out.block(r, (k + 1) * Q, 1, Q) = X(r, k) * phi.transpose();
    }
    return out;
}

TensorSplineBasis orthogonalize(const TensorSplineBasis& basis, const MatrixXd& H_sample) {
    const long n = H_sample.rows();
    const int Q = basis.size();
    if (n < Q)
        throw DimensionError("orthogonalize: need at least Q sample rows");
    MatrixXd Bmat(n, Q);
    for (long r = 0; r < n; ++r)
        Bmat.row(r) = basis.eval(H_sample.row(r).transpose()).transpose();
    Eigen::HouseholderQR<MatrixXd> qr(Bmat);
    MatrixXd R = qr.matrixQR().topRows(Q).triangularView<Eigen::Upper>();
    // keep a positive diagonal so the map is reproducible
    for (int i = 0; i < Q; ++i)
        if (R(i, i) < 0.0) R.row(i) = -R.row(i);
    for (int i = 0; i < Q; ++i)
        if (std::abs(R(i, i)) < 1e-12 * std::abs(R(0, 0)))
            throw NumericError("orthogonalize: evaluated design is rank deficient");
    // T = sqrt(n) R^{-1}: transformed columns have mean square one on the sample
    MatrixXd T = R.triangularView<Eigen::Upper>().solve(MatrixXd::Identity(Q, Q));
    T *= std::sqrt(static_cast<double>(n));
    TensorSplineBasis out = basis;
    out.set_ortho_map(T);
    return out;
}

std::string TensorSplineBasis::to_config_string() const {
    std::ostringstream os;
    os.precision(17);
    for (const auto& m : margins_) {
        os << "margin degree=" << m.degree() << " knots=";
        const auto& ik = m.interior_knots();
        for (size_t i = 0; i < ik.size(); ++i) os << (i ? "," : "") << ik[i];
        if (ik.empty()) os << "-";
        os << "\n";
    }
    return os.str();
}

TensorSplineBasis TensorSplineBasis::from_config_string(const std::string& text) {
    std::vector<UnivariateBasis> margins;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string word, deg_kv, knots_kv;
        ls >> word >> deg_kv >> knots_kv;
        if (word != "margin" || deg_kv.rfind("degree=", 0) != 0 ||
            knots_kv.rfind("knots=", 0) != 0)
            throw ConfigError("bad basis config line: " + line);
        const int degree = std::stoi(deg_kv.substr(7));
        std::vector<double> knots;
        const std::string list = knots_kv.substr(6);
        if (list != "-") {
            std::istringstream ks(list);
            std::string item;
            while (std::getline(ks, item, ',')) knots.push_back(std::stod(item));
        }
        margins.emplace_back(degree, std::move(knots));
    }
    return TensorSplineBasis(std::move(margins));
}

}  // namespace vcmm
