#pragma once

#include "vcmm/core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace vcmm {

/// Univariate B-spline basis on [0,1] with clamped (open uniform) boundary
/// knots: the boundary knot is repeated degree+1 times, so the basis spans
/// constants at the boundary and sums to one everywhere.
///
/// Q_m = #interior knots + degree + 1.
class UnivariateBasis {
  public:
    UnivariateBasis(int degree, std::vector<double> interior_knots);

    /// Equally spaced interior knots; num_basis = num_interior + degree + 1.
    static UnivariateBasis uniform(int degree, int num_interior);
    /// Interior knots at empirical quantiles of a sample of index values.
    static UnivariateBasis from_quantiles(int degree, int num_interior,
                                          const VectorXd& sample);

    int degree() const { return degree_; }
    int size() const { return static_cast<int>(knots_.size()) - degree_ - 1; }
    const std::vector<double>& interior_knots() const { return interior_; }
    const std::vector<double>& knots() const { return knots_; }

    /// Cox-de Boor evaluation. Nonnegative, at most degree+1 nonzeros,
    /// sums to 1. x = 1 maps to the last nonempty span.
    VectorXd eval(double x) const;

  private:
    int degree_;
    std::vector<double> interior_;
    std::vector<double> knots_;  // full clamped knot vector
};

VectorXd eval_univariate(const UnivariateBasis& basis, double x);

/// Tensor product of M univariate bases. Flattened so the LAST margin varies
/// fastest: index = ((i_1 * Q_2 + i_2) * Q_3 + ...) + i_M.
class TensorSplineBasis {
  public:
    explicit TensorSplineBasis(std::vector<UnivariateBasis> margins);

    int margins() const { return static_cast<int>(margins_.size()); }
    const UnivariateBasis& margin(int m) const { return margins_[m]; }
    int size() const { return Q_; }

    VectorXd eval(const VectorXd& h) const;

    /// Optional sample-based orthogonalization map T (Q x Q): evaluation
    /// returns T^T phi(h) instead of phi(h). Changes coefficient meaning;
    /// coefficient_backmap() recovers original-basis coefficients.
    void set_ortho_map(const MatrixXd& T);
    bool orthogonalized() const { return ortho_.has_value(); }
    const MatrixXd& ortho_map() const;
    VectorXd coefficient_backmap(const VectorXd& gamma) const;

    std::string to_config_string() const;
    static TensorSplineBasis from_config_string(const std::string& text);

  private:
    std::vector<UnivariateBasis> margins_;
    int Q_;
    std::optional<MatrixXd> ortho_;
};

VectorXd eval_tensor(const TensorSplineBasis& basis, const VectorXd& h);

/// Row r of the result is [phi(h_r), x_{r,1} phi(h_r), ..., x_{r,p} phi(h_r)].
MatrixXd expand_design(const MatrixXd& X, const MatrixXd& H, const TensorSplineBasis& basis);

/// Gram-Schmidt (thin QR) on the evaluated design columns of a sample of
/// index rows. Returns a basis carrying the transform; scaled so transformed
/// basis values stay O(1).
TensorSplineBasis orthogonalize(const TensorSplineBasis& basis, const MatrixXd& H_sample);

}  // namespace vcmm
