#pragma once

#include <elffr/basis.hpp>
#include <elffr/error.hpp>
#include <elffr/types.hpp>

#include <Eigen/QR>
#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <optional>
#include <string>

namespace elffr {

/// Linear smoother S = B (B'B + lambda P'P)^{-1} B' over one grid.
template <typename Scalar>
struct SmootherMatrix {
  Matrix<Scalar> S;
  Scalar lambda = Scalar(0);
  int n_knots = 0;
  Scalar edf = Scalar(0);

  Index size() const { return S.rows(); }
};

template <typename Scalar>
struct PSmoothResult {
  Vector<Scalar> smoothed;
  SmootherMatrix<Scalar> smoother;
};

template <typename Scalar>
struct SandwichResult {
  Matrix<Scalar> smoothed;             // R x L
  SmootherMatrix<Scalar> over_s;       // S1, L x L
  SmootherMatrix<Scalar> over_u;       // S2, R x R
};

constexpr int kPenaltyOrder = 2;

/// 51 log-spaced values on [1e-8, 1e8].
template <typename Scalar = double>
Vector<Scalar> default_lambda_grid() {
  Vector<Scalar> grid(51);
  for (Index i = 0; i < grid.size(); ++i) grid(i) = std::pow(Scalar(10), Scalar(-8) + Scalar(16) * i / Scalar(50));
  return grid;
}

/// Cubic P-spline system on one grid; forms smoother matrices for any lambda.
template <typename Scalar>
class PSplineSystem {
 public:
  template <typename Derived>
  PSplineSystem(const Eigen::MatrixBase<Derived>& grid, int n_knots) : n_knots_(n_knots) {
    if (n_knots < 1 || grid.size() < n_knots + 4) {
      throw Error(ErrorCode::TooFewPoints, "grid of length " + std::to_string(grid.size()) +
                                               " is too short for " + std::to_string(n_knots) + " knots");
    }
    basis_ = pspline_basis(grid, n_knots, 3).values;
    difference_ = difference_operator<Scalar>(kPenaltyOrder, static_cast<int>(basis_.cols()));
  }

  Index grid_size() const { return basis_.rows(); }
  const Matrix<Scalar>& basis() const { return basis_; }

  SmootherMatrix<Scalar> smoother(Scalar lambda) const {
    const Matrix<Scalar> Q = hat_factor(lambda);
    SmootherMatrix<Scalar> out;
    out.S = Q * Q.transpose();
    out.lambda = lambda;
    out.n_knots = n_knots_;
    out.edf = out.S.trace();
    return out;
  }

  /// GCV over the candidate grid, pooling residuals of every column of `curves`
  /// (each column is one curve on this grid).
  template <typename Derived>
  Scalar select_gcv(const Eigen::MatrixBase<Derived>& curves, const Vector<Scalar>& lambdas) const {
    const Scalar n = static_cast<Scalar>(grid_size());
    const Scalar total = n * static_cast<Scalar>(curves.cols());
    Scalar best_lambda = lambdas(0);
    Scalar best = std::numeric_limits<Scalar>::infinity();
    for (Index k = 0; k < lambdas.size(); ++k) {
      const Matrix<Scalar> Q = hat_factor(lambdas(k));
      const Scalar rss = (curves - Q * (Q.transpose() * curves)).squaredNorm();
      const Scalar edf = Q.squaredNorm();
      const Scalar denom = Scalar(1) - edf / n;
      if (denom <= Scalar(0)) continue;
      const Scalar gcv = (rss / total) / (denom * denom);
      if (gcv < best) {
        best = gcv;
        best_lambda = lambdas(k);
      }
    }
    return best_lambda;
  }

 private:
  // Thin Q block over the grid rows of the QR factorization of [B; sqrt(lambda) P].
  // S = Q Q' then avoids forming B'B + lambda P'P, which is badly conditioned
  // at large lambda.
  Matrix<Scalar> hat_factor(Scalar lambda) const {
    const Index n = basis_.rows();
    const Index K = basis_.cols();
    Matrix<Scalar> stacked(n + difference_.rows(), K);
    stacked << basis_, std::sqrt(lambda) * difference_;
    const Eigen::HouseholderQR<Matrix<Scalar>> qr(stacked);
    const Matrix<Scalar> thin = qr.householderQ() * Matrix<Scalar>::Identity(stacked.rows(), K);
    return thin.topRows(n);
  }

  int n_knots_;
  Matrix<Scalar> basis_;
  Matrix<Scalar> difference_;
};

/// Univariate P-spline smoothing: cubic B-splines with `n_knots` interior knots,
/// second-order difference penalty, lambda by GCV unless given.
template <typename DerivedV, typename DerivedG>
PSmoothResult<typename DerivedV::Scalar> psmooth(const Eigen::MatrixBase<DerivedV>& values,
                                                 const Eigen::MatrixBase<DerivedG>& grid, int n_knots,
                                                 std::optional<typename DerivedV::Scalar> lambda = std::nullopt) {
  using Scalar = typename DerivedV::Scalar;
  if (values.size() != grid.size()) throw Error(ErrorCode::ShapeMismatch, "values and grid differ in length");
  const PSplineSystem<Scalar> system(grid, n_knots);
  const Vector<Scalar> y = values;
  const Scalar chosen = lambda ? *lambda : system.select_gcv(y, default_lambda_grid<Scalar>());
  PSmoothResult<Scalar> out;
  out.smoother = system.smoother(chosen);
  out.smoothed = out.smoother.S * y;
  return out;
}

/// S2 * Gamma * S1' -- equal to unvec((S1 kron S2) vec(Gamma)) for column-major vec.
template <typename DerivedG, typename Scalar>
Matrix<Scalar> apply_sandwich(const Eigen::MatrixBase<DerivedG>& gamma, const SmootherMatrix<Scalar>& over_s,
                              const SmootherMatrix<Scalar>& over_u) {
  if (gamma.rows() != over_u.size() || gamma.cols() != over_s.size()) {
    throw Error(ErrorCode::DimensionMismatch, "surface shape does not match smoother sizes");
  }
  return over_u.S * gamma * over_s.S.transpose();
}

/// Bivariate sandwich smoothing of an R x L surface (rows over u, columns over s).
/// Each marginal smoother gets its own GCV-selected lambda from the pooled
/// residuals of smoothing every row (for S1) or column (for S2).
template <typename DerivedG, typename DerivedU, typename DerivedS>
SandwichResult<typename DerivedG::Scalar> sandwich_smooth(
    const Eigen::MatrixBase<DerivedG>& gamma, const Eigen::MatrixBase<DerivedU>& grid_u,
    const Eigen::MatrixBase<DerivedS>& grid_s, int knots_u, int knots_s,
    std::optional<typename DerivedG::Scalar> lambda_u = std::nullopt,
    std::optional<typename DerivedG::Scalar> lambda_s = std::nullopt) {
  using Scalar = typename DerivedG::Scalar;
  if (gamma.rows() != grid_u.size() || gamma.cols() != grid_s.size()) {
    throw Error(ErrorCode::DimensionMismatch, "surface shape does not match its grids");
  }
  const PSplineSystem<Scalar> sys_s(grid_s, knots_s);
  const PSplineSystem<Scalar> sys_u(grid_u, knots_u);
  const Matrix<Scalar> g = gamma;
  const auto lambdas = default_lambda_grid<Scalar>();
  const Scalar ls = lambda_s ? *lambda_s : sys_s.select_gcv(g.transpose(), lambdas);
  const Scalar lu = lambda_u ? *lambda_u : sys_u.select_gcv(g, lambdas);
  SandwichResult<Scalar> out;
  out.over_s = sys_s.smoother(ls);
  out.over_u = sys_u.smoother(lu);
  out.smoothed = apply_sandwich(g, out.over_s, out.over_u);
  return out;
}

}  // namespace elffr
