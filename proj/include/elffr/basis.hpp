#pragma once

#include <elffr/error.hpp>
#include <elffr/types.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>

namespace elffr {

enum class BasisKind { BSpline, TruncatedPower };
enum class PenaltyKind { BlockZeroIdentity, Difference };

template <typename Scalar>
struct BasisMatrix {
  Matrix<Scalar> values;  // grid length x number of basis functions
  BasisKind kind = BasisKind::BSpline;
  Vector<Scalar> knots;   // full knot sequence (B-spline) or interior knots (truncated power)
  int degree = 3;

  Index size() const { return values.cols(); }
};

template <typename Scalar>
struct PenaltyMatrix {
  Matrix<Scalar> values;
  PenaltyKind kind = PenaltyKind::Difference;
};

template <typename Derived>
void require_strictly_increasing(const Eigen::MatrixBase<Derived>& grid, const char* what) {
  for (Index i = 1; i < grid.size(); ++i) {
    if (!(grid(i) > grid(i - 1))) {
      throw Error(ErrorCode::NonMonotoneGrid,
                  std::string(what) + " is not strictly increasing at index " + std::to_string(i));
    }
  }
}

/// Equally spaced points on [lo, hi].
template <typename Scalar = double>
Vector<Scalar> equally_spaced(Index n, Scalar lo = Scalar(0), Scalar hi = Scalar(1)) {
  return Vector<Scalar>::LinSpaced(n, lo, hi);
}

/// Trapezoid-rule weights on an arbitrary strictly increasing grid.
template <typename Derived>
Vector<typename Derived::Scalar> trapezoid_weights(const Eigen::MatrixBase<Derived>& grid) {
  using Scalar = typename Derived::Scalar;
  const Index n = grid.size();
  Vector<Scalar> w = Vector<Scalar>::Zero(n);
  for (Index i = 0; i + 1 < n; ++i) {
    const Scalar half = (grid(i + 1) - grid(i)) / Scalar(2);
    w(i) += half;
    w(i + 1) += half;
  }
  return w;
}

/// Type-7 sample quantile of sorted values.
template <typename Derived>
typename Derived::Scalar sorted_quantile(const Eigen::MatrixBase<Derived>& sorted,
                                         typename Derived::Scalar prob) {
  using Scalar = typename Derived::Scalar;
  const Index n = sorted.size();
  const Scalar h = (n - 1) * prob;
  const Index lo = static_cast<Index>(std::floor(h));
  const Index hi = std::min<Index>(lo + 1, n - 1);
  return sorted(lo) + (h - lo) * (sorted(hi) - sorted(lo));
}

namespace detail {

// Nonzero B-spline basis values at x (Cox-de Boor); writes degree+1 values and
// returns the knot span index.
template <typename Scalar>
Index bspline_nonzero(const Vector<Scalar>& t, int degree, Index n_basis, Scalar x, Scalar* out) {
  Index span = degree;
  if (x >= t(n_basis)) {
    span = n_basis - 1;
  } else {
    while (span + 1 < n_basis && x >= t(span + 1)) ++span;
  }
  Scalar left[32];
  Scalar right[32];
  out[0] = Scalar(1);
  for (int j = 1; j <= degree; ++j) {
    left[j] = x - t(span + 1 - j);
    right[j] = t(span + j) - x;
    Scalar saved = Scalar(0);
    for (int r = 0; r < j; ++r) {
      const Scalar denom = right[r + 1] + left[j - r];
      const Scalar temp = denom != Scalar(0) ? out[r] / denom : Scalar(0);
      out[r] = saved + right[r + 1] * temp;
      saved = left[j - r] * temp;
    }
    out[j] = saved;
  }
  return span;
}

}  // namespace detail

/// Clamped knot vector with interior knots at equally spaced quantiles of the grid.
template <typename Derived>
Vector<typename Derived::Scalar> quantile_knots(const Eigen::MatrixBase<Derived>& grid,
                                                int n_interior_knots, int degree) {
  using Scalar = typename Derived::Scalar;
  const Index n_knots = n_interior_knots + 2 * (degree + 1);
  Vector<Scalar> t(n_knots);
  for (int i = 0; i <= degree; ++i) {
    t(i) = grid(0);
    t(n_knots - 1 - i) = grid(grid.size() - 1);
  }
  for (int k = 1; k <= n_interior_knots; ++k) {
    t(degree + k) = sorted_quantile(grid, Scalar(k) / Scalar(n_interior_knots + 1));
  }
  return t;
}

/// Evaluate the B-spline basis defined by knot sequence `knots` at points `x`.
template <typename Scalar, typename Derived>
Matrix<Scalar> bspline_evaluate(const Vector<Scalar>& knots, int degree,
                                const Eigen::MatrixBase<Derived>& x) {
  const Index n_basis = knots.size() - degree - 1;
  Matrix<Scalar> values = Matrix<Scalar>::Zero(x.size(), n_basis);
  Scalar buffer[32];
  for (Index i = 0; i < x.size(); ++i) {
    const Index span = detail::bspline_nonzero<Scalar>(knots, degree, n_basis, Scalar(x(i)), buffer);
    for (int r = 0; r <= degree; ++r) values(i, span - degree + r) = buffer[r];
  }
  return values;
}

/// B-spline design matrix on `grid` with clamped boundary knots at the grid
/// endpoints and `n_interior_knots` knots at equally spaced grid quantiles.
template <typename Derived>
BasisMatrix<typename Derived::Scalar> bspline_basis(const Eigen::MatrixBase<Derived>& grid,
                                                    int n_interior_knots, int degree = 3) {
  using Scalar = typename Derived::Scalar;
  if (degree < 1 || degree > 30) throw Error(ErrorCode::InvalidArgument, "degree must be in [1, 30]");
  if (n_interior_knots < 1) throw Error(ErrorCode::InvalidArgument, "need at least one interior knot");
  require_strictly_increasing(grid, "grid");
  const Index n_basis = n_interior_knots + degree + 1;
  if (grid.size() < n_basis) {
    throw Error(ErrorCode::DegenerateKnots, "grid of length " + std::to_string(grid.size()) +
                                                " cannot support " + std::to_string(n_basis) +
                                                " basis functions");
  }
  BasisMatrix<Scalar> basis;
  basis.kind = BasisKind::BSpline;
  basis.degree = degree;
  basis.knots = quantile_knots(grid, n_interior_knots, degree);
  basis.values = bspline_evaluate<Scalar>(basis.knots, degree, grid);
  return basis;
}

/// Cubic-style P-spline basis: knots equally spaced over the grid range and
/// continued `degree` steps past each end, so a difference penalty of order
/// <= degree leaves polynomials of lower order unpenalized.
template <typename Derived>
BasisMatrix<typename Derived::Scalar> pspline_basis(const Eigen::MatrixBase<Derived>& grid, int n_interior_knots,
                                                    int degree = 3) {
  using Scalar = typename Derived::Scalar;
  if (degree < 1 || degree > 30) throw Error(ErrorCode::InvalidArgument, "degree must be in [1, 30]");
  if (n_interior_knots < 1) throw Error(ErrorCode::InvalidArgument, "need at least one interior knot");
  require_strictly_increasing(grid, "grid");
  const Index n_basis = n_interior_knots + degree + 1;
  if (grid.size() < n_basis) {
    throw Error(ErrorCode::DegenerateKnots, "grid of length " + std::to_string(grid.size()) +
                                                " cannot support " + std::to_string(n_basis) +
                                                " basis functions");
  }
  const Scalar lo = grid(0);
  const Scalar hi = grid(grid.size() - 1);
  const Scalar step = (hi - lo) / Scalar(n_interior_knots + 1);
  BasisMatrix<Scalar> basis;
  basis.kind = BasisKind::BSpline;
  basis.degree = degree;
  basis.knots.resize(n_basis + degree + 1);
  for (Index j = 0; j < basis.knots.size(); ++j) basis.knots(j) = lo + step * Scalar(j - degree);
  basis.knots(n_basis) = hi;
  basis.values = bspline_evaluate<Scalar>(basis.knots, degree, grid);
  return basis;
}

/// Degree-1 truncated power basis (1, u, (u - k_1)_+, ..., (u - k_{K-2})_+) with
/// equally spaced interior knots over the grid range.
template <typename Derived>
BasisMatrix<typename Derived::Scalar> truncated_power_basis(const Eigen::MatrixBase<Derived>& grid,
                                                            int n_basis) {
  using Scalar = typename Derived::Scalar;
  if (n_basis < 4) throw Error(ErrorCode::InvalidArgument, "truncated power basis needs K_g >= 4");
  require_strictly_increasing(grid, "grid");
  if (grid.size() < n_basis) {
    throw Error(ErrorCode::DegenerateKnots, "grid of length " + std::to_string(grid.size()) +
                                                " cannot support " + std::to_string(n_basis) +
                                                " basis functions");
  }
  const Scalar lo = grid(0);
  const Scalar hi = grid(grid.size() - 1);
  const int n_knots = n_basis - 2;
  BasisMatrix<Scalar> basis;
  basis.kind = BasisKind::TruncatedPower;
  basis.degree = 1;
  basis.knots.resize(n_knots);
  for (int j = 0; j < n_knots; ++j) basis.knots(j) = lo + (hi - lo) * Scalar(j + 1) / Scalar(n_basis - 1);
  basis.values.resize(grid.size(), n_basis);
  for (Index i = 0; i < grid.size(); ++i) {
    const Scalar u = grid(i);
    basis.values(i, 0) = Scalar(1);
    basis.values(i, 1) = u;
    for (int j = 0; j < n_knots; ++j) basis.values(i, 2 + j) = std::max(u - basis.knots(j), Scalar(0));
  }
  return basis;
}

/// Block penalty diag(0_{p+2}, I_{K_g-2}) for scalar coefficients followed by
/// spline coefficients whose first two entries are unpenalized.
template <typename Scalar = double>
PenaltyMatrix<Scalar> penalty_D(int p, int n_spline) {
  if (p < 1 || n_spline < 2) throw Error(ErrorCode::InvalidArgument, "penalty_D needs p >= 1 and K_g >= 2");
  PenaltyMatrix<Scalar> D;
  D.kind = PenaltyKind::BlockZeroIdentity;
  D.values = Matrix<Scalar>::Zero(p + n_spline, p + n_spline);
  for (int i = p + 2; i < p + n_spline; ++i) D.values(i, i) = Scalar(1);
  return D;
}

/// Difference operator of the given order, shape (K - order) x K.
template <typename Scalar = double>
Matrix<Scalar> difference_operator(int order, int K) {
  if (order < 1 || order >= K) throw Error(ErrorCode::InvalidArgument, "difference order must be in [1, K)");
  Matrix<Scalar> P = Matrix<Scalar>::Identity(K, K);
  for (int d = 0; d < order; ++d) {
    const Index rows = P.rows() - 1;
    P = (P.bottomRows(rows) - P.topRows(rows)).eval();
  }
  return P;
}

template <typename Scalar = double>
PenaltyMatrix<Scalar> difference_penalty(int order, int K) {
  const Matrix<Scalar> P = difference_operator<Scalar>(order, K);
  return {P.transpose() * P, PenaltyKind::Difference};
}

/// M(l, m) = trapezoid quadrature of psi_l(u) phi_m(u) over the grid.
template <typename DerivedA, typename DerivedB, typename DerivedG>
Matrix<typename DerivedA::Scalar> inner_product_matrix(const Eigen::MatrixBase<DerivedA>& psi,
                                                       const Eigen::MatrixBase<DerivedB>& phi,
                                                       const Eigen::MatrixBase<DerivedG>& grid) {
  if (psi.rows() != grid.size() || phi.rows() != grid.size()) {
    throw Error(ErrorCode::GridMismatch, "basis rows do not match the quadrature grid");
  }
  const auto w = trapezoid_weights(grid);
  return psi.transpose() * w.asDiagonal() * phi;
}

}  // namespace elffr
