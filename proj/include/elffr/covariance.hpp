#pragma once

#include <elffr/data_model.hpp>
#include <elffr/error.hpp>
#include <elffr/types.hpp>

#include <Eigen/Eigenvalues>

#include <filesystem>

namespace elffr {

/// Random-effect cross-covariances over all grid pairs, stored unfolded as a
/// (q L) x (q L) matrix: entry (t L + l, v L + m) = Cov(u_t(s_l), u_v(s_m)).
struct CovarianceField {
  MatrixXd G;
  Index q = 1;
  Index L = 0;
  bool smoothed = false;
  bool trimmed = false;

  double operator()(Index t, Index v, Index l, Index m) const { return G(t * L + l, v * L + m); }
  /// q x q block for the grid pair (l, m).
  MatrixXd block_at(Index l, Index m) const;
  /// L x L slice for the component pair (t, v).
  auto slice(Index t, Index v) const { return G.block(t * L, v * L, L, L); }
};

/// Symmetrizes, then clips negative eigenvalues to zero.
template <typename Derived>
Matrix<typename Derived::Scalar> psd_trim(const Eigen::MatrixBase<Derived>& A) {
  using Scalar = typename Derived::Scalar;
  if (A.rows() != A.cols()) throw Error(ErrorCode::DimensionMismatch, "psd_trim needs a square matrix");
  const Matrix<Scalar> sym = (A + A.transpose()) / Scalar(2);
  const Eigen::SelfAdjointEigenSolver<Matrix<Scalar>> eig(sym);
  const Vector<Scalar> clipped = eig.eigenvalues().cwiseMax(Scalar(0));
  Matrix<Scalar> out = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
  return (out + out.transpose()) / Scalar(2);
}

/// Y - X* B, with B the P x L matrix of pointwise coefficient vectors.
MatrixXd fixed_effect_residuals(const MatrixXd& Y, const MatrixXd& Xstar, const MatrixXd& beta_star);

/// Moment regression of within-subject residual cross-products on products of
/// random-effect covariates. Pairs j != k always enter; j == k pairs enter
/// only off the diagonal l != m, where the white-noise error contributes nothing.
CovarianceField estimate_G_mom(const MatrixXd& residuals, const MatrixXd& Z, const SubjectIndex& subjects);

/// Random-intercept shortcut: Cov(Y(s1), Y(s2)) - b(s1)' Cov(X*) b(s2), with
/// population (divisor N) moments.
CovarianceField estimate_G_marginal(const MatrixXd& Y, const MatrixXd& Xstar, const MatrixXd& beta_star, Index q = 1);

/// Each (t, v) slice smoothed as S G S' with one cubic P-spline smoother over
/// grid_s (lambda by GCV pooled over all slices), then PSD-trimmed.
CovarianceField smooth_covariance(const CovarianceField& field, const VectorXd& grid_s, int knots);

CovarianceField trim_covariance(CovarianceField field);

void write_covariance_csv(const std::filesystem::path& path, const CovarianceField& field);

}  // namespace elffr
