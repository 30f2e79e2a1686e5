#pragma once

// Dense reference computations used only by tests. They form every N x N
// matrix explicitly and invert with full-pivot LU, sharing no code with the
// library's structured solvers.

#include <elffr/types.hpp>

#include <Eigen/Dense>

#include <random>
#include <vector>

namespace oracle {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using elffr::Index;

inline MatrixXd dense_v(const MatrixXd& Z, const std::vector<long>& subject, const MatrixXd& H, double sigma2) {
  const Index n = Z.rows();
  MatrixXd V = sigma2 * MatrixXd::Identity(n, n);
  for (Index a = 0; a < n; ++a)
    for (Index b = 0; b < n; ++b)
      if (subject[a] == subject[b]) V(a, b) += Z.row(a) * H * Z.row(b).transpose();
  return V;
}

inline MatrixXd inverse(const MatrixXd& A) { return A.fullPivLu().inverse(); }

// (X' V^-1 X + pen D)^-1
inline MatrixXd penalized_inverse(const MatrixXd& X, const MatrixXd& Vinv, const MatrixXd& D, double pen) {
  return inverse(X.transpose() * Vinv * X + pen * D);
}

inline VectorXd penalized_gls(const MatrixXd& X, const VectorXd& y, const MatrixXd& V, const MatrixXd& D, double pen) {
  const MatrixXd Vinv = inverse(V);
  return penalized_inverse(X, Vinv, D, pen) * X.transpose() * Vinv * y;
}

inline MatrixXd kron(const MatrixXd& A, const MatrixXd& B) {
  MatrixXd out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Index i = 0; i < A.rows(); ++i)
    for (Index j = 0; j < A.cols(); ++j) out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return out;
}

inline MatrixXd random_matrix(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  MatrixXd m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = n01(rng);
  return m;
}

inline double max_rel(const MatrixXd& a, const MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1e-300, b.cwiseAbs().maxCoeff());
}

}  // namespace oracle
