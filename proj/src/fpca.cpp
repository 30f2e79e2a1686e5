#include <elffr/basis.hpp>
#include <elffr/error.hpp>
#include <elffr/fpca.hpp>

#include <Eigen/Eigenvalues>

namespace elffr {

FpcaBasis estimate_fpca(const MatrixXd& W, const VectorXd& grid_u, Index n_components) {
  const Index n = W.rows();
  const Index r = W.cols();
  if (grid_u.size() != r) throw Error(ErrorCode::GridMismatch, "predictor grid length differs from W columns");
  if (n < 2) throw Error(ErrorCode::InvalidArgument, "FPCA needs at least two curves");
  if (n_components < 1 || n_components > std::min(n, r)) {
    throw Error(ErrorCode::InvalidArgument, "K_w must lie in [1, min(N, R)]");
  }
  require_strictly_increasing(grid_u, "grid_u");

  FpcaBasis basis;
  basis.grid_u = grid_u;
  basis.weights = trapezoid_weights(grid_u);
  basis.requested = n_components;
  basis.mean = W.colwise().mean().transpose();
  const MatrixXd centered = W.rowwise() - basis.mean.transpose();

  // Eigenproblem of Q^{1/2} C Q^{1/2}; psi = Q^{-1/2} v is then Q-orthonormal.
  const VectorXd root_w = basis.weights.cwiseSqrt();
  const MatrixXd weighted = centered * root_w.asDiagonal();
  MatrixXd cov = weighted.transpose() * weighted / static_cast<double>(n);
  cov = (0.5 * (cov + cov.transpose())).eval();
  const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw Error(ErrorCode::InvalidArgument, "FPCA eigen decomposition failed");

  const VectorXd values = eig.eigenvalues().reverse();
  const MatrixXd vectors = eig.eigenvectors().rowwise().reverse();
  const double top = std::max(values(0), 0.0);
  Index rank = 0;
  while (rank < n_components && values(rank) > kFpcaRankTolerance * top && values(rank) > 0.0) ++rank;
  if (rank == 0) throw Error(ErrorCode::InvalidArgument, "predictor curves have zero variance");
  if (rank < n_components) {
    basis.warning = "RankDeficient: requested " + std::to_string(n_components) + " components, numerical rank " +
                    std::to_string(rank);
  }

  basis.eigenvalues = values.head(rank);
  basis.eigenfunctions = root_w.cwiseInverse().asDiagonal() * vectors.leftCols(rank);
  for (Index k = 0; k < rank; ++k) {
    Index at = 0;
    basis.eigenfunctions.col(k).cwiseAbs().maxCoeff(&at);
    if (basis.eigenfunctions(at, k) < 0.0) basis.eigenfunctions.col(k) *= -1.0;
  }
  basis.scores = centered * basis.weights.asDiagonal() * basis.eigenfunctions;
  return basis;
}

MatrixXd scores_for(const FpcaBasis& basis, const MatrixXd& W_new) {
  if (W_new.cols() != basis.grid_u.size()) throw Error(ErrorCode::GridMismatch, "curves are not on the FPCA grid");
  return (W_new.rowwise() - basis.mean.transpose()) * basis.weights.asDiagonal() * basis.eigenfunctions;
}

}  // namespace elffr
