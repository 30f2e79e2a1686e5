#pragma once

#include <elffr/types.hpp>

#include <string>

namespace elffr {

/// Truncated Karhunen-Loeve expansion of curves observed on a common grid.
/// Eigenfunctions are orthonormal under the trapezoid inner product.
struct FpcaBasis {
  VectorXd mean;            // R
  MatrixXd eigenfunctions;  // R x K_w
  VectorXd eigenvalues;     // K_w, nonincreasing, >= 0
  MatrixXd scores;          // N x K_w
  VectorXd grid_u;
  VectorXd weights;         // trapezoid weights on grid_u
  Index requested = 0;      // K_w asked for; eigenfunctions.cols() may be smaller
  std::string warning;      // set when the numerical rank forced truncation

  Index n_components() const { return eigenfunctions.cols(); }
  bool truncated() const { return !warning.empty(); }
};

/// Relative eigenvalue cutoff defining numerical rank.
constexpr double kFpcaRankTolerance = 1e-10;

FpcaBasis estimate_fpca(const MatrixXd& W, const VectorXd& grid_u, Index n_components);

/// Quadrature projections of centered curves onto the eigenfunctions.
MatrixXd scores_for(const FpcaBasis& basis, const MatrixXd& W_new);

}  // namespace elffr
