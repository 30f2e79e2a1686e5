#pragma once

#include <elffr/basis.hpp>
#include <elffr/data_model.hpp>

#include "oracles.hpp"

#include <random>

namespace fixture {

using elffr::FunctionalDataset;
using elffr::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Unbalanced random dataset; visits per subject cycle through 2..4.
inline FunctionalDataset random_dataset(Index subjects, Index p, Index n_pred, Index R, Index L, std::uint64_t seed,
                                        Index q = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  FunctionalDataset d;
  for (Index i = 0; i < subjects; ++i) {
    const Index visits = 2 + i % 3;
    for (Index j = 0; j < visits; ++j) {
      d.subject_id.push_back(100 + i);
      d.visit_id.push_back(j + 1);
    }
  }
  const Index n = static_cast<Index>(d.subject_id.size());
  d.X = oracle::random_matrix(n, p, rng);
  d.X.col(0).setOnes();
  d.Z = MatrixXd::Ones(n, q);
  if (q > 1) d.Z.rightCols(q - 1) = oracle::random_matrix(n, q - 1, rng);
  d.grid_s = elffr::equally_spaced<double>(L);
  for (Index k = 0; k < n_pred; ++k) {
    d.grid_u.push_back(elffr::equally_spaced<double>(R));
    MatrixXd W(n, R);
    const VectorXd& u = d.grid_u.back();
    for (Index i = 0; i < n; ++i) {
      const double a = n01(rng), b = n01(rng), c = n01(rng);
      for (Index r = 0; r < R; ++r) W(i, r) = a + b * std::sin(3 * u(r)) + c * u(r) * u(r) + 0.3 * n01(rng);
    }
    d.W.push_back(W);
  }
  d.Y.resize(n, L);
  for (Index l = 0; l < L; ++l) {
    std::vector<double> b(static_cast<std::size_t>(subjects));
    for (auto& v : b) v = n01(rng);
    for (Index r = 0; r < n; ++r) {
      double mean = d.X.row(r).sum() * 0.3;
      for (const auto& W : d.W) mean += 0.2 * W.row(r).mean();
      d.Y(r, l) = mean + b[static_cast<std::size_t>(d.subject_id[r] - 100)] + n01(rng);
    }
  }
  return d;
}

}  // namespace fixture
