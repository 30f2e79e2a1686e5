#include <elffr/covariance.hpp>
#include <elffr/smoothing.hpp>

#include <Eigen/Cholesky>
#include <Eigen/QR>

namespace elffr {

MatrixXd CovarianceField::block_at(Index l, Index m) const {
  MatrixXd out(q, q);
  for (Index t = 0; t < q; ++t)
    for (Index v = 0; v < q; ++v) out(t, v) = G(t * L + l, v * L + m);
  return out;
}

MatrixXd fixed_effect_residuals(const MatrixXd& Y, const MatrixXd& Xstar, const MatrixXd& beta_star) {
  if (Xstar.rows() != Y.rows() || beta_star.rows() != Xstar.cols() || beta_star.cols() != Y.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "outcomes, design and coefficients do not conform");
  }
  return Y - Xstar * beta_star;
}

CovarianceField estimate_G_mom(const MatrixXd& residuals, const MatrixXd& Z, const SubjectIndex& subjects) {
  const Index L = residuals.cols();
  const Index q = Z.cols();
  const Index qq = q * q;
  if (Z.rows() != residuals.rows() || subjects.row_subject.size() != residuals.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "residuals, Z and subject index differ in rows");
  }
  const Index I = subjects.n_subjects();

  // Q(i, t L + l) = sum_j r_ij(l) z_ijt
  MatrixXd Q = MatrixXd::Zero(I, q * L);
  MatrixXd gram_all = MatrixXd::Zero(qq, qq);
  MatrixXd gram_self = MatrixXd::Zero(qq, qq);
  for (Index i = 0; i < I; ++i) {
    const auto& rows = subjects.rows[static_cast<std::size_t>(i)];
    if (rows.empty()) throw Error(ErrorCode::InsufficientPairs, "subject without observations");
    MatrixXd ztz = MatrixXd::Zero(q, q);
    for (const Index r : rows) {
      const VectorXd z = Z.row(r).transpose();
      ztz += z * z.transpose();
      for (Index t = 0; t < q; ++t) Q.row(i).segment(t * L, L) += z(t) * residuals.row(r);
      const MatrixXd zz = z * z.transpose();
      for (Index a = 0; a < q; ++a)
        for (Index b = 0; b < q; ++b) gram_self.block(a * q, b * q, q, q) += zz(a, b) * zz;
    }
    for (Index a = 0; a < q; ++a)
      for (Index b = 0; b < q; ++b) gram_all.block(a * q, b * q, q, q) += ztz(a, b) * ztz;
  }
  const MatrixXd gram_diag = gram_all - gram_self;
  const Eigen::ColPivHouseholderQR<MatrixXd> solve_off(gram_all);
  const Eigen::ColPivHouseholderQR<MatrixXd> solve_diag(gram_diag);
  const double scale = std::max(1.0, gram_all.cwiseAbs().maxCoeff());
  if (solve_off.rank() < qq || solve_diag.rank() < qq ||
      solve_diag.matrixR().diagonal().cwiseAbs().minCoeff() < 1e-12 * scale) {
    throw Error(ErrorCode::InsufficientPairs, "too few within-subject pairs to identify the covariance");
  }

  const MatrixXd cross = Q.transpose() * Q;  // (q L) x (q L)
  CovarianceField field;
  field.q = q;
  field.L = L;
  field.G.resize(q * L, q * L);
  VectorXd rhs(qq);
  for (Index l = 0; l < L; ++l) {
    MatrixXd self = MatrixXd::Zero(q, q);  // sum_ij r_ij(l)^2 z z'
    for (Index r = 0; r < residuals.rows(); ++r) {
      const VectorXd z = Z.row(r).transpose();
      self += residuals(r, l) * residuals(r, l) * z * z.transpose();
    }
    for (Index m = 0; m < L; ++m) {
      for (Index t = 0; t < q; ++t)
        for (Index v = 0; v < q; ++v) rhs(t * q + v) = cross(t * L + l, v * L + m) - (l == m ? self(t, v) : 0.0);
      const VectorXd g = l == m ? VectorXd(solve_diag.solve(rhs)) : VectorXd(solve_off.solve(rhs));
      for (Index t = 0; t < q; ++t)
        for (Index v = 0; v < q; ++v) field.G(t * L + l, v * L + m) = g(t * q + v);
    }
  }
  field.G = ((field.G + field.G.transpose()) / 2.0).eval();
  return field;
}

CovarianceField estimate_G_marginal(const MatrixXd& Y, const MatrixXd& Xstar, const MatrixXd& beta_star, Index q) {
  if (q != 1) throw Error(ErrorCode::UnsupportedQ, "marginal covariance estimator needs a random intercept only (q = 1)");
  if (Xstar.rows() != Y.rows() || beta_star.rows() != Xstar.cols() || beta_star.cols() != Y.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "outcomes, design and coefficients do not conform");
  }
  const double n = static_cast<double>(Y.rows());
  const MatrixXd yc = Y.rowwise() - Y.colwise().mean();
  const MatrixXd xc = Xstar.rowwise() - Xstar.colwise().mean();
  const MatrixXd fitted = xc * beta_star;
  CovarianceField field;
  field.L = Y.cols();
  field.G = yc.transpose() * yc / n - fitted.transpose() * fitted / n;
  field.G = ((field.G + field.G.transpose()) / 2.0).eval();
  return field;
}

CovarianceField trim_covariance(CovarianceField field) {
  field.G = psd_trim(field.G);
  field.trimmed = true;
  return field;
}

CovarianceField smooth_covariance(const CovarianceField& field, const VectorXd& grid_s, int knots) {
  if (grid_s.size() != field.L) throw Error(ErrorCode::GridMismatch, "covariance field and grid differ in length");
  const PSplineSystem<double> system(grid_s, knots);
  MatrixXd pooled(field.L, field.L * field.q * field.q);
  for (Index t = 0; t < field.q; ++t)
    for (Index v = 0; v < field.q; ++v) pooled.middleCols((t * field.q + v) * field.L, field.L) = field.slice(t, v);
  const SmootherMatrix<double> S = system.smoother(system.select_gcv(pooled, default_lambda_grid<double>()));
  CovarianceField out = field;
  for (Index t = 0; t < field.q; ++t)
    for (Index v = 0; v < field.q; ++v) out.G.block(t * field.L, v * field.L, field.L, field.L) = S.S * field.slice(t, v) * S.S.transpose();
  out.smoothed = true;
  return trim_covariance(std::move(out));
}

void write_covariance_csv(const std::filesystem::path& path, const CovarianceField& field) {
  std::vector<std::string> header;
  for (Index t = 0; t < field.q; ++t)
    for (Index l = 0; l < field.L; ++l) header.push_back("u" + std::to_string(t + 1) + "_s" + std::to_string(l + 1));
  write_matrix_csv(path, field.G, header);
}

}  // namespace elffr
