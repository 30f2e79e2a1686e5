#include <elffr/optim.hpp>
#include <elffr/parallel.hpp>
#include <elffr/pointwise_fit.hpp>
#include <elffr/smoothing.hpp>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <cmath>
#include <limits>
#include <map>

namespace elffr {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kLogBound = 30.0;
const double kLogBoundaryProbe = -10.0;

// Condition number of A after scaling to unit diagonal.
double equilibrated_condition(const MatrixXd& A) {
  const VectorXd d = A.diagonal();
  if ((d.array() <= 0.0).any()) return kInf;
  const VectorXd s = d.cwiseSqrt().cwiseInverse();
  const MatrixXd scaled = s.asDiagonal() * A * s.asDiagonal();
  const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(scaled, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0)) return kInf;
  return hi / lo;
}

}  // namespace

void validate(const PointwiseModelConfig& config) {
  if (config.K_g < 4) throw Error(ErrorCode::InvalidArgument, "K_g must be at least 4");
  if (config.K_w < 1) throw Error(ErrorCode::InvalidArgument, "K_w must be at least 1");
  if (config.lambda_selection == LambdaSelection::Fixed && !(config.fixed_lambda >= 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "fixed lambda must be nonnegative");
  }
  if (config.max_reml_iter < 1 || !(config.reml_tol > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "REML iteration limit and tolerance must be positive");
  }
}

Design build_design(const MatrixXd& X, std::span<const FpcaBasis> fpca, std::span<const BasisMatrix<double>> phi) {
  if (fpca.size() != phi.size()) throw Error(ErrorCode::DimensionMismatch, "one coefficient basis per predictor");
  Design design;
  design.p = X.cols();
  Index total = design.p;
  for (std::size_t k = 0; k < fpca.size(); ++k) {
    if (phi[k].values.rows() != fpca[k].grid_u.size()) {
      throw Error(ErrorCode::GridMismatch, "coefficient basis and FPCA of predictor " + std::to_string(k + 1) +
                                               " use different grids");
    }
    design.offsets.push_back(total);
    design.n_spline.push_back(phi[k].size());
    total += phi[k].size();
  }
  design.Xstar.resize(X.rows(), total);
  design.Xstar.leftCols(design.p) = X;
  design.D = MatrixXd::Zero(total, total);
  for (std::size_t k = 0; k < fpca.size(); ++k) {
    const MatrixXd M = inner_product_matrix(fpca[k].eigenfunctions, phi[k].values, fpca[k].grid_u);
    const Index offset = design.offsets[k];
    const Index kg = design.n_spline[k];
    design.Xstar.middleCols(offset, kg) = fpca[k].scores * M;
    std::vector<Index> cols;
    for (Index j = 2; j < kg; ++j) {
      design.D(offset + j, offset + j) = 1.0;
      cols.push_back(offset + j);
    }
    design.penalized.push_back(std::move(cols));
  }
  return design;
}

struct MixedModelSystem::LocationStats {
  VectorXd xty;
  double yty = 0.0;
  std::vector<VectorXd> zty;
  std::vector<VectorXd> group_sxt;
  std::vector<double> group_stt;
};

struct MixedModelSystem::Evaluation {
  bool ok = false;
  MatrixXd A;       // relative penalized normal matrix
  VectorXd beta;
  double ypy = 0.0;
  double log_det_v = 0.0;
  double log_det_a = 0.0;
};

MixedModelSystem::MixedModelSystem(Design design, const MatrixXd& Z, const SubjectIndex& subjects)
    : design_(std::move(design)), n_obs_(design_.Xstar.rows()), q_(Z.cols()), Z_(Z) {
  if (Z.rows() != n_obs_ || subjects.row_subject.size() != n_obs_) {
    throw Error(ErrorCode::DimensionMismatch, "Z and subject index must match the design rows");
  }
  const MatrixXd& X = design_.Xstar;
  xtx_ = X.transpose() * X;
  subject_rows_ = subjects.rows;
  for (const auto& rows : subjects.rows) {
    MatrixXd zi(static_cast<Index>(rows.size()), q_);
    MatrixXd xi(static_cast<Index>(rows.size()), X.cols());
    for (std::size_t j = 0; j < rows.size(); ++j) {
      zi.row(static_cast<Index>(j)) = Z.row(rows[j]);
      xi.row(static_cast<Index>(j)) = X.row(rows[j]);
    }
    ztz_.push_back(zi.transpose() * zi);
    ztx_.push_back(zi.transpose() * xi);
  }
  if (q_ == 1) {
    std::map<double, std::size_t> groups;
    for (std::size_t i = 0; i < ztz_.size(); ++i) {
      const double key = ztz_[i](0, 0);
      auto [it, inserted] = groups.emplace(key, group_ztz_.size());
      if (inserted) {
        group_ztz_.push_back(key);
        group_members_.emplace_back();
        group_sxx_.push_back(MatrixXd::Zero(X.cols(), X.cols()));
      }
      group_members_[it->second].push_back(static_cast<Index>(i));
      group_sxx_[it->second].noalias() += ztx_[i].transpose() * ztx_[i];
    }
  }
}

MixedModelSystem::LocationStats MixedModelSystem::location_stats(const VectorXd& y) const {
  if (y.size() != n_obs_) throw Error(ErrorCode::DimensionMismatch, "outcome length differs from design rows");
  LocationStats stats;
  stats.xty = design_.Xstar.transpose() * y;
  stats.yty = y.squaredNorm();
  stats.zty.reserve(subject_rows_.size());
  for (const auto& rows : subject_rows_) {
    VectorXd t = VectorXd::Zero(q_);
    for (const Index r : rows) t += Z_.row(r).transpose() * y(r);
    stats.zty.push_back(std::move(t));
  }
  if (q_ == 1) {
    for (std::size_t g = 0; g < group_members_.size(); ++g) {
      VectorXd sxt = VectorXd::Zero(design_.n_coef());
      double stt = 0.0;
      for (const Index i : group_members_[g]) {
        const double t = stats.zty[static_cast<std::size_t>(i)](0);
        sxt += ztx_[static_cast<std::size_t>(i)].row(0).transpose() * t;
        stt += t * t;
      }
      stats.group_sxt.push_back(std::move(sxt));
      stats.group_stt.push_back(stt);
    }
  }
  return stats;
}

MixedModelSystem::Evaluation MixedModelSystem::evaluate(const LocationStats& stats, const MatrixXd& theta_b,
                                                        const VectorXd& penalty_scale,
                                                        Index n_random_coef) const {
  Evaluation ev;
  MatrixXd A = xtx_;
  VectorXd c = stats.xty;
  double yvy = stats.yty;
  if (q_ == 1) {
    const double theta = theta_b(0, 0);
    if (theta != 0.0) {
      for (std::size_t g = 0; g < group_ztz_.size(); ++g) {
        const double n = group_ztz_[g];
        const double w = theta / (1.0 + theta * n);
        A.noalias() -= w * group_sxx_[g];
        c.noalias() -= w * stats.group_sxt[g];
        yvy -= w * stats.group_stt[g];
        ev.log_det_v += static_cast<double>(group_members_[g].size()) * std::log1p(theta * n);
      }
    }
  } else if (!theta_b.isZero(0.0)) {
    const MatrixXd eye = MatrixXd::Identity(q_, q_);
    for (std::size_t i = 0; i < ztz_.size(); ++i) {
      const Eigen::PartialPivLU<MatrixXd> lu(eye + ztz_[i] * theta_b);
      const double det = lu.determinant();
      if (!(det > 0.0)) return ev;
      ev.log_det_v += std::log(det);
      const MatrixXd w = theta_b * lu.inverse();
      const MatrixXd wx = w * ztx_[i];
      A.noalias() -= ztx_[i].transpose() * wx;
      c.noalias() -= wx.transpose() * stats.zty[i];
      yvy -= stats.zty[i].dot(w * stats.zty[i]);
    }
  }
  for (Index k = 0; k < design_.n_blocks(); ++k) {
    for (const Index j : design_.penalized[static_cast<std::size_t>(k)]) A(j, j) += penalty_scale(k);
  }
  const Eigen::LLT<MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) return ev;
  ev.beta = llt.solve(c);
  ev.ypy = yvy - c.dot(ev.beta);
  const MatrixXd& L = llt.matrixLLT();
  ev.log_det_a = 2.0 * L.diagonal().array().log().sum();
  ev.A = std::move(A);
  const Index dof = n_obs_ - (design_.n_coef() - n_random_coef);
  ev.ok = dof > 0 && ev.ypy > 1e-13 * std::max(yvy, 1e-300) && std::isfinite(ev.log_det_a);
  return ev;
}

MatrixXd MixedModelSystem::relative_xtvx(const MatrixXd& theta_b) const {
  MatrixXd A = xtx_;
  if (q_ == 1) {
    const double theta = theta_b(0, 0);
    for (std::size_t g = 0; g < group_ztz_.size(); ++g) A -= theta / (1.0 + theta * group_ztz_[g]) * group_sxx_[g];
  } else {
    const MatrixXd eye = MatrixXd::Identity(q_, q_);
    for (std::size_t i = 0; i < ztz_.size(); ++i) {
      const MatrixXd w = theta_b * (eye + ztz_[i] * theta_b).inverse();
      A -= ztx_[i].transpose() * w * ztx_[i];
    }
  }
  return A;
}

RemlResult MixedModelSystem::reml(const VectorXd& y, const PointwiseModelConfig& config) const {
  validate(config);
  const LocationStats stats = location_stats(y);
  const Index n_blocks = design_.n_blocks();
  const bool select_lambda = config.lambda_selection == LambdaSelection::MixedModelReml;
  const Index n_b = config.random_effects ? q_ : 0;

  std::vector<Index> reml_blocks;
  Index fixed_random_coef = 0;
  double fixed_log_term = 0.0;
  for (Index k = 0; k < n_blocks; ++k) {
    const Index m = static_cast<Index>(design_.penalized[static_cast<std::size_t>(k)].size());
    if (m == 0) continue;
    if (select_lambda) {
      reml_blocks.push_back(k);
    } else if (config.fixed_lambda > 0.0) {
      fixed_random_coef += m;
      fixed_log_term -= static_cast<double>(m) * std::log(config.fixed_lambda);
    }
  }
  const Index n_g = static_cast<Index>(reml_blocks.size());

  // Variables: log(sigma_b^2 / sigma^2) per random effect, then log(sigma_g^2 / sigma^2) per block.
  struct Point {
    MatrixXd theta_b;
    VectorXd scale;
    Index n_random_coef = 0;
    double log_term = 0.0;
  };
  auto unpack = [&](const VectorXd& x, const std::vector<bool>& pinned) {
    Point pt;
    pt.theta_b = MatrixXd::Zero(q_, q_);
    Index at = 0;
    for (Index t = 0; t < n_b; ++t) {
      if (!pinned[static_cast<std::size_t>(t)]) pt.theta_b(t, t) = std::exp(x(at++));
    }
    pt.scale = VectorXd::Constant(n_blocks, select_lambda ? 0.0 : config.fixed_lambda);
    pt.n_random_coef = fixed_random_coef;
    pt.log_term = fixed_log_term;
    for (Index j = 0; j < n_g; ++j) {
      const Index k = reml_blocks[static_cast<std::size_t>(j)];
      const double log_theta = x(at++);
      const Index m = static_cast<Index>(design_.penalized[static_cast<std::size_t>(k)].size());
      pt.scale(k) = std::exp(-log_theta);
      pt.n_random_coef += m;
      pt.log_term += static_cast<double>(m) * log_theta;
    }
    return pt;
  };
  auto criterion_at = [&](const Point& pt) {
    const Evaluation ev = evaluate(stats, pt.theta_b, pt.scale, pt.n_random_coef);
    if (!ev.ok) return kInf;
    const double dof = static_cast<double>(n_obs_ - (design_.n_coef() - pt.n_random_coef));
    return ev.log_det_v + ev.log_det_a + pt.log_term + dof * std::log(ev.ypy);
  };

  int evaluations = 0;
  auto optimize = [&](const std::vector<bool>& pinned, const std::vector<VectorXd>& starts) {
    auto objective = [&](const VectorXd& x) {
      if (x.size() > 0 && x.cwiseAbs().maxCoeff() > kLogBound) return kInf;
      return criterion_at(unpack(x, pinned));
    };
    NelderMeadOptions opt;
    opt.f_tol = config.reml_tol;
    opt.x_tol = 1e-7;
    opt.max_evaluations = config.max_reml_iter;
    opt.initial_step = 1.5;
    NelderMeadResult best;
    for (const auto& start : starts) {
      NelderMeadResult r = nelder_mead(objective, start, opt);
      evaluations += r.evaluations;
      if (r.value < best.value) best = std::move(r);
    }
    if (best.x.size() > 0 && std::isfinite(best.value)) {
      opt.initial_step = 0.1;
      NelderMeadResult polished = nelder_mead(objective, best.x, opt);
      evaluations += polished.evaluations;
      if (polished.value <= best.value) best = std::move(polished);
    }
    return best;
  };

  auto make_starts = [&](Index free_b) {
    const double b_start[3] = {0.0, -3.0, 3.0};
    const double g_start[3] = {0.0, 3.0, -3.0};
    std::vector<VectorXd> starts;
    for (int s = 0; s < 3; ++s) {
      VectorXd x(free_b + n_g);
      x.head(free_b).setConstant(b_start[s]);
      x.tail(n_g).setConstant(g_start[s]);
      starts.push_back(std::move(x));
      if (free_b + n_g == 0) break;
    }
    return starts;
  };

  std::vector<bool> pinned(static_cast<std::size_t>(n_b), false);
  NelderMeadResult best = optimize(pinned, make_starts(n_b));

  // Variance components heading to zero: compare against the exact boundary.
  if (n_b > 0 && best.x.size() > 0) {
    std::vector<bool> probe(static_cast<std::size_t>(n_b), false);
    Index n_pinned = 0;
    for (Index t = 0; t < n_b; ++t) {
      if (best.x(t) < kLogBoundaryProbe) {
        probe[static_cast<std::size_t>(t)] = true;
        ++n_pinned;
      }
    }
    if (n_pinned > 0) {
      std::vector<VectorXd> starts;
      VectorXd reduced(best.x.size() - n_pinned);
      Index at = 0;
      for (Index t = 0; t < best.x.size(); ++t) {
        if (t < n_b && probe[static_cast<std::size_t>(t)]) continue;
        reduced(at++) = best.x(t);
      }
      starts.push_back(reduced);
      NelderMeadResult edge = optimize(probe, starts);
      if (edge.value <= best.value + 1e-9) {
        pinned = probe;
        best = std::move(edge);
      }
    }
  }

  if (!std::isfinite(best.value)) {
    const Point pt = unpack(make_starts(n_b).front(), pinned);
    const Evaluation ev = evaluate(stats, pt.theta_b, pt.scale, pt.n_random_coef);
    if (ev.A.size() == 0 || equilibrated_condition(ev.A) > kMaxConditionNumber) {
      throw Error(ErrorCode::SingularSystem, "penalized normal equations are singular");
    }
    throw Error(ErrorCode::DegenerateResidual, "no finite REML criterion (outcome fitted exactly?)");
  }

  const Point pt = unpack(best.x, pinned);
  const Evaluation ev = evaluate(stats, pt.theta_b, pt.scale, pt.n_random_coef);
  RemlResult result;
  result.sigma2_eps = ev.ypy / static_cast<double>(n_obs_ - (design_.n_coef() - pt.n_random_coef));
  result.H = result.sigma2_eps * pt.theta_b;
  for (Index t = 0; t < q_; ++t) {
    if (config.random_effects && result.H(t, t) < kBoundaryVariance) {
      result.H(t, t) = 0.0;
      result.boundary = true;
    }
  }
  result.lambda = pt.scale;
  result.converged = best.converged;
  result.evaluations = evaluations;
  result.criterion = best.value;
  return result;
}

PointwiseFit MixedModelSystem::solve(const VectorXd& y, const MatrixXd& H, double sigma2_eps,
                                     const VectorXd& lambda) const {
  if (!(sigma2_eps > 0.0)) throw Error(ErrorCode::DegenerateResidual, "residual variance must be positive");
  if (H.rows() != q_ || H.cols() != q_ || lambda.size() != design_.n_blocks()) {
    throw Error(ErrorCode::DimensionMismatch, "variance components do not match the design");
  }
  const LocationStats stats = location_stats(y);
  const MatrixXd theta_b = H / sigma2_eps;
  const Evaluation ev = evaluate(stats, theta_b, lambda, 0);
  if (ev.A.size() == 0 || equilibrated_condition(ev.A) > kMaxConditionNumber) {
    throw Error(ErrorCode::SingularSystem, "penalized normal equations exceed condition number 1e12");
  }
  PointwiseFit fit;
  fit.beta_star = ev.beta;
  fit.H = H;
  fit.sigma2_eps = sigma2_eps;
  fit.lambda = lambda;
  fit.xtvx_inv = sigma2_eps * ev.A.llt().solve(MatrixXd::Identity(ev.A.rows(), ev.A.cols()));
  return fit;
}

PointwiseFit MixedModelSystem::fit(const VectorXd& y, const PointwiseModelConfig& config) const {
  const RemlResult vc = reml(y, config);
  PointwiseFit fit = solve(y, vc.H, vc.sigma2_eps, vc.lambda);
  fit.converged = vc.converged;
  fit.boundary = vc.boundary;
  return fit;
}

MatrixXd MixedModelSystem::xtvx(const PointwiseFit& fit) const {
  return relative_xtvx(fit.H / fit.sigma2_eps) / fit.sigma2_eps;
}

MatrixXd MixedModelSystem::influence(const PointwiseFit& fit) const {
  const MatrixXd theta_b = fit.H / fit.sigma2_eps;
  const MatrixXd eye = MatrixXd::Identity(q_, q_);
  MatrixXd out(design_.n_coef(), q_ * n_subjects());
  for (std::size_t i = 0; i < ztz_.size(); ++i) {
    // X_i' V_i^-1 Z_i = X_i' Z_i (I + Theta Z_i'Z_i)^-1 / sigma^2
    const MatrixXd right = (eye + theta_b * ztz_[i]).inverse();
    out.middleCols(static_cast<Index>(i) * q_, q_) = fit.xtvx_inv * (ztx_[i].transpose() * right) / fit.sigma2_eps;
  }
  return out;
}

RemlResult reml_variance_components(const VectorXd& y, const Design& design, const MatrixXd& Z,
                                    const SubjectIndex& subjects, const PointwiseModelConfig& config) {
  return MixedModelSystem(design, Z, subjects).reml(y, config);
}

PointwiseModel prepare_model(const FunctionalDataset& d, const PointwiseModelConfig& config) {
  validate(config);
  PointwiseModel model;
  model.subjects = index_subjects(d.subject_id);
  for (Index k = 0; k < d.n_predictors(); ++k) {
    const auto& grid = d.grid_u[static_cast<std::size_t>(k)];
    MatrixXd W = d.W[static_cast<std::size_t>(k)];
    if (config.presmooth_predictors) {
      const int knots = std::min<int>(config.presmooth_knots, static_cast<int>(grid.size()) - 4);
      const PSplineSystem<double> system(grid, knots);
      const auto lambdas = default_lambda_grid<double>();
      for (Index r = 0; r < W.rows(); ++r) {
        const VectorXd curve = W.row(r).transpose();
        W.row(r) = (system.smoother(system.select_gcv(curve, lambdas)).S * curve).transpose();
      }
    }
    const Index n_comp = std::min<Index>({static_cast<Index>(config.K_w), W.rows(), W.cols()});
    model.fpca.push_back(estimate_fpca(W, grid, n_comp));
    model.phi.push_back(truncated_power_basis(grid, config.K_g));
  }
  model.design = build_design(d.X, model.fpca, model.phi);
  return model;
}

PointwiseFit fit_pointwise(const FunctionalDataset& d, Index l, std::span<const FpcaBasis> fpca,
                           std::span<const BasisMatrix<double>> phi, const PointwiseModelConfig& config) {
  if (l < 0 || l >= d.n_grid()) throw Error(ErrorCode::InvalidArgument, "grid index out of range");
  const MixedModelSystem system(build_design(d.X, fpca, phi), d.Z, index_subjects(d.subject_id));
  return system.fit(d.Y.col(l), config);
}

PointwiseFitAll fit_all(const FunctionalDataset& d, const PointwiseModelConfig& config, int workers) {
  validate(d);
  PointwiseFitAll out;
  out.model = prepare_model(d, config);
  const MixedModelSystem system(out.model.design, d.Z, out.model.subjects);
  const Index L = d.n_grid();
  out.fits.assign(static_cast<std::size_t>(L), std::nullopt);
  std::vector<std::optional<LocationError>> failures(static_cast<std::size_t>(L));
  parallel_for(L, workers, [&](Index l) {
    try {
      out.fits[static_cast<std::size_t>(l)] = system.fit(d.Y.col(l), config);
    } catch (const Error& e) {
      failures[static_cast<std::size_t>(l)] = LocationError{l, e.code(), e.what()};
    }
  });
  for (auto& f : failures)
    if (f) out.errors.push_back(std::move(*f));

  const Index p = d.n_scalar();
  const Index K = d.n_predictors();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  FitResult& raw = out.raw;
  raw.beta_hat = MatrixXd::Constant(p, L, nan);
  raw.lambda = MatrixXd::Constant(K, L, nan);
  for (Index k = 0; k < K; ++k) {
    raw.spline_coefs.push_back(MatrixXd::Constant(out.model.design.n_spline[static_cast<std::size_t>(k)], L, nan));
    raw.gamma_hat.push_back(MatrixXd::Constant(d.grid_u[static_cast<std::size_t>(k)].size(), L, nan));
  }
  raw.var_components.assign(static_cast<std::size_t>(L),
                            LocationVariance{MatrixXd::Constant(d.n_random(), d.n_random(), nan), nan});
  for (Index l = 0; l < L; ++l) {
    const auto& fit = out.fits[static_cast<std::size_t>(l)];
    if (!fit) continue;
    raw.beta_hat.col(l) = fit->beta_star.head(p);
    raw.lambda.col(l) = fit->lambda;
    raw.var_components[static_cast<std::size_t>(l)] = LocationVariance{fit->H, fit->sigma2_eps};
    for (Index k = 0; k < K; ++k) {
      const auto kk = static_cast<std::size_t>(k);
      const VectorXd g = fit->beta_star.segment(out.model.design.offsets[kk], out.model.design.n_spline[kk]);
      raw.spline_coefs[kk].col(l) = g;
      raw.gamma_hat[kk].col(l) = out.model.phi[kk].values * g;
    }
  }
  return out;
}

}  // namespace elffr
