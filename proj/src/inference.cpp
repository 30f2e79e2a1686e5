#include <elffr/basis.hpp>
#include <elffr/inference.hpp>

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

namespace elffr {

std::vector<PointwiseFit> complete_fits(const PointwiseFitAll& all) {
  std::vector<PointwiseFit> out;
  out.reserve(all.fits.size());
  for (std::size_t l = 0; l < all.fits.size(); ++l) {
    if (!all.fits[l]) throw Error(ErrorCode::InvalidArgument, "location " + std::to_string(l + 1) + " has no fit");
    out.push_back(*all.fits[l]);
  }
  return out;
}

namespace {

void check_field(const MixedModelSystem& system, const std::vector<PointwiseFit>& fits, const CovarianceField& G) {
  if (G.q != system.n_random() || G.L != static_cast<Index>(fits.size()) || G.G.rows() != G.q * G.L) {
    throw Error(ErrorCode::DimensionMismatch, "covariance field does not match the fits");
  }
}

MatrixXd same_point(const MixedModelSystem& system, const PointwiseFit& fit) {
  return fit.xtvx_inv * system.xtvx(fit) * fit.xtvx_inv;
}

}  // namespace

MatrixXd cov_beta_star(const MixedModelSystem& system, const std::vector<PointwiseFit>& fits,
                       const CovarianceField& G, Index l1, Index l2) {
  check_field(system, fits, G);
  const Index L = G.L;
  if (l1 < 0 || l2 < 0 || l1 >= L || l2 >= L) throw Error(ErrorCode::DimensionMismatch, "location out of range");
  const auto& f1 = fits[static_cast<std::size_t>(l1)];
  if (l1 == l2) return same_point(system, f1);
  const auto& f2 = fits[static_cast<std::size_t>(l2)];
  const MatrixXd t1 = system.influence(f1);
  const MatrixXd t2 = system.influence(f2);
  const MatrixXd g = G.block_at(l1, l2);
  const Index q = G.q;
  MatrixXd out = MatrixXd::Zero(t1.rows(), t2.rows());
  for (Index i = 0; i < system.n_subjects(); ++i) {
    out.noalias() += t1.middleCols(i * q, q) * g * t2.middleCols(i * q, q).transpose();
  }
  return out;
}

MatrixXd CrossCovariance::coefficient(Index a) const {
  MatrixXd out(L, L);
  for (Index l = 0; l < L; ++l)
    for (Index m = 0; m < L; ++m) out(l, m) = C(l * P + a, m * P + a);
  return out;
}

MatrixXd CrossCovariance::coefficient_block(Index offset, Index n) const {
  MatrixXd out(L * n, L * n);
  for (Index l = 0; l < L; ++l)
    for (Index m = 0; m < L; ++m) out.block(l * n, m * n, n, n) = C.block(l * P + offset, m * P + offset, n, n);
  return out;
}

CrossCovariance cross_covariance(const MixedModelSystem& system, const std::vector<PointwiseFit>& fits,
                                 const CovarianceField& G, int workers) {
  check_field(system, fits, G);
  const Index L = G.L;
  const Index q = G.q;
  const Index P = system.design().n_coef();
  const Index I = system.n_subjects();
  std::vector<MatrixXd> stacked(static_cast<std::size_t>(q), MatrixXd(L * P, I));
  parallel_for(L, workers, [&](Index l) {
    const MatrixXd T = system.influence(fits[static_cast<std::size_t>(l)]);
    for (Index t = 0; t < q; ++t)
      for (Index i = 0; i < I; ++i) stacked[static_cast<std::size_t>(t)].block(l * P, i, P, 1) = T.col(i * q + t);
  });
  CrossCovariance out;
  out.P = P;
  out.L = L;
  out.C = MatrixXd::Zero(L * P, L * P);
  for (Index t = 0; t < q; ++t) {
    for (Index v = 0; v < q; ++v) {
      const MatrixXd M = stacked[static_cast<std::size_t>(t)] * stacked[static_cast<std::size_t>(v)].transpose();
      for (Index l = 0; l < L; ++l)
        for (Index m = 0; m < L; ++m)
          if (l != m) out.C.block(l * P, m * P, P, P) += G.G(t * L + l, v * L + m) * M.block(l * P, m * P, P, P);
    }
  }
  parallel_for(L, workers, [&](Index l) {
    out.C.block(l * P, l * P, P, P) = same_point(system, fits[static_cast<std::size_t>(l)]);
  });
  return out;
}

MatrixXd var_gamma_raw(const MatrixXd& cov_g, const MatrixXd& phi) {
  if (cov_g.rows() != phi.cols() || cov_g.cols() != phi.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "spline covariance does not match the basis");
  }
  return phi * cov_g * phi.transpose();
}

MatrixXd surface_covariance(const MatrixXd& cov_g_all, const MatrixXd& phi) {
  const Index kg = phi.cols();
  const Index R = phi.rows();
  if (cov_g_all.rows() % kg != 0 || cov_g_all.rows() != cov_g_all.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "spline covariance does not match the basis");
  }
  const Index L = cov_g_all.rows() / kg;
  MatrixXd out(L * R, L * R);
  for (Index l = 0; l < L; ++l)
    for (Index m = 0; m < L; ++m)
      out.block(l * R, m * R, R, R) = phi * cov_g_all.block(l * kg, m * kg, kg, kg) * phi.transpose();
  return out;
}

MatrixXd raw_surface_variance(const MatrixXd& cov_g_all, const MatrixXd& phi) {
  const Index kg = phi.cols();
  if (cov_g_all.rows() % kg != 0) throw Error(ErrorCode::DimensionMismatch, "spline covariance does not match the basis");
  const Index L = cov_g_all.rows() / kg;
  MatrixXd out(phi.rows(), L);
  for (Index l = 0; l < L; ++l) {
    out.col(l) = (phi * cov_g_all.block(l * kg, l * kg, kg, kg)).cwiseProduct(phi).rowwise().sum();
  }
  return out;
}

MatrixXd smoothed_surface_variance(const MatrixXd& cov_g_all, const MatrixXd& phi, const MatrixXd& S1,
                                   const MatrixXd& S2) {
  const Index kg = phi.cols();
  const Index L = S1.rows();
  if (cov_g_all.rows() != L * kg || cov_g_all.cols() != L * kg || S2.rows() != phi.rows() || S2.cols() != phi.rows() ||
      S1.cols() != L) {
    throw Error(ErrorCode::DimensionMismatch, "spline covariance, basis and smoothers do not conform");
  }
  const MatrixXd A = S2 * phi;
  MatrixXd out(phi.rows(), L);
  MatrixXd rows(kg, L * kg);
  MatrixXd center(kg, kg);
  for (Index l = 0; l < L; ++l) {
    rows.setZero();
    for (Index a = 0; a < L; ++a)
      if (S1(l, a) != 0.0) rows += S1(l, a) * cov_g_all.middleRows(a * kg, kg);
    center.setZero();
    for (Index b = 0; b < L; ++b)
      if (S1(l, b) != 0.0) center += S1(l, b) * rows.middleCols(b * kg, kg);
    out.col(l) = (A * center).cwiseProduct(A).rowwise().sum();
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(BandKind kind) {
  switch (kind) {
    case BandKind::PointwiseAnalytic: return "pointwise_analytic";
    case BandKind::PointwiseBootstrap: return "pointwise_bootstrap";
    case BandKind::CmaAnalytic: return "cma_analytic";
    case BandKind::CmaBootstrap: return "cma_bootstrap";
  }
  return "unknown";
}

double normal_critical_value(double level) {
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorCode::InvalidArgument, "level must lie in (0, 1)");
  return boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 + level / 2.0);
}

namespace {

MatrixXd checked_sd(const MatrixXd& variance) {
  const double scale = std::max(1.0, variance.cwiseAbs().maxCoeff());
  for (Index j = 0; j < variance.cols(); ++j)
    for (Index i = 0; i < variance.rows(); ++i)
      if (!(variance(i, j) >= -1e-12 * scale)) {
        throw Error(ErrorCode::NegativeVariance, "variance " + format_double(variance(i, j)) + " at (" +
                                                     std::to_string(i + 1) + ", " + std::to_string(j + 1) + ")");
      }
  return variance.cwiseMax(0.0).cwiseSqrt();
}

}  // namespace

ConfidenceBand pointwise_bands(const MatrixXd& estimate, const MatrixXd& variance, double level, BandKind kind) {
  if (estimate.rows() != variance.rows() || estimate.cols() != variance.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "estimate and variance differ in shape");
  }
  const double z = normal_critical_value(level);
  const MatrixXd sd = checked_sd(variance);
  ConfidenceBand band;
  band.estimate = estimate;
  band.lower = estimate - z * sd;
  band.upper = estimate + z * sd;
  band.level = level;
  band.kind = kind;
  band.critical_value = z;
  return band;
}

namespace {

double max_quantile(std::vector<double> stats, double level) {
  std::sort(stats.begin(), stats.end());
  const Eigen::Map<const VectorXd> sorted(stats.data(), static_cast<Index>(stats.size()));
  return sorted_quantile(sorted, level);
}

}  // namespace

double cma_critical_value(const VectorXd& variance, const AnalyticMcSource& source, double level) {
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorCode::InvalidArgument, "level must lie in (0, 1)");
  if (source.n_samples < 1) throw Error(ErrorCode::InvalidArgument, "CMA needs at least one Monte Carlo draw");
  const Index n = variance.size();
  const VectorXd sd = checked_sd(variance);
  std::vector<Index> active;
  for (Index l = 0; l < n; ++l)
    if (sd(l) > 0.0) active.push_back(l);
  if (active.empty()) return normal_critical_value(level);

  MatrixXd root;
  if (source.sampling == CmaSampling::Joint) {
    if (source.covariance.rows() != n || source.covariance.cols() != n) {
      throw Error(ErrorCode::DimensionMismatch, "CMA covariance does not match the variance vector");
    }
    if (!source.covariance.allFinite()) throw Error(ErrorCode::SingularCovariance, "covariance has non-finite entries");
    const MatrixXd trimmed = psd_trim(source.covariance);
    const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(trimmed);
    if (eig.info() != Eigen::Success) throw Error(ErrorCode::SingularCovariance, "covariance eigen decomposition failed");
    root = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    if (!root.allFinite() || root.isZero(0.0)) throw Error(ErrorCode::SingularCovariance, "covariance is degenerate");
  }

  Rng rng(derive_seed(source.seed, 0));
  std::normal_distribution<double> n01;
  std::vector<double> stats(static_cast<std::size_t>(source.n_samples));
  VectorXd draw(n);
  VectorXd deviation(n);
  for (auto& stat : stats) {
    for (Index i = 0; i < n; ++i) draw(i) = n01(rng);
    if (source.sampling == CmaSampling::Joint) {
      deviation.noalias() = root * draw;
    } else {
      deviation = sd.cwiseProduct(draw);
    }
    double worst = 0.0;
    for (const Index l : active) worst = std::max(worst, std::abs(deviation(l)) / sd(l));
    stat = worst;
  }
  return max_quantile(std::move(stats), level);
}

double cma_critical_value(const VectorXd& estimate, const VectorXd& variance, const BootstrapSource& source,
                          double level) {
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorCode::InvalidArgument, "level must lie in (0, 1)");
  if (source.replicates.empty()) throw Error(ErrorCode::InvalidArgument, "bootstrap CMA needs replicates");
  if (estimate.size() != variance.size()) throw Error(ErrorCode::ShapeMismatch, "estimate and variance differ in length");
  const VectorXd sd = checked_sd(variance);
  std::vector<double> stats;
  stats.reserve(source.replicates.size());
  for (const auto& rep : source.replicates) {
    if (rep.size() != estimate.size()) throw Error(ErrorCode::ShapeMismatch, "replicate length differs from estimate");
    double worst = 0.0;
    for (Index l = 0; l < estimate.size(); ++l)
      if (sd(l) > 0.0) worst = std::max(worst, std::abs(rep(l) - estimate(l)) / sd(l));
    stats.push_back(worst);
  }
  return max_quantile(std::move(stats), level);
}

ConfidenceBand cma_bands(const VectorXd& estimate, const VectorXd& variance, double q, double level, BandKind kind) {
  if (!(q >= 0.0)) throw Error(ErrorCode::InvalidArgument, "critical value must be nonnegative");
  const double used = std::max(q, normal_critical_value(level));
  const VectorXd sd = checked_sd(variance);
  ConfidenceBand band;
  band.estimate = estimate.transpose();
  band.lower = (estimate - used * sd).transpose();
  band.upper = (estimate + used * sd).transpose();
  band.level = level;
  band.kind = kind;
  band.critical_value = used;
  return band;
}

// ---------------------------------------------------------------------------

FunctionalDataset resample_subjects(const FunctionalDataset& d, const SubjectIndex& subjects,
                                    const std::vector<Index>& draw) {
  Index n = 0;
  for (const Index s : draw) {
    if (s < 0 || s >= subjects.n_subjects()) throw Error(ErrorCode::InvalidArgument, "resampled subject out of range");
    n += static_cast<Index>(subjects.rows[static_cast<std::size_t>(s)].size());
  }
  FunctionalDataset out;
  out.grid_s = d.grid_s;
  out.grid_u = d.grid_u;
  out.Y.resize(n, d.Y.cols());
  out.X.resize(n, d.X.cols());
  out.Z.resize(n, d.Z.cols());
  for (const auto& W : d.W) out.W.emplace_back(n, W.cols());
  Index at = 0;
  for (std::size_t c = 0; c < draw.size(); ++c) {
    for (const Index r : subjects.rows[static_cast<std::size_t>(draw[c])]) {
      out.subject_id.push_back(static_cast<long>(c));
      out.visit_id.push_back(d.visit_id[static_cast<std::size_t>(r)]);
      out.Y.row(at) = d.Y.row(r);
      out.X.row(at) = d.X.row(r);
      out.Z.row(at) = d.Z.row(r);
      for (std::size_t k = 0; k < d.W.size(); ++k) out.W[k].row(at) = d.W[k].row(r);
      ++at;
    }
  }
  return out;
}

BootstrapEstimates bootstrap(const FunctionalDataset& d, const PipelineConfig& config,
                             const std::vector<std::vector<Index>>& draws, std::uint64_t seed, int workers) {
  const int B = static_cast<int>(draws.size());
  if (B < 2) throw Error(ErrorCode::InvalidArgument, "bootstrap needs B >= 2");
  validate(config);
  const SubjectIndex subjects = index_subjects(d.subject_id);
  std::vector<std::optional<ModelFit>> fits(static_cast<std::size_t>(B));
  parallel_for(B, workers, [&](Index b) {
    try {
      const FunctionalDataset sample = resample_subjects(d, subjects, draws[static_cast<std::size_t>(b)]);
      fits[static_cast<std::size_t>(b)] = fit_model(sample, config, 1);
    } catch (const Error&) {
      fits[static_cast<std::size_t>(b)].reset();
    }
  });
  BootstrapEstimates out;
  out.seed = seed;
  for (int b = 0; b < B; ++b) {
    auto& fit = fits[static_cast<std::size_t>(b)];
    if (!fit) {
      ++out.failures;
      continue;
    }
    out.beta_raw.push_back(fit->result.beta_hat);
    out.beta_smooth.push_back(fit->result.beta_smooth);
    out.gamma_raw.push_back(fit->result.gamma_hat);
    out.gamma_smooth.push_back(fit->result.gamma_smooth);
    std::vector<long> ids;
    for (const Index s : draws[static_cast<std::size_t>(b)]) ids.push_back(subjects.ids[static_cast<std::size_t>(s)]);
    out.indices_log.push_back(std::move(ids));
    out.replicate.push_back(b);
    ++out.B;
  }
  if (out.failures > kMaxFailureFraction * B || out.B < 2) {
    throw Error(ErrorCode::TooManyFailures, std::to_string(out.failures) + " of " + std::to_string(B) +
                                                " bootstrap replicates failed");
  }
  return out;
}

BootstrapEstimates bootstrap(const FunctionalDataset& d, const PipelineConfig& config, int B, std::uint64_t seed,
                             int workers) {
  if (B < 2) throw Error(ErrorCode::InvalidArgument, "bootstrap needs B >= 2");
  const Index I = index_subjects(d.subject_id).n_subjects();
  std::vector<std::vector<Index>> draws(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    std::uniform_int_distribution<Index> pick(0, I - 1);
    auto& draw = draws[static_cast<std::size_t>(b)];
    draw.resize(static_cast<std::size_t>(I));
    for (auto& s : draw) s = pick(rng);
  }
  return bootstrap(d, config, draws, seed, workers);
}

MatrixXd sample_variance(const std::vector<MatrixXd>& reps) {
  if (reps.size() < 2) throw Error(ErrorCode::InvalidArgument, "sample variance needs at least two replicates");
  const double n = static_cast<double>(reps.size());
  MatrixXd mean = MatrixXd::Zero(reps.front().rows(), reps.front().cols());
  for (const auto& r : reps) {
    if (r.rows() != mean.rows() || r.cols() != mean.cols()) throw Error(ErrorCode::ShapeMismatch, "replicate shapes differ");
    mean += r;
  }
  mean /= n;
  MatrixXd ss = MatrixXd::Zero(mean.rows(), mean.cols());
  for (const auto& r : reps) ss += (r - mean).cwiseAbs2();
  return ss / (n - 1.0);
}

BootstrapVariance bootstrap_variance(const BootstrapEstimates& reps, bool smoothed) {
  BootstrapVariance out;
  out.beta = sample_variance(smoothed ? reps.beta_smooth : reps.beta_raw);
  const auto& gammas = smoothed ? reps.gamma_smooth : reps.gamma_raw;
  const std::size_t K = gammas.empty() ? 0 : gammas.front().size();
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<MatrixXd> slice;
    slice.reserve(gammas.size());
    for (const auto& g : gammas) slice.push_back(g[k]);
    out.gamma.push_back(sample_variance(slice));
  }
  return out;
}

// ---------------------------------------------------------------------------

void validate(const InferenceConfig& config) {
  if (!(config.level > 0.0 && config.level < 1.0)) throw Error(ErrorCode::InvalidArgument, "level must lie in (0, 1)");
  if (config.cma_samples < 1) throw Error(ErrorCode::InvalidArgument, "cma_samples must be positive");
  if (config.B < 2) throw Error(ErrorCode::InvalidArgument, "B must be at least 2");
}

namespace {

MatrixXd pointwise_coefficients(const ModelFit& fit) {
  const auto fits = complete_fits(fit.pointwise);
  MatrixXd B(fit.pointwise.model.design.n_coef(), static_cast<Index>(fits.size()));
  for (std::size_t l = 0; l < fits.size(); ++l) B.col(static_cast<Index>(l)) = fits[l].beta_star;
  return B;
}

}  // namespace

CovarianceField estimate_covariance(const FunctionalDataset& d, const ModelFit& fit, CovarianceMethod method) {
  const MatrixXd& Xstar = fit.pointwise.model.design.Xstar;
  const MatrixXd B = pointwise_coefficients(fit);
  switch (method) {
    case CovarianceMethod::MethodOfMoments:
      return estimate_G_mom(fixed_effect_residuals(d.Y, Xstar, B), d.Z, fit.pointwise.model.subjects);
    case CovarianceMethod::Marginal:
      return estimate_G_marginal(d.Y, Xstar, B, d.n_random());
    case CovarianceMethod::RawOutcome:
      return estimate_G_marginal(d.Y, Xstar, MatrixXd::Zero(B.rows(), B.cols()), d.n_random());
  }
  throw Error(ErrorCode::InvalidArgument, "unknown covariance method");
}

InferenceResult analytic_inference(const FunctionalDataset& d, const ModelFit& fit, const SmoothingConfig& smoothing,
                                   const InferenceConfig& config, int workers) {
  validate(config);
  const PointwiseModel& model = fit.pointwise.model;
  const MixedModelSystem system(model.design, d.Z, model.subjects);
  const auto fits = complete_fits(fit.pointwise);
  auto field_for = [&](CovarianceMethod method) {
    CovarianceField G = estimate_covariance(d, fit, method);
    return config.smooth_covariance ? smooth_covariance(G, d.grid_s, smoothing.knots_s) : trim_covariance(G);
  };
  const CrossCovariance cc_beta = cross_covariance(system, fits, field_for(config.beta_covariance), workers);
  const CrossCovariance cc_gamma = config.gamma_covariance == config.beta_covariance
                                       ? cc_beta
                                       : cross_covariance(system, fits, field_for(config.gamma_covariance), workers);

  InferenceResult out;
  const FitResult& r = fit.result;
  const Index p = r.beta_hat.rows();
  out.beta_variance.resize(p, r.beta_hat.cols());
  for (Index j = 0; j < p; ++j) {
    const MatrixXd& S = fit.beta_smoothers[static_cast<std::size_t>(j)].S;
    const MatrixXd cov = S * cc_beta.coefficient(j) * S.transpose();
    const VectorXd var = cov.diagonal();
    const VectorXd est = r.beta_smooth.row(j).transpose();
    out.beta_variance.row(j) = var.transpose();
    out.scalar.push_back(pointwise_bands(est.transpose(), var.transpose(), config.level));
    AnalyticMcSource source{cov, config.cma_samples, config.cma_sampling, derive_seed(config.seed, static_cast<std::uint64_t>(j))};
    const double q = cma_critical_value(var, source, config.level);
    out.scalar_cma.push_back(cma_bands(est, var, q, config.level, BandKind::CmaAnalytic));
  }
  for (std::size_t k = 0; k < r.gamma_hat.size(); ++k) {
    const Index offset = model.design.offsets[k];
    const Index kg = model.design.n_spline[k];
    const MatrixXd var = smoothed_surface_variance(cc_gamma.coefficient_block(offset, kg), model.phi[k].values,
                                                   fit.surface_over_s[k].S, fit.surface_over_u[k].S);
    out.gamma_variance.push_back(var);
    out.surface.push_back(pointwise_bands(r.gamma_smooth[k], var, config.level));
  }
  return out;
}

InferenceResult bootstrap_inference(const ModelFit& fit, const BootstrapEstimates& reps, const InferenceConfig& config) {
  validate(config);
  const BootstrapVariance variance = bootstrap_variance(reps, true);
  InferenceResult out;
  const FitResult& r = fit.result;
  out.beta_variance = variance.beta;
  for (Index j = 0; j < r.beta_hat.rows(); ++j) {
    const VectorXd est = r.beta_smooth.row(j).transpose();
    const VectorXd var = variance.beta.row(j).transpose();
    out.scalar.push_back(pointwise_bands(est.transpose(), var.transpose(), config.level, BandKind::PointwiseBootstrap));
    BootstrapSource source;
    for (const auto& rep : reps.beta_smooth) source.replicates.push_back(rep.row(j).transpose());
    const double q = cma_critical_value(est, var, source, config.level);
    out.scalar_cma.push_back(cma_bands(est, var, q, config.level, BandKind::CmaBootstrap));
  }
  out.gamma_variance = variance.gamma;
  for (std::size_t k = 0; k < r.gamma_smooth.size(); ++k) {
    out.surface.push_back(pointwise_bands(r.gamma_smooth[k], variance.gamma[k], config.level, BandKind::PointwiseBootstrap));
  }
  return out;
}

InferenceResult bootstrap_inference(const FunctionalDataset& d, const ModelFit& fit, const PipelineConfig& pipeline,
                                    const InferenceConfig& config, int workers) {
  validate(config);
  const BootstrapEstimates reps = bootstrap(d, pipeline, config.B, config.seed, workers);
  return bootstrap_inference(fit, reps, config);
}

void write_bands_csv(const std::filesystem::path& path, const InferenceResult& result, const VectorXd& grid_s,
                     const std::vector<VectorXd>& grid_u) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "coefficient,s,u,estimate,lower,upper,kind,level\n";
  auto curve = [&](const std::string& name, const ConfidenceBand& band) {
    for (Index l = 0; l < band.estimate.cols(); ++l) {
      out << name << ',' << format_double(grid_s(l)) << ",," << format_double(band.estimate(0, l)) << ','
          << format_double(band.lower(0, l)) << ',' << format_double(band.upper(0, l)) << ',' << to_string(band.kind)
          << ',' << format_double(band.level) << '\n';
    }
  };
  for (std::size_t j = 0; j < result.scalar.size(); ++j) curve("beta_" + std::to_string(j), result.scalar[j]);
  for (std::size_t j = 0; j < result.scalar_cma.size(); ++j) curve("beta_" + std::to_string(j), result.scalar_cma[j]);
  for (std::size_t k = 0; k < result.surface.size(); ++k) {
    const ConfidenceBand& band = result.surface[k];
    for (Index l = 0; l < band.estimate.cols(); ++l)
      for (Index r = 0; r < band.estimate.rows(); ++r) {
        out << "gamma_" << k + 1 << ',' << format_double(grid_s(l)) << ',' << format_double(grid_u[k](r)) << ','
            << format_double(band.estimate(r, l)) << ',' << format_double(band.lower(r, l)) << ','
            << format_double(band.upper(r, l)) << ',' << to_string(band.kind) << ',' << format_double(band.level)
            << '\n';
      }
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

}  // namespace elffr
