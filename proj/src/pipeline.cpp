#include <elffr/pipeline.hpp>

namespace elffr {

void validate(const PipelineConfig& config) {
  validate(config.model);
  const auto& s = config.smoothing;
  if (s.beta_knots < 1 || s.knots_s < 1 || s.knots_u < 1) {
    throw Error(ErrorCode::InvalidArgument, "knot counts must be positive");
  }
}

ModelFit smooth_fits(PointwiseFitAll pointwise, const FunctionalDataset& d, const SmoothingConfig& config) {
  if (!pointwise.complete()) {
    const LocationError& e = pointwise.errors.front();
    throw Error(e.code, "location " + std::to_string(e.location + 1) + ": " + e.message);
  }
  ModelFit fit;
  fit.result = pointwise.raw;
  FitResult& r = fit.result;
  const Index p = r.beta_hat.rows();
  const Index K = static_cast<Index>(r.gamma_hat.size());

  r.beta_smooth.resize(p, r.beta_hat.cols());
  r.beta_smoother_lambda.resize(p);
  const PSplineSystem<double> beta_system(d.grid_s, config.beta_knots);
  const auto lambdas = default_lambda_grid<double>();
  for (Index j = 0; j < p; ++j) {
    const VectorXd curve = r.beta_hat.row(j).transpose();
    auto S = beta_system.smoother(beta_system.select_gcv(curve, lambdas));
    r.beta_smooth.row(j) = (S.S * curve).transpose();
    r.beta_smoother_lambda(j) = S.lambda;
    fit.beta_smoothers.push_back(std::move(S));
  }

  r.gamma_smooth.clear();
  r.gamma_lambda_s.resize(K);
  r.gamma_lambda_u.resize(K);
  for (Index k = 0; k < K; ++k) {
    auto smoothed = sandwich_smooth(r.gamma_hat[static_cast<std::size_t>(k)], d.grid_u[static_cast<std::size_t>(k)],
                                    d.grid_s, config.knots_u, config.knots_s);
    r.gamma_smooth.push_back(std::move(smoothed.smoothed));
    r.gamma_lambda_s(k) = smoothed.over_s.lambda;
    r.gamma_lambda_u(k) = smoothed.over_u.lambda;
    fit.surface_over_s.push_back(std::move(smoothed.over_s));
    fit.surface_over_u.push_back(std::move(smoothed.over_u));
  }
  fit.pointwise = std::move(pointwise);
  return fit;
}

ModelFit fit_model(const FunctionalDataset& d, const PipelineConfig& config, int workers) {
  validate(config);
  return smooth_fits(fit_all(d, config.model, workers), d, config.smoothing);
}

}  // namespace elffr
