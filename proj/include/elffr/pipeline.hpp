#pragma once

#include <elffr/data_model.hpp>
#include <elffr/pointwise_fit.hpp>
#include <elffr/smoothing.hpp>

#include <vector>

namespace elffr {

struct SmoothingConfig {
  int beta_knots = 8;
  int knots_s = 10;
  int knots_u = 5;
};

struct PipelineConfig {
  PointwiseModelConfig model;
  SmoothingConfig smoothing;
};

void validate(const PipelineConfig& config);

/// Steps 1 and 2: pointwise fits, then P-spline smoothing of each scalar
/// coefficient and sandwich smoothing of each surface.
struct ModelFit {
  PointwiseFitAll pointwise;
  FitResult result;
  std::vector<SmootherMatrix<double>> beta_smoothers;   // one per scalar coefficient, over s
  std::vector<SmootherMatrix<double>> surface_over_s;   // one per predictor
  std::vector<SmootherMatrix<double>> surface_over_u;
};

/// Smooths a complete set of pointwise fits. Throws the first location error
/// (with its index) when any location failed.
ModelFit smooth_fits(PointwiseFitAll pointwise, const FunctionalDataset& d, const SmoothingConfig& config);

ModelFit fit_model(const FunctionalDataset& d, const PipelineConfig& config, int workers = 1);

}  // namespace elffr
