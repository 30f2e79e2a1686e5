#pragma once

#include <elffr/basis.hpp>
#include <elffr/data_model.hpp>
#include <elffr/error.hpp>
#include <elffr/fpca.hpp>
#include <elffr/types.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace elffr {

enum class LambdaSelection { MixedModelReml, Fixed };

struct PointwiseModelConfig {
  int K_w = 15;  // upper bound; clamped to min(N, R_k) per predictor
  int K_g = 15;
  LambdaSelection lambda_selection = LambdaSelection::MixedModelReml;
  double fixed_lambda = 0.0;
  int max_reml_iter = 2000;
  double reml_tol = 1e-8;
  bool random_effects = true;  // false pins H = 0
  bool presmooth_predictors = false;
  int presmooth_knots = 10;
};

void validate(const PointwiseModelConfig& config);

/// Fixed-effect design X* = [X, Xi_1 M_1, ..., Xi_K M_K] and its penalty D.
struct Design {
  MatrixXd Xstar;
  MatrixXd D;
  Index p = 0;
  std::vector<Index> offsets;                 // first column of each predictor block
  std::vector<Index> n_spline;                // K_g per predictor
  std::vector<std::vector<Index>> penalized;  // identity-penalized columns per block

  Index n_coef() const { return Xstar.cols(); }
  Index n_blocks() const { return static_cast<Index>(offsets.size()); }
};

Design build_design(const MatrixXd& X, std::span<const FpcaBasis> fpca, std::span<const BasisMatrix<double>> phi);

struct RemlResult {
  MatrixXd H;          // q x q, diagonal
  double sigma2_eps = 0.0;
  VectorXd lambda;     // one per predictor block, sigma2_eps / sigma2_g
  bool converged = false;
  bool boundary = false;  // some random-effect variance estimated at 0
  int evaluations = 0;
  double criterion = 0.0;  // -2 restricted log-likelihood up to a constant
};

struct PointwiseFit {
  VectorXd beta_star;  // beta(s_l) followed by g_k(s_l) per predictor
  MatrixXd H;
  double sigma2_eps = 0.0;
  VectorXd lambda;
  MatrixXd xtvx_inv;   // (X*' V^-1 X* + (lambda / sigma2_eps) D)^-1 on the covariance scale
  bool converged = true;
  bool boundary = false;
};

/// Largest condition number (after symmetric diagonal equilibration) accepted
/// for the penalized normal equations.
constexpr double kMaxConditionNumber = 1e12;
/// Random-effect variances below this are reported as exactly zero.
constexpr double kBoundaryVariance = 1e-10;

/// Sufficient statistics of one design for repeated fits over outcome columns.
/// V^-1 is applied subject by subject (Woodbury); no N x N matrix is formed.
class MixedModelSystem {
 public:
  MixedModelSystem(Design design, const MatrixXd& Z, const SubjectIndex& subjects);

  const Design& design() const { return design_; }
  Index n_obs() const { return n_obs_; }
  Index n_subjects() const { return static_cast<Index>(ztz_.size()); }
  Index n_random() const { return q_; }

  RemlResult reml(const VectorXd& y, const PointwiseModelConfig& config) const;

  /// Penalized GLS estimate for given variance components and smoothing parameters.
  PointwiseFit solve(const VectorXd& y, const MatrixXd& H, double sigma2_eps, const VectorXd& lambda) const;

  /// REML variance components, then the penalized GLS estimate.
  PointwiseFit fit(const VectorXd& y, const PointwiseModelConfig& config) const;

  /// X*' V^-1 X* on the covariance scale for a fitted location.
  MatrixXd xtvx(const PointwiseFit& fit) const;

  /// A X*' V^-1 Z restricted to each subject: n_coef x (q * n_subjects), subject-major.
  MatrixXd influence(const PointwiseFit& fit) const;

 private:
  struct LocationStats;
  struct Evaluation;

  LocationStats location_stats(const VectorXd& y) const;
  Evaluation evaluate(const LocationStats& stats, const MatrixXd& theta_b, const VectorXd& penalty_scale,
                      Index n_random_coef) const;
  MatrixXd relative_xtvx(const MatrixXd& theta_b) const;

  Design design_;
  Index n_obs_ = 0;
  Index q_ = 0;
  MatrixXd xtx_;
  std::vector<MatrixXd> ztz_;  // q x q per subject
  std::vector<MatrixXd> ztx_;  // q x P per subject
  std::vector<std::vector<Index>> subject_rows_;
  MatrixXd Z_;
  // q == 1: subjects grouped by z_i'z_i.
  std::vector<double> group_ztz_;
  std::vector<std::vector<Index>> group_members_;
  std::vector<MatrixXd> group_sxx_;
};

RemlResult reml_variance_components(const VectorXd& y, const Design& design, const MatrixXd& Z,
                                    const SubjectIndex& subjects, const PointwiseModelConfig& config);

/// Everything the pointwise fits share: FPCA per predictor, coefficient bases, design.
struct PointwiseModel {
  std::vector<FpcaBasis> fpca;
  std::vector<BasisMatrix<double>> phi;  // truncated power basis on grid_u[k]
  Design design;
  SubjectIndex subjects;
};

PointwiseModel prepare_model(const FunctionalDataset& d, const PointwiseModelConfig& config);

PointwiseFit fit_pointwise(const FunctionalDataset& d, Index l, std::span<const FpcaBasis> fpca,
                           std::span<const BasisMatrix<double>> phi, const PointwiseModelConfig& config);

struct LocationError {
  Index location = 0;
  ErrorCode code = ErrorCode::InvalidArgument;
  std::string message;
};

struct PointwiseFitAll {
  PointwiseModel model;
  FitResult raw;  // raw parts only; failed locations hold NaN
  std::vector<std::optional<PointwiseFit>> fits;
  std::vector<LocationError> errors;

  bool complete() const { return errors.empty(); }
};

PointwiseFitAll fit_all(const FunctionalDataset& d, const PointwiseModelConfig& config, int workers = 1);

}  // namespace elffr
