#pragma once

#include <elffr/covariance.hpp>
#include <elffr/data_model.hpp>
#include <elffr/parallel.hpp>
#include <elffr/pipeline.hpp>
#include <elffr/pointwise_fit.hpp>
#include <elffr/smoothing.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace elffr {

// ---------------------------------------------------------------------------
// Covariance of pointwise estimates

/// Fits of a complete PointwiseFitAll, in location order.
std::vector<PointwiseFit> complete_fits(const PointwiseFitAll& all);

/// Cov(b*(s_l1), b*(s_l2)). Off the diagonal the random-effect coupling
/// A1 X*'V1^-1 Z G(l1, l2) Z' V2^-1 X* A2; at l1 == l2 the middle factor is the
/// full fitted V, giving A X*'V^-1 X* A.
MatrixXd cov_beta_star(const MixedModelSystem& system, const std::vector<PointwiseFit>& fits,
                       const CovarianceField& G, Index l1, Index l2);

/// All location pairs at once: (L P) x (L P), entry (l P + a, m P + b).
struct CrossCovariance {
  MatrixXd C;
  Index P = 0;
  Index L = 0;

  auto block(Index l, Index m) const { return C.block(l * P, m * P, P, P); }
  /// L x L covariance of coefficient a across locations.
  MatrixXd coefficient(Index a) const;
  /// (L n) x (L n) covariance of coefficients [offset, offset + n), location-major.
  MatrixXd coefficient_block(Index offset, Index n) const;
};

CrossCovariance cross_covariance(const MixedModelSystem& system, const std::vector<PointwiseFit>& fits,
                                 const CovarianceField& G, int workers = 1);

/// phi Cov(g(s1), g(s2)) phi': covariance between gamma(s1, u_r1) and gamma(s2, u_r2).
MatrixXd var_gamma_raw(const MatrixXd& cov_g, const MatrixXd& phi);

/// Covariance of vec(Gamma) (column-major, index l R + r) from the spline
/// coefficient covariance (L Kg) x (L Kg).
MatrixXd surface_covariance(const MatrixXd& cov_g_all, const MatrixXd& phi);

/// (S1 kron S2) V (S1 kron S2)' for V indexed l R + r, applied block-wise
/// without forming the Kronecker product.
template <typename Derived, typename Scalar>
Matrix<Scalar> propagate_smoother_variance(const Eigen::MatrixBase<Derived>& V, const Matrix<Scalar>& S1,
                                           const Matrix<Scalar>& S2) {
  const Index L = S1.rows();
  const Index R = S2.rows();
  if (S1.cols() != L || S2.cols() != R || V.rows() != L * R || V.cols() != L * R) {
    throw Error(ErrorCode::DimensionMismatch, "covariance is not conformable with the smoothers");
  }
  // (I kron S2) V (I kron S2)'
  Matrix<Scalar> inner(L * R, L * R);
  for (Index a = 0; a < L; ++a)
    for (Index b = 0; b < L; ++b) inner.block(a * R, b * R, R, R) = S2 * V.block(a * R, b * R, R, R) * S2.transpose();
  // (S1 kron I) inner (S1 kron I)'
  Matrix<Scalar> rows = Matrix<Scalar>::Zero(L * R, L * R);
  for (Index a = 0; a < L; ++a)
    for (Index c = 0; c < L; ++c)
      if (S1(a, c) != Scalar(0)) rows.middleRows(a * R, R) += S1(a, c) * inner.middleRows(c * R, R);
  Matrix<Scalar> out = Matrix<Scalar>::Zero(L * R, L * R);
  for (Index b = 0; b < L; ++b)
    for (Index c = 0; c < L; ++c)
      if (S1(b, c) != Scalar(0)) out.middleCols(b * R, R) += S1(b, c) * rows.middleCols(c * R, R);
  return out;
}

/// Pointwise variances (R x L) of the smoothed surface S2 phi G S1', computed
/// on the spline-coefficient scale.
MatrixXd smoothed_surface_variance(const MatrixXd& cov_g_all, const MatrixXd& phi, const MatrixXd& S1,
                                   const MatrixXd& S2);

/// Pointwise variances (R x L) of the raw surface phi G.
MatrixXd raw_surface_variance(const MatrixXd& cov_g_all, const MatrixXd& phi);

// ---------------------------------------------------------------------------
// Bands

enum class BandKind { PointwiseAnalytic, PointwiseBootstrap, CmaAnalytic, CmaBootstrap };
std::string to_string(BandKind kind);

/// Curves are 1 x L, surfaces R x L.
struct ConfidenceBand {
  MatrixXd estimate;
  MatrixXd lower;
  MatrixXd upper;
  double level = 0.95;
  BandKind kind = BandKind::PointwiseAnalytic;
  double critical_value = 0.0;
};

/// Two-sided standard normal critical value z_{1 - (1 - level)/2}.
double normal_critical_value(double level);

ConfidenceBand pointwise_bands(const MatrixXd& estimate, const MatrixXd& variance, double level,
                               BandKind kind = BandKind::PointwiseAnalytic);

enum class CmaSampling { Joint, Marginal };

struct AnalyticMcSource {
  MatrixXd covariance;  // over the domain; only the diagonal is used for Marginal sampling
  int n_samples = 10000;
  CmaSampling sampling = CmaSampling::Joint;
  std::uint64_t seed = 1;
};

struct BootstrapSource {
  std::vector<VectorXd> replicates;
};

/// Empirical level-quantile of max_s |draw(s) - estimate(s)| / sd(s).
double cma_critical_value(const VectorXd& variance, const AnalyticMcSource& source, double level);
double cma_critical_value(const VectorXd& estimate, const VectorXd& variance, const BootstrapSource& source,
                          double level);

/// estimate +- q sd. The critical value never drops below the pointwise one,
/// so the band always contains the pointwise band of the same level.
ConfidenceBand cma_bands(const VectorXd& estimate, const VectorXd& variance, double q, double level,
                         BandKind kind = BandKind::CmaAnalytic);

// ---------------------------------------------------------------------------
// Bootstrap

struct BootstrapEstimates {
  int B = 0;  // successful replicates
  std::uint64_t seed = 0;
  std::vector<MatrixXd> beta_raw;                   // per replicate, p x L
  std::vector<MatrixXd> beta_smooth;
  std::vector<std::vector<MatrixXd>> gamma_raw;     // per replicate, per predictor R_k x L
  std::vector<std::vector<MatrixXd>> gamma_smooth;
  std::vector<std::vector<long>> indices_log;       // resampled original subject ids
  std::vector<int> replicate;                       // replicate number of each stored entry
  int failures = 0;
};

/// Resampled dataset: all visits of each drawn subject, copy n relabeled as subject n.
FunctionalDataset resample_subjects(const FunctionalDataset& d, const SubjectIndex& subjects,
                                    const std::vector<Index>& draw);

/// Cluster bootstrap of steps 1 and 2. Replicate b draws its subjects from
/// the stream derive_seed(seed, b), so output does not depend on `workers`.
BootstrapEstimates bootstrap(const FunctionalDataset& d, const PipelineConfig& config, int B, std::uint64_t seed,
                             int workers = 1);

/// Same with explicit subject draws (positions into the subject index).
BootstrapEstimates bootstrap(const FunctionalDataset& d, const PipelineConfig& config,
                             const std::vector<std::vector<Index>>& draws, std::uint64_t seed, int workers = 1);

/// Largest tolerated fraction of failed replicates.
constexpr double kMaxFailureFraction = 0.05;

/// Elementwise sample variance (divisor n - 1).
MatrixXd sample_variance(const std::vector<MatrixXd>& reps);

struct BootstrapVariance {
  MatrixXd beta;                // p x L
  std::vector<MatrixXd> gamma;  // R_k x L
};

BootstrapVariance bootstrap_variance(const BootstrapEstimates& reps, bool smoothed = true);

// ---------------------------------------------------------------------------
// Orchestration

enum class CovarianceMethod { MethodOfMoments, Marginal, RawOutcome };

struct InferenceConfig {
  double level = 0.95;
  CovarianceMethod beta_covariance = CovarianceMethod::Marginal;
  CovarianceMethod gamma_covariance = CovarianceMethod::MethodOfMoments;
  bool smooth_covariance = true;
  int cma_samples = 10000;
  CmaSampling cma_sampling = CmaSampling::Joint;
  int B = 300;
  std::uint64_t seed = 1;
};

void validate(const InferenceConfig& config);

struct InferenceResult {
  std::vector<ConfidenceBand> scalar;      // pointwise, one per scalar coefficient
  std::vector<ConfidenceBand> scalar_cma;  // CMA, one per scalar coefficient
  std::vector<ConfidenceBand> surface;     // pointwise, one per predictor
  MatrixXd beta_variance;                  // p x L, smoothed estimates
  std::vector<MatrixXd> gamma_variance;    // R_k x L, smoothed estimates
};

CovarianceField estimate_covariance(const FunctionalDataset& d, const ModelFit& fit, CovarianceMethod method);

InferenceResult analytic_inference(const FunctionalDataset& d, const ModelFit& fit, const SmoothingConfig& smoothing,
                                   const InferenceConfig& config, int workers = 1);

InferenceResult bootstrap_inference(const FunctionalDataset& d, const ModelFit& fit, const PipelineConfig& pipeline,
                                    const InferenceConfig& config, int workers = 1);

InferenceResult bootstrap_inference(const ModelFit& fit, const BootstrapEstimates& reps, const InferenceConfig& config);

/// Long format: coefficient, s, u (empty for curves), estimate, lower, upper, kind, level.
void write_bands_csv(const std::filesystem::path& path, const InferenceResult& result, const VectorXd& grid_s,
                     const std::vector<VectorXd>& grid_u);

}  // namespace elffr
