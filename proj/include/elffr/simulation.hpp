#pragma once

#include <elffr/data_model.hpp>
#include <elffr/inference.hpp>
#include <elffr/pipeline.hpp>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace elffr {

struct SimConfig {
  Index I = 100;
  Index J = 5;  // visits per subject, or their mean with poisson_visits
  Index L = 25;
  Index U = 25;
  double snr_b = 0.5;
  double snr_eps = 1.5;
  std::uint64_t seed = 1;
  bool poisson_visits = false;  // J_i = 1 + Poisson(J - 1)
};

/// Throws InvalidArgument naming the offending field.
void validate(const SimConfig& config);

double true_beta0(double s);
double true_beta1(double s);
double true_gamma(double s, double u);

struct GroundTruth {
  VectorXd grid_s;
  VectorXd grid_u;
  VectorXd beta0;
  VectorXd beta1;
  MatrixXd gamma;           // U x L, rows over u
  VectorXd psi1;            // orthonormal random-effect directions on grid_s
  VectorXd psi2;
  MatrixXd random_effects;  // I x L, scaled u_i(s)
  double random_scale = 1.0;
  double sigma_eps = 0.0;
};

/// Deterministic coefficient functions on the grids; random parts left empty.
GroundTruth true_coefficients(const VectorXd& grid_s, const VectorXd& grid_u);

std::pair<FunctionalDataset, GroundTruth> generate_dataset(const SimConfig& config);

/// Noise-free mean of Y implied by the truth: fixed part plus random effects.
MatrixXd linear_predictor(const FunctionalDataset& d, const GroundTruth& truth);

double ise_scalar(const VectorXd& estimate, const VectorXd& truth, const VectorXd& grid);
/// Surfaces are R x L with rows over grid_u.
double ise_surface(const MatrixXd& estimate, const MatrixXd& truth, const VectorXd& grid_u, const VectorXd& grid_s);

/// Fraction of entries with lower <= truth <= upper.
double coverage(const ConfidenceBand& band, const MatrixXd& truth);

struct StudyMethods {
  bool analytic = true;
  bool bootstrap = false;
};

struct StudyScenario {
  std::string name;
  SimConfig sim;
  PipelineConfig pipeline;
  InferenceConfig inference;
  StudyMethods methods;
};

struct ReplicateMetrics {
  std::string scenario;
  int replicate = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double ise_beta0 = 0.0;
  double ise_beta1 = 0.0;
  double ise_gamma = 0.0;
  double ise_gamma_raw = 0.0;
  double cov_gamma_analytic = 0.0;
  double cov_beta1_analytic = 0.0;
  double cov_beta1_cma_analytic = 0.0;
  double cov_gamma_bootstrap = 0.0;
  double cov_beta1_bootstrap = 0.0;
  double cov_beta1_cma_bootstrap = 0.0;
  double seconds = 0.0;
};

struct ScenarioSummary {
  std::string name;
  int completed = 0;
  int failed = 0;
  double mise_beta0 = 0.0;
  double mise_beta1 = 0.0;
  double mise_gamma = 0.0;
  double mise_gamma_raw = 0.0;
  double cov_gamma_analytic = 0.0;
  double cov_beta1_analytic = 0.0;
  double cov_beta1_cma_analytic = 0.0;
  double cov_gamma_bootstrap = 0.0;
  double cov_beta1_bootstrap = 0.0;
  double cov_beta1_cma_bootstrap = 0.0;
  double mean_seconds = 0.0;
};

struct StudyReport {
  std::vector<ReplicateMetrics> replicates;  // scenario-major, replicate order
  std::vector<ScenarioSummary> summary;
  bool interrupted = false;
};

/// Seed of replicate r in a scenario whose base seed is `seed`. Scenarios
/// sharing a base seed therefore see identical datasets.
std::uint64_t replicate_seed(std::uint64_t seed, int replicate);

ReplicateMetrics run_replicate(const StudyScenario& scenario, int replicate);

struct StudyOptions {
  int n_sims = 1;
  int workers = 1;
  std::optional<std::filesystem::path> out_dir;   // replicates.csv streamed, summary.csv at the end
  const std::atomic<bool>* stop = nullptr;         // checked before each replicate starts
  std::function<void(const ReplicateMetrics&)> progress;
};

StudyReport run_study(const std::vector<StudyScenario>& scenarios, const StudyOptions& options);

ScenarioSummary summarize(const std::string& name, const std::vector<ReplicateMetrics>& replicates, bool analytic,
                          bool bootstrap);

/// Throws TooManyFailures when any scenario lost more than 5% of its replicates.
void check_failures(const StudyReport& report);

void write_replicates_csv(const std::filesystem::path& path, const std::vector<ReplicateMetrics>& rows);
void write_summary_csv(const std::filesystem::path& path, const std::vector<ScenarioSummary>& rows);
std::string format_summary_table(const std::vector<ScenarioSummary>& rows);

}  // namespace elffr
