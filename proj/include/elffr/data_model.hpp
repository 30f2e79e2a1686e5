#pragma once

#include <elffr/types.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace elffr {

/// Longitudinal functional data: one row per (subject, visit) curve.
struct FunctionalDataset {
  std::vector<long> subject_id;
  std::vector<long> visit_id;
  MatrixXd Y;                    // N x L outcomes on grid_s
  MatrixXd X;                    // N x p scalar covariates, first column is the intercept
  MatrixXd Z;                    // N x q random-effect covariates
  std::vector<MatrixXd> W;       // K predictors, each N x R_k on grid_u[k]
  VectorXd grid_s;
  std::vector<VectorXd> grid_u;

  Index n_obs() const { return Y.rows(); }
  Index n_grid() const { return Y.cols(); }
  Index n_scalar() const { return X.cols(); }
  Index n_random() const { return Z.cols(); }
  Index n_predictors() const { return static_cast<Index>(W.size()); }
};

/// Rows of each subject, subjects ordered by first appearance.
struct SubjectIndex {
  std::vector<long> ids;
  std::vector<std::vector<Index>> rows;
  VectorXi row_subject;  // row -> position in `ids`

  Index n_subjects() const { return static_cast<Index>(ids.size()); }
};

SubjectIndex index_subjects(const std::vector<long>& subject_id);

/// Throws Error with a code per violated invariant; returns normally otherwise.
void validate(const FunctionalDataset& d);

struct DatasetSchema {
  std::optional<int> n_scalar;
  std::optional<int> n_random;
  std::optional<std::filesystem::path> grid_s_file;
  std::vector<std::optional<std::filesystem::path>> grid_u_files;
};

struct DatasetFiles {
  std::filesystem::path outcomes;
  std::filesystem::path covariates;
  std::vector<std::filesystem::path> predictors;
};

/// Conventional file names inside a dataset directory.
DatasetFiles dataset_files(const std::filesystem::path& dir, Index n_predictors);

FunctionalDataset load_dataset(const std::filesystem::path& outcome_path,
                               const std::filesystem::path& covariate_path,
                               const std::vector<std::filesystem::path>& predictor_paths,
                               const DatasetSchema& schema = {});

DatasetFiles save_dataset(const FunctionalDataset& d, const std::filesystem::path& dir);

/// Count predictor_<k>.csv files present in a dataset directory.
Index count_predictor_files(const std::filesystem::path& dir);

std::vector<double> read_grid_file(const std::filesystem::path& path);

struct LocationVariance {
  MatrixXd H;          // q x q random-effect covariance
  double sigma2_eps = 0.0;
};

/// Raw pointwise estimates and their smoothed counterparts.
struct FitResult {
  MatrixXd beta_hat;                    // p x L
  MatrixXd beta_smooth;                 // p x L
  std::vector<MatrixXd> gamma_hat;      // K surfaces, R_k x L
  std::vector<MatrixXd> gamma_smooth;
  MatrixXd lambda;                      // K x L per-location smoothing parameters
  std::vector<LocationVariance> var_components;  // length L
  std::vector<MatrixXd> spline_coefs;   // K_g x L per predictor
  VectorXd beta_smoother_lambda;        // p
  VectorXd gamma_lambda_s;              // K
  VectorXd gamma_lambda_u;              // K

  Index n_grid() const { return beta_hat.cols(); }
};

/// Writes the fit as CSVs plus `manifest.json` (the given JSON text is stored
/// under the "run" key).
void save_fit_result(const FitResult& fit, const std::filesystem::path& dir, const std::string& run_json = "{}");
FitResult load_fit_result(const std::filesystem::path& dir);

// Shared CSV helpers.
std::string format_double(double value);
void write_matrix_csv(const std::filesystem::path& path, const MatrixXd& m, const std::vector<std::string>& header = {});
MatrixXd read_matrix_csv(const std::filesystem::path& path, std::vector<std::string>* header = nullptr);

}  // namespace elffr
