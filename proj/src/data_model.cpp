#include <elffr/basis.hpp>
#include <elffr/data_model.hpp>
#include <elffr/error.hpp>

#include <nlohmann/json.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

namespace elffr {

namespace fs = std::filesystem;

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::Io, path.string() + " is empty (header row required)");
  table.header = split_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto cells = split_line(line);
    if (cells.size() != table.header.size()) {
      throw Error(ErrorCode::Io, path.string() + ": row " + std::to_string(table.rows.size() + 1) + " has " +
                                     std::to_string(cells.size()) + " cells, header has " +
                                     std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(cells));
  }
  return table;
}

double parse_double(const std::string& text, bool* ok) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  *ok = ec == std::errc() && ptr == last;
  return value;
}

long parse_long(const std::string& text, const fs::path& path, std::size_t row) {
  long value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error(ErrorCode::Io, path.string() + ": row " + std::to_string(row + 1) + " has non-integer id '" + text + "'");
  }
  return value;
}

double cell_value(const CsvTable& t, std::size_t row, std::size_t col, const fs::path& path) {
  bool ok = false;
  const double v = parse_double(t.rows[row][col], &ok);
  if (!ok) {
    throw Error(ErrorCode::Io, path.string() + ": row " + std::to_string(row + 1) + " column " + t.header[col] +
                                   " is not a number ('" + t.rows[row][col] + "')");
  }
  if (!std::isfinite(v)) {
    throw Error(ErrorCode::NonFiniteValue,
                path.string() + ": row " + std::to_string(row + 1) + " column " + t.header[col]);
  }
  return v;
}

using Key = std::pair<long, long>;

void require_id_columns(const CsvTable& t, const fs::path& path) {
  if (t.header.size() < 2 || t.header[0] != "subject_id" || t.header[1] != "visit_id") {
    throw Error(ErrorCode::Io, path.string() + ": header must start with subject_id,visit_id");
  }
}

std::vector<Key> keys_of(const CsvTable& t, const fs::path& path) {
  std::vector<Key> keys;
  keys.reserve(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    keys.emplace_back(parse_long(t.rows[r][0], path, r), parse_long(t.rows[r][1], path, r));
  }
  return keys;
}

// Row permutation mapping `reference` order onto `other`'s rows.
std::vector<std::size_t> align_rows(const std::vector<Key>& reference, const std::vector<Key>& other,
                                    const fs::path& path) {
  if (reference.size() != other.size()) {
    throw Error(ErrorCode::MismatchedRows, path.string() + " has " + std::to_string(other.size()) +
                                               " rows, expected " + std::to_string(reference.size()));
  }
  std::map<Key, std::size_t> position;
  for (std::size_t r = 0; r < other.size(); ++r) {
    if (!position.emplace(other[r], r).second) {
      throw Error(ErrorCode::MismatchedRows, path.string() + " repeats (subject, visit) (" +
                                                 std::to_string(other[r].first) + ", " +
                                                 std::to_string(other[r].second) + ")");
    }
  }
  std::vector<std::size_t> perm(reference.size());
  for (std::size_t r = 0; r < reference.size(); ++r) {
    const auto it = position.find(reference[r]);
    if (it == position.end()) {
      throw Error(ErrorCode::MismatchedRows, path.string() + " lacks (subject, visit) (" +
                                                 std::to_string(reference[r].first) + ", " +
                                                 std::to_string(reference[r].second) + ")");
    }
    perm[r] = it->second;
  }
  return perm;
}

// Grid from "prefix<value>" headers. Plain 1..n index suffixes mean "no grid
// recorded" and fall back to equally spaced points on [0, 1].
VectorXd grid_from_headers(const std::vector<std::string>& header, std::size_t first, const std::string& prefix,
                           const fs::path& path) {
  const std::size_t n = header.size() - first;
  VectorXd grid(static_cast<Index>(n));
  bool numeric = true;
  bool index_like = true;
  for (std::size_t c = 0; c < n; ++c) {
    const std::string& h = header[first + c];
    if (h.rfind(prefix, 0) != 0) {
      throw Error(ErrorCode::Io, path.string() + ": column '" + h + "' should start with '" + prefix + "'");
    }
    bool ok = false;
    const double v = parse_double(h.substr(prefix.size()), &ok);
    if (!ok) numeric = false;
    grid(static_cast<Index>(c)) = v;
    if (!ok || v != static_cast<double>(c + 1) || h.find('.') != std::string::npos) index_like = false;
  }
  if (!numeric || index_like) return equally_spaced<double>(static_cast<Index>(n));
  return grid;
}

VectorXd resolve_grid(const std::optional<fs::path>& sidecar, VectorXd from_header) {
  if (!sidecar) return from_header;
  const auto values = read_grid_file(*sidecar);
  if (static_cast<Index>(values.size()) != from_header.size()) {
    throw Error(ErrorCode::GridMismatch, sidecar->string() + " has " + std::to_string(values.size()) +
                                             " points, data has " + std::to_string(from_header.size()));
  }
  return Eigen::Map<const VectorXd>(values.data(), static_cast<Index>(values.size()));
}

void write_wide(const fs::path& path, const FunctionalDataset& d, const std::vector<std::string>& value_header,
                const std::vector<const MatrixXd*>& blocks) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "subject_id,visit_id";
  for (const auto& h : value_header) out << ',' << h;
  out << '\n';
  for (Index r = 0; r < d.n_obs(); ++r) {
    out << d.subject_id[static_cast<std::size_t>(r)] << ',' << d.visit_id[static_cast<std::size_t>(r)];
    for (const MatrixXd* block : blocks) {
      for (Index c = 0; c < block->cols(); ++c) out << ',' << format_double((*block)(r, c));
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

void check_finite(const MatrixXd& m, const char* name) {
  for (Index c = 0; c < m.cols(); ++c) {
    for (Index r = 0; r < m.rows(); ++r) {
      if (!std::isfinite(m(r, c))) {
        throw Error(ErrorCode::NonFiniteValue,
                    std::string(name) + " row " + std::to_string(r + 1) + " column " + std::to_string(c + 1));
      }
    }
  }
}

}  // namespace

std::string format_double(double value) {
  char buffer[64];
  const auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
  return std::string(buffer, ptr);
}

SubjectIndex index_subjects(const std::vector<long>& subject_id) {
  SubjectIndex index;
  index.row_subject.resize(static_cast<Index>(subject_id.size()));
  std::unordered_map<long, Index> position;
  for (std::size_t r = 0; r < subject_id.size(); ++r) {
    auto [it, inserted] = position.emplace(subject_id[r], index.n_subjects());
    if (inserted) {
      index.ids.push_back(subject_id[r]);
      index.rows.emplace_back();
    }
    index.rows[static_cast<std::size_t>(it->second)].push_back(static_cast<Index>(r));
    index.row_subject(static_cast<Index>(r)) = static_cast<int>(it->second);
  }
  return index;
}

void validate(const FunctionalDataset& d) {
  const Index n = d.n_obs();
  if (static_cast<Index>(d.subject_id.size()) != n || static_cast<Index>(d.visit_id.size()) != n ||
      d.X.rows() != n || d.Z.rows() != n) {
    throw Error(ErrorCode::MismatchedRows, "ids, Y, X and Z must share the row count");
  }
  if (d.X.cols() == 0) throw Error(ErrorCode::MissingIntercept, "X has no columns; an intercept column is required");
  if (!(d.X.col(0).array() == 1.0).all()) {
    throw Error(ErrorCode::MissingIntercept, "first column of X must be all ones");
  }
  if (d.Z.cols() == 0) throw Error(ErrorCode::InvalidArgument, "Z needs at least one column");
  if (d.grid_s.size() != d.Y.cols()) throw Error(ErrorCode::GridMismatch, "grid_s length differs from Y columns");
  if (d.grid_s.size() < 4) throw Error(ErrorCode::TooFewGridPoints, "outcome grid has fewer than 4 points");
  require_strictly_increasing(d.grid_s, "grid_s");
  if (d.W.size() != d.grid_u.size()) throw Error(ErrorCode::GridMismatch, "one grid per functional predictor");
  for (std::size_t k = 0; k < d.W.size(); ++k) {
    if (d.W[k].rows() != n) throw Error(ErrorCode::MismatchedRows, "predictor " + std::to_string(k + 1) + " row count");
    if (d.grid_u[k].size() != d.W[k].cols()) {
      throw Error(ErrorCode::GridMismatch, "grid_u[" + std::to_string(k) + "] length differs from W columns");
    }
    if (d.grid_u[k].size() < 4) throw Error(ErrorCode::TooFewGridPoints, "predictor grid has fewer than 4 points");
    require_strictly_increasing(d.grid_u[k], "grid_u");
    check_finite(d.W[k], "W");
  }
  check_finite(d.Y, "Y");
  check_finite(d.X, "X");
  check_finite(d.Z, "Z");
  std::map<Key, int> seen;
  for (Index r = 0; r < n; ++r) {
    const Key key{d.subject_id[static_cast<std::size_t>(r)], d.visit_id[static_cast<std::size_t>(r)]};
    if (!seen.emplace(key, 0).second) {
      throw Error(ErrorCode::MismatchedRows, "duplicate (subject, visit) (" + std::to_string(key.first) + ", " +
                                                 std::to_string(key.second) + ")");
    }
  }
}

std::vector<double> read_grid_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::vector<double> values;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    bool ok = false;
    const double v = parse_double(line, &ok);
    if (!ok) {
      if (values.empty()) continue;  // optional header line
      throw Error(ErrorCode::Io, path.string() + ": '" + line + "' is not a number");
    }
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteValue, path.string());
    values.push_back(v);
  }
  return values;
}

DatasetFiles dataset_files(const fs::path& dir, Index n_predictors) {
  DatasetFiles files{dir / "outcomes.csv", dir / "covariates.csv", {}};
  for (Index k = 0; k < n_predictors; ++k) files.predictors.push_back(dir / ("predictor_" + std::to_string(k + 1) + ".csv"));
  return files;
}

Index count_predictor_files(const fs::path& dir) {
  Index k = 0;
  while (fs::exists(dir / ("predictor_" + std::to_string(k + 1) + ".csv"))) ++k;
  return k;
}

FunctionalDataset load_dataset(const fs::path& outcome_path, const fs::path& covariate_path,
                               const std::vector<fs::path>& predictor_paths, const DatasetSchema& schema) {
  for (const auto* p : {&outcome_path, &covariate_path}) {
    if (!fs::exists(*p)) throw Error(ErrorCode::Io, "missing file " + p->string());
  }
  for (const auto& p : predictor_paths) {
    if (!fs::exists(p)) throw Error(ErrorCode::Io, "missing file " + p.string());
  }

  const CsvTable outcomes = read_csv(outcome_path);
  require_id_columns(outcomes, outcome_path);
  const auto keys = keys_of(outcomes, outcome_path);
  const Index n = static_cast<Index>(keys.size());

  FunctionalDataset d;
  for (const auto& [subject, visit] : keys) {
    d.subject_id.push_back(subject);
    d.visit_id.push_back(visit);
  }
  const std::size_t n_grid = outcomes.header.size() - 2;
  d.Y.resize(n, static_cast<Index>(n_grid));
  for (Index r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n_grid; ++c) d.Y(r, static_cast<Index>(c)) = cell_value(outcomes, static_cast<std::size_t>(r), c + 2, outcome_path);
  }
  d.grid_s = resolve_grid(schema.grid_s_file, grid_from_headers(outcomes.header, 2, "y_", outcome_path));

  const CsvTable covariates = read_csv(covariate_path);
  require_id_columns(covariates, covariate_path);
  const auto perm = align_rows(keys, keys_of(covariates, covariate_path), covariate_path);
  std::vector<std::size_t> x_cols;
  std::vector<std::size_t> z_cols;
  for (std::size_t c = 2; c < covariates.header.size(); ++c) {
    const auto& h = covariates.header[c];
    if (h.rfind("x_", 0) == 0) {
      x_cols.push_back(c);
    } else if (h.rfind("z_", 0) == 0) {
      z_cols.push_back(c);
    } else {
      throw Error(ErrorCode::Io, covariate_path.string() + ": unexpected column '" + h + "'");
    }
  }
  if (schema.n_scalar && static_cast<int>(x_cols.size()) != *schema.n_scalar) {
    throw Error(ErrorCode::Io, covariate_path.string() + ": expected " + std::to_string(*schema.n_scalar) + " x_ columns");
  }
  if (schema.n_random && static_cast<int>(z_cols.size()) != *schema.n_random) {
    throw Error(ErrorCode::Io, covariate_path.string() + ": expected " + std::to_string(*schema.n_random) + " z_ columns");
  }
  d.X.resize(n, static_cast<Index>(x_cols.size()));
  d.Z.resize(n, static_cast<Index>(z_cols.size()));
  for (Index r = 0; r < n; ++r) {
    const std::size_t src = perm[static_cast<std::size_t>(r)];
    for (std::size_t c = 0; c < x_cols.size(); ++c) d.X(r, static_cast<Index>(c)) = cell_value(covariates, src, x_cols[c], covariate_path);
    for (std::size_t c = 0; c < z_cols.size(); ++c) d.Z(r, static_cast<Index>(c)) = cell_value(covariates, src, z_cols[c], covariate_path);
  }

  for (std::size_t k = 0; k < predictor_paths.size(); ++k) {
    const auto& path = predictor_paths[k];
    const CsvTable table = read_csv(path);
    require_id_columns(table, path);
    const auto pk = align_rows(keys, keys_of(table, path), path);
    const std::size_t r_k = table.header.size() - 2;
    MatrixXd w(n, static_cast<Index>(r_k));
    for (Index r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < r_k; ++c) w(r, static_cast<Index>(c)) = cell_value(table, pk[static_cast<std::size_t>(r)], c + 2, path);
    }
    d.W.push_back(std::move(w));
    const std::optional<fs::path> sidecar =
        k < schema.grid_u_files.size() ? schema.grid_u_files[k] : std::optional<fs::path>{};
    d.grid_u.push_back(resolve_grid(sidecar, grid_from_headers(table.header, 2, "w_", path)));
  }

  validate(d);
  return d;
}

DatasetFiles save_dataset(const FunctionalDataset& d, const fs::path& dir) {
  validate(d);
  fs::create_directories(dir);
  const DatasetFiles files = dataset_files(dir, d.n_predictors());

  std::vector<std::string> header;
  for (Index l = 0; l < d.grid_s.size(); ++l) header.push_back("y_" + format_double(d.grid_s(l)));
  write_wide(files.outcomes, d, header, {&d.Y});

  header.clear();
  for (Index c = 0; c < d.X.cols(); ++c) header.push_back("x_" + std::to_string(c + 1));
  for (Index c = 0; c < d.Z.cols(); ++c) header.push_back("z_" + std::to_string(c + 1));
  write_wide(files.covariates, d, header, {&d.X, &d.Z});

  for (std::size_t k = 0; k < d.W.size(); ++k) {
    header.clear();
    for (Index r = 0; r < d.grid_u[k].size(); ++r) header.push_back("w_" + format_double(d.grid_u[k](r)));
    write_wide(files.predictors[k], d, header, {&d.W[k]});
  }
  return files;
}

void write_matrix_csv(const fs::path& path, const MatrixXd& m, const std::vector<std::string>& header) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  if (!header.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  } else {
    for (Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << "c" << (c + 1);
  }
  out << '\n';
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << format_double(m(r, c));
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

MatrixXd read_matrix_csv(const fs::path& path, std::vector<std::string>* header) {
  const CsvTable t = read_csv(path);
  MatrixXd m(static_cast<Index>(t.rows.size()), static_cast<Index>(t.header.size()));
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      bool ok = false;
      m(static_cast<Index>(r), static_cast<Index>(c)) = parse_double(t.rows[r][c], &ok);
      if (!ok) throw Error(ErrorCode::Io, path.string() + ": bad number '" + t.rows[r][c] + "'");
    }
  }
  if (header) *header = t.header;
  return m;
}

void save_fit_result(const FitResult& fit, const fs::path& dir, const std::string& run_json) {
  fs::create_directories(dir);
  const Index L = fit.n_grid();
  const Index K = static_cast<Index>(fit.gamma_hat.size());
  write_matrix_csv(dir / "beta_hat.csv", fit.beta_hat);
  write_matrix_csv(dir / "beta_smooth.csv", fit.beta_smooth);
  write_matrix_csv(dir / "lambda.csv", fit.lambda);
  for (Index k = 0; k < K; ++k) {
    const std::string suffix = "_" + std::to_string(k + 1) + ".csv";
    write_matrix_csv(dir / ("gamma_hat" + suffix), fit.gamma_hat[static_cast<std::size_t>(k)]);
    write_matrix_csv(dir / ("gamma_smooth" + suffix), fit.gamma_smooth[static_cast<std::size_t>(k)]);
    write_matrix_csv(dir / ("spline_coefs" + suffix), fit.spline_coefs[static_cast<std::size_t>(k)]);
  }
  const Index q = L > 0 ? fit.var_components.front().H.rows() : 0;
  MatrixXd vc(L, 1 + q * q);
  std::vector<std::string> header{"sigma2_eps"};
  for (Index t = 0; t < q; ++t)
    for (Index v = 0; v < q; ++v) header.push_back("h_" + std::to_string(t + 1) + "_" + std::to_string(v + 1));
  for (Index l = 0; l < L; ++l) {
    const auto& comp = fit.var_components[static_cast<std::size_t>(l)];
    vc(l, 0) = comp.sigma2_eps;
    for (Index t = 0; t < q; ++t)
      for (Index v = 0; v < q; ++v) vc(l, 1 + t * q + v) = comp.H(t, v);
  }
  write_matrix_csv(dir / "var_components.csv", vc, header);

  nlohmann::json manifest;
  manifest["format"] = "elffr-fit-1";
  manifest["dimensions"] = {{"p", fit.beta_hat.rows()}, {"L", L}, {"K", K}, {"q", q}};
  std::vector<Index> rk;
  std::vector<Index> kg;
  for (Index k = 0; k < K; ++k) {
    rk.push_back(fit.gamma_hat[static_cast<std::size_t>(k)].rows());
    kg.push_back(fit.spline_coefs[static_cast<std::size_t>(k)].rows());
  }
  manifest["dimensions"]["R"] = rk;
  manifest["dimensions"]["K_g"] = kg;
  auto to_vec = [](const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  manifest["smoothing"] = {{"beta_lambda", to_vec(fit.beta_smoother_lambda)},
                           {"gamma_lambda_s", to_vec(fit.gamma_lambda_s)},
                           {"gamma_lambda_u", to_vec(fit.gamma_lambda_u)}};
  manifest["run"] = nlohmann::json::parse(run_json);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw Error(ErrorCode::Io, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

FitResult load_fit_result(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorCode::Io, "missing " + (dir / "manifest.json").string());
  const auto manifest = nlohmann::json::parse(in);
  const Index K = manifest["dimensions"]["K"].get<Index>();
  const Index q = manifest["dimensions"]["q"].get<Index>();
  FitResult fit;
  fit.beta_hat = read_matrix_csv(dir / "beta_hat.csv");
  fit.beta_smooth = read_matrix_csv(dir / "beta_smooth.csv");
  fit.lambda = read_matrix_csv(dir / "lambda.csv");
  for (Index k = 0; k < K; ++k) {
    const std::string suffix = "_" + std::to_string(k + 1) + ".csv";
    fit.gamma_hat.push_back(read_matrix_csv(dir / ("gamma_hat" + suffix)));
    fit.gamma_smooth.push_back(read_matrix_csv(dir / ("gamma_smooth" + suffix)));
    fit.spline_coefs.push_back(read_matrix_csv(dir / ("spline_coefs" + suffix)));
  }
  const MatrixXd vc = read_matrix_csv(dir / "var_components.csv");
  for (Index l = 0; l < vc.rows(); ++l) {
    LocationVariance comp;
    comp.sigma2_eps = vc(l, 0);
    comp.H.resize(q, q);
    for (Index t = 0; t < q; ++t)
      for (Index v = 0; v < q; ++v) comp.H(t, v) = vc(l, 1 + t * q + v);
    fit.var_components.push_back(comp);
  }
  auto to_eigen = [](const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return VectorXd(Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size())));
  };
  fit.beta_smoother_lambda = to_eigen(manifest["smoothing"]["beta_lambda"]);
  fit.gamma_lambda_s = to_eigen(manifest["smoothing"]["gamma_lambda_s"]);
  fit.gamma_lambda_u = to_eigen(manifest["smoothing"]["gamma_lambda_u"]);
  return fit;
}

}  // namespace elffr
