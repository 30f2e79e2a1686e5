// elffr: simulate, fit, infer and study from the command line.
//
// Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration error.
// Data goes to files under --out; stdout carries only the summary table.

#include <elffr/run_config.hpp>

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

using namespace elffr;
namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by several commands; unset ones leave the config value alone.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<double> level;
  std::optional<int> B;
  std::optional<int> cma_N;
  std::optional<int> knots_s;
  std::optional<int> knots_u;
  std::optional<int> Kw;
  std::optional<int> Kg;
  std::optional<std::string> family;
  std::optional<std::string> method;
  std::optional<int> n_sims;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "base random seed");
  cmd->add_option("--workers", o.workers, "worker threads (default: ELFFR_WORKERS or all cores)");
}

void add_model(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--Kw", o.Kw, "FPCA components per predictor (default 15)");
  cmd->add_option("--Kg", o.Kg, "coefficient basis size per predictor (default 15)");
  cmd->add_option("--knots-s", o.knots_s, "sandwich smoother knots over s (default 10)");
  cmd->add_option("--knots-u", o.knots_u, "sandwich smoother knots over u (default 5)");
  cmd->add_option("--family", o.family, "outcome family (only gaussian is fitted)");
}

void add_inference(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--level", o.level, "confidence level (default 0.95)");
  cmd->add_option("--B", o.B, "bootstrap replicates (default 300)");
  cmd->add_option("--cma-N", o.cma_N, "Monte Carlo draws for CMA critical values (default 10000)");
  cmd->add_option("--method", o.method, "analytic, bootstrap or both");
}

RunConfig resolve(const Overrides& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) apply_seed(cfg, *o.seed);
  if (o.workers) cfg.workers = *o.workers;
  if (o.level) cfg.inference.level = *o.level;
  if (o.B) cfg.inference.B = *o.B;
  if (o.cma_N) cfg.inference.cma_samples = *o.cma_N;
  if (o.knots_s) cfg.pipeline.smoothing.knots_s = *o.knots_s;
  if (o.knots_u) cfg.pipeline.smoothing.knots_u = *o.knots_u;
  if (o.Kw) cfg.pipeline.model.K_w = *o.Kw;
  if (o.Kg) cfg.pipeline.model.K_g = *o.Kg;
  if (o.family) cfg.family = *o.family;
  if (o.n_sims) cfg.n_sims = *o.n_sims;
  if (o.method) {
    if (*o.method == "analytic") {
      cfg.method = InferenceMethod::Analytic;
    } else if (*o.method == "bootstrap") {
      cfg.method = InferenceMethod::Bootstrap;
    } else if (*o.method == "both") {
      cfg.method = InferenceMethod::Both;
    } else {
      throw ConfigError("--method must be analytic, bootstrap or both");
    }
  }
  // flags also apply to every scenario of a study config
  for (auto& sc : cfg.scenarios) {
    if (o.seed) sc.sim.seed = sc.inference.seed = *o.seed;
    if (o.level) sc.inference.level = *o.level;
    if (o.B) sc.inference.B = *o.B;
    if (o.cma_N) sc.inference.cma_samples = *o.cma_N;
    if (o.knots_s) sc.pipeline.smoothing.knots_s = *o.knots_s;
    if (o.knots_u) sc.pipeline.smoothing.knots_u = *o.knots_u;
    if (o.Kw) sc.pipeline.model.K_w = *o.Kw;
    if (o.Kg) sc.pipeline.model.K_g = *o.Kg;
  }
  validate(cfg);
  return cfg;
}

void require_fitted_family(const RunConfig& cfg) {
  if (cfg.family != "gaussian") {
    throw ConfigError("family '" + cfg.family + "' is not supported; the pipeline fits gaussian outcomes");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text << '\n';
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

std::string manifest(const std::string& command, const RunConfig& cfg, const std::string& extra = "") {
  std::ostringstream out;
  out << "{\n  \"command\": \"" << command << "\",\n";
  if (!extra.empty()) out << extra << ",\n";
  out << "  \"config\": " << to_json(cfg) << "\n}";
  return out.str();
}

FunctionalDataset read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::Io, "dataset directory " + dir.string() + " does not exist");
  const Index K = count_predictor_files(dir);
  const DatasetFiles files = dataset_files(dir, K);
  for (const auto& p : files.predictors)
    if (!fs::exists(p)) throw Error(ErrorCode::Io, "missing predictor file " + p.string());
  return load_dataset(files.outcomes, files.covariates, files.predictors);
}

// --- simulate ---------------------------------------------------------------

int cmd_simulate(const Overrides& o, const std::optional<int>& I, const fs::path& out) {
  RunConfig cfg = resolve(o);
  if (I) cfg.sim.I = *I;
  validate(cfg.sim);
  const auto [d, truth] = generate_dataset(cfg.sim);
  fs::create_directories(out);
  save_dataset(d, out);
  std::vector<std::string> s_header;
  for (Index l = 0; l < d.grid_s.size(); ++l) s_header.push_back("s_" + format_double(d.grid_s(l)));
  MatrixXd beta(2, d.grid_s.size());
  beta << truth.beta0.transpose(), truth.beta1.transpose();
  write_matrix_csv(out / "truth_beta.csv", beta, s_header);
  write_matrix_csv(out / "truth_gamma.csv", truth.gamma, s_header);
  write_matrix_csv(out / "truth_random_effects.csv", truth.random_effects, s_header);
  std::ostringstream extra;
  extra << "  \"sigma_eps\": " << format_double(truth.sigma_eps) << ",\n  \"random_scale\": "
        << format_double(truth.random_scale);
  write_text(out / "manifest.json", manifest("simulate", cfg, extra.str()));
  std::cerr << "simulated " << d.n_obs() << " curves from " << cfg.sim.I << " subjects into " << out << '\n';
  return 0;
}

// --- fit --------------------------------------------------------------------

void print_fit_summary(const ModelFit& fit, const FunctionalDataset& d, double seconds) {
  const FitResult& r = fit.result;
  std::cout << std::setw(6) << "l" << std::setw(10) << "s";
  for (Index k = 0; k < r.lambda.rows(); ++k) std::cout << std::setw(14) << ("lambda_" + std::to_string(k + 1));
  std::cout << std::setw(14) << "sigma2_eps" << std::setw(14) << "sigma2_b" << '\n';
  std::cout << std::scientific << std::setprecision(4);
  for (Index l = 0; l < r.n_grid(); ++l) {
    std::cout << std::setw(6) << l + 1 << std::fixed << std::setprecision(4) << std::setw(10) << d.grid_s(l)
              << std::scientific;
    for (Index k = 0; k < r.lambda.rows(); ++k) std::cout << std::setw(14) << r.lambda(k, l);
    const auto& vc = r.var_components[static_cast<std::size_t>(l)];
    std::cout << std::setw(14) << vc.sigma2_eps << std::setw(14) << vc.H(0, 0) << '\n';
  }
  std::cout << std::defaultfloat << std::setprecision(6);
  for (std::size_t j = 0; j < fit.beta_smoothers.size(); ++j)
    std::cout << "beta_" << j << " smoother edf " << fit.beta_smoothers[j].edf << '\n';
  for (std::size_t k = 0; k < fit.surface_over_s.size(); ++k)
    std::cout << "gamma_" << k + 1 << " smoother edf s " << fit.surface_over_s[k].edf << ", u "
              << fit.surface_over_u[k].edf << '\n';
  std::cout << "fit time " << seconds << " s\n";
}

int cmd_fit(const Overrides& o, const fs::path& data, const fs::path& out) {
  const RunConfig cfg = resolve(o);
  require_fitted_family(cfg);
  const FunctionalDataset d = read_dataset(data);
  const auto start = std::chrono::steady_clock::now();
  PointwiseFitAll all = fit_all(d, cfg.pipeline.model, cfg.workers);
  if (!all.complete()) {
    for (const auto& e : all.errors)
      std::cerr << "location " << e.location + 1 << ": " << to_string(e.code) << ": " << e.message << '\n';
    std::cerr << all.errors.size() << " of " << d.grid_s.size() << " locations failed\n";
    return 1;
  }
  const ModelFit fit = smooth_fits(std::move(all), d, cfg.pipeline.smoothing);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  fs::create_directories(out);
  save_fit_result(fit.result, out, manifest("fit", cfg, "  \"data\": \"" + data.string() + "\""));
  print_fit_summary(fit, d, seconds);
  return 0;
}

// --- infer ------------------------------------------------------------------

int cmd_infer(const Overrides& o, const fs::path& data, const std::optional<fs::path>& stored, const fs::path& out) {
  const RunConfig cfg = resolve(o);
  if (cfg.method != InferenceMethod::Bootstrap && cfg.family != "gaussian") {
    throw ConfigError("analytic inference requires Gaussian outcomes (family is '" + cfg.family + "')");
  }
  require_fitted_family(cfg);
  const FunctionalDataset d = read_dataset(data);
  const ModelFit fit = fit_model(d, cfg.pipeline, cfg.workers);
  if (stored) {
    const FitResult previous = load_fit_result(*stored);
    if (previous.beta_hat.rows() != fit.result.beta_hat.rows() ||
        previous.beta_hat.cols() != fit.result.beta_hat.cols() ||
        !previous.beta_hat.isApprox(fit.result.beta_hat, 1e-10)) {
      std::cerr << "stored fit in " << *stored << " does not match the dataset and settings\n";
      return 1;
    }
  }
  fs::create_directories(out);
  const auto run = [&](const std::string& name, const InferenceResult& result) {
    write_bands_csv(out / ("bands_" + name + ".csv"), result, d.grid_s, d.grid_u);
    std::cout << name << ": " << result.scalar.size() << " scalar coefficients, " << result.surface.size()
              << " surfaces";
    if (!result.scalar_cma.empty()) {
      std::cout << ", CMA critical values";
      for (const auto& b : result.scalar_cma) std::cout << ' ' << b.critical_value;
    }
    std::cout << '\n';
  };
  if (cfg.method != InferenceMethod::Bootstrap) {
    run("analytic", analytic_inference(d, fit, cfg.pipeline.smoothing, cfg.inference, cfg.workers));
  }
  if (cfg.method != InferenceMethod::Analytic) {
    std::cerr << "bootstrap with B = " << cfg.inference.B << '\n';
    run("bootstrap", bootstrap_inference(d, fit, cfg.pipeline, cfg.inference, cfg.workers));
  }
  write_text(out / "manifest.json", manifest("infer", cfg, "  \"data\": \"" + data.string() + "\""));
  return 0;
}

// --- study ------------------------------------------------------------------

int cmd_study(const Overrides& o, const std::optional<fs::path>& out) {
  const RunConfig cfg = resolve(o);
  require_fitted_family(cfg);
  const std::vector<StudyScenario> scenarios = study_scenarios(cfg);
  StudyOptions options;
  options.n_sims = cfg.n_sims;
  options.workers = cfg.workers;
  options.out_dir = out;
  options.stop = &g_stop;
  const int total = static_cast<int>(scenarios.size()) * cfg.n_sims;
  int done = 0;
  options.progress = [&](const ReplicateMetrics& m) {
    ++done;
    std::cerr << '[' << done << '/' << total << "] " << m.scenario << " #" << m.replicate << " seed " << m.seed
              << (m.ok ? "" : " FAILED: " + m.error) << " (" << std::fixed << std::setprecision(1) << m.seconds
              << " s)\n"
              << std::defaultfloat;
  };
  std::signal(SIGINT, on_sigint);
  const StudyReport report = run_study(scenarios, options);
  std::signal(SIGINT, SIG_DFL);
  if (out) write_text(*out / "manifest.json", manifest("study", cfg));
  std::cout << format_summary_table(report.summary);
  if (report.interrupted) {
    std::cerr << "interrupted: " << report.replicates.size() << " of " << total << " replicates finished";
    if (out) std::cerr << " and were written to " << (*out / "replicates.csv");
    std::cerr << '\n';
    return 1;
  }
  check_failures(report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Marginal longitudinal function-on-function regression"};
  app.require_subcommand(1);
  Overrides o;
  fs::path out;
  fs::path data;
  std::optional<fs::path> stored_fit;
  std::optional<fs::path> study_out;
  std::optional<int> sim_I;

  auto* simulate = app.add_subcommand("simulate", "generate a simulated dataset with its ground truth");
  add_common(simulate, o);
  simulate->add_option("--I", sim_I, "number of subjects");
  simulate->add_option("--out", out, "output directory")->required();

  auto* fit = app.add_subcommand("fit", "pointwise fits and smoothing");
  add_common(fit, o);
  add_model(fit, o);
  fit->add_option("--data", data, "dataset directory")->required();
  fit->add_option("--out", out, "output directory")->required();

  auto* infer = app.add_subcommand("infer", "confidence bands");
  add_common(infer, o);
  add_model(infer, o);
  add_inference(infer, o);
  infer->add_option("--data", data, "dataset directory")->required();
  infer->add_option("--fit", stored_fit, "fit directory to check against the refit");
  infer->add_option("--out", out, "output directory")->required();

  auto* study = app.add_subcommand("study", "simulation study over the configured scenarios");
  add_common(study, o);
  add_model(study, o);
  add_inference(study, o);
  study->add_option("--n-sims", o.n_sims, "replicates per scenario");
  study->add_option("--out", study_out, "output directory for replicates.csv and summary.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*simulate) return cmd_simulate(o, sim_I, out);
    if (*fit) return cmd_fit(o, data, out);
    if (*infer) return cmd_infer(o, data, stored_fit, out);
    if (*study) return cmd_study(o, study_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::InvalidArgument ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
