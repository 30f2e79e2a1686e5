#include <elffr/basis.hpp>
#include <elffr/parallel.hpp>
#include <elffr/simulation.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>

namespace elffr {

namespace {

constexpr double kPi = std::numbers::pi;

double sample_sd(const MatrixXd& m) {
  const double mean = m.mean();
  return std::sqrt((m.array() - mean).square().sum() / static_cast<double>(m.size() - 1));
}

}  // namespace

void validate(const SimConfig& c) {
  auto fail = [](const std::string& field, const std::string& rule) {
    throw Error(ErrorCode::InvalidArgument, field + " " + rule);
  };
  if (c.I < 2) fail("I", "must be at least 2");
  if (c.J < 2) fail("J", "must be at least 2");
  if (c.L < 4) fail("L", "must be at least 4");
  if (c.U < 4) fail("U", "must be at least 4");
  if (!(c.snr_b > 0.0) || !std::isfinite(c.snr_b)) fail("SNR_B", "must be positive");
  if (!(c.snr_eps > 0.0) || !std::isfinite(c.snr_eps)) fail("SNR_eps", "must be positive");
}

double true_beta0(double s) { return -0.15 - 0.1 * std::sin(2 * kPi * s) - 0.1 * std::cos(2 * kPi * s); }

double true_beta1(double s) {
  const double z = (s - 0.6) / 0.0225;
  return std::exp(-0.5 * z * z) / std::sqrt(2 * kPi) / 20.0;
}

double true_gamma(double s, double u) {
  return 5.0 * std::sin(0.5 * kPi * (s + 0.5) * (s + 0.5)) * std::cos(kPi * u + 0.5);
}

GroundTruth true_coefficients(const VectorXd& grid_s, const VectorXd& grid_u) {
  GroundTruth t;
  t.grid_s = grid_s;
  t.grid_u = grid_u;
  t.beta0 = grid_s.unaryExpr([](double s) { return true_beta0(s); });
  t.beta1 = grid_s.unaryExpr([](double s) { return true_beta1(s); });
  t.gamma.resize(grid_u.size(), grid_s.size());
  for (Index l = 0; l < grid_s.size(); ++l)
    for (Index r = 0; r < grid_u.size(); ++r) t.gamma(r, l) = true_gamma(grid_s(l), grid_u(r));

  const VectorXd w = trapezoid_weights(grid_s);
  auto inner = [&](const VectorXd& a, const VectorXd& b) { return a.cwiseProduct(b).dot(w); };
  VectorXd p1 = grid_s.unaryExpr([](double s) { return 1.5 - std::sin(2 * kPi * s) - std::cos(2 * kPi * s); });
  VectorXd p2 = grid_s.unaryExpr([](double s) { return std::sin(4 * kPi * s); });
  p1 /= std::sqrt(inner(p1, p1));
  p2 -= inner(p1, p2) * p1;
  p2 /= std::sqrt(inner(p2, p2));
  t.psi1 = p1;
  t.psi2 = p2;
  return t;
}

std::pair<FunctionalDataset, GroundTruth> generate_dataset(const SimConfig& config) {
  validate(config);
  const VectorXd grid_s = equally_spaced<double>(config.L);
  const VectorXd grid_u = equally_spaced<double>(config.U);
  GroundTruth truth = true_coefficients(grid_s, grid_u);
  const MatrixXd spline = bspline_basis(grid_u, 5, 3).values;

  Rng rng(config.seed);
  std::normal_distribution<double> n01;
  std::vector<Index> visits(static_cast<std::size_t>(config.I), config.J);
  if (config.poisson_visits) {
    std::poisson_distribution<int> extra(static_cast<double>(config.J - 1));
    for (auto& v : visits) v = 1 + extra(rng);
  }
  MatrixXd scores(config.I, 2);
  for (Index i = 0; i < config.I; ++i) {
    scores(i, 0) = std::sqrt(3.0) * n01(rng);
    scores(i, 1) = std::sqrt(1.5) * n01(rng);
  }

  FunctionalDataset d;
  d.grid_s = grid_s;
  d.grid_u = {grid_u};
  Index N = 0;
  for (const Index v : visits) N += v;
  d.X.resize(N, 2);
  d.Z = MatrixXd::Ones(N, 1);
  MatrixXd W(N, config.U);
  Index row = 0;
  VectorXd coef(spline.cols());
  for (Index i = 0; i < config.I; ++i) {
    for (Index j = 0; j < visits[static_cast<std::size_t>(i)]; ++j, ++row) {
      d.subject_id.push_back(static_cast<long>(i + 1));
      d.visit_id.push_back(static_cast<long>(j + 1));
      d.X(row, 0) = 1.0;
      d.X(row, 1) = 5.0 * n01(rng);
      for (Index c = 0; c < coef.size(); ++c) coef(c) = n01(rng);
      W.row(row) = (spline * coef).transpose();
    }
  }
  d.W = {W};

  const MatrixXd fixed = linear_predictor(d, truth);  // random effects still empty
  MatrixXd random(N, config.L);
  const MatrixXd subject_curves = scores * (MatrixXd(2, config.L) << truth.psi1.transpose(), truth.psi2.transpose()).finished();
  const SubjectIndex subjects = index_subjects(d.subject_id);
  for (Index r = 0; r < N; ++r) random.row(r) = subject_curves.row(subjects.row_subject(r));
  truth.random_scale = sample_sd(fixed) / (config.snr_b * sample_sd(random));
  truth.random_effects = truth.random_scale * subject_curves;

  const MatrixXd eta = fixed + truth.random_scale * random;
  truth.sigma_eps = sample_sd(eta) / config.snr_eps;
  d.Y.resize(N, config.L);
  for (Index r = 0; r < N; ++r)
    for (Index l = 0; l < config.L; ++l) d.Y(r, l) = eta(r, l) + truth.sigma_eps * n01(rng);
  return {std::move(d), std::move(truth)};
}

MatrixXd linear_predictor(const FunctionalDataset& d, const GroundTruth& truth) {
  const VectorXd wu = trapezoid_weights(truth.grid_u);
  MatrixXd eta = d.X.col(0) * truth.beta0.transpose() + d.X.col(1) * truth.beta1.transpose() +
                 d.W[0] * wu.asDiagonal() * truth.gamma;
  if (truth.random_effects.size() > 0) {
    const SubjectIndex subjects = index_subjects(d.subject_id);
    for (Index r = 0; r < eta.rows(); ++r) eta.row(r) += truth.random_effects.row(subjects.row_subject(r));
  }
  return eta;
}

double ise_scalar(const VectorXd& estimate, const VectorXd& truth, const VectorXd& grid) {
  if (estimate.size() != truth.size() || truth.size() != grid.size()) {
    throw Error(ErrorCode::ShapeMismatch, "estimate, truth and grid differ in length");
  }
  return (estimate - truth).cwiseAbs2().dot(trapezoid_weights(grid));
}

double ise_surface(const MatrixXd& estimate, const MatrixXd& truth, const VectorXd& grid_u, const VectorXd& grid_s) {
  if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols() || truth.rows() != grid_u.size() ||
      truth.cols() != grid_s.size()) {
    throw Error(ErrorCode::ShapeMismatch, "surface shapes differ");
  }
  return trapezoid_weights(grid_u).dot((estimate - truth).cwiseAbs2() * trapezoid_weights(grid_s));
}

double coverage(const ConfidenceBand& band, const MatrixXd& truth) {
  if (band.lower.rows() != truth.rows() || band.lower.cols() != truth.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "band and truth differ in shape");
  }
  const auto inside = (band.lower.array() <= truth.array()) && (truth.array() <= band.upper.array());
  return static_cast<double>(inside.count()) / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------

std::uint64_t replicate_seed(std::uint64_t seed, int replicate) {
  return derive_seed(seed, static_cast<std::uint64_t>(replicate));
}

ReplicateMetrics run_replicate(const StudyScenario& scenario, int replicate) {
  ReplicateMetrics m;
  m.scenario = scenario.name;
  m.replicate = replicate;
  m.seed = replicate_seed(scenario.sim.seed, replicate);
  const auto start = std::chrono::steady_clock::now();
  try {
    SimConfig sim = scenario.sim;
    sim.seed = m.seed;
    const auto [d, truth] = generate_dataset(sim);
    const ModelFit fit = fit_model(d, scenario.pipeline, 1);
    const FitResult& r = fit.result;
    m.ise_beta0 = ise_scalar(r.beta_smooth.row(0).transpose(), truth.beta0, d.grid_s);
    m.ise_beta1 = ise_scalar(r.beta_smooth.row(1).transpose(), truth.beta1, d.grid_s);
    m.ise_gamma = ise_surface(r.gamma_smooth[0], truth.gamma, d.grid_u[0], d.grid_s);
    m.ise_gamma_raw = ise_surface(r.gamma_hat[0], truth.gamma, d.grid_u[0], d.grid_s);
    const MatrixXd beta1 = truth.beta1.transpose();
    if (scenario.methods.analytic) {
      InferenceConfig inf = scenario.inference;
      inf.seed = derive_seed(m.seed, 1);
      const InferenceResult a = analytic_inference(d, fit, scenario.pipeline.smoothing, inf);
      m.cov_gamma_analytic = coverage(a.surface[0], truth.gamma);
      m.cov_beta1_analytic = coverage(a.scalar[1], beta1);
      m.cov_beta1_cma_analytic = coverage(a.scalar_cma[1], beta1);
    }
    if (scenario.methods.bootstrap) {
      InferenceConfig inf = scenario.inference;
      inf.seed = derive_seed(m.seed, 2);
      const BootstrapEstimates reps = bootstrap(d, scenario.pipeline, inf.B, inf.seed, 1);
      const InferenceResult b = bootstrap_inference(fit, reps, inf);
      m.cov_gamma_bootstrap = coverage(b.surface[0], truth.gamma);
      m.cov_beta1_bootstrap = coverage(b.scalar[1], beta1);
      m.cov_beta1_cma_bootstrap = coverage(b.scalar_cma[1], beta1);
    }
    m.ok = true;
  } catch (const Error& e) {
    m.ok = false;
    m.error = e.what();
  }
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

namespace {

const char* kReplicateHeader =
    "scenario,replicate,seed,ok,ise_beta0,ise_beta1,ise_gamma,ise_gamma_raw,cov_gamma_analytic,cov_beta1_analytic,"
    "cov_beta1_cma_analytic,cov_gamma_bootstrap,cov_beta1_bootstrap,cov_beta1_cma_bootstrap,seconds,error";

std::string csv_text(std::string text) {
  for (auto& c : text)
    if (c == ',' || c == '\n' || c == '"') c = ' ';
  return text;
}

std::string replicate_row(const ReplicateMetrics& m) {
  std::ostringstream out;
  out << m.scenario << ',' << m.replicate << ',' << m.seed << ',' << (m.ok ? 1 : 0) << ','
      << format_double(m.ise_beta0) << ',' << format_double(m.ise_beta1) << ',' << format_double(m.ise_gamma) << ','
      << format_double(m.ise_gamma_raw) << ',' << format_double(m.cov_gamma_analytic) << ','
      << format_double(m.cov_beta1_analytic) << ',' << format_double(m.cov_beta1_cma_analytic) << ','
      << format_double(m.cov_gamma_bootstrap) << ',' << format_double(m.cov_beta1_bootstrap) << ','
      << format_double(m.cov_beta1_cma_bootstrap) << ',' << format_double(m.seconds) << ',' << csv_text(m.error);
  return out.str();
}

}  // namespace

void write_replicates_csv(const std::filesystem::path& path, const std::vector<ReplicateMetrics>& rows) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << kReplicateHeader << '\n';
  for (const auto& m : rows) out << replicate_row(m) << '\n';
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

ScenarioSummary summarize(const std::string& name, const std::vector<ReplicateMetrics>& replicates, bool analytic,
                          bool bootstrap) {
  ScenarioSummary s;
  s.name = name;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& m : replicates) {
    if (m.scenario != name) continue;
    if (!m.ok) {
      ++s.failed;
      continue;
    }
    ++s.completed;
    s.mise_beta0 += m.ise_beta0;
    s.mise_beta1 += m.ise_beta1;
    s.mise_gamma += m.ise_gamma;
    s.mise_gamma_raw += m.ise_gamma_raw;
    s.cov_gamma_analytic += m.cov_gamma_analytic;
    s.cov_beta1_analytic += m.cov_beta1_analytic;
    s.cov_beta1_cma_analytic += m.cov_beta1_cma_analytic;
    s.cov_gamma_bootstrap += m.cov_gamma_bootstrap;
    s.cov_beta1_bootstrap += m.cov_beta1_bootstrap;
    s.cov_beta1_cma_bootstrap += m.cov_beta1_cma_bootstrap;
    s.mean_seconds += m.seconds;
  }
  const double n = s.completed > 0 ? static_cast<double>(s.completed) : nan;
  for (double* v : {&s.mise_beta0, &s.mise_beta1, &s.mise_gamma, &s.mise_gamma_raw, &s.cov_gamma_analytic,
                    &s.cov_beta1_analytic, &s.cov_beta1_cma_analytic, &s.cov_gamma_bootstrap, &s.cov_beta1_bootstrap,
                    &s.cov_beta1_cma_bootstrap, &s.mean_seconds}) {
    *v /= n;
  }
  if (!analytic) s.cov_gamma_analytic = s.cov_beta1_analytic = s.cov_beta1_cma_analytic = nan;
  if (!bootstrap) s.cov_gamma_bootstrap = s.cov_beta1_bootstrap = s.cov_beta1_cma_bootstrap = nan;
  return s;
}

StudyReport run_study(const std::vector<StudyScenario>& scenarios, const StudyOptions& options) {
  for (const auto& sc : scenarios) {
    validate(sc.sim);
    validate(sc.pipeline);
    validate(sc.inference);
  }
  if (options.n_sims < 1) throw Error(ErrorCode::InvalidArgument, "n_sims must be positive");
  const Index total = static_cast<Index>(scenarios.size()) * options.n_sims;
  std::vector<std::optional<ReplicateMetrics>> slots(static_cast<std::size_t>(total));

  std::ofstream stream;
  std::mutex stream_mutex;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    stream.open(*options.out_dir / "replicates.csv");
    if (!stream) throw Error(ErrorCode::Io, "cannot write " + (*options.out_dir / "replicates.csv").string());
    stream << kReplicateHeader << '\n' << std::flush;
  }
  parallel_for(total, options.workers, [&](Index t) {
    if (options.stop && options.stop->load()) return;
    const auto& sc = scenarios[static_cast<std::size_t>(t / options.n_sims)];
    ReplicateMetrics m = run_replicate(sc, static_cast<int>(t % options.n_sims));
    {
      const std::lock_guard<std::mutex> lock(stream_mutex);
      if (stream.is_open()) stream << replicate_row(m) << '\n' << std::flush;
      if (options.progress) options.progress(m);
    }
    slots[static_cast<std::size_t>(t)] = std::move(m);
  });

  StudyReport report;
  for (auto& slot : slots) {
    if (slot) {
      report.replicates.push_back(std::move(*slot));
    } else {
      report.interrupted = true;
    }
  }
  for (const auto& sc : scenarios) {
    report.summary.push_back(summarize(sc.name, report.replicates, sc.methods.analytic, sc.methods.bootstrap));
  }
  if (options.out_dir) {
    stream.close();
    write_replicates_csv(*options.out_dir / "replicates.csv", report.replicates);
    write_summary_csv(*options.out_dir / "summary.csv", report.summary);
  }
  return report;
}

void check_failures(const StudyReport& report) {
  for (const auto& s : report.summary) {
    const int attempted = s.completed + s.failed;
    if (attempted > 0 && s.failed > kMaxFailureFraction * attempted) {
      throw Error(ErrorCode::TooManyFailures, "scenario " + s.name + ": " + std::to_string(s.failed) + " of " +
                                                  std::to_string(attempted) + " replicates failed");
    }
  }
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<ScenarioSummary>& rows) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "scenario,completed,failed,mise_beta0,mise_beta1,mise_gamma,mise_gamma_raw,cov_gamma_analytic,"
         "cov_beta1_analytic,cov_beta1_cma_analytic,cov_gamma_bootstrap,cov_beta1_bootstrap,cov_beta1_cma_bootstrap,"
         "mean_seconds\n";
  for (const auto& s : rows) {
    out << s.name << ',' << s.completed << ',' << s.failed;
    for (const double v : {s.mise_beta0, s.mise_beta1, s.mise_gamma, s.mise_gamma_raw, s.cov_gamma_analytic,
                           s.cov_beta1_analytic, s.cov_beta1_cma_analytic, s.cov_gamma_bootstrap,
                           s.cov_beta1_bootstrap, s.cov_beta1_cma_bootstrap, s.mean_seconds}) {
      out << ',' << format_double(v);
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

std::string format_summary_table(const std::vector<ScenarioSummary>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(22) << "scenario" << std::right << std::setw(6) << "ok" << std::setw(6) << "fail"
      << std::setw(11) << "MISE g" << std::setw(11) << "MISE b1" << std::setw(9) << "g(an)" << std::setw(9)
      << "b1(an)" << std::setw(9) << "b1 CMA" << std::setw(9) << "g(bs)" << std::setw(9) << "b1(bs)" << std::setw(9)
      << "sec" << '\n';
  out << std::fixed;
  for (const auto& s : rows) {
    out << std::left << std::setw(22) << s.name << std::right << std::setw(6) << s.completed << std::setw(6)
        << s.failed << std::setprecision(5) << std::setw(11) << s.mise_gamma << std::setw(11) << s.mise_beta1
        << std::setprecision(3) << std::setw(9) << s.cov_gamma_analytic << std::setw(9) << s.cov_beta1_analytic
        << std::setw(9) << s.cov_beta1_cma_analytic << std::setw(9) << s.cov_gamma_bootstrap << std::setw(9)
        << s.cov_beta1_bootstrap << std::setprecision(2) << std::setw(9) << s.mean_seconds << '\n';
  }
  return out.str();
}

}  // namespace elffr
