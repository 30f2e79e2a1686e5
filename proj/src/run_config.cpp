#include <elffr/run_config.hpp>

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace elffr {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw Error(ErrorCode::InvalidArgument, "config key " + key + ": " + what);
}

void check_keys(const json& obj, const std::string& where, const std::set<std::string>& allowed) {
  if (!obj.is_object()) bad(where.empty() ? "<root>" : where, "expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) bad(where.empty() ? key : where + "." + key, "unknown key");
  }
}

template <typename T>
void read(const json& obj, const std::string& where, const char* key, T& out) {
  if (!obj.contains(key)) return;
  const std::string name = where.empty() ? std::string(key) : where + "." + key;
  const json& v = obj.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) bad(name, "expected true or false");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) bad(name, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.get<long long>() < 0) bad(name, "must be nonnegative");
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) bad(name, "expected a number");
  } else {
    if (!v.is_string()) bad(name, "expected a string");
  }
  out = v.get<T>();
}

CovarianceMethod covariance_method(const std::string& name, const std::string& key) {
  if (name == "mom") return CovarianceMethod::MethodOfMoments;
  if (name == "marginal") return CovarianceMethod::Marginal;
  if (name == "raw") return CovarianceMethod::RawOutcome;
  bad(key, "expected mom, marginal or raw, got '" + name + "'");
}

std::string covariance_name(CovarianceMethod m) {
  switch (m) {
    case CovarianceMethod::MethodOfMoments: return "mom";
    case CovarianceMethod::Marginal: return "marginal";
    case CovarianceMethod::RawOutcome: return "raw";
  }
  return "mom";
}

InferenceMethod inference_method(const std::string& name, const std::string& key) {
  if (name == "analytic") return InferenceMethod::Analytic;
  if (name == "bootstrap") return InferenceMethod::Bootstrap;
  if (name == "both") return InferenceMethod::Both;
  bad(key, "expected analytic, bootstrap or both, got '" + name + "'");
}

void read_sim(const json& obj, const std::string& where, SimConfig& sim) {
  check_keys(obj, where, {"I", "J", "L", "U", "SNR_B", "SNR_eps", "poisson_visits", "seed"});
  read(obj, where, "I", sim.I);
  read(obj, where, "J", sim.J);
  read(obj, where, "L", sim.L);
  read(obj, where, "U", sim.U);
  read(obj, where, "SNR_B", sim.snr_b);
  read(obj, where, "SNR_eps", sim.snr_eps);
  read(obj, where, "poisson_visits", sim.poisson_visits);
  read(obj, where, "seed", sim.seed);
}

void read_model(const json& obj, const std::string& where, PointwiseModelConfig& m) {
  check_keys(obj, where, {"Kw", "Kg", "lambda", "random_effects", "presmooth_predictors", "presmooth_knots",
                          "max_reml_iter", "reml_tol"});
  read(obj, where, "Kw", m.K_w);
  read(obj, where, "Kg", m.K_g);
  if (obj.contains("lambda")) {
    const json& v = obj.at("lambda");
    if (v.is_string() && v.get<std::string>() == "reml") {
      m.lambda_selection = LambdaSelection::MixedModelReml;
    } else if (v.is_number()) {
      m.lambda_selection = LambdaSelection::Fixed;
      m.fixed_lambda = v.get<double>();
    } else {
      bad(where + ".lambda", "expected \"reml\" or a number");
    }
  }
  read(obj, where, "random_effects", m.random_effects);
  read(obj, where, "presmooth_predictors", m.presmooth_predictors);
  read(obj, where, "presmooth_knots", m.presmooth_knots);
  read(obj, where, "max_reml_iter", m.max_reml_iter);
  read(obj, where, "reml_tol", m.reml_tol);
}

void read_smoothing(const json& obj, const std::string& where, SmoothingConfig& s) {
  check_keys(obj, where, {"beta_knots", "knots_s", "knots_u"});
  read(obj, where, "beta_knots", s.beta_knots);
  read(obj, where, "knots_s", s.knots_s);
  read(obj, where, "knots_u", s.knots_u);
}

void read_inference(const json& obj, const std::string& where, InferenceConfig& inf) {
  check_keys(obj, where, {"level", "B", "cma_N", "cma_sampling", "beta_covariance", "gamma_covariance",
                          "smooth_covariance", "seed"});
  read(obj, where, "level", inf.level);
  read(obj, where, "B", inf.B);
  read(obj, where, "cma_N", inf.cma_samples);
  if (obj.contains("cma_sampling")) {
    std::string s;
    read(obj, where, "cma_sampling", s);
    if (s == "joint") {
      inf.cma_sampling = CmaSampling::Joint;
    } else if (s == "marginal") {
      inf.cma_sampling = CmaSampling::Marginal;
    } else {
      bad(where + ".cma_sampling", "expected joint or marginal");
    }
  }
  for (const char* key : {"beta_covariance", "gamma_covariance"}) {
    if (!obj.contains(key)) continue;
    std::string s;
    read(obj, where, key, s);
    const CovarianceMethod m = covariance_method(s, where + "." + key);
    (std::string(key) == "beta_covariance" ? inf.beta_covariance : inf.gamma_covariance) = m;
  }
  read(obj, where, "smooth_covariance", inf.smooth_covariance);
  read(obj, where, "seed", inf.seed);
}

StudyMethods methods_for(InferenceMethod m) {
  return {m != InferenceMethod::Bootstrap, m != InferenceMethod::Analytic};
}

}  // namespace

std::string to_string(InferenceMethod method) {
  switch (method) {
    case InferenceMethod::Analytic: return "analytic";
    case InferenceMethod::Bootstrap: return "bootstrap";
    case InferenceMethod::Both: return "both";
  }
  return "analytic";
}

void apply_seed(RunConfig& config, std::uint64_t seed) {
  config.seed = seed;
  config.sim.seed = seed;
  config.inference.seed = seed;
}

RunConfig parse_run_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(root, "", {"description", "seed", "workers", "family", "method", "n_sims", "sim", "model", "smoothing",
                        "inference", "scenarios"});
  RunConfig cfg;
  if (root.contains("seed")) {
    std::uint64_t seed = 1;
    read(root, "", "seed", seed);
    apply_seed(cfg, seed);
  }
  read(root, "", "workers", cfg.workers);
  read(root, "", "family", cfg.family);
  if (root.contains("method")) {
    std::string m;
    read(root, "", "method", m);
    cfg.method = inference_method(m, "method");
  }
  read(root, "", "n_sims", cfg.n_sims);
  if (root.contains("sim")) read_sim(root.at("sim"), "sim", cfg.sim);
  if (root.contains("model")) read_model(root.at("model"), "model", cfg.pipeline.model);
  if (root.contains("smoothing")) read_smoothing(root.at("smoothing"), "smoothing", cfg.pipeline.smoothing);
  if (root.contains("inference")) read_inference(root.at("inference"), "inference", cfg.inference);

  if (root.contains("scenarios")) {
    const json& list = root.at("scenarios");
    if (!list.is_array()) bad("scenarios", "expected an array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::string where = "scenarios[" + std::to_string(i) + "]";
      const json& s = list[i];
      check_keys(s, where, {"name", "seed", "method", "sim", "model", "smoothing", "inference"});
      StudyScenario sc;
      sc.name = "scenario_" + std::to_string(i + 1);
      read(s, where, "name", sc.name);
      sc.sim = cfg.sim;
      sc.pipeline = cfg.pipeline;
      sc.inference = cfg.inference;
      InferenceMethod method = cfg.method;
      if (s.contains("seed")) {
        std::uint64_t seed = 1;
        read(s, where, "seed", seed);
        sc.sim.seed = sc.inference.seed = seed;
      }
      if (s.contains("method")) {
        std::string m;
        read(s, where, "method", m);
        method = inference_method(m, where + ".method");
      }
      sc.methods = methods_for(method);
      if (s.contains("sim")) read_sim(s.at("sim"), where + ".sim", sc.sim);
      if (s.contains("model")) read_model(s.at("model"), where + ".model", sc.pipeline.model);
      if (s.contains("smoothing")) read_smoothing(s.at("smoothing"), where + ".smoothing", sc.pipeline.smoothing);
      if (s.contains("inference")) read_inference(s.at("inference"), where + ".inference", sc.inference);
      cfg.scenarios.push_back(std::move(sc));
    }
  }
  validate(cfg);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

void validate(const RunConfig& config) {
  if (config.workers < 0) bad("workers", "must be nonnegative");
  if (config.n_sims < 1) bad("n_sims", "must be positive");
  if (config.family.empty()) bad("family", "must not be empty");
  validate(config.sim);
  validate(config.pipeline);
  validate(config.inference);
  for (const auto& sc : config.scenarios) {
    validate(sc.sim);
    validate(sc.pipeline);
    validate(sc.inference);
  }
}

std::vector<StudyScenario> study_scenarios(const RunConfig& config) {
  if (!config.scenarios.empty()) return config.scenarios;
  StudyScenario sc;
  sc.name = "default";
  sc.sim = config.sim;
  sc.pipeline = config.pipeline;
  sc.inference = config.inference;
  sc.methods = methods_for(config.method);
  return {sc};
}

namespace {

json sim_json(const SimConfig& s) {
  return {{"I", s.I}, {"J", s.J}, {"L", s.L}, {"U", s.U}, {"SNR_B", s.snr_b}, {"SNR_eps", s.snr_eps},
          {"poisson_visits", s.poisson_visits}, {"seed", s.seed}};
}

json model_json(const PointwiseModelConfig& m) {
  json lambda = m.lambda_selection == LambdaSelection::Fixed ? json(m.fixed_lambda) : json("reml");
  return {{"Kw", m.K_w},
          {"Kg", m.K_g},
          {"lambda", lambda},
          {"random_effects", m.random_effects},
          {"presmooth_predictors", m.presmooth_predictors},
          {"presmooth_knots", m.presmooth_knots},
          {"max_reml_iter", m.max_reml_iter},
          {"reml_tol", m.reml_tol}};
}

json smoothing_json(const SmoothingConfig& s) {
  return {{"beta_knots", s.beta_knots}, {"knots_s", s.knots_s}, {"knots_u", s.knots_u}};
}

json inference_json(const InferenceConfig& i) {
  return {{"level", i.level},
          {"B", i.B},
          {"cma_N", i.cma_samples},
          {"cma_sampling", i.cma_sampling == CmaSampling::Joint ? "joint" : "marginal"},
          {"beta_covariance", covariance_name(i.beta_covariance)},
          {"gamma_covariance", covariance_name(i.gamma_covariance)},
          {"smooth_covariance", i.smooth_covariance},
          {"seed", i.seed}};
}

}  // namespace

std::string to_json(const RunConfig& c) {
  json root = {{"seed", c.seed},
               {"workers", c.workers},
               {"family", c.family},
               {"method", to_string(c.method)},
               {"n_sims", c.n_sims},
               {"sim", sim_json(c.sim)},
               {"model", model_json(c.pipeline.model)},
               {"smoothing", smoothing_json(c.pipeline.smoothing)},
               {"inference", inference_json(c.inference)}};
  if (!c.scenarios.empty()) {
    json list = json::array();
    for (const auto& sc : c.scenarios) {
      const InferenceMethod m = sc.methods.analytic && sc.methods.bootstrap ? InferenceMethod::Both
                                : sc.methods.bootstrap                    ? InferenceMethod::Bootstrap
                                                                          : InferenceMethod::Analytic;
      list.push_back({{"name", sc.name},
                      {"method", to_string(m)},
                      {"sim", sim_json(sc.sim)},
                      {"model", model_json(sc.pipeline.model)},
                      {"smoothing", smoothing_json(sc.pipeline.smoothing)},
                      {"inference", inference_json(sc.inference)}});
    }
    root["scenarios"] = list;
  }
  return root.dump(2);
}

}  // namespace elffr
