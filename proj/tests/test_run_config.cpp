#include <doctest.h>

#include <elffr/run_config.hpp>

#include <string>

using namespace elffr;

namespace {

std::string error_text(const std::string& json) {
  try {
    parse_run_config(json);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidArgument);
    return e.what();
  }
  FAIL("config accepted");
  return "";
}

}  // namespace

TEST_CASE("run config defaults") {
  const RunConfig c = parse_run_config("{}");
  CHECK(c.pipeline.model.K_w == 15);
  CHECK(c.pipeline.model.K_g == 15);
  CHECK(c.pipeline.smoothing.knots_s == 10);
  CHECK(c.pipeline.smoothing.knots_u == 5);
  CHECK(c.inference.B == 300);
  CHECK(c.inference.cma_samples == 10000);
  CHECK(c.inference.level == 0.95);
  CHECK(study_scenarios(c).size() == 1);
}

TEST_CASE("run config sections and scenarios") {
  const RunConfig c = parse_run_config(R"({
    "seed": 9, "method": "both", "n_sims": 3,
    "sim": {"I": 50, "SNR_eps": 2.0},
    "model": {"Kw": 6, "lambda": 0.5},
    "inference": {"beta_covariance": "mom", "cma_sampling": "marginal"},
    "scenarios": [{"name": "small"}, {"name": "big", "sim": {"I": 200}, "smoothing": {"knots_u": 12}}]
  })");
  CHECK(c.sim.seed == 9);
  CHECK(c.inference.seed == 9);
  CHECK(c.sim.I == 50);
  CHECK(c.sim.snr_eps == 2.0);
  CHECK(c.pipeline.model.lambda_selection == LambdaSelection::Fixed);
  CHECK(c.pipeline.model.fixed_lambda == 0.5);
  CHECK(c.inference.beta_covariance == CovarianceMethod::MethodOfMoments);
  CHECK(c.inference.cma_sampling == CmaSampling::Marginal);
  const auto sc = study_scenarios(c);
  REQUIRE(sc.size() == 2);
  CHECK(sc[0].sim.I == 50);
  CHECK(sc[1].sim.I == 200);
  CHECK(sc[1].sim.snr_eps == 2.0);
  CHECK(sc[1].pipeline.smoothing.knots_u == 12);
  CHECK(sc[1].methods.analytic);
  CHECK(sc[1].methods.bootstrap);

  // the canonical dump parses back to the same settings
  const RunConfig back = parse_run_config(to_json(c));
  CHECK(to_json(back) == to_json(c));
}

TEST_CASE("run config errors name the key") {
  CHECK(error_text(R"({"sim": {"SNR_eps": -1}})").find("SNR_eps") != std::string::npos);
  CHECK(error_text(R"({"sim": {"snr": 1}})").find("sim.snr") != std::string::npos);
  CHECK(error_text(R"({"colour": 1})").find("colour") != std::string::npos);
  CHECK(error_text(R"({"model": {"Kw": "many"}})").find("model.Kw") != std::string::npos);
  CHECK(error_text(R"({"method": "guess"})").find("method") != std::string::npos);
  CHECK(error_text(R"({"scenarios": [{"name": "a", "extra": 1}]})").find("scenarios[0].extra") !=
        std::string::npos);
  CHECK(error_text("{not json").find("JSON") != std::string::npos);
}
