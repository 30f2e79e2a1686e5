#pragma once

#include <elffr/simulation.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace elffr {

enum class InferenceMethod { Analytic, Bootstrap, Both };

/// Parameters shared by every command. Loaded from a JSON file whose
/// sections mirror the structs below; command-line flags override it.
struct RunConfig {
  std::uint64_t seed = 1;
  int workers = 0;  // 0: ELFFR_WORKERS, else hardware threads
  std::string family = "gaussian";
  SimConfig sim;
  PipelineConfig pipeline;
  InferenceConfig inference;
  InferenceMethod method = InferenceMethod::Analytic;
  int n_sims = 1;
  std::vector<StudyScenario> scenarios;  // empty: one scenario built from the sections above
};

/// Throws InvalidArgument naming the offending key for unknown keys, wrong
/// types and out-of-range values.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Pushes `seed` into the simulation and inference seeds of the base config.
void apply_seed(RunConfig& config, std::uint64_t seed);

/// Range checks across all sections.
void validate(const RunConfig& config);

/// Scenarios to run, each with its own sim/pipeline/inference settings.
std::vector<StudyScenario> study_scenarios(const RunConfig& config);

/// Canonical JSON of the effective settings, for manifests.
std::string to_json(const RunConfig& config);

std::string to_string(InferenceMethod method);

}  // namespace elffr
