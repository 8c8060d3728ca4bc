#pragma once

// Experiment configuration (one JSON document covering every module), its
// resolution from file plus overrides, and the command-line front end.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "robusttraj/attacks.hpp"
#include "robusttraj/augmentation.hpp"
#include "robusttraj/planner.hpp"
#include "robusttraj/probe.hpp"
#include "robusttraj/scene.hpp"
#include "robusttraj/training.hpp"

namespace robusttraj::experiment {

inline constexpr int kConfigFormatVersion = 1;

struct DataConfig {
  GeneratorConfig generator;
  std::size_t train = 512;
  std::size_t val = 0;
  std::size_t test = 128;
};

// Evaluation-time attack settings.
struct AttackSettings {
  attack::Kind kind = attack::Kind::Deterministic;
  std::vector<double> eps{0.5, 1.0};
  std::size_t steps = 20;
  std::size_t K = 5;  // prediction samples scored per scene
  bool all_agents = false;
};

struct SimulateSettings {
  double epsilon = 1.0;
  std::size_t frames = 6;  // L_p
};

struct ProbeSettings {
  probe::ProbeConfig config;
  std::vector<probe::NoiseKind> kinds{probe::NoiseKind::SaltPepper, probe::NoiseKind::Adversarial};
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  DataConfig data;
  train::TrainConfig train;
  AttackSettings attack;
  augment::AugConfig augment;
  planner::PlannerConfig planner;
  SimulateSettings simulate;
  ProbeSettings probe;
  // Shared by augmentation and the planner.
  bicycle::Limits limits;

  // The fully resolved document, every field present.
  nlohmann::json to_json() const;
  // Strict: unknown keys and wrong types are rejected with their path.
  // Absent fields take defaults; module seeds default to streams derived
  // from `seed`.
  static ExperimentConfig from_json(const nlohmann::json& j);
  // 16 hex digits over the resolved document, excluding out_dir.
  std::string digest() const;
};

// Seed fan-out used for absent module seeds.
std::uint64_t module_seed(std::uint64_t global, const std::string& module);

// Applies "a.b.c=value" overrides (value parsed as JSON, else taken as a
// string) to `file`, then resolves. ROBUSTTRAJ_OUT, when set, replaces
// out_dir last.
ExperimentConfig resolve_config(const nlohmann::json& file, const std::vector<std::string>& overrides);
nlohmann::json read_config_file(const std::filesystem::path& path);

// Aligned-text and CSV comparison of training runs: one row per regime,
// averaged over the runs (seeds) found, at the given attacked ε.
struct ReportRow {
  std::string regime;
  std::size_t runs = 0;
  double ade = 0.0, fde = 0.0, robust_ade = 0.0, robust_fde = 0.0, drift = 0.0;
};
std::vector<ReportRow> compare_runs(const std::vector<train::RunReport>& runs, double eps, const std::string& attack);
std::string report_table(const std::vector<ReportRow>& rows, double eps);
inline constexpr const char* kReportCsvHeader = "regime,runs,ade,fde,robust_ade,robust_fde,drift";
std::string report_csv(const std::vector<ReportRow>& rows);

// Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);

}  // namespace robusttraj::experiment
