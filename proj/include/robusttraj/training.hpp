#pragma once

// Training regimes (clean, naive adversarial, RobustTraj) and the
// clean/attacked evaluation harness.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "robusttraj/attacks.hpp"
#include "robusttraj/model.hpp"
#include "robusttraj/nn.hpp"
#include "robusttraj/scene.hpp"

namespace robusttraj::train {

enum class Regime { Clean, NaiveAt, RobustTraj };
const char* to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct TrainConfig {
  Regime regime = Regime::Clean;
  model::Arch arch;
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t K = 5;  // samples in the diversity term
  // Inner maximisation for the adversarial regimes.
  double inner_eps = 0.5;
  std::size_t inner_steps = 2;
  // Inner step size as a fraction of inner_eps.
  double inner_alpha = 0.5;
  double beta = 0.1;
  std::uint64_t seed = 0;
  // Mix augmented scenes into each batch at this fraction.
  bool augment = false;
  double augment_fraction = 0.5;
  // Scenes used for the per-epoch drift statistic (0 disables).
  std::size_t drift_scenes = 32;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct StepLog {
  double loss = 0.0;
  double adv = 0.0;    // L_total at X + δ (or at X for the clean regime)
  double clean = 0.0;  // L_clean, RobustTraj only
  double reg = 0.0;    // L_reg, RobustTraj only
  double disc = 0.0;   // discriminator loss, cGAN only
};

// ‖f(X+δ) − f(X)‖₂ with δ held constant; gradients reach θ only.
ad::Var loss_reg(const model::TrajectoryModel& m, const nn::Bound& b, const ad::Tensor& X, const ad::Tensor& delta);
// The family's L_total on unperturbed input.
ad::Var loss_clean(const model::TrajectoryModel& m, const nn::Bound& b, const ad::Tensor& X, const ad::Tensor& Y,
                   std::size_t K, std::uint64_t seed);

// The outer objective for one scene under the configured regime, given the
// inner perturbation (N×2H; zeros for the clean regime).
struct OuterTerms {
  ad::Var total, adv, clean, reg;
};
OuterTerms outer_loss(const model::TrajectoryModel& m, const nn::Bound& b, const Scene& s, const ad::Tensor& delta,
                      const TrainConfig& cfg, std::uint64_t seed);

// Inner maximisation for one scene; zero for the clean regime.
ad::Tensor inner_perturbation(const model::TrajectoryModel& m, const Scene& s, const TrainConfig& cfg,
                              std::uint64_t seed);

// Optimizer state for one model.
struct Trainer {
  explicit Trainer(const TrainConfig& cfg);
  nn::Adam gen;
  nn::Adam disc;
};

// One update on a batch. cGAN models take a discriminator step first.
// Throws NumericalError on a non-finite loss or gradient.
StepLog train_step(model::TrajectoryModel& m, Trainer& opt, const std::vector<const Scene*>& batch,
                   const TrainConfig& cfg, std::uint64_t seed);

struct EvalOptions {
  attack::Kind attack = attack::Kind::None;
  attack::ThreatModel threat;
  attack::AttackConfig attack_config = attack::default_config(attack::Kind::Deterministic);
  std::size_t K = 5;
  std::uint64_t seed = 0;
};

struct EvalResult {
  Metrics metrics;
  double drift = 0.0;  // mean ‖f(X+δ) − f(X)‖ over scenes
  std::size_t scenes = 0;
};

EvalResult evaluate(const model::TrajectoryModel& m, const std::vector<const Scene*>& scenes, const EvalOptions& opt);

struct EvalRow {
  std::string split;
  double eps = 0.0;
  std::string attack;
  Metrics metrics;
  double drift = 0.0;
};

struct RunReport {
  std::string run_id;
  TrainConfig config;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_drift;  // attack-time drift on training scenes
  std::vector<EvalRow> rows;
  bool partial = false;
  std::string error;

  nlohmann::json to_json() const;
  static RunReport from_json(const nlohmann::json& j);
};

struct ExperimentOptions {
  std::vector<double> eval_eps{0.5, 1.0};
  std::vector<attack::Kind> eval_attacks{attack::Kind::Deterministic};
  std::size_t eval_K = 5;
  std::uint64_t eval_seed = 0;
  // Per-epoch checkpoints go here when set.
  std::optional<std::filesystem::path> checkpoint_dir;
};

// Trains a fresh model under `cfg` (train split, plus `augmented` when
// cfg.augment) and evaluates clean and attacked on the test split.
RunReport run_experiment(const TrainConfig& cfg, const Dataset& data, const std::vector<Scene>& augmented,
                         const ExperimentOptions& opt, std::unique_ptr<model::TrajectoryModel>* trained = nullptr);

// Training only; returns the model and fills the per-epoch logs of `report`.
std::unique_ptr<model::TrajectoryModel> fit(const TrainConfig& cfg, const std::vector<const Scene*>& train,
                                            const std::vector<const Scene*>& augmented, RunReport& report,
                                            const std::optional<std::filesystem::path>& checkpoint_dir = {});

// "<regime>[_aug]-seed<n>", prefixed with "cgan_" for the cGAN family.
std::string run_label(const TrainConfig& cfg);

// Seeded permutation of [0, n), independent of the standard library.
std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed);

inline constexpr const char* kMetricsCsvHeader = "run_id,split,eps,attack,ade,fde,mr,orr";
std::string metrics_csv(const std::vector<RunReport>& reports, bool header = true);

}  // namespace robusttraj::train
