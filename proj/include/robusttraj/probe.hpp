#pragma once

// Degeneration probe: trains predictors on noise-corrupted conditions and
// measures how much their samples still depend on the condition.

#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "robusttraj/model.hpp"
#include "robusttraj/scene.hpp"

namespace robusttraj::probe {

enum class NoiseKind { SaltPepper, Adversarial };
const char* to_string(NoiseKind k);
NoiseKind noise_kind_from_string(const std::string& s);

// Each coordinate independently, with probability p, is replaced by
// ±magnitude (sign drawn uniformly); the rest are kept.
ad::Tensor salt_pepper(const ad::Tensor& X, double p, std::uint64_t seed, double magnitude);

// Retrieval accuracy. samples[i] is K×T×2 and targets[i] is T×2, both
// relative to scene i's last observed position. A sample of scene i is a hit
// when its ADE to targets[i] is strictly below its ADE to every other target.
double retrieval_score(const std::vector<ad::Tensor>& samples, const std::vector<ad::Tensor>& targets);

// Retrieval accuracy of agent 0 across the probe scenes. Sample k uses the
// same latent seed in every scene. Rejects probe sets with fewer than two
// scenes or duplicated agent-0 tracks.
double condition_dependence_score(const model::TrajectoryModel& m, const std::vector<const Scene*>& probe,
                                  std::size_t K, std::uint64_t seed);

struct ProbeConfig {
  model::Family family = model::Family::Cvae;
  model::Arch arch;
  // Noise amplitude in meters: the salt-and-pepper magnitude, or the
  // adversarial ε. Strictly increasing.
  std::vector<double> levels{0.0, 0.5, 1.0, 2.0};
  double salt_pepper_p = 0.5;
  std::size_t train_scenes = 256;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::size_t inner_steps = 2;
  double inner_alpha = 0.5;  // fraction of ε
  std::size_t probe_scenes = 32;
  std::size_t K = 10;

  void validate() const;
  nlohmann::json to_json() const;
  static ProbeConfig from_json(const nlohmann::json& j);
};

struct LevelScore {
  double level = 0.0;
  double score = 0.0;
  double score_std = 0.0;  // binomial standard error over M·K samples
};

struct ProbeReport {
  NoiseKind kind = NoiseKind::SaltPepper;
  std::uint64_t seed = 0;
  std::vector<LevelScore> levels;
  // Set when the noise-free model is not clearly above chance.
  bool low_budget = false;
  std::string warning;

  nlohmann::json to_json() const;
};

// Fresh model trained on conditions corrupted by `kind` at `level`.
std::unique_ptr<model::TrajectoryModel> train_noisy(const ProbeConfig& cfg, NoiseKind kind, double level,
                                                    const std::vector<const Scene*>& train, std::uint64_t seed);

// Generates its data from `seed`, trains one model per level (concurrently)
// and scores each on the same probe set.
ProbeReport run_probe(const ProbeConfig& cfg, NoiseKind kind, std::uint64_t seed);

// Spearman rank correlation with average ranks for ties; 0 when either
// side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

inline constexpr const char* kProbeCsvHeader = "noise_kind,level,seed,score";
std::string probe_csv(const std::vector<ProbeReport>& reports, bool header = true);

}  // namespace robusttraj::probe
