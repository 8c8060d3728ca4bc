#pragma once

// L∞-bounded perturbation attacks on a predictor's observed history.

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "robusttraj/model.hpp"
#include "robusttraj/scene.hpp"

namespace robusttraj::attack {

enum class Kind { None, Naive, Deterministic, Latent, Context, Sequence };
const char* to_string(Kind k);
Kind kind_from_string(const std::string& s);

// The attack needs something the model family does not provide.
class UnsupportedAttack : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ThreatModel {
  double epsilon = 0.5;  // meters
  // Perturb every agent instead of only the scene's adversarial agent.
  bool all_agents = false;
};

struct AttackConfig {
  std::size_t steps = 20;
  // Initial step size; negative means ε/4.
  double alpha = -1.0;
  std::size_t patience = 5;
  // Step size never drops below ε·alpha_floor.
  double alpha_floor = 0.01;
  bool random_init = false;
  std::uint64_t seed = 0;
  // Candidates drawn by the naive objective.
  std::size_t K = 5;
  // Stochastic draws per window in the sequence attack; 0 decodes at the
  // deterministic latent instead.
  std::size_t eot_draws = 4;
  std::size_t sequence_frames = 2;  // L_p
};

// Defaults used by evaluation for each kind. Latent and context objectives
// have a stationary minimum at δ = 0, so they start from a seeded random
// point inside the ball.
AttackConfig default_config(Kind k);

ad::Tensor project_linf(const ad::Tensor& delta, double eps);

// 1 for perturbable coordinates, 0 elsewhere; N × 2L.
ad::Tensor attack_mask(std::size_t agents, std::size_t frames, std::size_t adversarial_agent, bool all_agents);

// Objective to maximise. `delta` is the masked perturbation (a graph leaf),
// `step` is the PGD iteration, for objectives that reseed per step.
using Objective = std::function<ad::Var(ad::Graph& g, ad::Var delta, std::size_t step)>;

struct PgdResult {
  ad::Tensor delta;
  std::vector<double> trace;  // best-so-far objective after each step
  double best = 0.0;
  double initial = 0.0;  // objective at the starting point
};

// Sign-gradient ascent with L∞ projection and adaptive step halving.
// Throws NumericalError on a non-finite gradient.
PgdResult pgd(const Objective& objective, const ad::Tensor& mask, double eps, const AttackConfig& cfg);

// Count of projections that left ‖δ‖∞ > ε or touched a masked coordinate,
// accumulated over the process.
std::size_t threat_violations();

// ---- objectives ----------------------------------------------------------------
// X, Y are N×2H and N×2T row matrices; all objectives bind the model's
// parameters as constants.

Objective objective_naive(const model::TrajectoryModel& m, const ad::Tensor& X, const ad::Tensor& Y, std::size_t K,
                          std::uint64_t seed);
Objective objective_deterministic(const model::TrajectoryModel& m, const ad::Tensor& X, const ad::Tensor& Y);
Objective objective_latent(const model::TrajectoryModel& m, const ad::Tensor& X, const ad::Tensor& Y);
Objective objective_context(const model::TrajectoryModel& m, const ad::Tensor& X);

// One scene whose history spans H + L_p frames. Window w (0..L_p) observes
// frames [w, w+H) and is scored on the T frames after it.
struct SequenceScenario {
  ad::Tensor track;  // N × (H + L_p + T) × 2
  std::size_t history_len = 0;
  std::size_t frames = 0;  // L_p
  std::size_t future_len = 0;

  static SequenceScenario from_scene(const Scene& s, std::size_t history_len);
  std::size_t window_count() const { return frames + 1; }
  ad::Tensor window_history(std::size_t w) const;  // N × 2H rows
  ad::Tensor window_future(std::size_t w) const;   // N × 2T rows
};

// Sum over windows sharing one δ_seq (N × 2(H+L_p)) of the per-window loss,
// averaged over `eot_draws` seeded latent draws (deterministic latent if 0).
Objective objective_sequence(const model::TrajectoryModel& m, const SequenceScenario& sc, std::size_t eot_draws,
                             std::uint64_t seed);

// ---- scene-level driver ----------------------------------------------------------

struct AttackResult {
  std::string scene_id;
  Kind kind = Kind::None;
  double epsilon = 0.0;
  std::size_t steps = 0;
  PgdResult pgd;
  ad::Tensor perturbed_history;  // N×H×2
};

// Runs `kind` against one scene. Kind::None returns a zero perturbation.
// Sequence attacks use the last H frames of a longer scene history.
AttackResult run_attack(const model::TrajectoryModel& m, const Scene& scene, Kind kind, const ThreatModel& threat,
                        const AttackConfig& cfg);

nlohmann::json to_json(const AttackResult& r);

}  // namespace robusttraj::attack
