#pragma once

// Feasible data augmentation: each agent's trajectory is refit as a kinematic
// bicycle rollout, then its controls are optimised to push the path in a
// seeded direction while avoiding the other agents.

#include <string>
#include <vector>

#include "robusttraj/autodiff.hpp"
#include "robusttraj/bicycle.hpp"
#include "robusttraj/scene.hpp"

namespace robusttraj::augment {

struct AugConfig {
  double gamma = 1.0;
  // Per-coordinate bound on |X_aug − X|, meters.
  double clip = 1.0;
  std::size_t steps = 60;
  // Initial step length in control space; halved on rejected steps.
  double step_size = 0.05;
  std::size_t warm_start_steps = 400;
  // Agents whose warm-start fit is worse than this (RMS, meters) are kept
  // unmodified. Must not exceed clip.
  double max_fit_rmse = 0.25;
  bicycle::Limits limits;
  // Reject steps that take an on-road point off the road.
  bool lane_check = true;
  std::uint64_t seed = 0;

  void validate() const;
};

// Unit directions in the agent frame: forward, backward, left, right.
enum class Direction { Forward, Backward, Left, Right };
const char* to_string(Direction d);

// Differentiable rollout. The initial state entries have shape {1};
// controls are vectors of length L. Returns (L+1)×2 positions; `speeds`, if
// given, receives the L post-step speeds.
struct GraphState {
  ad::Var x, y, heading, speed, curvature;
};
ad::Var rollout_graph(const GraphState& init, ad::Var curvature_rate, ad::Var accel, double dt,
                      std::vector<ad::Var>* speeds = nullptr);

// Σ_t (X − X_aug)_t · d̄ for L×2 tracks. Throws on a non-unit direction.
ad::Var loss_deviation(ad::Var X, ad::Var X_aug, Vec2 direction);
// 1/(n−1) Σ_i 1/(mean_t ‖X_aug,t − X_i,t‖ + 1); zero without neighbours.
ad::Var loss_collision(ad::Var X_aug, const std::vector<ad::Tensor>& others);

// Least-squares fit of a bicycle rollout to a track (H+T points). The
// initial position is pinned to the first point.
struct WarmStart {
  bicycle::State init;
  bicycle::ControlSequence controls;
  double rmse = 0.0;
};
WarmStart fit_controls(const std::vector<Vec2>& track, double dt, const AugConfig& cfg);

// Clamp controls so every control and the integrated curvature stay within
// bounds.
void project_controls(bicycle::ControlSequence& c, double initial_curvature, double dt, const bicycle::Limits& limits);

struct AgentLog {
  bool modified = false;
  std::string warning;
  Direction direction = Direction::Forward;
  double fit_rmse = 0.0;
  double initial_loss = 0.0;  // L_dyn at the warm start
  double final_loss = 0.0;
};

struct AugResult {
  Scene scene;
  std::vector<AgentLog> agents;
};

// Augments every agent of `scene` in index order; later agents avoid the
// already-augmented earlier ones. Deterministic in (scene, cfg, seed).
AugResult augment_scene(const Scene& scene, const AugConfig& cfg, std::uint64_t seed);

std::vector<Scene> augment_dataset(const std::vector<const Scene*>& scenes, const AugConfig& cfg, std::uint64_t seed);

// Re-rolls every stored control record and returns the largest position
// error against the scene's tracks (0 when nothing is stored).
double replay_error(const Scene& scene, const bicycle::Limits& limits = {});

}  // namespace robusttraj::augment
