#pragma once

// Closed-loop planning harness: lattice path sampling in the lane frame,
// prediction-aware scoring, MPC tracking, and ground-truth replay of the
// other agents, optionally under a precomputed sequence attack.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "robusttraj/attacks.hpp"
#include "robusttraj/bicycle.hpp"
#include "robusttraj/geometry.hpp"
#include "robusttraj/model.hpp"
#include "robusttraj/scene.hpp"

namespace robusttraj::planner {

struct EgoState {
  Vec2 position;
  double heading = 0.0;
  double speed = 0.0;
  double curvature = 0.0;  // integration state of the bicycle model

  nlohmann::json to_json() const;
  friend bool operator==(const EgoState&, const EgoState&) = default;
};

struct PlannerConfig {
  std::size_t num_offsets = 5;  // odd
  double lateral_spacing = 1.75;
  double lookahead = 30.0;     // length of the lateral transition
  double path_length = 90.0;   // total, transition plus hold
  double waypoint_spacing = 1.0;
  // Candidate speed targets as fractions of target_speed.
  std::vector<double> speed_levels{1.0, 0.5, 0.0};
  double target_speed = 10.0;
  double w_collision = 10.0;
  double w_progress = 1.0;
  double w_offroad = 100.0;
  double sigma_collision = 2.0;
  double collision_radius = 1.0;
  std::size_t mpc_horizon = 6;
  std::size_t mpc_iters = 40;
  double mpc_speed_weight = 0.5;
  double mpc_effort_weight = 0.1;
  std::size_t K = 5;
  bicycle::Limits limits;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static PlannerConfig from_json(const nlohmann::json& j);
};

struct LatticePath {
  std::vector<Vec2> waypoints;
  int offset_index = 0;  // signed; 0 follows the route centerline
  double terminal_offset = 0.0;
  double max_curvature = 0.0;
  bool feasible = true;
};

struct Lattice {
  std::vector<LatticePath> paths;  // ordered by terminal offset
  std::string diagnostic;          // set when no paths could be built
};

// Three-point curvature of a polyline vertex.
double discrete_curvature(Vec2 a, Vec2 b, Vec2 c);

Lattice sample_lattice(const EgoState& ego, const geometry::Polyline& route, const std::vector<Polygon>& lanes,
                       const PlannerConfig& cfg);

// A path with a speed profile, sampled at the planning cadence. positions[0]
// is the ego's current position; positions[t] is t steps ahead.
struct Plan {
  std::size_t path = 0;
  double speed_target = 0.0;
  std::vector<Vec2> positions;
  std::vector<double> speeds;  // speeds[t] for t ≥ 1; speeds[0] = ego speed
  double progress = 0.0;       // meters travelled over the plan
};

Plan time_path(const LatticePath& path, std::size_t path_index, const EgoState& ego, double speed_target,
               std::size_t steps, double dt, const PlannerConfig& cfg);

struct Cost {
  double collision = 0.0;  // worst candidate of Σ_t Σ_agents exp(−d²/σ²)
  double progress = 0.0;   // fraction of the distance reachable at target speed
  double offroad = 0.0;    // 1 if any planned point leaves the lanes
  double total = 0.0;
};

// Scores a plan against all K candidates of every predicted agent.
Cost score_path(const Plan& plan, const PredictionSet& pred, const std::vector<Polygon>& lanes, double dt,
                const PlannerConfig& cfg);

struct Control {
  double accel = 0.0;
  double curvature_rate = 0.0;
};

// Receding-horizon tracking of the plan's positions and speeds by projected
// gradient descent over bound-scaled controls. Returns the first control.
Control mpc_track(const EgoState& ego, const Plan& plan, double dt, const PlannerConfig& cfg, std::uint64_t seed);
// Full brake, curvature relaxed toward zero.
Control brake_control(const EgoState& ego, double dt, const bicycle::Limits& limits);
EgoState step_ego(const EgoState& ego, const Control& u, double dt, const bicycle::Limits& limits);

// One closed-loop scenario. `scene.history` holds H + L_p frames, the first
// planning step observes frames [0, H). The ego is not part of the scene.
struct Scenario {
  std::string id;
  Scene scene;
  std::vector<Vec2> route;  // ego lane centerline
  EgoState ego;             // at frame H − 1
  std::size_t history_len = 4;
};

// Predictions for the agents given their observed window (N×H×2).
using Predictor = std::function<PredictionSet(const ad::Tensor& history, std::size_t window, std::uint64_t seed)>;

Predictor model_predictor(const model::TrajectoryModel& m, std::size_t K);
// K copies of the ground-truth future of each window.
Predictor oracle_predictor(const Scenario& sc, std::size_t K);

struct StepRecord {
  std::size_t step = 0;
  EgoState ego;  // after the step
  int chosen_path = -1;  // offset index, or -1 on fallback
  double speed_target = 0.0;
  std::string predictions_digest;
  bool collision = false;
  std::vector<Vec2> agents;  // replayed ground truth after the step
  Control control;

  nlohmann::json to_json() const;
};

struct SimOutcome {
  bool collided = false;
  std::optional<std::size_t> collision_step;
  bool offroad = false;
  double progress = 0.0;
  std::vector<StepRecord> steps;
};

// Runs L_p + 1 planning steps. `history_override`, when given, replaces the
// observed history (N×(H+L_p)×2), e.g. with an attacked one.
SimOutcome run_episode(const Scenario& sc, const Predictor& predictor, const PlannerConfig& cfg,
                       const std::optional<ad::Tensor>& history_override = std::nullopt);

struct SequenceAttack {
  double epsilon = 1.0;
  attack::AttackConfig config = attack::default_config(attack::Kind::Sequence);
};

// Precomputes δ_seq on the adversarial agent against the frozen model and
// returns the attacked history.
ad::Tensor attacked_history(const model::TrajectoryModel& m, const Scenario& sc, const SequenceAttack& atk);

// The model-driven episode, optionally under attack.
SimOutcome run_episode(const Scenario& sc, const model::TrajectoryModel& m, const PlannerConfig& cfg,
                       const std::optional<SequenceAttack>& atk);

// The fixed ten-scenario suite: slower leaders, blocked lane changes and
// crossing traffic on a two-lane road.
std::vector<Scenario> scenario_suite(std::size_t history_len = 4, std::size_t frames = 6, std::size_t future_len = 12);

struct OutcomeRow {
  std::string scenario_id;
  std::string regime;
  std::string attack;
  SimOutcome outcome;
};

// Runs every scenario concurrently; rows keep the suite order.
std::vector<OutcomeRow> run_suite(const std::vector<Scenario>& suite, const model::TrajectoryModel& m,
                                  const std::string& regime, const PlannerConfig& cfg,
                                  const std::optional<SequenceAttack>& atk);

inline constexpr const char* kOutcomeCsvHeader = "scenario_id,regime,attack,collided,offroad,progress";
std::string outcomes_csv(const std::vector<OutcomeRow>& rows, bool header = true);
// One JSON object per step, tagged with scenario, regime and attack.
std::string episode_log_jsonl(const std::vector<OutcomeRow>& rows);
std::size_t count_collisions(const std::vector<OutcomeRow>& rows);

}  // namespace robusttraj::planner
