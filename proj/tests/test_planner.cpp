#include "doctest.h"
#include "robusttraj/planner.hpp"

#include <cmath>

using namespace robusttraj;
using namespace robusttraj::planner;
using ad::Tensor;
using geometry::Polyline;

namespace {

const std::vector<Vec2> kStraight{{-50.0, 0.0}, {200.0, 0.0}};

std::vector<Polygon> two_lanes() {
  return {geometry::lane_polygon(Polyline(kStraight), 1.75),
          geometry::lane_polygon(Polyline({{-50.0, 3.5}, {200.0, 3.5}}), 1.75)};
}

// One predicted agent holding `p` for every candidate and step.
PredictionSet parked(Vec2 p, std::size_t K = 5, std::size_t T = 12) {
  std::vector<double> v;
  for (std::size_t i = 0; i < K * T; ++i) {
    v.push_back(p.x);
    v.push_back(p.y);
  }
  return {Tensor({K, 1, T, 2}, v)};
}

double scaled_norm(const Control& u, const bicycle::Limits& lim) {
  return std::hypot(u.accel / lim.accel_max, u.curvature_rate / lim.curvature_rate_max);
}

model::Arch small_arch() {
  model::Arch a;
  a.hidden_dim = 16;
  a.latent_dim = 4;
  return a;
}

}  // namespace

TEST_CASE("lattice shape") {
  PlannerConfig cfg;
  const EgoState ego{{0.0, 0.0}, 0.0, 10.0, 0.0};
  SUBCASE("single path follows the centerline") {
    cfg.num_offsets = 1;
    const Lattice l = sample_lattice(ego, Polyline(kStraight), two_lanes(), cfg);
    REQUIRE(l.paths.size() == 1);
    CHECK(l.paths[0].offset_index == 0);
    for (auto p : l.paths[0].waypoints) CHECK(p.y == doctest::Approx(0.0));
    CHECK(l.paths[0].feasible);
  }
  SUBCASE("five offsets are ordered laterally") {
    const Lattice l = sample_lattice(ego, Polyline(kStraight), two_lanes(), cfg);
    REQUIRE(l.paths.size() == 5);
    for (std::size_t i = 1; i < 5; ++i) {
      CHECK(l.paths[i].waypoints.back().y > l.paths[i - 1].waypoints.back().y);
      CHECK(l.paths[i].waypoints.front() == l.paths[i - 1].waypoints.front());
    }
    CHECK(l.paths[2].waypoints.back().y == doctest::Approx(0.0));
  }
  SUBCASE("even counts are rejected") {
    cfg.num_offsets = 4;
    CHECK_THROWS_AS(cfg.validate(), ValidationError);
  }
}

TEST_CASE("lattice on a 50 m radius curve is curvature feasible") {
  std::vector<Vec2> arc;
  for (int i = 0; i <= 180; ++i) {
    const double th = -M_PI / 2 + i * M_PI / 180.0;
    arc.push_back({50.0 * std::cos(th), 50.0 + 50.0 * std::sin(th)});
  }
  const Polyline route(arc);
  const std::vector<Polygon> lanes{geometry::lane_polygon(route, 5.0)};
  const EgoState ego{{0.0, 0.0}, 0.0, 10.0, 0.02};
  const Lattice l = sample_lattice(ego, route, lanes, {});
  REQUIRE(l.paths.size() == 5);
  for (const auto& p : l.paths) {
    CHECK(p.feasible);
    CHECK(p.max_curvature < 0.2);
    for (std::size_t i = 1; i + 1 < p.waypoints.size(); ++i) {
      CHECK(discrete_curvature(p.waypoints[i - 1], p.waypoints[i], p.waypoints[i + 1]) <= 0.2);
    }
  }
}

TEST_CASE("ego off the map yields no paths") {
  const Lattice l = sample_lattice({{0.0, 40.0}, 0.0, 5.0, 0.0}, Polyline(kStraight), two_lanes(), {});
  CHECK(l.paths.empty());
  CHECK_FALSE(l.diagnostic.empty());
}

TEST_CASE("discrete curvature") {
  CHECK(discrete_curvature({0, 0}, {1, 0}, {2, 0}) == 0.0);
  // Three points on a circle of radius 10.
  const auto on = [](double th) { return Vec2{10.0 * std::cos(th), 10.0 * std::sin(th)}; };
  CHECK(discrete_curvature(on(0.0), on(0.3), on(0.7)) == doctest::Approx(0.1));
}

TEST_CASE("scoring") {
  const PlannerConfig cfg;
  const EgoState ego{{0.0, 0.0}, 0.0, 10.0, 0.0};
  const auto lanes = two_lanes();
  const Lattice l = sample_lattice(ego, Polyline(kStraight), lanes, cfg);
  auto cost = [&](std::size_t path, double speed, const PredictionSet& p) {
    return score_path(time_path(l.paths[path], path, ego, speed, 12, 0.5, cfg), p, lanes, 0.5, cfg);
  };

  SUBCASE("empty scene: the centerline at full speed is cheapest") {
    const PredictionSet far = parked({-1000.0, -1000.0});
    const double centre = cost(2, 10.0, far).total;
    for (std::size_t i = 0; i < l.paths.size(); ++i) {
      for (double v : cfg.speed_levels) CHECK(cost(i, v * cfg.target_speed, far).total >= centre);
    }
    CHECK(cost(2, 10.0, far).collision < 1e-12);
  }
  SUBCASE("an agent parked on the centerline favours an offset path") {
    const PredictionSet p = parked({20.0, 0.0});
    CHECK(cost(3, 10.0, p).total < cost(2, 10.0, p).total);
    CHECK(cost(4, 10.0, p).total < cost(2, 10.0, p).total);
  }
  SUBCASE("risk grows as a prediction approaches the path") {
    double prev = -1.0;
    for (double d = 12.0; d >= 0.0; d -= 0.5) {
      const double c = cost(2, 10.0, parked({20.0, d})).total;
      CHECK(c > prev);
      prev = c;
    }
  }
  SUBCASE("leaving the road is penalised") {
    const PredictionSet far = parked({-1000.0, -1000.0});
    CHECK(cost(0, 10.0, far).offroad == 1.0);
    CHECK(cost(2, 10.0, far).offroad == 0.0);
  }
  SUBCASE("worst candidate dominates") {
    // Candidate 0 on the path, the rest far away.
    PredictionSet p = parked({-1000.0, -1000.0});
    std::vector<double> v = p.candidates.data();
    for (std::size_t t = 0; t < 12; ++t) v[t * 2] = 5.0 + 5.0 * static_cast<double>(t), v[t * 2 + 1] = 0.0;
    p.candidates = Tensor(p.candidates.shape(), v);
    CHECK(cost(2, 10.0, p).collision > 1.0);
  }
}

TEST_CASE("MPC tracking") {
  PlannerConfig cfg;
  const auto& lim = cfg.limits;
  const auto lanes = two_lanes();
  SUBCASE("on path at target speed: near-zero controls") {
    const EgoState ego{{0.0, 0.0}, 0.0, 10.0, 0.0};
    const Lattice l = sample_lattice(ego, Polyline(kStraight), lanes, cfg);
    const Plan plan = time_path(l.paths[2], 2, ego, 10.0, 12, 0.5, cfg);
    CHECK(scaled_norm(mpc_track(ego, plan, 0.5, cfg, 3), lim) < 1e-3);
  }
  SUBCASE("a 1 m lateral offset closes") {
    cfg.num_offsets = 1;
    EgoState ego{{0.0, 1.0}, 0.0, 8.0, 0.0};
    const double start = std::abs(ego.position.y);
    for (std::size_t step = 0; step < 10; ++step) {
      const Lattice l = sample_lattice(ego, Polyline(kStraight), lanes, cfg);
      const Plan plan = time_path(l.paths[0], 0, ego, 8.0, 12, 0.5, cfg);
      const Control u = mpc_track(ego, plan, 0.5, cfg, step);
      CHECK(std::abs(u.accel) <= lim.accel_max);
      CHECK(std::abs(u.curvature_rate) <= lim.curvature_rate_max);
      ego = step_ego(ego, u, 0.5, lim);
    }
    CHECK(std::abs(ego.position.y) < 0.5 * start);
    CHECK(ego.position.y > -0.5);
  }
  SUBCASE("brake fallback stops the ego") {
    EgoState ego{{0.0, 0.0}, 0.0, 10.0, 0.05};
    CHECK(mpc_track(ego, Plan{}, 0.5, cfg, 0).accel == -lim.accel_max);
    for (int i = 0; i < 10; ++i) ego = step_ego(ego, brake_control(ego, 0.5, lim), 0.5, lim);
    CHECK(ego.speed == 0.0);
    CHECK(std::abs(ego.curvature) <= lim.curvature_max);
  }
}

TEST_CASE("scenario suite") {
  const auto suite = scenario_suite();
  REQUIRE(suite.size() == 10);
  for (const auto& sc : suite) {
    CHECK_NOTHROW(sc.scene.validate());
    CHECK(sc.scene.history_len() == 10);
    CHECK(sc.scene.future_len() == 12);
    CHECK(geometry::inside_any(sc.ego.position, sc.scene.lanes));
  }
}

TEST_CASE("accurate predictions keep the benign suite collision free") {
  const PlannerConfig cfg;
  for (const auto& sc : scenario_suite()) {
    CAPTURE(sc.id);
    const SimOutcome o = run_episode(sc, oracle_predictor(sc, cfg.K), cfg);
    CHECK_FALSE(o.collided);
    CHECK_FALSE(o.offroad);
    CHECK(o.progress > 0.0);
    CHECK(o.steps.size() == 7);
  }
}

TEST_CASE("ignoring a crossing agent collides, yielding does not") {
  const auto suite = scenario_suite();
  const Scenario& sc = suite[8];
  REQUIRE(sc.id == "crossing_0");
  const PlannerConfig cfg;
  const SimOutcome yield = run_episode(sc, oracle_predictor(sc, cfg.K), cfg);
  CHECK_FALSE(yield.collided);
  const Predictor nobody = [](const Tensor&, std::size_t, std::uint64_t) { return parked({-1e4, -1e4}, 5, 12); };
  const SimOutcome ignore = run_episode(sc, nobody, cfg);
  CHECK(ignore.collided);
  REQUIRE(ignore.collision_step.has_value());
  CHECK(*ignore.collision_step < 7);
}

TEST_CASE("empty road") {
  const PlannerConfig cfg;
  auto suite = scenario_suite();
  Scenario sc = suite[0];
  // Move the only agent far behind in the other lane.
  std::vector<double> h = sc.scene.history.data(), f = sc.scene.future.data();
  for (std::size_t i = 0; i < h.size(); i += 2) h[i] -= 500.0, h[i + 1] = 3.5;
  for (std::size_t i = 0; i < f.size(); i += 2) f[i] -= 500.0, f[i + 1] = 3.5;
  sc.scene.history = Tensor(sc.scene.history.shape(), h);
  sc.scene.future = Tensor(sc.scene.future.shape(), f);
  const SimOutcome o = run_episode(sc, oracle_predictor(sc, cfg.K), cfg);
  CHECK_FALSE(o.collided);
  CHECK(o.progress > 30.0);
  for (const auto& s : o.steps) CHECK(s.chosen_path == 0);
}

TEST_CASE("episodes are deterministic and attacks touch only the predictor inputs") {
  model::Arch arch = small_arch();
  const auto m = model::make_model(arch);
  const PlannerConfig cfg;
  const auto suite = scenario_suite();
  const Scenario& sc = suite[2];
  SequenceAttack atk;
  atk.config.steps = 5;
  const SimOutcome a = run_episode(sc, *m, cfg, atk);
  const SimOutcome b = run_episode(sc, *m, cfg, atk);
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(a.steps[i].ego == b.steps[i].ego);
    CHECK(a.steps[i].predictions_digest == b.steps[i].predictions_digest);
  }
  const SimOutcome clean = run_episode(sc, *m, cfg, std::nullopt);
  const std::size_t n = std::min(clean.steps.size(), a.steps.size());
  for (std::size_t i = 0; i < n; ++i) CHECK(clean.steps[i].agents == a.steps[i].agents);
  CHECK(clean.steps[0].predictions_digest != a.steps[0].predictions_digest);

  // The attacked history differs only on the adversarial agent, within ε.
  const Tensor adv = attacked_history(*m, sc, atk);
  const std::size_t per_agent = sc.scene.history.size() / sc.scene.num_agents();
  for (std::size_t i = 0; i < adv.size(); ++i) {
    CHECK(std::abs(adv[i] - sc.scene.history[i]) <= atk.epsilon + 1e-12);
    if (i / per_agent != sc.scene.adversarial_agent) CHECK(adv[i] == sc.scene.history[i]);
  }
}

TEST_CASE("ego stays within its dynamic bounds") {
  const auto m = model::make_model(small_arch());
  const PlannerConfig cfg;
  for (const auto& row : run_suite(scenario_suite(), *m, "untrained", cfg, std::nullopt)) {
    for (const auto& s : row.outcome.steps) {
      CHECK(std::abs(s.control.accel) <= cfg.limits.accel_max);
      CHECK(std::abs(s.control.curvature_rate) <= cfg.limits.curvature_rate_max);
      CHECK(std::abs(s.ego.curvature) <= cfg.limits.curvature_max + 1e-12);
      CHECK(s.ego.speed >= 0.0);
    }
  }
}

TEST_CASE("too short a scenario is rejected") {
  auto sc = scenario_suite()[0];
  sc.history_len = 20;
  CHECK_THROWS_AS(run_episode(sc, oracle_predictor(scenario_suite()[0], 5), PlannerConfig{}), ValidationError);
}

TEST_CASE("outcome CSV and episode log") {
  const auto suite = scenario_suite();
  const PlannerConfig cfg;
  std::vector<OutcomeRow> rows;
  for (std::size_t i = 0; i < 2; ++i) rows.push_back({suite[i].id, "oracle", "none", run_episode(suite[i], oracle_predictor(suite[i], 5), cfg)});
  const std::string csv = outcomes_csv(rows);
  CHECK(csv.rfind(std::string(kOutcomeCsvHeader) + "\n", 0) == 0);
  CHECK(csv.find("leader_0,oracle,none,0,0,") != std::string::npos);
  const std::string log = episode_log_jsonl(rows);
  std::size_t lines = 0;
  for (char c : log) lines += c == '\n';
  CHECK(lines == rows[0].outcome.steps.size() + rows[1].outcome.steps.size());
  const auto first = nlohmann::json::parse(log.substr(0, log.find('\n')));
  for (const char* key : {"step", "ego", "chosen_path_idx", "predictions_digest", "collision_flag", "scenario_id"}) {
    CHECK(first.contains(key));
  }
  CHECK(count_collisions(rows) == 0);
}

TEST_CASE("planner config JSON") {
  PlannerConfig c;
  c.num_offsets = 7;
  c.w_collision = 3.0;
  const PlannerConfig back = PlannerConfig::from_json(c.to_json());
  CHECK(back.num_offsets == 7);
  CHECK(back.w_collision == 3.0);
  CHECK_THROWS_AS(PlannerConfig::from_json({{"num_offsets", "x"}}), ValidationError);
  CHECK_THROWS_AS(PlannerConfig::from_json({{"num_offsets", 2}}), ValidationError);
}
