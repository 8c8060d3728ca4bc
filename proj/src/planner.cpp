#include "robusttraj/planner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <future>
#include <random>
#include <sstream>

#include "robusttraj/augmentation.hpp"

namespace robusttraj::planner {

using ad::Graph;
using ad::Tensor;
using ad::Var;
using geometry::Polyline;

nlohmann::json EgoState::to_json() const {
  return {{"x", position.x}, {"y", position.y}, {"heading", heading}, {"speed", speed}, {"curvature", curvature}};
}

void PlannerConfig::validate() const {
  auto fail = [](const std::string& f, const std::string& m) { throw ValidationError("planner." + f, m); };
  if (num_offsets == 0 || num_offsets % 2 == 0) fail("num_offsets", "must be odd");
  if (!(lateral_spacing > 0.0)) fail("lateral_spacing", "must be > 0");
  if (!(lookahead > 0.0)) fail("lookahead", "must be > 0");
  if (!(path_length >= lookahead)) fail("path_length", "must be >= lookahead");
  if (!(waypoint_spacing > 0.0) || waypoint_spacing > lookahead) fail("waypoint_spacing", "must be in (0, lookahead]");
  if (speed_levels.empty()) fail("speed_levels", "must not be empty");
  for (double s : speed_levels) {
    if (!(s >= 0.0) || !std::isfinite(s)) fail("speed_levels", "must be finite and >= 0");
  }
  if (!(target_speed > 0.0)) fail("target_speed", "must be > 0");
  if (!(sigma_collision > 0.0)) fail("sigma_collision", "must be > 0");
  if (!(collision_radius > 0.0)) fail("collision_radius", "must be > 0");
  if (w_collision < 0.0 || w_progress < 0.0 || w_offroad < 0.0) fail("weights", "must be >= 0");
  if (mpc_horizon == 0) fail("mpc_horizon", "must be >= 1");
  if (K == 0) fail("K", "must be >= 1");
}

nlohmann::json PlannerConfig::to_json() const {
  return {{"num_offsets", num_offsets},
          {"lateral_spacing", lateral_spacing},
          {"lookahead", lookahead},
          {"path_length", path_length},
          {"waypoint_spacing", waypoint_spacing},
          {"speed_levels", speed_levels},
          {"target_speed", target_speed},
          {"w_collision", w_collision},
          {"w_progress", w_progress},
          {"w_offroad", w_offroad},
          {"sigma_collision", sigma_collision},
          {"collision_radius", collision_radius},
          {"mpc_horizon", mpc_horizon},
          {"mpc_iters", mpc_iters},
          {"mpc_speed_weight", mpc_speed_weight},
          {"mpc_effort_weight", mpc_effort_weight},
          {"K", K},
          {"seed", seed}};
}

PlannerConfig PlannerConfig::from_json(const nlohmann::json& j) {
  PlannerConfig c;
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(std::string("planner.") + key, "wrong type");
    }
  };
  get("num_offsets", c.num_offsets);
  get("lateral_spacing", c.lateral_spacing);
  get("lookahead", c.lookahead);
  get("path_length", c.path_length);
  get("waypoint_spacing", c.waypoint_spacing);
  get("speed_levels", c.speed_levels);
  get("target_speed", c.target_speed);
  get("w_collision", c.w_collision);
  get("w_progress", c.w_progress);
  get("w_offroad", c.w_offroad);
  get("sigma_collision", c.sigma_collision);
  get("collision_radius", c.collision_radius);
  get("mpc_horizon", c.mpc_horizon);
  get("mpc_iters", c.mpc_iters);
  get("mpc_speed_weight", c.mpc_speed_weight);
  get("mpc_effort_weight", c.mpc_effort_weight);
  get("K", c.K);
  get("seed", c.seed);
  c.validate();
  return c;
}

// ---- lattice -----------------------------------------------------------------

double discrete_curvature(Vec2 a, Vec2 b, Vec2 c) {
  const double ab = (b - a).norm(), bc = (c - b).norm(), ca = (a - c).norm();
  const double den = ab * bc * ca;
  if (den <= 0.0) return 0.0;
  return 2.0 * std::abs((b - a).cross(c - b)) / den;
}

Lattice sample_lattice(const EgoState& ego, const Polyline& route, const std::vector<Polygon>& lanes,
                       const PlannerConfig& cfg) {
  Lattice out;
  if (!geometry::inside_any(ego.position, lanes)) {
    out.diagnostic = "ego at (" + std::to_string(ego.position.x) + ", " + std::to_string(ego.position.y) +
                     ") is outside the mapped lanes";
    return out;
  }
  const auto [s0, d0] = route.project(ego.position);
  const Vec2 t0 = route.tangent(s0);
  const double rel = std::remainder(ego.heading - std::atan2(t0.y, t0.x), 2.0 * M_PI);
  const double slope0 = std::tan(std::clamp(rel, -1.2, 1.2));
  const double Lk = cfg.lookahead;
  const int m = static_cast<int>(cfg.num_offsets / 2);
  const auto n_pts = static_cast<std::size_t>(std::floor(cfg.path_length / cfg.waypoint_spacing)) + 1;

  for (int j = -m; j <= m; ++j) {
    LatticePath p;
    p.offset_index = j;
    p.terminal_offset = j * cfg.lateral_spacing;
    for (std::size_t i = 0; i < n_pts; ++i) {
      const double ds = static_cast<double>(i) * cfg.waypoint_spacing;
      double d = p.terminal_offset;
      if (ds < Lk) {
        // Cubic Hermite from (d0, slope0) to (terminal, 0).
        const double u = ds / Lk, u2 = u * u, u3 = u2 * u;
        d = (2 * u3 - 3 * u2 + 1) * d0 + (u3 - 2 * u2 + u) * Lk * slope0 + (-2 * u3 + 3 * u2) * p.terminal_offset;
      }
      const double s = s0 + ds;
      p.waypoints.push_back(route.at(s) + route.normal(s) * d);
    }
    for (std::size_t i = 1; i + 1 < p.waypoints.size(); ++i) {
      p.max_curvature = std::max(p.max_curvature, discrete_curvature(p.waypoints[i - 1], p.waypoints[i], p.waypoints[i + 1]));
    }
    p.feasible = p.max_curvature <= cfg.limits.curvature_max;
    out.paths.push_back(std::move(p));
  }
  return out;
}

Plan time_path(const LatticePath& path, std::size_t path_index, const EgoState& ego, double speed_target,
               std::size_t steps, double dt, const PlannerConfig& cfg) {
  const Polyline P(path.waypoints);
  double s = P.project(ego.position).first;
  const double s_start = s;
  double v = ego.speed;
  Plan plan;
  plan.path = path_index;
  plan.speed_target = speed_target;
  plan.positions.push_back(ego.position);
  plan.speeds.push_back(v);
  // Gentler acceleration than braking so the tracker can keep up.
  const double up = 0.5 * cfg.limits.accel_max * dt, down = cfg.limits.accel_max * dt;
  for (std::size_t t = 0; t < steps; ++t) {
    v = v < speed_target ? std::min(speed_target, v + up) : std::max(speed_target, v - down);
    s += v * dt;
    plan.positions.push_back(P.at(s));
    plan.speeds.push_back(v);
  }
  plan.progress = s - s_start;
  return plan;
}

Cost score_path(const Plan& plan, const PredictionSet& pred, const std::vector<Polygon>& lanes, double dt,
                const PlannerConfig& cfg) {
  Cost c;
  const std::size_t steps = plan.positions.size() - 1;
  if (pred.candidates.size() > 0) {
    const std::size_t K = pred.k(), N = pred.candidates.dim(1), T = std::min(steps, pred.candidates.dim(2));
    const double inv_s2 = 1.0 / (cfg.sigma_collision * cfg.sigma_collision);
    for (std::size_t k = 0; k < K; ++k) {
      double risk = 0.0;
      for (std::size_t a = 0; a < N; ++a) {
        for (std::size_t t = 0; t < T; ++t) {
          const Vec2 d = plan.positions[t + 1] - pred.at(k, a, t);
          risk += std::exp(-d.dot(d) * inv_s2);
        }
      }
      c.collision = std::max(c.collision, risk);
    }
  }
  c.progress = plan.progress / (cfg.target_speed * static_cast<double>(steps) * dt);
  for (std::size_t t = 1; t <= steps; ++t) {
    if (!geometry::inside_any(plan.positions[t], lanes)) {
      c.offroad = 1.0;
      break;
    }
  }
  c.total = cfg.w_collision * c.collision - cfg.w_progress * c.progress + cfg.w_offroad * c.offroad;
  return c;
}

// ---- tracking ----------------------------------------------------------------

Control brake_control(const EgoState& ego, double dt, const bicycle::Limits& limits) {
  return {-limits.accel_max, std::clamp(-ego.curvature / dt, -limits.curvature_rate_max, limits.curvature_rate_max)};
}

EgoState step_ego(const EgoState& ego, const Control& u, double dt, const bicycle::Limits& limits) {
  bicycle::State s;
  s.position = ego.position;
  s.heading = ego.heading;
  s.speed = ego.speed;
  s.curvature = ego.curvature;
  const auto states = bicycle::rollout(s, {{u.curvature_rate}, {u.accel}}, dt, limits);
  return {states[1].position, states[1].heading, states[1].speed, states[1].curvature};
}

namespace {

Tensor vec1(double v) { return Tensor::vector({v}); }

}  // namespace

Control mpc_track(const EgoState& ego, const Plan& plan, double dt, const PlannerConfig& cfg, std::uint64_t seed) {
  if (plan.positions.size() < 2) return brake_control(ego, dt, cfg.limits);
  const auto& lim = cfg.limits;
  const std::size_t Hm = std::min(cfg.mpc_horizon, plan.positions.size() - 1);
  std::vector<double> ref_xy, ref_v;
  for (std::size_t t = 1; t <= Hm; ++t) {
    ref_xy.push_back(plan.positions[t].x);
    ref_xy.push_back(plan.positions[t].y);
    ref_v.push_back(plan.speeds[t]);
  }
  const Tensor ref = Tensor::matrix(Hm, 2, ref_xy);
  const Tensor vref = Tensor::vector(ref_v);

  // z holds bound-scaled curvature rates then accelerations.
  auto to_controls = [&](const std::vector<double>& z) {
    bicycle::ControlSequence c;
    for (std::size_t t = 0; t < Hm; ++t) {
      c.curvature_rate.push_back(z[t] * lim.curvature_rate_max);
      c.accel.push_back(z[Hm + t] * lim.accel_max);
    }
    return c;
  };
  auto project = [&](std::vector<double>& z) {
    for (double& v : z) v = std::clamp(v, -1.0, 1.0);
    auto c = to_controls(z);
    augment::project_controls(c, ego.curvature, dt, lim);
    for (std::size_t t = 0; t < Hm; ++t) {
      z[t] = c.curvature_rate[t] / lim.curvature_rate_max;
      z[Hm + t] = c.accel[t] / lim.accel_max;
    }
  };
  auto eval = [&](const std::vector<double>& z, std::vector<double>* grad) {
    Graph g;
    const Var zv = g.leaf(Tensor::vector(z));
    const Var kd = ad::slice(zv, 0, 0, Hm) * lim.curvature_rate_max;
    const Var a = ad::slice(zv, 0, Hm, Hm) * lim.accel_max;
    const augment::GraphState s{g.constant(vec1(ego.position.x)), g.constant(vec1(ego.position.y)),
                                g.constant(vec1(ego.heading)), g.constant(vec1(ego.speed)),
                                g.constant(vec1(ego.curvature))};
    std::vector<Var> speeds;
    const Var P = augment::rollout_graph(s, kd, a, dt, &speeds);
    const Var track = ad::sqnorm(ad::slice(P, 0, 1, Hm) - g.constant(ref));
    const Var speed = ad::sqnorm(ad::concat(speeds, 0) - g.constant(vref));
    const Var J = track + speed * cfg.mpc_speed_weight + ad::sqnorm(zv) * cfg.mpc_effort_weight;
    if (grad) *grad = g.backward(J).wrt(zv).data();
    return J.value().item();
  };

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> jitter(0.0, 1e-4);
  std::vector<double> z(2 * Hm);
  for (double& v : z) v = jitter(rng);
  project(z);
  std::vector<double> g;
  double J = eval(z, &g);
  double eta = 0.05;
  for (std::size_t it = 0; it < cfg.mpc_iters && eta > 1e-12; ++it) {
    bool accepted = false;
    while (!accepted && eta > 1e-12) {
      std::vector<double> cand = z;
      for (std::size_t i = 0; i < cand.size(); ++i) cand[i] -= eta * g[i];
      project(cand);
      const double Jc = eval(cand, nullptr);
      if (Jc < J) {
        z = std::move(cand);
        J = eval(z, &g);
        eta *= 2.0;
        accepted = true;
      } else {
        eta *= 0.5;
      }
    }
  }
  const auto c = to_controls(z);
  return {c.accel[0], c.curvature_rate[0]};
}

// ---- predictors ----------------------------------------------------------------

Predictor model_predictor(const model::TrajectoryModel& m, std::size_t K) {
  return [&m, K](const Tensor& history, std::size_t, std::uint64_t seed) {
    return model::sample_predictions(m, model::as_rows(history), K, seed);
  };
}

Predictor oracle_predictor(const Scenario& sc, std::size_t K) {
  const std::size_t N = sc.scene.num_agents(), F = sc.scene.history_len(), T = sc.scene.future_len();
  std::vector<std::vector<Vec2>> tracks;
  for (std::size_t a = 0; a < N; ++a) tracks.push_back(sc.scene.full_track(a));
  const std::size_t H = sc.history_len;
  return [tracks, K, N, T, H, F](const Tensor&, std::size_t w, std::uint64_t) {
    if (w + H + T > F + T) throw std::out_of_range("oracle_predictor: window past the scenario");
    std::vector<double> v;
    v.reserve(K * N * T * 2);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t a = 0; a < N; ++a) {
        for (std::size_t t = 0; t < T; ++t) {
          const Vec2 p = tracks[a][w + H + t];
          v.push_back(p.x);
          v.push_back(p.y);
        }
      }
    }
    return PredictionSet{Tensor({K, N, T, 2}, std::move(v))};
  };
}

// ---- episodes ------------------------------------------------------------------

nlohmann::json StepRecord::to_json() const {
  return {{"step", step},
          {"ego", ego.to_json()},
          {"chosen_path_idx", chosen_path},
          {"speed_target", speed_target},
          {"predictions_digest", predictions_digest},
          {"collision_flag", collision}};
}

namespace {

std::string digest(const Tensor& t) {
  std::string bytes(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(double));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_string(bytes)));
  return buf;
}

// Frames [w, w + H) of an N×F×2 track tensor.
Tensor window(const Tensor& hist, std::size_t w, std::size_t H) {
  const std::size_t N = hist.dim(0), F = hist.dim(1);
  std::vector<double> v;
  v.reserve(N * H * 2);
  for (std::size_t a = 0; a < N; ++a) {
    for (std::size_t t = w; t < w + H; ++t) {
      v.push_back(hist[(a * F + t) * 2]);
      v.push_back(hist[(a * F + t) * 2 + 1]);
    }
  }
  return Tensor({N, H, 2}, std::move(v));
}

// Candidate order: smaller lateral offsets first, then the configured speed
// levels; the first minimum wins.
std::vector<std::size_t> path_preference(const Lattice& l) {
  std::vector<std::size_t> idx(l.paths.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(l.paths[a].offset_index) < std::abs(l.paths[b].offset_index);
  });
  return idx;
}

}  // namespace

SimOutcome run_episode(const Scenario& sc, const Predictor& predictor, const PlannerConfig& cfg,
                       const std::optional<Tensor>& history_override) {
  cfg.validate();
  const Scene& scene = sc.scene;
  const std::size_t H = sc.history_len;
  const Tensor& hist = history_override ? *history_override : scene.history;
  if (hist.shape() != scene.history.shape()) throw ad::ShapeError("run_episode: history override shape mismatch");
  if (scene.history_len() < H || scene.future_len() == 0) {
    throw ValidationError("scenario." + sc.id, "needs at least " + std::to_string(H) + " history frames and a future");
  }
  const std::size_t frames = scene.history_len() - H;
  const std::size_t N = scene.num_agents();
  std::vector<std::vector<Vec2>> truth;
  for (std::size_t a = 0; a < N; ++a) truth.push_back(scene.full_track(a));
  const Polyline route(sc.route);
  const double dt = scene.dt;

  SimOutcome out;
  EgoState ego = sc.ego;
  const double s_start = route.project(ego.position).first;
  for (std::size_t w = 0; w <= frames; ++w) {
    StepRecord rec;
    rec.step = w;
    const PredictionSet pred = predictor(window(hist, w, H), w, derive_seed(cfg.seed, w));
    rec.predictions_digest = digest(pred.candidates);
    const std::size_t T = pred.candidates.dim(2);

    const Lattice lat = sample_lattice(ego, route, scene.lanes, cfg);
    std::optional<Plan> best;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t pi : path_preference(lat)) {
      if (!lat.paths[pi].feasible) continue;
      for (double level : cfg.speed_levels) {
        Plan plan = time_path(lat.paths[pi], pi, ego, level * cfg.target_speed, T, dt, cfg);
        const double c = score_path(plan, pred, scene.lanes, dt, cfg).total;
        if (c < best_cost) {
          best_cost = c;
          best = std::move(plan);
        }
      }
    }
    if (best) {
      rec.control = mpc_track(ego, *best, dt, cfg, derive_seed(cfg.seed, w, 1));
      rec.chosen_path = lat.paths[best->path].offset_index;
      rec.speed_target = best->speed_target;
    } else {
      rec.control = brake_control(ego, dt, cfg.limits);
    }
    ego = step_ego(ego, rec.control, dt, cfg.limits);
    rec.ego = ego;

    // Ground-truth replay of the other agents at the next frame.
    const std::size_t f = w + H;
    for (std::size_t a = 0; a < N; ++a) {
      rec.agents.push_back(truth[a][f]);
      if ((truth[a][f] - ego.position).norm() < 2.0 * cfg.collision_radius) rec.collision = true;
    }
    if (!geometry::inside_any(ego.position, scene.lanes)) out.offroad = true;
    out.steps.push_back(rec);
    if (rec.collision) {
      out.collided = true;
      out.collision_step = w;
      break;
    }
  }
  out.progress = route.project(ego.position).first - s_start;
  return out;
}

Tensor attacked_history(const model::TrajectoryModel& m, const Scenario& sc, const SequenceAttack& atk) {
  attack::AttackConfig cfg = atk.config;
  cfg.sequence_frames = sc.scene.history_len() - sc.history_len;
  attack::ThreatModel threat;
  threat.epsilon = atk.epsilon;
  threat.all_agents = false;
  return attack::run_attack(m, sc.scene, attack::Kind::Sequence, threat, cfg).perturbed_history;
}

SimOutcome run_episode(const Scenario& sc, const model::TrajectoryModel& m, const PlannerConfig& cfg,
                       const std::optional<SequenceAttack>& atk) {
  if (m.arch().history_len != sc.history_len) {
    throw ValidationError("scenario." + sc.id, "history length differs from the model's");
  }
  std::optional<Tensor> hist;
  if (atk) hist = attacked_history(m, sc, *atk);
  return run_episode(sc, model_predictor(m, cfg.K), cfg, hist);
}

// ---- suite -------------------------------------------------------------------

namespace {

struct AgentSpec {
  Vec2 start;  // at the ego's start time
  Vec2 velocity;
};

Scenario make_scenario(const std::string& id, std::vector<AgentSpec> agents, std::vector<Polygon> extra_lanes,
                       std::size_t H, std::size_t frames, std::size_t T) {
  const double dt = 0.5;
  Scenario sc;
  sc.id = id;
  sc.history_len = H;
  sc.route = {{-80.0, 0.0}, {0.0, 0.0}, {240.0, 0.0}};
  sc.ego = {{0.0, 0.0}, 0.0, 10.0, 0.0};
  std::vector<std::vector<Vec2>> hist, fut;
  for (const auto& a : agents) {
    std::vector<Vec2> h, f;
    for (std::size_t i = 0; i < H + frames + T; ++i) {
      const double t = (static_cast<double>(i) - static_cast<double>(H - 1)) * dt;
      (i < H + frames ? h : f).push_back(a.start + a.velocity * t);
    }
    hist.push_back(std::move(h));
    fut.push_back(std::move(f));
  }
  Scene& s = sc.scene;
  s.id = id;
  s.dt = dt;
  s.history = tracks_to_tensor(hist);
  s.future = tracks_to_tensor(fut);
  s.lanes = {geometry::lane_polygon(Polyline({{-80.0, 0.0}, {240.0, 0.0}}), 1.75),
             geometry::lane_polygon(Polyline({{-80.0, 3.5}, {240.0, 3.5}}), 1.75)};
  for (auto& l : extra_lanes) s.lanes.push_back(std::move(l));
  s.adversarial_agent = 0;
  s.split = Split::Test;
  s.provenance = Provenance::Synthetic;
  return sc;
}

Polygon crossing_road(double x) {
  return geometry::lane_polygon(Polyline({{x, -60.0}, {x, 60.0}}), 3.5);
}

}  // namespace

std::vector<Scenario> scenario_suite(std::size_t H, std::size_t frames, std::size_t T) {
  std::vector<Scenario> out;
  // A slower leader in the ego lane, close enough to be reached unless the
  // planner brakes or changes lanes.
  const std::vector<std::pair<double, double>> leaders{{12.0, 4.0}, {14.0, 4.0}, {16.0, 5.0},
                                                       {18.0, 4.0}, {20.0, 4.0}, {14.0, 6.0}};
  for (std::size_t i = 0; i < leaders.size(); ++i) {
    const auto [gap, v] = leaders[i];
    out.push_back(make_scenario("leader_" + std::to_string(i), {{{gap, 0.0}, {v, 0.0}}}, {}, H, frames, T));
  }
  // The same with the left lane occupied.
  out.push_back(make_scenario("blocked_0", {{{14.0, 0.0}, {4.0, 0.0}}, {{-2.0, 3.5}, {10.0, 0.0}}}, {}, H, frames, T));
  out.push_back(make_scenario("blocked_1", {{{15.0, 0.0}, {4.0, 0.0}}, {{22.0, 3.5}, {7.0, 0.0}}}, {}, H, frames, T));
  // Crossing traffic timed to meet the ego at the crossing.
  out.push_back(make_scenario("crossing_0", {{{25.0, -15.0}, {0.0, 6.0}}}, {crossing_road(25.0)}, H, frames, T));
  out.push_back(make_scenario("crossing_1", {{{30.0, 18.0}, {0.0, -6.0}}}, {crossing_road(30.0)}, H, frames, T));
  return out;
}

std::vector<OutcomeRow> run_suite(const std::vector<Scenario>& suite, const model::TrajectoryModel& m,
                                  const std::string& regime, const PlannerConfig& cfg,
                                  const std::optional<SequenceAttack>& atk) {
  std::vector<std::future<SimOutcome>> jobs;
  for (const auto& sc : suite) {
    jobs.push_back(std::async(std::launch::async, [&sc, &m, &cfg, &atk] { return run_episode(sc, m, cfg, atk); }));
  }
  std::vector<OutcomeRow> rows;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    rows.push_back({suite[i].id, regime, atk ? "sequence" : "none", jobs[i].get()});
  }
  return rows;
}

std::string outcomes_csv(const std::vector<OutcomeRow>& rows, bool header) {
  std::ostringstream os;
  if (header) os << kOutcomeCsvHeader << "\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.3f", r.outcome.progress);
    os << r.scenario_id << "," << r.regime << "," << r.attack << "," << (r.outcome.collided ? 1 : 0) << ","
       << (r.outcome.offroad ? 1 : 0) << "," << buf << "\n";
  }
  return os.str();
}

std::string episode_log_jsonl(const std::vector<OutcomeRow>& rows) {
  std::ostringstream os;
  for (const auto& r : rows) {
    for (const auto& s : r.outcome.steps) {
      nlohmann::json j = s.to_json();
      j["scenario_id"] = r.scenario_id;
      j["regime"] = r.regime;
      j["attack"] = r.attack;
      os << j.dump() << "\n";
    }
  }
  return os.str();
}

std::size_t count_collisions(const std::vector<OutcomeRow>& rows) {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const OutcomeRow& r) { return r.outcome.collided; }));
}

}  // namespace robusttraj::planner
