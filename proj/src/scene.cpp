#include "robusttraj/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "robusttraj/geometry.hpp"
#include "robusttraj/json_io.hpp"

namespace robusttraj {

using json = nlohmann::json;

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::Real: return "real";
    case Provenance::Synthetic: return "synthetic";
    case Provenance::Augmented: return "augmented";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ValidationError("split", "unknown split '" + s + "'");
}

Provenance provenance_from_string(const std::string& s) {
  if (s == "real") return Provenance::Real;
  if (s == "synthetic") return Provenance::Synthetic;
  if (s == "augmented") return Provenance::Augmented;
  throw ValidationError("provenance", "unknown provenance '" + s + "'");
}

const char* to_string(LaneFamily f) {
  switch (f) {
    case LaneFamily::Straight: return "straight";
    case LaneFamily::Curve: return "curve";
    case LaneFamily::Intersection: return "intersection";
  }
  return "?";
}

const char* to_string(Behavior b) {
  switch (b) {
    case Behavior::Cruise: return "cruise";
    case Behavior::SlowDown: return "slow_down";
    case Behavior::LaneChange: return "lane_change";
    case Behavior::Turn: return "turn";
  }
  return "?";
}

// ---- Scene -----------------------------------------------------------------

Vec2 Scene::hist(std::size_t agent, std::size_t t) const {
  const std::size_t base = (agent * history_len() + t) * 2;
  return {history[base], history[base + 1]};
}

Vec2 Scene::fut(std::size_t agent, std::size_t t) const {
  const std::size_t base = (agent * future_len() + t) * 2;
  return {future[base], future[base + 1]};
}

std::vector<Vec2> Scene::full_track(std::size_t agent) const {
  std::vector<Vec2> out;
  for (std::size_t t = 0; t < history_len(); ++t) out.push_back(hist(agent, t));
  for (std::size_t t = 0; t < future_len(); ++t) out.push_back(fut(agent, t));
  return out;
}

void Scene::validate(const std::string& path) const {
  if (history.rank() != 3 || history.dim(2) != 2) throw ValidationError(path + ".history", "expected N×H×2");
  if (future.rank() != 3 || future.dim(2) != 2) throw ValidationError(path + ".future", "expected N×T×2");
  if (history.dim(0) < 1) throw ValidationError(path + ".history", "need at least one agent");
  if (history.dim(1) < 2) throw ValidationError(path + ".history", "history_len must be >= 2");
  if (future.dim(1) < 1) throw ValidationError(path + ".future", "future_len must be >= 1");
  if (future.dim(0) != history.dim(0)) throw ValidationError(path + ".future", "agent count differs from history");
  if (!history.all_finite()) throw ValidationError(path + ".history", "non-finite value");
  if (!future.all_finite()) throw ValidationError(path + ".future", "non-finite value");
  if (!(dt > 0.0)) throw ValidationError(path + ".dt", "must be positive");
  if (adversarial_agent >= num_agents()) throw ValidationError(path + ".adversarial_agent", "index out of range");
  for (std::size_t i = 0; i < lanes.size(); ++i) {
    if (!geometry::is_simple(lanes[i])) {
      throw ValidationError(path + ".lanes[" + std::to_string(i) + "]", "polygon is not simple");
    }
  }
  if (!controls.empty() && controls.size() != num_agents()) {
    throw ValidationError(path + ".controls", "need one entry per agent");
  }
}

ad::Tensor tracks_to_tensor(const std::vector<std::vector<Vec2>>& tracks) {
  if (tracks.empty()) throw ad::ShapeError("tracks_to_tensor: no tracks");
  const std::size_t len = tracks[0].size();
  std::vector<double> v;
  v.reserve(tracks.size() * len * 2);
  for (const auto& tr : tracks) {
    if (tr.size() != len) throw ad::ShapeError("tracks_to_tensor: ragged tracks");
    for (const auto& p : tr) {
      v.push_back(p.x);
      v.push_back(p.y);
    }
  }
  return ad::Tensor({tracks.size(), len, 2}, std::move(v));
}

std::vector<const Scene*> Dataset::split(Split s) const {
  std::vector<const Scene*> out;
  for (const auto& sc : scenes)
    if (sc.split == s) out.push_back(&sc);
  return out;
}

// ---- generation -------------------------------------------------------------

void GeneratorConfig::validate() const {
  if (history_len < 2) throw ValidationError("generator.history_len", "must be >= 2");
  if (future_len < 1) throw ValidationError("generator.future_len", "must be >= 1");
  if (min_agents < 1 || max_agents < min_agents) throw ValidationError("generator.agents", "invalid agent range");
  if (!(dt > 0.0)) throw ValidationError("generator.dt", "must be positive");
  if (lane_families.empty()) throw ValidationError("generator.lane_families", "must not be empty");
  if (behavior_weights.size() != 4) throw ValidationError("generator.behavior_weights", "need 4 weights");
  for (double w : behavior_weights)
    if (w < 0.0) throw ValidationError("generator.behavior_weights", "weights must be >= 0");
  if (!(min_speed >= 0.0 && max_speed >= min_speed)) throw ValidationError("generator.speed", "invalid range");
  if (!(v_max > max_speed)) throw ValidationError("generator.v_max", "must exceed max_speed");
  if (noise_std < 0.0) throw ValidationError("generator.noise_std", "must be >= 0");
}

namespace {

struct Lane {
  geometry::Polyline center;
  int left = -1;   // index of the adjacent same-direction lane to the left
  int right = -1;
  bool turn = false;
  double turn_start = 0.0;  // arc length where the turn arc begins
  double turn_radius = 0.0;
};

std::vector<Vec2> straight_pts(Vec2 a, Vec2 b, double step) {
  const double len = (b - a).norm();
  const int n = std::max(1, int(std::ceil(len / step)));
  std::vector<Vec2> pts;
  for (int i = 0; i <= n; ++i) pts.push_back(a + (b - a) * (double(i) / n));
  return pts;
}

// Arc around `c` from angle a0 sweeping `sweep` radians.
std::vector<Vec2> arc_pts(Vec2 c, double r, double a0, double sweep, double step) {
  const int n = std::max(2, int(std::ceil(std::abs(sweep) * r / step)));
  std::vector<Vec2> pts;
  for (int i = 0; i <= n; ++i) {
    const double a = a0 + sweep * double(i) / n;
    pts.push_back(c + Vec2{std::cos(a), std::sin(a)} * r);
  }
  return pts;
}

void append(std::vector<Vec2>& dst, const std::vector<Vec2>& src) {
  for (const auto& p : src)
    if (dst.empty() || (p - dst.back()).norm() > 1e-9) dst.push_back(p);
}

std::vector<Lane> build_road(LaneFamily family, double w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Lane> lanes;
  switch (family) {
    case LaneFamily::Straight: {
      const int count = u(rng) < 0.5 ? 2 : 3;
      for (int j = 0; j < count; ++j) {
        const double y = (j - (count - 1) / 2.0) * w;
        lanes.push_back({geometry::Polyline(straight_pts({-60, y}, {200, y}, 10.0))});
      }
      for (int j = 0; j < count; ++j) {
        if (j + 1 < count) lanes[j].left = j + 1;
        if (j > 0) lanes[j].right = j - 1;
      }
      break;
    }
    case LaneFamily::Curve: {
      const int count = 2;
      const double radius = 40.0 + 60.0 * u(rng);
      const double dir = u(rng) < 0.5 ? 1.0 : -1.0;  // +1 turns left
      const double sweep = std::min(std::numbers::pi * 0.9, 220.0 / radius);
      for (int j = 0; j < count; ++j) {
        const double off = (j - 0.5) * w;
        // Center of curvature at (0, dir*radius); lane j sits at radius - dir*off.
        const double r = radius - dir * off;
        const double a0 = dir > 0 ? -std::numbers::pi / 2 : std::numbers::pi / 2;
        lanes.push_back({geometry::Polyline(arc_pts({0.0, dir * radius}, r, a0, dir * sweep, 2.0))});
      }
      lanes[0].left = 1;
      lanes[1].right = 0;
      break;
    }
    case LaneFamily::Intersection: {
      const double h = w / 2;
      lanes.push_back({geometry::Polyline(straight_pts({-60, -h}, {120, -h}, 10.0))});   // 0 east, right
      lanes.push_back({geometry::Polyline(straight_pts({-60, h}, {120, h}, 10.0))});     // 1 east, left
      lanes.push_back({geometry::Polyline(straight_pts({h, -80}, {h, 120}, 10.0))});     // 2 north
      lanes.push_back({geometry::Polyline(straight_pts({-h, 120}, {-h, -80}, 10.0))});   // 3 south
      lanes[0].left = 1;
      lanes[1].right = 0;
      const double r = 10.0 + 6.0 * u(rng);
      {
        // Left turn from lane 1 into lane 2.
        const double x0 = h - r;
        std::vector<Vec2> pts = straight_pts({-60, h}, {x0, h}, 10.0);
        append(pts, arc_pts({x0, h + r}, r, -std::numbers::pi / 2, std::numbers::pi / 2, 1.0));
        append(pts, straight_pts({h, h + r}, {h, 120}, 10.0));
        Lane l{geometry::Polyline(pts)};
        l.turn = true;
        l.turn_start = x0 + 60.0;
        l.turn_radius = r;
        lanes.push_back(l);
      }
      {
        // Right turn from lane 0 into lane 3.
        const double x0 = -h - r;
        std::vector<Vec2> pts = straight_pts({-60, -h}, {x0, -h}, 10.0);
        append(pts, arc_pts({x0, -h - r}, r, std::numbers::pi / 2, -std::numbers::pi / 2, 1.0));
        append(pts, straight_pts({-h, -h - r}, {-h, -120}, 10.0));
        Lane l{geometry::Polyline(pts)};
        l.turn = true;
        l.turn_start = x0 + 60.0;
        l.turn_radius = r;
        lanes.push_back(l);
      }
      break;
    }
  }
  return lanes;
}

Behavior pick_behavior(const std::vector<double>& weights, std::mt19937_64& rng) {
  std::discrete_distribution<int> d(weights.begin(), weights.end());
  return static_cast<Behavior>(d(rng));
}

struct AgentPlan {
  std::size_t lane = 0;
  Behavior behavior = Behavior::Cruise;
  std::vector<Vec2> track;
};

// Positions at steps 0..steps-1 for one agent.
std::vector<Vec2> simulate_agent(const std::vector<Lane>& lanes, std::size_t lane_idx, Behavior behavior, double s0,
                                 double v0, double dt, std::size_t steps, double w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Lane& lane = lanes[lane_idx];
  const double duration = dt * double(steps - 1);
  double decel = 0.0, t_brake = 0.0;
  double lc_side = 0.0, lc_start = 0.0, lc_dur = 1.0;
  if (behavior == Behavior::SlowDown) {
    decel = 1.0 + 1.5 * u(rng);
    t_brake = 0.5 * duration * u(rng);
  } else if (behavior == Behavior::LaneChange) {
    const bool can_left = lane.left >= 0, can_right = lane.right >= 0;
    lc_side = (can_left && (!can_right || u(rng) < 0.5)) ? 1.0 : -1.0;
    lc_dur = 3.0 + 2.0 * u(rng);
    lc_start = std::max(0.0, (duration - lc_dur) * u(rng));
  }
  std::vector<Vec2> out;
  double s = s0, v = v0;
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = dt * double(k);
    double d = 0.0;
    if (behavior == Behavior::LaneChange) {
      const double tau = std::clamp((t - lc_start) / lc_dur, 0.0, 1.0);
      d = lc_side * w * 0.5 * (1.0 - std::cos(std::numbers::pi * tau));
    }
    out.push_back(lane.center.at(s) + lane.center.normal(s) * d);
    double a = 0.0;
    if (behavior == Behavior::SlowDown && t >= t_brake) a = -decel;
    const double v_next = std::max(0.0, v + a * dt);
    s += 0.5 * (v + v_next) * dt;
    v = v_next;
  }
  return out;
}

}  // namespace

Scene generate_synthetic(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(derive_seed(seed, 0x5ce9e));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t H = config.history_len, T = config.future_len, steps = H + T;
  const double w = config.lane_width;
  const double step_limit = 0.95 * config.v_max * config.dt;

  const LaneFamily family = config.lane_families[std::size_t(u(rng) * config.lane_families.size()) %
                                                 config.lane_families.size()];
  const std::vector<Lane> lanes = build_road(family, w, rng);
  std::vector<std::size_t> plain, turning;
  for (std::size_t i = 0; i < lanes.size(); ++i) (lanes[i].turn ? turning : plain).push_back(i);

  std::vector<double> weights = config.behavior_weights;
  if (turning.empty()) weights[3] = 0.0;
  if (std::all_of(weights.begin(), weights.end(), [](double x) { return x == 0.0; })) weights[0] = 1.0;

  const std::size_t n_agents =
      config.min_agents + std::size_t(u(rng) * double(config.max_agents - config.min_agents + 1)) %
                              (config.max_agents - config.min_agents + 1);
  std::normal_distribution<double> noise(0.0, config.noise_std);

  std::vector<AgentPlan> agents;
  for (std::size_t tries = 0; agents.size() < n_agents && tries < 200; ++tries) {
    AgentPlan a;
    a.behavior = pick_behavior(weights, rng);
    double v0 = config.min_speed + (config.max_speed - config.min_speed) * u(rng);
    double s0 = 0.0;
    if (a.behavior == Behavior::Turn) {
      a.lane = turning[std::size_t(u(rng) * turning.size()) % turning.size()];
      const Lane& l = lanes[a.lane];
      v0 = std::min(v0, std::sqrt(2.5 * l.turn_radius));
      // Enter the arc during the window.
      const double travel = v0 * config.dt * double(steps);
      s0 = l.turn_start - travel * (0.2 + 0.6 * u(rng));
    } else {
      a.lane = plain[std::size_t(u(rng) * plain.size()) % plain.size()];
      if (a.behavior == Behavior::LaneChange && lanes[a.lane].left < 0 && lanes[a.lane].right < 0) {
        a.behavior = Behavior::Cruise;
      }
      const double len = lanes[a.lane].center.length();
      s0 = 40.0 + (len - 160.0) * u(rng);
    }
    a.track = simulate_agent(lanes, a.lane, a.behavior, s0, v0, config.dt, steps, w, rng);
    for (auto& p : a.track) p += Vec2{noise(rng), noise(rng)};

    bool ok = true;
    for (std::size_t k = 1; k < steps && ok; ++k) ok = (a.track[k] - a.track[k - 1]).norm() <= step_limit;
    // Keep agents apart at every step.
    for (const auto& other : agents)
      for (std::size_t k = 0; k < steps && ok; ++k) ok = (a.track[k] - other.track[k]).norm() > 4.0;
    if (ok) agents.push_back(std::move(a));
  }
  if (agents.empty()) throw std::runtime_error("generate_synthetic: could not place any agent");

  // Random rotation, then translate the history centroid to the origin.
  const double theta = 2.0 * std::numbers::pi * u(rng);
  const double c = std::cos(theta), s = std::sin(theta);
  auto rot = [c, s](Vec2 p) { return Vec2{c * p.x - s * p.y, s * p.x + c * p.y}; };
  Vec2 centroid;
  for (const auto& a : agents)
    for (std::size_t k = 0; k < H; ++k) centroid += rot(a.track[k]);
  centroid = centroid * (1.0 / double(agents.size() * H));
  auto xf = [&](Vec2 p) { return rot(p) - centroid; };

  Scene scene;
  scene.dt = config.dt;
  std::vector<std::vector<Vec2>> hist, fut;
  for (const auto& a : agents) {
    std::vector<Vec2> h, f;
    for (std::size_t k = 0; k < steps; ++k) (k < H ? h : f).push_back(xf(a.track[k]));
    hist.push_back(std::move(h));
    fut.push_back(std::move(f));
  }
  scene.history = tracks_to_tensor(hist);
  scene.future = tracks_to_tensor(fut);
  for (const auto& l : lanes) {
    Polygon poly = geometry::lane_polygon(l.center, w / 2);
    for (auto& p : poly) p = xf(p);
    scene.lanes.push_back(std::move(poly));
  }
  scene.adversarial_agent = 0;
  scene.provenance = Provenance::Synthetic;
  return scene;
}

Dataset generate_dataset(const GeneratorConfig& config, std::size_t train, std::size_t val, std::size_t test,
                         std::uint64_t seed) {
  Dataset d;
  const std::size_t total = train + val + test;
  for (std::size_t i = 0; i < total; ++i) {
    Scene s = generate_synthetic(config, derive_seed(seed, i));
    char buf[32];
    std::snprintf(buf, sizeof buf, "scene-%05zu", i);
    s.id = buf;
    s.split = i < train ? Split::Train : (i < train + val ? Split::Val : Split::Test);
    d.scenes.push_back(std::move(s));
  }
  return d;
}

double max_step_speed(const Scene& scene) {
  double m = 0.0;
  for (std::size_t a = 0; a < scene.num_agents(); ++a) {
    const auto tr = scene.full_track(a);
    for (std::size_t k = 1; k < tr.size(); ++k) m = std::max(m, (tr[k] - tr[k - 1]).norm() / scene.dt);
  }
  return m;
}

// ---- metrics ----------------------------------------------------------------

Vec2 PredictionSet::at(std::size_t k, std::size_t agent, std::size_t t) const {
  const std::size_t N = candidates.dim(1), T = candidates.dim(2);
  const std::size_t base = ((k * N + agent) * T + t) * 2;
  return {candidates[base], candidates[base + 1]};
}

namespace {

void check_shapes(const PredictionSet& pred, const ad::Tensor& gt) {
  const auto& c = pred.candidates.shape();
  if (c.size() != 4 || gt.rank() != 3 || c[0] < 1 || c[1] != gt.dim(0) || c[2] != gt.dim(1) || c[3] != 2 ||
      gt.dim(2) != 2) {
    throw ad::ShapeError("metrics: prediction " + ad::shape_str(c) + " does not match ground truth " +
                         ad::shape_str(gt.shape()));
  }
}

Vec2 gt_at(const ad::Tensor& gt, std::size_t agent, std::size_t t) {
  const std::size_t base = (agent * gt.dim(1) + t) * 2;
  return {gt[base], gt[base + 1]};
}

double candidate_ade(const PredictionSet& pred, const ad::Tensor& gt, std::size_t k, std::size_t agent) {
  const std::size_t T = gt.dim(1);
  double s = 0.0;
  for (std::size_t t = 0; t < T; ++t) s += (pred.at(k, agent, t) - gt_at(gt, agent, t)).norm();
  return s / double(T);
}

}  // namespace

std::vector<std::size_t> best_of_k(const PredictionSet& pred, const ad::Tensor& gt) {
  check_shapes(pred, gt);
  std::vector<std::size_t> best(gt.dim(0), 0);
  for (std::size_t a = 0; a < gt.dim(0); ++a) {
    double bv = candidate_ade(pred, gt, 0, a);
    for (std::size_t k = 1; k < pred.k(); ++k) {
      const double v = candidate_ade(pred, gt, k, a);
      if (v < bv) {
        bv = v;
        best[a] = k;
      }
    }
  }
  return best;
}

Metrics compute_metrics(const PredictionSet& pred, const ad::Tensor& gt, const std::vector<Polygon>& lanes,
                        double miss_threshold) {
  const auto best = best_of_k(pred, gt);
  const std::size_t N = gt.dim(0), T = gt.dim(1);
  Metrics m;
  for (std::size_t a = 0; a < N; ++a) {
    const std::size_t k = best[a];
    m.ade += candidate_ade(pred, gt, k, a);
    const double final_disp = (pred.at(k, a, T - 1) - gt_at(gt, a, T - 1)).norm();
    m.fde += final_disp;
    if (final_disp > miss_threshold) m.mr += 1.0;
    bool off = false;
    for (std::size_t t = 0; t < T && !off; ++t) off = !geometry::inside_any(pred.at(k, a, t), lanes);
    if (off) m.orr += 1.0;
  }
  const double n = double(N);
  m.ade /= n;
  m.fde /= n;
  m.mr /= n;
  m.orr /= n;
  return m;
}

double ade(const PredictionSet& pred, const ad::Tensor& gt) { return compute_metrics(pred, gt, {}).ade; }
double fde(const PredictionSet& pred, const ad::Tensor& gt) { return compute_metrics(pred, gt, {}).fde; }
double miss_rate(const PredictionSet& pred, const ad::Tensor& gt, double threshold) {
  return compute_metrics(pred, gt, {}, threshold).mr;
}
double offroad_rate(const PredictionSet& pred, const ad::Tensor& gt, const std::vector<Polygon>& lanes) {
  return compute_metrics(pred, gt, lanes).orr;
}

void MetricsAccumulator::add(const Metrics& m) {
  sum_.ade += m.ade;
  sum_.fde += m.fde;
  sum_.mr += m.mr;
  sum_.orr += m.orr;
  ++n_;
}

Metrics MetricsAccumulator::mean() const {
  if (n_ == 0) return {};
  const double n = double(n_);
  return {sum_.ade / n, sum_.fde / n, sum_.mr / n, sum_.orr / n};
}

// ---- persistence ------------------------------------------------------------

namespace {

json tensor_rows(const ad::Tensor& t) {
  json rows = json::array();
  const std::size_t row = t.dim(1) * t.dim(2);
  for (std::size_t i = 0; i < t.dim(0); ++i)
    rows.push_back(std::vector<double>(t.data().begin() + long(i * row), t.data().begin() + long((i + 1) * row)));
  return rows;
}

json state_json(const bicycle::State& s) {
  return {{"p", {s.position.x, s.position.y}}, {"heading", s.heading}, {"speed", s.speed},
          {"curvature", s.curvature}, {"accel", s.accel}};
}

const json& field(const json& j, const char* name, const std::string& path) {
  if (!j.is_object() || !j.contains(name)) throw ValidationError(path + "." + name, "missing field");
  return j.at(name);
}

double number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ValidationError(path, "expected number");
  return j.get<double>();
}

ad::Tensor rows_tensor(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty()) throw ValidationError(path, "expected non-empty array of agent rows");
  std::size_t width = 0;
  std::vector<double> v;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& row = j[i];
    const std::string rp = path + "[" + std::to_string(i) + "]";
    if (!row.is_array()) throw ValidationError(rp, "expected array");
    if (i == 0) width = row.size();
    if (row.size() != width) throw ValidationError(rp, "row length differs from first row");
    if (width % 2 != 0) throw ValidationError(rp, "odd coordinate count");
    for (std::size_t k = 0; k < row.size(); ++k) v.push_back(number(row[k], rp + "[" + std::to_string(k) + "]"));
  }
  for (double x : v)
    if (!std::isfinite(x)) throw ValidationError(path, "non-finite value");
  return ad::Tensor({j.size(), width / 2, 2}, std::move(v));
}

bicycle::State state_from(const json& j, const std::string& path) {
  bicycle::State s;
  const auto& p = field(j, "p", path);
  if (!p.is_array() || p.size() != 2) throw ValidationError(path + ".p", "expected [x,y]");
  s.position = {number(p[0], path + ".p"), number(p[1], path + ".p")};
  s.heading = number(field(j, "heading", path), path + ".heading");
  s.speed = number(field(j, "speed", path), path + ".speed");
  s.curvature = number(field(j, "curvature", path), path + ".curvature");
  s.accel = number(field(j, "accel", path), path + ".accel");
  return s;
}

}  // namespace

json scene_to_json(const Scene& s) {
  json j;
  j["format_version"] = kDatasetFormatVersion;
  j["id"] = s.id;
  j["split"] = to_string(s.split);
  j["provenance"] = to_string(s.provenance);
  j["dt"] = s.dt;
  j["adversarial_agent"] = s.adversarial_agent;
  j["history"] = tensor_rows(s.history);
  j["future"] = tensor_rows(s.future);
  json lanes = json::array();
  for (const auto& poly : s.lanes) {
    json pj = json::array();
    for (const auto& p : poly) pj.push_back({p.x, p.y});
    lanes.push_back(pj);
  }
  j["lanes"] = lanes;
  if (!s.controls.empty()) {
    json cj = json::array();
    for (const auto& c : s.controls) {
      if (!c) {
        cj.push_back(nullptr);
        continue;
      }
      cj.push_back({{"init", state_json(c->init)},
                    {"curvature_rate", c->controls.curvature_rate},
                    {"accel", c->controls.accel}});
    }
    j["controls"] = cj;
  }
  return j;
}

Scene scene_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw ValidationError(path, "expected object");
  const auto& ver = field(j, "format_version", path);
  if (!ver.is_number_integer()) throw ValidationError(path + ".format_version", "expected integer");
  if (ver.get<int>() != kDatasetFormatVersion) {
    throw FormatVersionError(path + ".format_version", ver.get<int>(), kDatasetFormatVersion);
  }
  Scene s;
  if (j.contains("id")) s.id = j.at("id").get<std::string>();
  if (j.contains("split")) s.split = split_from_string(j.at("split").get<std::string>());
  if (j.contains("provenance")) s.provenance = provenance_from_string(j.at("provenance").get<std::string>());
  s.dt = number(field(j, "dt", path), path + ".dt");
  if (j.contains("adversarial_agent")) s.adversarial_agent = j.at("adversarial_agent").get<std::size_t>();
  s.history = rows_tensor(field(j, "history", path), path + ".history");
  s.future = rows_tensor(field(j, "future", path), path + ".future");
  const auto& lanes = field(j, "lanes", path);
  if (!lanes.is_array()) throw ValidationError(path + ".lanes", "expected array");
  for (std::size_t i = 0; i < lanes.size(); ++i) {
    const std::string lp = path + ".lanes[" + std::to_string(i) + "]";
    if (!lanes[i].is_array()) throw ValidationError(lp, "expected array of points");
    Polygon poly;
    for (const auto& p : lanes[i]) {
      if (!p.is_array() || p.size() != 2) throw ValidationError(lp, "expected [x,y] points");
      poly.push_back({number(p[0], lp), number(p[1], lp)});
    }
    s.lanes.push_back(std::move(poly));
  }
  if (j.contains("controls")) {
    const auto& cj = j.at("controls");
    if (!cj.is_array()) throw ValidationError(path + ".controls", "expected array");
    for (std::size_t i = 0; i < cj.size(); ++i) {
      const std::string cp = path + ".controls[" + std::to_string(i) + "]";
      if (cj[i].is_null()) {
        s.controls.emplace_back();
        continue;
      }
      ControlRecord rec;
      rec.init = state_from(field(cj[i], "init", cp), cp + ".init");
      rec.controls.curvature_rate = field(cj[i], "curvature_rate", cp).get<std::vector<double>>();
      rec.controls.accel = field(cj[i], "accel", cp).get<std::vector<double>>();
      s.controls.push_back(std::move(rec));
    }
  }
  s.validate(path);
  return s;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& s : dataset.scenes) out << scene_to_json(s).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Dataset d;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string lp = "line " + std::to_string(lineno);
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw ValidationError(lp, "malformed JSON (truncated record?)");
    try {
      d.scenes.push_back(scene_from_json(j, lp));
    } catch (const json::exception& e) {
      throw ValidationError(lp, std::string("type error: ") + e.what());
    }
  }
  return d;
}

}  // namespace robusttraj
