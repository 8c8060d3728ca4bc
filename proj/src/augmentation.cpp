#include "robusttraj/augmentation.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "robusttraj/geometry.hpp"
#include "robusttraj/nn.hpp"

namespace robusttraj::augment {

using ad::Graph;
using ad::Tensor;
using ad::Var;

void AugConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& msg) { throw ValidationError("augment." + field, msg); };
  if (!std::isfinite(gamma) || gamma < 0.0) fail("gamma", "must be finite and >= 0");
  if (!std::isfinite(clip) || clip <= 0.0) fail("clip", "must be > 0");
  if (!std::isfinite(step_size) || step_size <= 0.0) fail("step_size", "must be > 0");
  if (!std::isfinite(max_fit_rmse) || max_fit_rmse <= 0.0 || max_fit_rmse > clip) {
    fail("max_fit_rmse", "must be in (0, clip]");
  }
  if (warm_start_steps == 0) fail("warm_start_steps", "must be >= 1");
  if (!(limits.curvature_max > 0.0) || !(limits.accel_max > 0.0) || !(limits.curvature_rate_max > 0.0)) {
    fail("limits", "bounds must be > 0");
  }
}

const char* to_string(Direction d) {
  switch (d) {
    case Direction::Forward: return "forward";
    case Direction::Backward: return "backward";
    case Direction::Left: return "left";
    case Direction::Right: return "right";
  }
  return "?";
}

Var rollout_graph(const GraphState& init, Var curvature_rate, Var accel, double dt, std::vector<Var>* speeds) {
  const std::size_t L = accel.shape().at(0);
  if (curvature_rate.shape() != accel.shape()) throw ad::ShapeError("rollout_graph: control channels differ");
  std::vector<Var> xs{init.x}, ys{init.y};
  Var x = init.x, y = init.y, h = init.heading, v = init.speed, k = init.curvature;
  for (std::size_t t = 0; t < L; ++t) {
    v = ad::relu(v + ad::slice(accel, 0, t, 1) * dt);
    if (speeds) speeds->push_back(v);
    h = h + (v * k) * dt;
    k = k + ad::slice(curvature_rate, 0, t, 1) * dt;
    const Var step = v * dt;
    x = x + ad::cos(h) * step;
    y = y + ad::sin(h) * step;
    xs.push_back(x);
    ys.push_back(y);
  }
  const ad::Shape col{L + 1, 1};
  return ad::concat({ad::reshape(ad::concat(xs, 0), col), ad::reshape(ad::concat(ys, 0), col)}, 1);
}

Var loss_deviation(Var X, Var X_aug, Vec2 direction) {
  if (std::abs(direction.norm() - 1.0) > 1e-9) throw std::invalid_argument("loss_deviation: direction must be unit");
  if (X.shape() != X_aug.shape()) throw ad::ShapeError("loss_deviation: track shapes differ");
  const Var d = X.graph().constant(Tensor::matrix(2, 1, {direction.x, direction.y}));
  return ad::sum(ad::matmul(X - X_aug, d));
}

namespace {

// sqrt with a zero subgradient at the origin.
Var safe_sqrt(Var a) {
  return ad::elementwise(
      a, [](double x) { return std::sqrt(x); }, [](double x) { return x > 0.0 ? 0.5 / std::sqrt(x) : 0.0; });
}

Var inv_plus_one(Var a) {
  return ad::elementwise(
      a, [](double x) { return 1.0 / (x + 1.0); }, [](double x) { return -1.0 / ((x + 1.0) * (x + 1.0)); });
}

}  // namespace

Var loss_collision(Var X_aug, const std::vector<Tensor>& others) {
  Graph& g = X_aug.graph();
  if (others.empty()) return g.constant(Tensor::scalar(0.0));
  Var total;
  for (const auto& o : others) {
    if (o.shape() != X_aug.shape()) throw ad::ShapeError("loss_collision: track shapes differ");
    const Var diff = X_aug - g.constant(o);
    const Var dist = safe_sqrt(ad::sum(diff * diff, 1));
    const Var term = inv_plus_one(ad::mean(dist));
    total = total.valid() ? total + term : term;
  }
  return total * (1.0 / static_cast<double>(others.size()));
}

void project_controls(bicycle::ControlSequence& c, double initial_curvature, double dt, const bicycle::Limits& limits) {
  double k = std::clamp(initial_curvature, -limits.curvature_max, limits.curvature_max);
  for (std::size_t t = 0; t < c.size(); ++t) {
    c.accel[t] = std::clamp(c.accel[t], -limits.accel_max, limits.accel_max);
    const double lo = std::max(-limits.curvature_rate_max, (-limits.curvature_max - k) / dt);
    const double hi = std::min(limits.curvature_rate_max, (limits.curvature_max - k) / dt);
    c.curvature_rate[t] = std::clamp(c.curvature_rate[t], std::min(lo, 0.0), std::max(hi, 0.0));
    // Guard the integrated value against rounding at the bound.
    double next = k + c.curvature_rate[t] * dt;
    if (std::abs(next) > limits.curvature_max) {
      c.curvature_rate[t] = (std::copysign(limits.curvature_max, next) - k) / dt;
      next = k + c.curvature_rate[t] * dt;
    }
    k = next;
  }
}

namespace {

Tensor track_tensor(const std::vector<Vec2>& pts) {
  std::vector<double> v;
  v.reserve(pts.size() * 2);
  for (const auto& p : pts) {
    v.push_back(p.x);
    v.push_back(p.y);
  }
  return Tensor::matrix(pts.size(), 2, std::move(v));
}

Tensor scalar1(double v) { return Tensor::vector({v}); }

double max_coord_dev(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max({m, std::abs(a[i].x - b[i].x), std::abs(a[i].y - b[i].y)});
  return m;
}

double rms(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]).dot(a[i] - b[i]);
  return std::sqrt(s / static_cast<double>(a.size()));
}

}  // namespace

WarmStart fit_controls(const std::vector<Vec2>& track, double dt, const AugConfig& cfg) {
  if (track.size() < 2) throw std::invalid_argument("fit_controls: need at least two points");
  const std::size_t L = track.size() - 1;
  const auto& lim = cfg.limits;

  // Invert the Euler update on finite differences for the initial guess:
  // step t+1 moves at speed v[t+1] along heading h[t+1].
  std::vector<double> v(L + 1), h(L + 1), k(L + 1, 0.0);
  for (std::size_t t = 0; t < L; ++t) {
    const Vec2 d = track[t + 1] - track[t];
    v[t + 1] = d.norm() / dt;
    h[t + 1] = d.norm() > 1e-6 ? std::atan2(d.y, d.x) : (t > 0 ? h[t] : 0.0);
    if (t > 0) h[t + 1] = h[t] + std::remainder(h[t + 1] - h[t], 2.0 * M_PI);
  }
  for (std::size_t t = 1; t < L; ++t) {
    k[t] = v[t + 1] > 1e-3 ? (h[t + 1] - h[t]) / (v[t + 1] * dt) : k[t - 1];
    k[t] = std::clamp(k[t], -lim.curvature_max, lim.curvature_max);
  }
  k[0] = L > 1 ? k[1] : 0.0;
  v[0] = v[1];
  h[0] = h[1] - v[1] * k[0] * dt;
  std::vector<double> kd0(L), a0(L);
  for (std::size_t t = 0; t < L; ++t) {
    a0[t] = (v[t + 1] - v[t]) / dt;
    kd0[t] = t + 1 < L ? (k[t + 1] - k[t]) / dt : 0.0;
  }
  bicycle::ControlSequence c0{kd0, a0};
  project_controls(c0, k[0], dt, lim);

  nn::ParamSet p;
  p.add("init", Tensor::vector({h[0], v[0], k[0]}));
  p.add("kd", Tensor::vector(c0.curvature_rate));
  p.add("a", Tensor::vector(c0.accel));
  nn::Adam opt({.lr = 0.02});
  const Tensor target = track_tensor(track);

  auto unpack = [&](const nn::ParamSet& ps) {
    WarmStart w;
    w.init.position = track[0];
    w.init.heading = ps[0][0];
    w.init.speed = ps[0][1];
    w.init.curvature = ps[0][2];
    w.controls.curvature_rate = ps[1].data();
    w.controls.accel = ps[2].data();
    return w;
  };

  WarmStart best;
  double best_rmse = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t it = 0; it <= cfg.warm_start_steps; ++it) {
    WarmStart cur = unpack(p);
    const auto pos = bicycle::positions(bicycle::rollout(cur.init, cur.controls, dt, lim));
    cur.rmse = rms(pos, track);
    if (cur.rmse < best_rmse - 1e-5) since_best = 0;
    else ++since_best;
    if (cur.rmse < best_rmse) {
      best_rmse = cur.rmse;
      best = cur;
    }
    // Stop once the fit is good and no longer improving.
    if (it == cfg.warm_start_steps || (since_best >= 30 && best_rmse < 0.2 * cfg.max_fit_rmse)) break;

    Graph g;
    const Var init = g.leaf(p[0]);
    const Var kd = g.leaf(p[1]);
    const Var a = g.leaf(p[2]);
    const GraphState s{g.constant(scalar1(track[0].x)), g.constant(scalar1(track[0].y)), ad::slice(init, 0, 0, 1),
                       ad::slice(init, 0, 1, 1), ad::slice(init, 0, 2, 1)};
    const Var loss = ad::sqnorm(rollout_graph(s, kd, a, dt) - g.constant(target)) * (1.0 / static_cast<double>(L + 1));
    const auto grads = g.backward(loss);
    opt.step(p, {grads.wrt(init), grads.wrt(kd), grads.wrt(a)});

    // Project back into the feasible set.
    auto w = unpack(p);
    w.init.speed = std::max(0.0, w.init.speed);
    w.init.curvature = std::clamp(w.init.curvature, -lim.curvature_max, lim.curvature_max);
    project_controls(w.controls, w.init.curvature, dt, lim);
    p.set(0, Tensor::vector({w.init.heading, w.init.speed, w.init.curvature}));
    p.set(1, Tensor::vector(w.controls.curvature_rate));
    p.set(2, Tensor::vector(w.controls.accel));
  }
  return best;
}

namespace {

struct DynObjective {
  const std::vector<Vec2>* original;
  std::vector<Tensor> others;
  bicycle::State init;
  Vec2 direction;
  double gamma;
  double dt;

  // L_dyn and, when requested, its gradient w.r.t. (κ̇, a).
  double eval(const bicycle::ControlSequence& c, std::vector<double>* grad_kd, std::vector<double>* grad_a) const {
    Graph g;
    const Var kd = g.leaf(Tensor::vector(c.curvature_rate));
    const Var a = g.leaf(Tensor::vector(c.accel));
    const GraphState s{g.constant(scalar1(init.position.x)), g.constant(scalar1(init.position.y)),
                       g.constant(scalar1(init.heading)), g.constant(scalar1(init.speed)),
                       g.constant(scalar1(init.curvature))};
    const Var X_aug = rollout_graph(s, kd, a, dt);
    const Var loss =
        loss_deviation(g.constant(track_tensor(*original)), X_aug, direction) + loss_collision(X_aug, others) * gamma;
    if (grad_kd) {
      const auto grads = g.backward(loss);
      *grad_kd = grads.wrt(kd).data();
      *grad_a = grads.wrt(a).data();
    }
    return loss.value().item();
  }
};

Vec2 direction_vector(Direction d, double heading) {
  const Vec2 fwd{std::cos(heading), std::sin(heading)};
  const Vec2 left{-fwd.y, fwd.x};
  switch (d) {
    case Direction::Forward: return fwd;
    case Direction::Backward: return fwd * -1.0;
    case Direction::Left: return left;
    case Direction::Right: return left * -1.0;
  }
  return fwd;
}

bool leaves_road(const std::vector<Vec2>& original, const std::vector<Vec2>& cand, const std::vector<Polygon>& lanes) {
  if (lanes.empty()) return false;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (geometry::inside_any(original[i], lanes) && !geometry::inside_any(cand[i], lanes)) return true;
  }
  return false;
}

}  // namespace

AugResult augment_scene(const Scene& scene, const AugConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  scene.validate();
  const std::size_t N = scene.num_agents();
  const std::size_t H = scene.history_len();
  const auto& lim = cfg.limits;

  std::vector<std::vector<Vec2>> tracks(N);
  for (std::size_t i = 0; i < N; ++i) tracks[i] = scene.full_track(i);

  AugResult res;
  res.scene = scene;
  res.scene.id = scene.id + "-aug";
  res.scene.provenance = Provenance::Augmented;
  res.scene.controls.assign(N, std::nullopt);
  res.agents.resize(N);

  for (std::size_t i = 0; i < N; ++i) {
    AgentLog& log = res.agents[i];
    const auto& orig = scene.full_track(i);
    log.direction = static_cast<Direction>(derive_seed(seed, i) % 4);

    const WarmStart warm = fit_controls(orig, scene.dt, cfg);
    log.fit_rmse = warm.rmse;
    const auto warm_pos = bicycle::positions(bicycle::rollout(warm.init, warm.controls, scene.dt, lim));
    if (warm.rmse > cfg.max_fit_rmse || max_coord_dev(warm_pos, orig) > cfg.clip) {
      log.warning = "agent " + std::to_string(i) + ": no feasible warm start (fit rmse " + std::to_string(warm.rmse) +
                    " m); left unmodified";
      std::cerr << "warning: " << scene.id << ": " << log.warning << "\n";
      continue;
    }

    DynObjective obj{&orig, {}, warm.init, direction_vector(log.direction, warm.init.heading), cfg.gamma, scene.dt};
    for (std::size_t j = 0; j < N; ++j) {
      if (j != i) obj.others.push_back(track_tensor(tracks[j]));
    }

    bicycle::ControlSequence u = warm.controls;
    std::vector<Vec2> pos = warm_pos;
    // The warm start may itself leave the road where the original did not;
    // then only steps that keep it no worse are meaningful, so skip the check.
    const bool check_road = cfg.lane_check && !leaves_road(orig, warm_pos, scene.lanes);
    std::vector<double> gk, ga;
    double loss = obj.eval(u, &gk, &ga);
    log.initial_loss = loss;

    // Steps are taken in controls normalised by their bounds.
    const std::size_t L = u.size();
    double eta = cfg.step_size * std::sqrt(2.0 * static_cast<double>(L));
    for (std::size_t it = 0; it < cfg.steps && eta > 1e-9; ++it) {
      double gn = 0.0;
      for (std::size_t t = 0; t < L; ++t) {
        gk[t] *= lim.curvature_rate_max;
        ga[t] *= lim.accel_max;
        gn += gk[t] * gk[t] + ga[t] * ga[t];
      }
      gn = std::sqrt(gn);
      if (!(gn > 0.0) || !std::isfinite(gn)) break;
      bool accepted = false;
      while (!accepted && eta > 1e-9) {
        bicycle::ControlSequence cand = u;
        for (std::size_t t = 0; t < L; ++t) {
          cand.curvature_rate[t] -= eta * gk[t] / gn * lim.curvature_rate_max;
          cand.accel[t] -= eta * ga[t] / gn * lim.accel_max;
        }
        project_controls(cand, warm.init.curvature, scene.dt, lim);
        const auto cpos = bicycle::positions(bicycle::rollout(warm.init, cand, scene.dt, lim));
        const bool feasible = max_coord_dev(cpos, orig) <= cfg.clip && !(check_road && leaves_road(orig, cpos, scene.lanes));
        const double closs = feasible ? obj.eval(cand, nullptr, nullptr) : 0.0;
        if (feasible && closs < loss) {
          u = std::move(cand);
          pos = cpos;
          loss = obj.eval(u, &gk, &ga);
          eta *= 1.5;
          accepted = true;
        } else {
          eta *= 0.5;
        }
      }
    }

    log.final_loss = loss;
    log.modified = true;
    tracks[i] = pos;
    res.scene.controls[i] = ControlRecord{warm.init, u};
  }

  std::vector<std::vector<Vec2>> hist(N), fut(N);
  for (std::size_t i = 0; i < N; ++i) {
    hist[i].assign(tracks[i].begin(), tracks[i].begin() + static_cast<std::ptrdiff_t>(H));
    fut[i].assign(tracks[i].begin() + static_cast<std::ptrdiff_t>(H), tracks[i].end());
  }
  res.scene.history = tracks_to_tensor(hist);
  res.scene.future = tracks_to_tensor(fut);
  return res;
}

std::vector<Scene> augment_dataset(const std::vector<const Scene*>& scenes, const AugConfig& cfg, std::uint64_t seed) {
  std::vector<Scene> out;
  out.reserve(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) out.push_back(augment_scene(*scenes[i], cfg, derive_seed(seed, i)).scene);
  return out;
}

double replay_error(const Scene& scene, const bicycle::Limits& limits) {
  double err = 0.0;
  for (std::size_t i = 0; i < scene.controls.size(); ++i) {
    if (!scene.controls[i]) continue;
    const auto& rec = *scene.controls[i];
    err = std::max(err, max_coord_dev(bicycle::positions(bicycle::rollout(rec.init, rec.controls, scene.dt, limits)),
                                      scene.full_track(i)));
  }
  return err;
}

}  // namespace robusttraj::augment
