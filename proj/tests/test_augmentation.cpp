#include "doctest.h"
#include "robusttraj/augmentation.hpp"
#include "robusttraj/geometry.hpp"

#include <cmath>
#include <filesystem>
#include <random>

using namespace robusttraj;
using namespace robusttraj::augment;
using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

GraphState constant_state(Graph& g, const bicycle::State& s) {
  auto c = [&](double v) { return g.constant(Tensor::vector({v})); };
  return {c(s.position.x), c(s.position.y), c(s.heading), c(s.speed), c(s.curvature)};
}

std::vector<Vec2> graph_positions(const bicycle::State& init, const bicycle::ControlSequence& u, double dt) {
  Graph g;
  const Var P = rollout_graph(constant_state(g, init), g.constant(Tensor::vector(u.curvature_rate)),
                              g.constant(Tensor::vector(u.accel)), dt);
  std::vector<Vec2> out;
  for (std::size_t t = 0; t < P.shape()[0]; ++t) out.push_back({P.value().at(t, 0), P.value().at(t, 1)});
  return out;
}

bicycle::ControlSequence random_controls(std::size_t L, std::uint64_t seed, const bicycle::Limits& lim = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  bicycle::ControlSequence c;
  for (std::size_t t = 0; t < L; ++t) {
    c.curvature_rate.push_back(u(rng) * lim.curvature_rate_max);
    c.accel.push_back(u(rng) * lim.accel_max);
  }
  return c;
}

Tensor track(const std::vector<Vec2>& pts) {
  std::vector<double> v;
  for (auto p : pts) {
    v.push_back(p.x);
    v.push_back(p.y);
  }
  return Tensor::matrix(pts.size(), 2, v);
}

double max_dev(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max({m, std::abs(a[i].x - b[i].x), std::abs(a[i].y - b[i].y)});
  return m;
}

double mean_dist(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]).norm();
  return s / static_cast<double>(a.size());
}

// Straight parallel tracks at constant speed, `gap` meters apart.
Scene parallel_scene(double gap, std::size_t agents = 2) {
  std::vector<std::vector<Vec2>> hist(agents), fut(agents);
  for (std::size_t i = 0; i < agents; ++i) {
    for (std::size_t t = 0; t < 16; ++t) {
      const Vec2 p{-20.0 + 4.0 * static_cast<double>(t), gap * static_cast<double>(i)};
      (t < 4 ? hist[i] : fut[i]).push_back(p);
    }
  }
  Scene s;
  s.id = "parallel";
  s.history = tracks_to_tensor(hist);
  s.future = tracks_to_tensor(fut);
  return s;
}

}  // namespace

TEST_CASE("graph rollout matches the reference integrator") {
  const double dt = 0.5;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    bicycle::State init;
    init.position = {1.0, -2.0};
    init.heading = 0.3;
    init.speed = 6.0;
    init.curvature = 0.05;
    auto u = random_controls(15, seed);
    project_controls(u, init.curvature, dt, {});
    const auto ref = bicycle::positions(bicycle::rollout(init, u, dt));
    CHECK(max_dev(graph_positions(init, u, dt), ref) < 1e-12);
  }
}

TEST_CASE("closed-form rollouts") {
  SUBCASE("constant acceleration from rest") {
    bicycle::ControlSequence u{std::vector<double>(10, 0.0), std::vector<double>(10, 2.0)};
    const auto p = graph_positions({}, u, 0.1);
    // Speed after step i is 0.2 i; positions accumulate v dt.
    CHECK(p.back().x == doctest::Approx(0.02 * 55.0).epsilon(1e-12));
    CHECK(p.back().y == doctest::Approx(0.0));
  }
  SUBCASE("constant curvature traces a circle") {
    bicycle::State init;
    init.speed = 5.0;
    init.curvature = 0.1;
    const double dt = 0.01;
    bicycle::ControlSequence u{std::vector<double>(400, 0.0), std::vector<double>(400, 0.0)};
    const auto p = graph_positions(init, u, dt);
    // Circumcentre of three points; every other point is equidistant.
    const Vec2 a = p[1], b = p[100], c = p[200];
    const double d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
    const double a2 = a.dot(a), b2 = b.dot(b), c2 = c.dot(c);
    const Vec2 o{(a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d,
                 (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d};
    const double R = (a - o).norm();
    CHECK(R == doctest::Approx(10.0).epsilon(1e-4));
    for (std::size_t t = 1; t < p.size(); ++t) CHECK((p[t] - o).norm() == doctest::Approx(R).epsilon(1e-9));
  }
}

TEST_CASE("speed floor stops a braking agent") {
  bicycle::State init;
  init.speed = 1.0;
  bicycle::ControlSequence u{std::vector<double>(6, 0.0), std::vector<double>(6, -4.0)};
  const auto p = graph_positions(init, u, 0.5);
  for (std::size_t t = 1; t < p.size(); ++t) CHECK(p[t].x == 0.0);
}

TEST_CASE("loss_deviation") {
  Graph g;
  const std::vector<Vec2> base{{0, 0}, {1, 0}, {2, 1}, {3, 3}};
  std::vector<Vec2> moved;
  for (auto p : base) moved.push_back(p + Vec2{0.0, 0.5});
  const Var X = g.constant(track(base));
  CHECK(loss_deviation(X, g.constant(track(moved)), {0.0, 1.0}).value().item() == doctest::Approx(-2.0));
  CHECK(loss_deviation(X, g.constant(track(moved)), {0.0, -1.0}).value().item() == doctest::Approx(2.0));
  CHECK(loss_deviation(X, g.constant(track(moved)), {1.0, 0.0}).value().item() == doctest::Approx(0.0));
  CHECK_THROWS_AS(loss_deviation(X, X, {1.0, 1.0}), std::invalid_argument);
  CHECK_THROWS_AS(loss_deviation(X, X, {0.0, 0.0}), std::invalid_argument);
}

TEST_CASE("loss_collision") {
  Graph g;
  const std::vector<Vec2> a{{0, 0}, {1, 0}, {2, 0}};
  const Var A = g.constant(track(a));
  CHECK(loss_collision(A, {}).value().item() == 0.0);
  CHECK(loss_collision(A, {track(a)}).value().item() == doctest::Approx(1.0));
  // Two neighbours at constant distances 1 and 3.
  const std::vector<Vec2> b{{0, 1}, {1, 1}, {2, 1}}, c{{0, -3}, {1, -3}, {2, -3}};
  CHECK(loss_collision(A, {track(b), track(c)}).value().item() == doctest::Approx((0.5 + 0.25) / 2.0));
  const std::vector<Vec2> far{{0, 1e6}, {1, 1e6}, {2, 1e6}};
  CHECK(loss_collision(A, {track(far)}).value().item() < 1e-5);
  CHECK_THROWS_AS(loss_collision(A, {Tensor::zeros({2, 2})}), ad::ShapeError);
}

TEST_CASE("L_dyn gradient through the rollout matches finite differences") {
  const double dt = 0.5;
  bicycle::State init;
  init.speed = 5.0;
  init.heading = 0.2;
  const std::vector<Vec2> orig = bicycle::positions(bicycle::rollout(init, random_controls(15, 3), dt));
  std::vector<Vec2> other;
  for (auto p : orig) other.push_back(p + Vec2{0.5, 2.0});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto u = random_controls(15, 100 + seed);
    for (auto& k : u.curvature_rate) k *= 0.5;
    for (auto& a : u.accel) a *= 0.5;
    std::vector<double> flat = u.curvature_rate;
    flat.insert(flat.end(), u.accel.begin(), u.accel.end());
    const auto rep = ad::gradient_check(
        [&](Graph& g, Var z) {
          const GraphState s = constant_state(g, init);
          const Var X_aug = rollout_graph(s, ad::slice(z, 0, 0, 15), ad::slice(z, 0, 15, 15), dt);
          return loss_deviation(g.constant(track(orig)), X_aug, {0.6, 0.8}) +
                 loss_collision(X_aug, {track(other)}) * 3.0;
        },
        Tensor::vector(flat));
    CHECK(rep.pass);
    CHECK(rep.max_rel_error < 1e-4);
  }
}

TEST_CASE("project_controls keeps everything within bounds") {
  const bicycle::Limits lim;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto u = random_controls(30, seed, {0.2, 40.0, 1.0});
    project_controls(u, 0.19, 0.5, lim);
    double k = 0.19;
    for (std::size_t t = 0; t < u.size(); ++t) {
      CHECK(std::abs(u.accel[t]) <= lim.accel_max);
      CHECK(std::abs(u.curvature_rate[t]) <= lim.curvature_rate_max);
      k += u.curvature_rate[t] * 0.5;
      CHECK(std::abs(k) <= lim.curvature_max);
    }
  }
  // Feasible controls are left alone.
  auto ok = random_controls(10, 1);
  for (auto& k : ok.curvature_rate) k *= 0.1;
  const auto copy = ok;
  project_controls(ok, 0.0, 0.5, lim);
  CHECK(ok == copy);
}

TEST_CASE("fit_controls recovers a feasible rollout") {
  const AugConfig cfg;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    bicycle::State init;
    init.position = {3.0, 4.0};
    init.heading = -1.0 + 0.5 * static_cast<double>(seed);
    init.speed = 8.0;
    auto u = random_controls(15, seed);
    for (auto& a : u.accel) a *= 0.3;
    project_controls(u, 0.0, 0.5, cfg.limits);
    const auto pts = bicycle::positions(bicycle::rollout(init, u, 0.5));
    const WarmStart w = fit_controls(pts, 0.5, cfg);
    CHECK(w.rmse < 0.02);
    CHECK(w.init.position == pts[0]);
    CHECK_NOTHROW(bicycle::rollout(w.init, w.controls, 0.5, cfg.limits));
  }
}

TEST_CASE("augmented scenes are feasible and replayable") {
  GeneratorConfig gc;
  AugConfig cfg;
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    const Scene s = generate_synthetic(gc, seed);
    const AugResult r = augment_scene(s, cfg, seed);
    const Scene& a = r.scene;
    CHECK_NOTHROW(a.validate());
    CHECK(a.provenance == Provenance::Augmented);
    CHECK(a.id == s.id + "-aug");
    CHECK(a.history.shape() == s.history.shape());
    CHECK(a.future.shape() == s.future.shape());
    CHECK(replay_error(a, cfg.limits) < 1e-9);
    for (std::size_t i = 0; i < s.num_agents(); ++i) {
      const auto& log = r.agents[i];
      CHECK(max_dev(a.full_track(i), s.full_track(i)) <= cfg.clip);
      if (!log.modified) continue;
      REQUIRE(a.controls[i].has_value());
      CHECK_NOTHROW(bicycle::rollout(a.controls[i]->init, a.controls[i]->controls, a.dt, cfg.limits));
      CHECK(log.final_loss <= log.initial_loss);
    }
  }
}

TEST_CASE("augmentation is deterministic and seed dependent") {
  const Scene s = generate_synthetic({}, 11);
  const AugConfig cfg;
  CHECK(augment_scene(s, cfg, 5).scene == augment_scene(s, cfg, 5).scene);
  bool differs = false;
  for (std::uint64_t k = 6; k < 12 && !differs; ++k) differs = !(augment_scene(s, cfg, k).scene == augment_scene(s, cfg, 5).scene);
  CHECK(differs);
}

TEST_CASE("direction pushes the trajectory") {
  AugConfig cfg;
  cfg.gamma = 0.0;
  const Scene s = parallel_scene(0.0, 1);
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const AugResult r = augment_scene(s, cfg, seed);
    REQUIRE(r.agents[0].modified);
    CHECK(r.agents[0].final_loss < r.agents[0].initial_loss - 1.0);
    // The heading here is +x, so the direction is axis aligned.
    const auto orig = s.full_track(0), aug = r.scene.full_track(0);
    double along = 0.0;
    Vec2 d{1.0, 0.0};
    switch (r.agents[0].direction) {
      case Direction::Forward: d = {1.0, 0.0}; break;
      case Direction::Backward: d = {-1.0, 0.0}; break;
      case Direction::Left: d = {0.0, 1.0}; break;
      case Direction::Right: d = {0.0, -1.0}; break;
    }
    for (std::size_t t = 0; t < orig.size(); ++t) along += (aug[t] - orig[t]).dot(d);
    CHECK(along > 1.0);
  }
}

TEST_CASE("a large collision weight separates nearby agents") {
  AugConfig cfg;
  cfg.gamma = 1e3;
  const Scene s = parallel_scene(1.5);
  const AugResult r = augment_scene(s, cfg, 0);
  REQUIRE(r.agents[0].modified);
  CHECK(mean_dist(r.scene.full_track(0), r.scene.full_track(1)) > mean_dist(s.full_track(0), s.full_track(1)) + 0.2);
}

TEST_CASE("an infeasible track is left unmodified") {
  Scene s = parallel_scene(5.0);
  // Agent 1 zig-zags far beyond the curvature bound.
  std::vector<std::vector<Vec2>> hist(2), fut(2);
  for (std::size_t t = 0; t < 16; ++t) {
    const Vec2 p0{-20.0 + 4.0 * static_cast<double>(t), 0.0};
    const Vec2 p1{-20.0 + 4.0 * static_cast<double>(t), t % 2 ? 5.0 : 12.0};
    (t < 4 ? hist[0] : fut[0]).push_back(p0);
    (t < 4 ? hist[1] : fut[1]).push_back(p1);
  }
  s.history = tracks_to_tensor(hist);
  s.future = tracks_to_tensor(fut);
  const AugResult r = augment_scene(s, {}, 0);
  CHECK(r.agents[0].modified);
  CHECK_FALSE(r.agents[1].modified);
  CHECK_FALSE(r.agents[1].warning.empty());
  CHECK_FALSE(r.scene.controls[1].has_value());
  CHECK(r.scene.full_track(1) == s.full_track(1));
}

TEST_CASE("lane containment") {
  GeneratorConfig gc;
  gc.lane_families = {LaneFamily::Straight};
  const AugConfig cfg;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scene s = generate_synthetic(gc, seed);
    const Scene a = augment_scene(s, cfg, seed).scene;
    for (std::size_t i = 0; i < s.num_agents(); ++i) {
      const auto o = s.full_track(i), q = a.full_track(i);
      for (std::size_t t = 0; t < o.size(); ++t) {
        if (geometry::inside_any(o[t], s.lanes)) CHECK(geometry::inside_any(q[t], s.lanes));
      }
    }
  }
}

TEST_CASE("augmented datasets round-trip with their controls") {
  GeneratorConfig gc;
  const Dataset d = generate_dataset(gc, 3, 0, 0, 1);
  Dataset aug;
  aug.scenes = augment_dataset(d.split(Split::Train), {}, 9);
  REQUIRE(aug.scenes.size() == 3);
  const auto path = std::filesystem::temp_directory_path() / "robusttraj_aug_roundtrip.jsonl";
  save_dataset(path, aug);
  const Dataset back = load_dataset(path);
  std::filesystem::remove(path);
  CHECK(back == aug);
  for (const auto& s : back.scenes) CHECK(replay_error(s) < 1e-9);
}

TEST_CASE("config validation") {
  AugConfig c;
  CHECK_NOTHROW(c.validate());
  c.clip = 0.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.gamma = -1.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.max_fit_rmse = 2.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.limits.accel_max = 0.0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}
