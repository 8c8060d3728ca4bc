#include "doctest.h"
#include "robusttraj/geometry.hpp"
#include "robusttraj/scene.hpp"

#include <filesystem>
#include <fstream>
#include <random>

using namespace robusttraj;
using robusttraj::ad::Tensor;

namespace {

Tensor track_tensor(std::size_t n, std::size_t T, auto fn) {
  std::vector<double> v;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t t = 0; t < T; ++t) {
      const Vec2 p = fn(a, t);
      v.push_back(p.x);
      v.push_back(p.y);
    }
  return Tensor({n, T, 2}, v);
}

PredictionSet stack(const std::vector<Tensor>& cands) {
  std::vector<double> v;
  for (const auto& c : cands) v.insert(v.end(), c.data().begin(), c.data().end());
  auto s = cands[0].shape();
  s.insert(s.begin(), cands.size());
  return {Tensor(s, v)};
}

std::filesystem::path tmp(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("robusttraj_test_" + name);
}

}  // namespace

TEST_CASE("metric examples") {
  const Tensor gt = track_tensor(2, 5, [](auto a, auto t) { return Vec2{double(t), double(a) * 4.0}; });
  SUBCASE("pred equals gt") {
    auto m = compute_metrics(stack({gt}), gt, {});
    CHECK(m.ade == 0.0);
    CHECK(m.fde == 0.0);
    CHECK(m.mr == 0.0);
  }
  SUBCASE("unit offset") {
    const Tensor off = track_tensor(2, 5, [](auto a, auto t) { return Vec2{double(t) + 1.0, double(a) * 4.0}; });
    CHECK(ade(stack({off}), gt) == doctest::Approx(1.0));
    CHECK(fde(stack({off}), gt) == doctest::Approx(1.0));
  }
  SUBCASE("best of K") {
    const Tensor far = track_tensor(2, 5, [](auto a, auto t) { return Vec2{double(t) + 3.0, double(a) * 4.0}; });
    CHECK(ade(stack({far, gt}), gt) == 0.0);
    CHECK(best_of_k(stack({far, gt}), gt) == std::vector<std::size_t>{1, 1});
  }
  SUBCASE("miss rate") {
    // Final displacements 0.5 m and 3 m.
    const Tensor p = track_tensor(2, 5, [](auto a, auto t) {
      const double off = t == 4 ? (a == 0 ? 0.5 : 3.0) : 0.0;
      return Vec2{double(t) + off, double(a) * 4.0};
    });
    CHECK(miss_rate(stack({p}), gt, 2.0) == 0.5);
  }
  SUBCASE("shape mismatch") {
    const Tensor small = track_tensor(1, 5, [](auto, auto t) { return Vec2{double(t), 0}; });
    CHECK_THROWS_AS(ade(stack({small}), gt), ad::ShapeError);
  }
}

TEST_CASE("metric properties") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 1.5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor gt = track_tensor(3, 6, [&](auto a, auto t) { return Vec2{double(t) * 2.0, double(a) * 3.0}; });
    std::vector<Tensor> cands;
    for (int k = 0; k < 4; ++k)
      cands.push_back(track_tensor(3, 6, [&](auto a, auto t) {
        return Vec2{double(t) * 2.0 + nd(rng), double(a) * 3.0 + nd(rng)};
      }));
    // Monotone in K.
    double prev_ade = 1e9, prev_fde = 1e9, prev_mr = 1e9;
    for (std::size_t k = 1; k <= cands.size(); ++k) {
      std::vector<Tensor> sub(cands.begin(), cands.begin() + long(k));
      const auto m = compute_metrics(stack(sub), gt, {});
      CHECK(m.ade <= prev_ade + 1e-12);
      // FDE/MR follow the ADE-selected candidate, so they need not be
      // monotone; they are still bounded.
      CHECK(m.fde >= 0.0);
      CHECK(m.mr <= 1.0);
      prev_ade = m.ade;
      prev_fde = m.fde;
      prev_mr = m.mr;
    }
    // ADE bounded by the largest step displacement of the chosen candidates.
    const auto ps = stack(cands);
    const auto best = best_of_k(ps, gt);
    double max_disp = 0.0;
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t t = 0; t < 6; ++t) {
        const Vec2 g{gt[(a * 6 + t) * 2], gt[(a * 6 + t) * 2 + 1]};
        max_disp = std::max(max_disp, (ps.at(best[a], a, t) - g).norm());
      }
    CHECK(ade(ps, gt) <= max_disp + 1e-12);

    // Translation invariance with lanes.
    const Polygon lane{{-5, -5}, {30, -5}, {30, 12}, {-5, 12}};
    const Vec2 shift{17.5, -3.25};
    auto moved = [&](const Tensor& t) {
      std::vector<double> v = t.data();
      for (std::size_t i = 0; i < v.size(); i += 2) {
        v[i] += shift.x;
        v[i + 1] += shift.y;
      }
      return Tensor(t.shape(), v);
    };
    Polygon lane2 = lane;
    for (auto& p : lane2) p += shift;
    std::vector<Tensor> moved_c;
    for (const auto& c : cands) moved_c.push_back(moved(c));
    const auto m1 = compute_metrics(stack(cands), gt, {lane});
    const auto m2 = compute_metrics(stack(moved_c), moved(gt), {lane2});
    CHECK(m1.ade == doctest::Approx(m2.ade).epsilon(1e-12));
    CHECK(m1.fde == doctest::Approx(m2.fde).epsilon(1e-12));
    CHECK(m1.mr == m2.mr);
    CHECK(m1.orr == m2.orr);
  }
}

TEST_CASE("offroad rate") {
  const Tensor gt = track_tensor(1, 4, [](auto, auto t) { return Vec2{double(t), 0.0}; });
  const Polygon lane{{-1, -1}, {10, -1}, {10, 1}, {-1, 1}};
  CHECK(offroad_rate(stack({gt}), gt, {lane}) == 0.0);
  const Tensor off = track_tensor(1, 4, [](auto, auto t) { return Vec2{double(t), t == 2 ? 5.0 : 0.0}; });
  CHECK(offroad_rate(stack({off}), gt, {lane}) == 1.0);
}

TEST_CASE("generator examples") {
  GeneratorConfig cfg;
  cfg.min_agents = cfg.max_agents = 2;
  cfg.history_len = 4;
  cfg.future_len = 12;
  cfg.dt = 0.5;
  cfg.lane_families = {LaneFamily::Straight};
  cfg.behavior_weights = {1, 0, 0, 0};
  cfg.noise_std = 0.0;
  const Scene s = generate_synthetic(cfg, 42);
  CHECK(s.num_agents() == 2);
  CHECK(s.history_len() == 4);
  CHECK(s.future_len() == 12);
  for (std::size_t a = 0; a < 2; ++a) {
    const auto tr = s.full_track(a);
    const Vec2 v0 = tr[1] - tr[0];
    CHECK(v0.norm() > 0.0);
    for (std::size_t k = 2; k < tr.size(); ++k) {
      const Vec2 v = tr[k] - tr[k - 1];
      CHECK((v - v0).norm() < 1e-9);
    }
  }
  CHECK(generate_synthetic(cfg, 42) == s);
  CHECK_FALSE(generate_synthetic(cfg, 43) == s);
}

TEST_CASE("generator config errors") {
  GeneratorConfig cfg;
  cfg.history_len = 1;
  CHECK_THROWS_AS(generate_synthetic(cfg, 1), ValidationError);
  GeneratorConfig c2;
  c2.lane_families.clear();
  CHECK_THROWS_WITH_AS(generate_synthetic(c2, 1), doctest::Contains("lane_families"), ValidationError);
}

TEST_CASE("generated scenes are kinematically plausible") {
  GeneratorConfig cfg;
  std::size_t violations = 0;
  std::size_t families_seen[3] = {0, 0, 0};
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Scene s = generate_synthetic(cfg, seed);
    if (max_step_speed(s) > cfg.v_max) ++violations;
    if (seed < 100) {
      s.validate();
      CHECK(s.num_agents() >= 1);
      CHECK(s.num_agents() <= 4);
    }
    families_seen[s.lanes.size() == 6 ? 2 : (s.lanes.size() == 2 ? 1 : 0)]++;
  }
  CHECK(violations == 0);
  CHECK(families_seen[0] > 0);
  CHECK(families_seen[2] > 0);
}

TEST_CASE("generated ground truth stays on road") {
  GeneratorConfig cfg;
  std::size_t off = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Scene s = generate_synthetic(cfg, seed);
    for (std::size_t a = 0; a < s.num_agents(); ++a)
      for (const auto& p : s.full_track(a)) {
        ++total;
        if (!geometry::inside_any(p, s.lanes)) ++off;
      }
  }
  CHECK(double(off) / double(total) < 0.01);
}

TEST_CASE("dataset round trip") {
  GeneratorConfig cfg;
  const Dataset d = generate_dataset(cfg, 6, 2, 2, 9);
  CHECK(d.split(Split::Train).size() == 6);
  CHECK(d.split(Split::Test).size() == 2);
  const auto path = tmp("roundtrip.jsonl");
  save_dataset(path, d);
  const Dataset back = load_dataset(path);
  CHECK(back == d);
}

TEST_CASE("dataset load errors") {
  GeneratorConfig cfg;
  const Dataset d = generate_dataset(cfg, 2, 0, 0, 1);
  const auto path = tmp("trunc.jsonl");
  save_dataset(path, d);
  std::string text;
  {
    std::ifstream in(path);
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  SUBCASE("truncated") {
    std::ofstream(path) << text.substr(0, text.size() / 2 + 17);
    CHECK_THROWS_AS(load_dataset(path), ValidationError);
  }
  SUBCASE("future_len 0") {
    std::ofstream(path) << R"({"format_version":1,"dt":0.5,"history":[[0,0,1,0]],"future":[[]],"lanes":[]})" << "\n";
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("future"), ValidationError);
  }
  SUBCASE("version mismatch") {
    std::ofstream(path) << R"({"format_version":2,"dt":0.5,"history":[[0,0,1,0]],"future":[[2,0]],"lanes":[]})" << "\n";
    CHECK_THROWS_AS(load_dataset(path), FormatVersionError);
  }
  SUBCASE("missing field") {
    std::ofstream(path) << R"({"format_version":1,"dt":0.5,"future":[[2,0]],"lanes":[]})" << "\n";
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("history"), ValidationError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_dataset(tmp("does_not_exist.jsonl")), IoError); }
}

TEST_CASE("polygon helpers") {
  const Polygon sq{{0, 0}, {2, 0}, {2, 2}, {0, 2}};
  CHECK(geometry::is_simple(sq));
  CHECK(geometry::point_in_polygon({1, 1}, sq));
  CHECK(geometry::point_in_polygon({2, 1}, sq));
  CHECK_FALSE(geometry::point_in_polygon({3, 1}, sq));
  const Polygon bow{{0, 0}, {2, 2}, {2, 0}, {0, 2}};
  CHECK_FALSE(geometry::is_simple(bow));
}
