#include "robusttraj/bicycle.hpp"

#include <algorithm>
#include <cmath>

namespace robusttraj::bicycle {

namespace {
constexpr double kSlack = 1e-12;
}

std::vector<State> rollout(const State& init, const ControlSequence& controls, double dt, const Limits& limits) {
  if (controls.curvature_rate.size() != controls.accel.size()) {
    throw std::invalid_argument("bicycle: control channels differ in length");
  }
  if (std::abs(init.curvature) > limits.curvature_max + kSlack) throw BoundViolation(0, "initial curvature out of bounds");
  if (init.speed < 0.0) throw BoundViolation(0, "negative initial speed");
  std::vector<State> states;
  states.reserve(controls.size() + 1);
  states.push_back(init);
  State s = init;
  for (std::size_t t = 0; t < controls.size(); ++t) {
    const double a = controls.accel[t];
    const double kd = controls.curvature_rate[t];
    if (!std::isfinite(a) || std::abs(a) > limits.accel_max + kSlack) throw BoundViolation(t, "acceleration out of bounds");
    if (!std::isfinite(kd) || std::abs(kd) > limits.curvature_rate_max + kSlack) {
      throw BoundViolation(t, "curvature rate out of bounds");
    }
    s.accel = a;
    s.speed = std::max(0.0, s.speed + a * dt);
    s.heading += s.speed * s.curvature * dt;
    s.curvature += kd * dt;
    if (std::abs(s.curvature) > limits.curvature_max + kSlack) throw BoundViolation(t, "curvature out of bounds");
    s.position += Vec2{std::cos(s.heading), std::sin(s.heading)} * (s.speed * dt);
    states.push_back(s);
  }
  return states;
}

std::vector<Vec2> positions(const std::vector<State>& states) {
  std::vector<Vec2> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(s.position);
  return out;
}

}  // namespace robusttraj::bicycle
