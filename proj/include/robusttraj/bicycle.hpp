#pragma once

// Kinematic bicycle model in curvature/acceleration form.
//
// Integration state is (p, heading, speed, curvature); controls are the
// curvature rate and the acceleration. Forward Euler, updated in the order
// v, heading, curvature, position.

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "robusttraj/common.hpp"

namespace robusttraj::bicycle {

struct Limits {
  double curvature_max = 0.2;       // 1/m
  double accel_max = 4.0;           // m/s^2
  double curvature_rate_max = 0.1;  // 1/(m*s)
};

struct State {
  Vec2 position;
  double heading = 0.0;
  double speed = 0.0;
  double curvature = 0.0;
  double accel = 0.0;

  friend bool operator==(const State&, const State&) = default;
};

struct ControlSequence {
  std::vector<double> curvature_rate;
  std::vector<double> accel;

  std::size_t size() const { return accel.size(); }
  friend bool operator==(const ControlSequence&, const ControlSequence&) = default;
};

class BoundViolation : public std::invalid_argument {
 public:
  BoundViolation(std::size_t step, const std::string& what)
      : std::invalid_argument("bicycle: step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Returns controls.size()+1 states, the first being `init`. Throws
// BoundViolation naming the first step whose control or curvature is out of
// bounds. Speed is floored at zero.
std::vector<State> rollout(const State& init, const ControlSequence& controls, double dt,
                           const Limits& limits = {});
std::vector<Vec2> positions(const std::vector<State>& states);

}  // namespace robusttraj::bicycle
