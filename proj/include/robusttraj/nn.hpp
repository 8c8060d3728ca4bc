#pragma once

// Parameter storage, dense layers and the Adam optimizer shared by the
// predictor families.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "robusttraj/autodiff.hpp"

namespace robusttraj::nn {

class ParamSet {
 public:
  std::size_t add(std::string name, ad::Tensor value);
  std::size_t size() const { return values_.size(); }
  std::size_t index(const std::string& name) const;
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const ad::Tensor& operator[](std::size_t i) const { return values_.at(i); }
  void set(std::size_t i, ad::Tensor v);
  std::size_t scalar_count() const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<ad::Tensor> values_;
};

// A ParamSet bound into one graph, as leaves (trainable) or constants.
struct Bound {
  ad::Graph& graph;
  std::vector<ad::Var> vars;
  ad::Var operator[](std::size_t i) const { return vars.at(i); }
};

Bound bind(ad::Graph& g, const ParamSet& params, bool trainable);
std::vector<ad::Tensor> gradients(const ad::Gradients& grads, const Bound& bound);

// All parameters concatenated into one vector, and the inverse view: a
// Bound whose vars are reshaped slices of `flat`. Used for finite-difference
// checks over a whole parameter set.
ad::Tensor flatten(const ParamSet& params);
Bound bind_flat(ad::Graph& g, ad::Var flat, const ParamSet& like);

struct Dense {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

// Registers W (in×out, scaled normal) and b (1×out, zero).
Dense make_dense(ParamSet& params, const std::string& prefix, std::size_t in, std::size_t out,
                 std::uint64_t seed, double gain = 1.0);
// x (rows×in) · W + 1·b
ad::Var apply(const Bound& b, const Dense& layer, ad::Var x);
// Column of ones, rows×1.
ad::Var ones(ad::Graph& g, std::size_t rows);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  // Applies one update; throws NumericalError on non-finite gradients.
  void step(ParamSet& params, const std::vector<ad::Tensor>& grads);
  std::size_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace robusttraj::nn
