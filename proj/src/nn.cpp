#include "robusttraj/nn.hpp"

#include <cmath>
#include <random>

#include "robusttraj/common.hpp"

namespace robusttraj::nn {

std::size_t ParamSet::add(std::string name, ad::Tensor value) {
  for (const auto& n : names_)
    if (n == name) throw std::invalid_argument("param: duplicate name " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::size_t ParamSet::index(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw std::out_of_range("param: unknown name " + name);
}

void ParamSet::set(std::size_t i, ad::Tensor v) {
  if (v.shape() != values_.at(i).shape()) {
    throw ad::ShapeError("param " + names_[i] + ": shape " + ad::shape_str(v.shape()) + " != " +
                         ad::shape_str(values_[i].shape()));
  }
  values_[i] = std::move(v);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

Bound bind(ad::Graph& g, const ParamSet& params, bool trainable) {
  Bound b{g, {}};
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    b.vars.push_back(trainable ? g.leaf(params[i]) : g.constant(params[i]));
  return b;
}

std::vector<ad::Tensor> gradients(const ad::Gradients& grads, const Bound& bound) {
  std::vector<ad::Tensor> out;
  out.reserve(bound.vars.size());
  for (const auto& v : bound.vars) out.push_back(grads.wrt(v));
  return out;
}

ad::Tensor flatten(const ParamSet& params) {
  std::vector<double> v;
  v.reserve(params.scalar_count());
  for (std::size_t i = 0; i < params.size(); ++i) v.insert(v.end(), params[i].data().begin(), params[i].data().end());
  return ad::Tensor::vector(std::move(v));
}

Bound bind_flat(ad::Graph& g, ad::Var flat, const ParamSet& like) {
  if (flat.shape() != ad::Shape{like.scalar_count()}) throw ad::ShapeError("bind_flat: size mismatch");
  Bound b{g, {}};
  std::size_t off = 0;
  for (std::size_t i = 0; i < like.size(); ++i) {
    b.vars.push_back(ad::reshape(ad::slice(flat, 0, off, like[i].size()), like[i].shape()));
    off += like[i].size();
  }
  return b;
}

Dense make_dense(ParamSet& params, const std::string& prefix, std::size_t in, std::size_t out,
                 std::uint64_t seed, double gain) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, gain / std::sqrt(double(in)));
  std::vector<double> w(in * out);
  for (auto& x : w) x = nd(rng);
  Dense d;
  d.in = in;
  d.out = out;
  d.weight = params.add(prefix + ".weight", ad::Tensor({in, out}, std::move(w)));
  d.bias = params.add(prefix + ".bias", ad::Tensor::zeros({1, out}));
  return d;
}

ad::Var ones(ad::Graph& g, std::size_t rows) { return g.constant(ad::Tensor::filled({rows, 1}, 1.0)); }

ad::Var apply(const Bound& b, const Dense& layer, ad::Var x) {
  const std::size_t rows = x.shape().at(0);
  return ad::add(ad::matmul(x, b[layer.weight]), ad::matmul(ones(b.graph, rows), b[layer.bias]));
}

void Adam::step(ParamSet& params, const std::vector<ad::Tensor>& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam: gradient count mismatch");
  if (m_.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params[i].size(), 0.0);
      v_.emplace_back(params[i].size(), 0.0);
    }
  }
  double sq = 0.0;
  for (const auto& g : grads)
    for (double x : g.data()) sq += x * x;
  if (!std::isfinite(sq)) throw NumericalError("adam: non-finite gradient");
  double factor = 1.0;
  if (cfg_.clip_norm > 0.0 && std::sqrt(sq) > cfg_.clip_norm) factor = cfg_.clip_norm / std::sqrt(sq);

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<double> w = params[i].data();
    const auto& g = grads[i].data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * factor;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      w[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
    params.set(i, ad::Tensor(params[i].shape(), std::move(w)));
  }
}

}  // namespace robusttraj::nn
