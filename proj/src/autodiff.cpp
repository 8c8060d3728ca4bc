#include "robusttraj/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace robusttraj::ad {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Softplus: return "softplus";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Sin: return "sin";
    case OpKind::Cos: return "cos";
    case OpKind::Clamp: return "clamp";
    case OpKind::Sum: return "sum";
    case OpKind::SumAxis: return "sum_axis";
    case OpKind::Mean: return "mean";
    case OpKind::SqNorm: return "sqnorm";
    case OpKind::Norm: return "norm";
    case OpKind::MinOverAxis: return "min_over_axis";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Reshape: return "reshape";
    case OpKind::Elementwise: return "elementwise";
  }
  return "?";
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_size(shape_) != values_.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " needs " +
                     std::to_string(shape_size(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
  if (!all_finite()) throw DomainError("tensor: non-finite value in leaf tensor");
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, {v}); }
Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }
Tensor Tensor::filled(Shape shape, double v) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}
Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(v));
}
Tensor Tensor::vector(std::vector<double> v) {
  const auto n = v.size();
  return Tensor({n}, std::move(v));
}
Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}
Tensor Tensor::unchecked(Shape shape, std::vector<double> values) {
  return Tensor(Unchecked{}, std::move(shape), std::move(values));
}

double Tensor::item() const {
  if (values_.size() != 1) throw ShapeError("item: tensor " + shape_str(shape_) + " is not a scalar");
  return values_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != values_.size()) {
    throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
  }
  return Tensor(Unchecked{}, std::move(shape), values_);
}

// ---- Graph -----------------------------------------------------------------

const Tensor& Var::value() const { return graph_->value(id_); }

Var Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Graph::mix_branch(std::uint64_t v) {
  branch_sig_ ^= v + 0x9e3779b97f4a7c15ULL + (branch_sig_ << 6) + (branch_sig_ >> 2);
}

Var Graph::leaf(Tensor t) {
  if (!t.all_finite()) throw DomainError("leaf: non-finite value");
  Node n;
  n.kind = OpKind::Leaf;
  n.value = std::move(t);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::constant(Tensor t) {
  Node n;
  n.kind = OpKind::Constant;
  n.value = std::move(t);
  return push(std::move(n));
}

const std::vector<std::size_t>& Graph::argmin(Var v) const {
  const auto& n = nodes_.at(v.id());
  if (n.kind != OpKind::MinOverAxis) throw std::invalid_argument("argmin: node is not min_over_axis");
  return n.index;
}

Tensor Gradients::wrt(Var v) const {
  if (v.id() >= grads_.size() || grads_[v.id()].empty()) return Tensor::zeros(v.shape());
  return Tensor::unchecked(shapes_[v.id()], grads_[v.id()]);
}

bool Gradients::has(Var v) const { return v.id() < grads_.size() && !grads_[v.id()].empty(); }

namespace {

Graph& same_graph(Var a, Var b, const char* op) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
  return a.graph();
}

Graph::Node make(OpKind k, std::initializer_list<Var> in, Tensor value) {
  Graph::Node n;
  n.kind = k;
  for (auto v : in) {
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || v.graph().requires_grad(v.id());
  }
  n.value = std::move(value);
  return n;
}

template <class F>
Graph::Node unary_node(OpKind k, Var a, F f) {
  const auto& x = a.value().data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return make(k, {a}, Tensor::unchecked(a.shape(), std::move(out)));
}

template <class F>
Var unary(OpKind k, Var a, F f) {
  return a.graph().push(unary_node(k, a, f));
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  const auto& x = a.value().data();
  const auto& y = b.value().data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      if (xv == 0.0) continue;
      const double* yr = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += xv * yr[j];
    }
  }
  return g.push(make(OpKind::MatMul, {a, b}, Tensor::unchecked({m, n}, std::move(out))));
}

namespace {
template <class F>
Var binary(OpKind k, Var a, Var b, const char* name, F f) {
  Graph& g = same_graph(a, b, name);
  const bool a_scalar = a.value().size() == 1 && a.shape().empty();
  const bool b_scalar = b.value().size() == 1 && b.shape().empty();
  if (!a_scalar && !b_scalar) require_same_shape(a, b, name);
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const auto n = shape_size(out_shape);
  const auto& x = a.value().data();
  const auto& y = b.value().data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(x[a_scalar ? 0 : i], y[b_scalar ? 0 : i]);
  return g.push(make(k, {a, b}, Tensor::unchecked(out_shape, std::move(out))));
}
}  // namespace

Var add(Var a, Var b) { return binary(OpKind::Add, a, b, "add", [](double x, double y) { return x + y; }); }
Var sub(Var a, Var b) { return binary(OpKind::Sub, a, b, "sub", [](double x, double y) { return x - y; }); }
Var mul(Var a, Var b) { return binary(OpKind::Mul, a, b, "mul", [](double x, double y) { return x * y; }); }

Var scale(Var a, double s) {
  auto n = unary_node(OpKind::Scale, a, [s](double x) { return s * x; });
  n.p0 = s;
  return a.graph().push(std::move(n));
}

Var add_scalar(Var a, double s) { return unary(OpKind::AddScalar, a, [s](double x) { return x + s; }); }

Var tanh(Var a) { return unary(OpKind::Tanh, a, [](double x) { return std::tanh(x); }); }

Var relu(Var a) {
  std::uint64_t mask = 0;
  for (double x : a.value().data()) mask = mask * 31 + (x > 0.0);
  a.graph().mix_branch(mask);
  return unary(OpKind::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Var exp(Var a) { return unary(OpKind::Exp, a, [](double x) { return std::exp(x); }); }

Var log(Var a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x));
  }
  return unary(OpKind::Log, a, [](double x) { return std::log(x); });
}

Var softplus(Var a) {
  return unary(OpKind::Softplus, a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); });
}

Var sqrt(Var a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw DomainError("sqrt: non-positive input " + std::to_string(x));
  }
  return unary(OpKind::Sqrt, a, [](double x) { return std::sqrt(x); });
}

Var sin(Var a) { return unary(OpKind::Sin, a, [](double x) { return std::sin(x); }); }
Var cos(Var a) { return unary(OpKind::Cos, a, [](double x) { return std::cos(x); }); }

Var clamp(Var a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  std::uint64_t mask = 0;
  for (double x : a.value().data()) mask = mask * 3 + (x < lo ? 1 : (x > hi ? 2 : 0));
  a.graph().mix_branch(mask);
  auto n = unary_node(OpKind::Clamp, a, [lo, hi](double x) { return std::clamp(x, lo, hi); });
  n.p0 = lo;
  n.p1 = hi;
  return a.graph().push(std::move(n));
}

Var sum(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return a.graph().push(make(OpKind::Sum, {a}, Tensor::unchecked({}, {s})));
}

Var sum(Var a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis, "sum");
  const auto& x = a.value().data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
  auto node = make(OpKind::SumAxis, {a}, Tensor::unchecked(drop_axis(a.shape(), axis), std::move(out)));
  node.axis = axis;
  return a.graph().push(std::move(node));
}

Var mean(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return a.graph().push(make(OpKind::Mean, {a}, Tensor::unchecked({}, {s / double(a.value().size())})));
}

Var sqnorm(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x * x;
  return a.graph().push(make(OpKind::SqNorm, {a}, Tensor::unchecked({}, {s})));
}

Var norm(Var a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x * x;
  return a.graph().push(make(OpKind::Norm, {a}, Tensor::unchecked({}, {std::sqrt(s)})));
}

Var min_over_axis(Var a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis, "min_over_axis");
  if (sp.n == 0) throw ShapeError("min_over_axis: empty axis");
  const auto& x = a.value().data();
  std::vector<double> out(sp.outer * sp.inner);
  std::vector<std::size_t> idx(sp.outer * sp.inner);
  std::uint64_t sig = 0;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double bv = x[(o * sp.n) * sp.inner + i];
      for (std::size_t j = 1; j < sp.n; ++j) {
        const double v = x[(o * sp.n + j) * sp.inner + i];
        if (v < bv) {  // strict: lowest index wins ties
          bv = v;
          best = j;
        }
      }
      out[o * sp.inner + i] = bv;
      idx[o * sp.inner + i] = best;
      sig = sig * 131 + best;
    }
  }
  a.graph().mix_branch(sig);
  auto node = make(OpKind::MinOverAxis, {a}, Tensor::unchecked(drop_axis(a.shape(), axis), std::move(out)));
  node.axis = axis;
  node.index = std::move(idx);
  return a.graph().push(std::move(node));
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Graph& g = parts[0].graph();
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    same_graph(parts[0], p, "concat");
    const auto& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(s0) + " on axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<double> out(shape_size(out_shape));
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  Graph::Node node;
  node.kind = OpKind::Concat;
  for (const auto& p : parts) {
    const auto& x = p.value().data();
    const std::size_t w = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.data() + o * w, w, out.data() + o * out_row + offset);
    offset += w;
    node.inputs.push_back(p.id());
    node.requires_grad = node.requires_grad || g.requires_grad(p.id());
  }
  node.axis = axis;
  node.value = Tensor::unchecked(std::move(out_shape), std::move(out));
  return g.push(std::move(node));
}

Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len) {
  const auto sp = split_axis(a.shape(), axis, "slice");
  if (start + len > sp.n) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") exceeds axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  const auto& x = a.value().data();
  std::vector<double> out(sp.outer * len * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data() + (o * sp.n + start) * sp.inner, len * sp.inner, out.data() + o * len * sp.inner);
  auto node = make(OpKind::Slice, {a}, Tensor::unchecked(std::move(out_shape), std::move(out)));
  node.axis = axis;
  node.start = start;
  return a.graph().push(std::move(node));
}

Var reshape(Var a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return a.graph().push(make(OpKind::Reshape, {a}, Tensor::unchecked(std::move(shape), a.value().data())));
}

Var elementwise(Var a, std::function<double(double)> f, std::function<double(double)> df) {
  auto n = unary_node(OpKind::Elementwise, a, f);
  n.derivative = std::move(df);
  return a.graph().push(std::move(n));
}

// ---- backward --------------------------------------------------------------

Gradients Graph::backward(Var root) const {
  if (&root.graph() != this) throw std::invalid_argument("backward: root from another graph");
  if (root.value().size() != 1) {
    throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
  }
  const std::size_t count = root.id() + 1;
  std::vector<std::vector<double>> g(count);
  std::vector<Shape> shapes(count);
  for (std::size_t i = 0; i < count; ++i) shapes[i] = nodes_[i].value.shape();
  if (!nodes_[root.id()].requires_grad) return Gradients(std::move(g), std::move(shapes));
  g[root.id()] = {1.0};

  auto acc = [&](std::size_t id) -> std::vector<double>* {
    if (!nodes_[id].requires_grad) return nullptr;
    auto& v = g[id];
    if (v.empty()) v.assign(nodes_[id].value.size(), 0.0);
    return &v;
  };

  for (std::size_t id = count; id-- > 0;) {
    if (g[id].empty()) continue;
    const Node& n = nodes_[id];
    const std::vector<double>& up = g[id];
    const auto& y = n.value.data();
    switch (n.kind) {
      case OpKind::Leaf:
      case OpKind::Constant:
        break;
      case OpKind::MatMul: {
        const auto& A = nodes_[n.inputs[0]].value;
        const auto& B = nodes_[n.inputs[1]].value;
        const std::size_t m = A.dim(0), k = A.dim(1), nn = B.dim(1);
        if (auto* ga = acc(n.inputs[0])) {
          // dA = up · Bᵀ
          const auto& b = B.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              const double* ur = up.data() + i * nn;
              const double* br = b.data() + p * nn;
              for (std::size_t j = 0; j < nn; ++j) s += ur[j] * br[j];
              (*ga)[i * k + p] += s;
            }
        }
        if (auto* gb = acc(n.inputs[1])) {
          // dB = Aᵀ · up
          const auto& a = A.data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double av = a[i * k + p];
              if (av == 0.0) continue;
              double* gr = gb->data() + p * nn;
              const double* ur = up.data() + i * nn;
              for (std::size_t j = 0; j < nn; ++j) gr[j] += av * ur[j];
            }
        }
        break;
      }
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        const auto& xa = nodes_[n.inputs[0]].value.data();
        const auto& xb = nodes_[n.inputs[1]].value.data();
        const bool as = xa.size() == 1 && nodes_[n.inputs[0]].value.rank() == 0;
        const bool bs = xb.size() == 1 && nodes_[n.inputs[1]].value.rank() == 0;
        const double sign_b = n.kind == OpKind::Sub ? -1.0 : 1.0;
        if (auto* ga = acc(n.inputs[0])) {
          for (std::size_t i = 0; i < up.size(); ++i) {
            const double d = n.kind == OpKind::Mul ? up[i] * xb[bs ? 0 : i] : up[i];
            (*ga)[as ? 0 : i] += d;
          }
        }
        if (auto* gb = acc(n.inputs[1])) {
          for (std::size_t i = 0; i < up.size(); ++i) {
            const double d = n.kind == OpKind::Mul ? up[i] * xa[as ? 0 : i] : sign_b * up[i];
            (*gb)[bs ? 0 : i] += d;
          }
        }
        break;
      }
      case OpKind::Scale:
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] += n.p0 * up[i];
        break;
      case OpKind::AddScalar:
      case OpKind::Reshape:
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] += up[i];
        break;
      case OpKind::Tanh:
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] += up[i] * (1.0 - y[i] * y[i]);
        break;
      case OpKind::Relu: {
        const auto& x = nodes_[n.inputs[0]].value.data();
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] += x[i] > 0.0 ? up[i] : 0.0;
        break;
      }
      case OpKind::Exp:
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] += up[i] * y[i];
        break;
      case OpKind::Log: {
        const auto& x = nodes_[n.inputs[0]].value.data();
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] += up[i] / x[i];
        break;
      }
      case OpKind::Softplus: {
        const auto& x = nodes_[n.inputs[0]].value.data();
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) {
            const double sig = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
            (*ga)[i] += up[i] * sig;
          }
        break;
      }
      case OpKind::Sqrt:
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] += up[i] * 0.5 / y[i];
        break;
      case OpKind::Sin: {
        const auto& x = nodes_[n.inputs[0]].value.data();
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] += up[i] * std::cos(x[i]);
        break;
      }
      case OpKind::Cos: {
        const auto& x = nodes_[n.inputs[0]].value.data();
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] -= up[i] * std::sin(x[i]);
        break;
      }
      case OpKind::Clamp: {
        const auto& x = nodes_[n.inputs[0]].value.data();
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i)
            if (x[i] >= n.p0 && x[i] <= n.p1) (*ga)[i] += up[i];
        break;
      }
      case OpKind::Sum:
        if (auto* ga = acc(n.inputs[0]))
          for (auto& v : *ga) v += up[0];
        break;
      case OpKind::Mean:
        if (auto* ga = acc(n.inputs[0])) {
          const double s = up[0] / double(ga->size());
          for (auto& v : *ga) v += s;
        }
        break;
      case OpKind::SumAxis:
        if (auto* ga = acc(n.inputs[0])) {
          const auto sp = split_axis(nodes_[n.inputs[0]].value.shape(), n.axis, "sum");
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t j = 0; j < sp.n; ++j)
              for (std::size_t i = 0; i < sp.inner; ++i) (*ga)[(o * sp.n + j) * sp.inner + i] += up[o * sp.inner + i];
        }
        break;
      case OpKind::SqNorm: {
        const auto& x = nodes_[n.inputs[0]].value.data();
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += 2.0 * up[0] * x[i];
        break;
      }
      case OpKind::Norm: {
        const auto& x = nodes_[n.inputs[0]].value.data();
        if (y[0] > 0.0)
          if (auto* ga = acc(n.inputs[0]))
            for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += up[0] * x[i] / y[0];
        break;
      }
      case OpKind::MinOverAxis:
        if (auto* ga = acc(n.inputs[0])) {
          const auto sp = split_axis(nodes_[n.inputs[0]].value.shape(), n.axis, "min_over_axis");
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < sp.inner; ++i) {
              const std::size_t k = o * sp.inner + i;
              (*ga)[(o * sp.n + n.index[k]) * sp.inner + i] += up[k];
            }
        }
        break;
      case OpKind::Concat: {
        const Shape& so = n.value.shape();
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < n.axis; ++i) outer *= so[i];
        for (std::size_t i = n.axis + 1; i < so.size(); ++i) inner *= so[i];
        const std::size_t out_row = so[n.axis] * inner;
        std::size_t offset = 0;
        for (std::size_t in : n.inputs) {
          const std::size_t w = nodes_[in].value.shape()[n.axis] * inner;
          if (auto* ga = acc(in))
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < w; ++j) (*ga)[o * w + j] += up[o * out_row + offset + j];
          offset += w;
        }
        break;
      }
      case OpKind::Slice:
        if (auto* ga = acc(n.inputs[0])) {
          const auto sp = split_axis(nodes_[n.inputs[0]].value.shape(), n.axis, "slice");
          const std::size_t len = n.value.shape()[n.axis];
          for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t j = 0; j < len * sp.inner; ++j)
              (*ga)[(o * sp.n + n.start) * sp.inner + j] += up[o * len * sp.inner + j];
        }
        break;
      case OpKind::Elementwise: {
        const auto& x = nodes_[n.inputs[0]].value.data();
        if (auto* ga = acc(n.inputs[0]))
          for (std::size_t i = 0; i < up.size(); ++i) (*ga)[i] += up[i] * n.derivative(x[i]);
        break;
      }
    }
  }
  return Gradients(std::move(g), std::move(shapes));
}

// ---- gradient check --------------------------------------------------------

GradCheckReport gradient_check(const ScalarFn& fn, const Tensor& point, const GradCheckOptions& opts) {
  GradCheckReport report;
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> jit(-opts.jitter, opts.jitter);
  Tensor x = point;

  for (std::size_t attempt = 0; attempt <= opts.max_retries; ++attempt) {
    Graph g;
    Var leaf = g.leaf(x);
    Var out = fn(g, leaf);
    const std::uint64_t base_sig = g.branch_signature();
    const Tensor analytic = g.backward(out).wrt(leaf);

    bool kink = false;
    double worst = 0.0;
    std::size_t worst_i = 0;
    std::vector<double> probe = x.data();
    for (std::size_t i = 0; i < probe.size() && !kink; ++i) {
      const double orig = probe[i];
      auto eval = [&](double v) {
        probe[i] = v;
        Graph gg;
        Var l = gg.leaf(Tensor(x.shape(), probe));
        Var o = fn(gg, l);
        if (gg.branch_signature() != base_sig) kink = true;
        return o.value().item();
      };
      const double fp = eval(orig + opts.h);
      const double fm = eval(orig - opts.h);
      probe[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.h);
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.scale_floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > worst || !std::isfinite(rel)) {
        worst = std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity();
        worst_i = i;
      }
    }
    if (kink) {
      report.kink_warning = true;
      report.retries = attempt + 1;
      std::vector<double> moved = x.data();
      for (auto& v : moved) v += jit(rng);
      x = Tensor(x.shape(), std::move(moved));
      continue;
    }
    report.max_rel_error = worst;
    report.worst_index = worst_i;
    report.pass = worst <= opts.tol;
    return report;
  }
  report.pass = false;
  report.max_rel_error = std::numeric_limits<double>::infinity();
  return report;
}

}  // namespace robusttraj::ad
