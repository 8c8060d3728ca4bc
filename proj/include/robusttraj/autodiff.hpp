#pragma once

// Dense-tensor reverse-mode automatic differentiation.
//
// A Graph is a tape: every op appends a node whose inputs precede it, so the
// node order is already topological. Tensors are immutable values.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace robusttraj::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class Tensor {
 public:
  Tensor() : shape_{}, values_{0.0} {}
  // Leaf constructor: rejects size mismatch and non-finite values.
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double v);
  static Tensor identity(std::size_t n);
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  // Op outputs may legitimately overflow; no finiteness check.
  static Tensor unchecked(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  const std::vector<double>& data() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * shape_.at(1) + c]; }
  double item() const;
  bool all_finite() const;

  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  struct Unchecked {};
  Tensor(Unchecked, Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), values_(std::move(values)) {}

  Shape shape_;
  std::vector<double> values_;
};

enum class OpKind {
  Leaf,
  Constant,
  MatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  Tanh,
  Relu,
  Exp,
  Log,
  Softplus,
  Sqrt,
  Sin,
  Cos,
  Clamp,
  Sum,
  SumAxis,
  Mean,
  SqNorm,
  Norm,
  MinOverAxis,
  Concat,
  Slice,
  Reshape,
  Elementwise,
};

const char* op_name(OpKind k);

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Graph& graph() const { return *graph_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<std::vector<double>> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  // Gradient w.r.t. a node; zeros if the root does not depend on it.
  Tensor wrt(Var v) const;
  bool has(Var v) const;

 private:
  std::vector<std::vector<double>> grads_;
  std::vector<Shape> shapes_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor t);
  Var constant(Tensor t);

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  // Argmin indices recorded by a MinOverAxis node.
  const std::vector<std::size_t>& argmin(Var v) const;

  // Hash of every piecewise branch decision taken so far (relu masks,
  // argmin picks, active clamps). Used to detect kinks in finite differences.
  std::uint64_t branch_signature() const { return branch_sig_; }

  Gradients backward(Var root) const;

  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    double p0 = 0.0;
    double p1 = 0.0;
    std::size_t axis = 0;
    std::size_t start = 0;
    std::vector<std::size_t> index;
    std::function<double(double)> derivative;
  };

  Var push(Node n);
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  void mix_branch(std::uint64_t v);

 private:
  std::deque<Node> nodes_;
  std::uint64_t branch_sig_ = 0x9e3779b97f4a7c15ULL;
};

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var softplus(Var a);
Var sqrt(Var a);
Var sin(Var a);
Var cos(Var a);
Var clamp(Var a, double lo, double hi);
Var sum(Var a);
Var sum(Var a, std::size_t axis);
Var mean(Var a);
Var sqnorm(Var a);
// L2 norm; subgradient 0 at the origin.
Var norm(Var a);
Var min_over_axis(Var a, std::size_t axis);
Var concat(std::span<const Var> parts, std::size_t axis);
Var concat(std::initializer_list<Var> parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len);
Var reshape(Var a, Shape shape);
// User-supplied scalar map with its derivative.
Var elementwise(Var a, std::function<double(double)> f, std::function<double(double)> df);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator-(Var a) { return scale(a, -1.0); }

// ---- finite-difference checking --------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool pass = false;
  bool kink_warning = false;
  std::size_t retries = 0;
};

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Denominator floor for the relative error of near-zero components.
  double scale_floor = 1e-3;
  std::size_t max_retries = 3;
  double jitter = 1e-3;
  std::uint64_t seed = 7;
};

using ScalarFn = std::function<Var(Graph&, Var)>;

GradCheckReport gradient_check(const ScalarFn& fn, const Tensor& point,
                               const GradCheckOptions& opts = {});

}  // namespace robusttraj::ad
