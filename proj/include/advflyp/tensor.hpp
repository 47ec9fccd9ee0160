#pragma once

// Dense row-major float64 tensors and a tape-based reverse-mode autodiff graph.
//
// A Graph owns every value produced while evaluating an objective. Nodes are
// appended in evaluation order, so the tape is already topologically sorted and
// backward is a single reverse sweep. Gradients are returned in a fresh
// Gradients map on each backward call; accumulation across calls goes through
// Graph::backward_accumulate explicitly.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace advflyp {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D access, row-major.
  double& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }

  double item() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  // Same data, new shape of equal size.
  Tensor reshaped(Shape shape) const;
  // Copy of rows [begin, end) along axis 0.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;

  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

using NodeId = std::uint32_t;
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  NodeId id() const { return id_; }
  Graph& graph() const { return *graph_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Everything a node's backward rule can see.
struct BackwardContext {
  const Tensor& output;
  const Tensor& output_grad;
  std::span<const Tensor* const> inputs;
  // nullptr for inputs that do not need a gradient. Rules accumulate (+=).
  std::span<Tensor* const> input_grads;
};

using BackwardRule = std::function<void(const BackwardContext&)>;

/// Gradients keyed by node id. Only nodes that require a gradient appear.
class Gradients {
 public:
  bool contains(Var v) const { return contains(v.id()); }
  bool contains(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }
  const Tensor& operator[](Var v) const { return at(v.id()); }
  const Tensor& at(NodeId id) const;
  std::size_t count() const;

 private:
  friend class Graph;
  std::vector<std::optional<Tensor>> grads_;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf whose gradient is tracked iff value.requires_grad().
  Var variable(Tensor value);
  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Append an op node. It requires a gradient iff any input does.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardRule rule);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardRule rule);

  /// Reverse sweep from a scalar loss. Fresh gradients every call.
  Gradients backward(Var loss) const;
  /// Same sweep, adding leaf gradients into `into` instead of starting from zero.
  void backward_accumulate(Var loss, Gradients& into) const;

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<NodeId> inputs;
    BackwardRule rule;
    bool requires_grad = false;
  };

  std::vector<std::optional<Tensor>> sweep(Var loss) const;

  std::vector<Node> nodes_;
};

// ---- differentiable ops -------------------------------------------------
// All ops take explicit shapes; there is no implicit broadcasting except the
// scalar factor of scale() and the bias row of add_row_vector().

Var matmul(Var a, Var b);                    // [M×K]·[K×P]
Var transpose(Var m);                        // [N×K] -> [K×N]
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                       // elementwise
Var scale(Var a, double factor);
Var add_row_vector(Var m, Var row);          // [N×K] + [K] on every row
Var relu(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var log_floor(Var a, double floor);          // log(max(a, floor)); zero grad below floor
Var sum(Var a);                              // scalar
Var mean(Var a);                             // scalar
Var row_sum(Var m);                          // [N×K] -> [N]
Var col_mean(Var m);                         // [N×K] -> [1×K]
Var frobenius_norm(Var a);                   // scalar
Var row_norms(Var m);                        // [N×K] -> [N]
Var softmax_rows(Var m);
Var log_softmax_rows(Var m);
Var l2_normalize_rows(Var m);
Var gather_rows(Var m, std::vector<std::size_t> rows);
Var concat_rows(const std::vector<Var>& parts);
Var take_per_row(Var m, std::vector<std::size_t> cols);  // [N×K] -> [N], m[i, cols[i]]
Var reshape(Var a, Shape shape);

}  // namespace advflyp
