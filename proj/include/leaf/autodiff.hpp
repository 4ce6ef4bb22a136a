// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode automatic differentiation over dense double arrays.
//
// A Graph owns every node it creates. Nodes are appended in creation order,
// which is also a valid topological order, so backward() is a single reverse
// sweep. A graph is confined to one thread; independent graphs share nothing.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace leaf::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/// Row-major array of rank 1..3. Row-wise operations view a rank-r array as
/// a matrix of (product of leading dims) x (last dim).
class DenseArray {
 public:
  DenseArray() = default;
  explicit DenseArray(Shape shape, double fill = 0.0);
  DenseArray(Shape shape, std::vector<double> values);

  static DenseArray scalar(double v) { return DenseArray({1}, {v}); }
  static DenseArray vector(std::initializer_list<double> v) {
    return DenseArray({v.size()}, std::vector<double>(v));
  }
  static DenseArray matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return DenseArray({rows, cols}, fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(values_).subspan(r * cols(), cols());
  }

  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const DenseArray&, const DenseArray&) = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

enum class OpKind : std::uint8_t {
  leaf,
  add,
  mul,
  scale,
  matmul,
  transpose,
  gather_rows,
  relu,
  layer_norm,
  softmax_rows,
  log_softmax_rows,
  mean,
  sum,
  concat_rows,
  slice_rows,
};

const char* op_name(OpKind kind);

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

/// Extra operands for Graph::forward_op: `indices` feeds gather_rows,
/// `begin`/`end` feed slice_rows, `factor` feeds scale.
struct OpArgs {
  std::vector<std::size_t> indices;
  std::size_t begin = 0;
  std::size_t end = 0;
  double factor = 1.0;
  bool causal = false;
};

class Graph {
 public:
  static constexpr double kLayerNormEps = 1e-5;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Leaf node. Only nodes reachable from a requires_grad leaf take part in
  /// backward; everything else is treated as a constant.
  NodeId input(DenseArray value, bool requires_grad = true);
  NodeId constant(DenseArray value) { return input(std::move(value), false); }

  // Elementwise on equal shapes; add() also accepts a single bias row
  // ([n] or [1, n]) broadcast over every row of a [m, n] left operand.
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId relu(NodeId a);

  // [m, k] x [k, n] -> [m, n]
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  // out[i, :] = table[indices[i], :]
  NodeId gather_rows(NodeId table, std::span<const std::size_t> indices);

  // Per-row standardisation (no affine parameters).
  NodeId layer_norm(NodeId a);
  // causal == true zeroes entries above the diagonal (square input only).
  NodeId softmax_rows(NodeId a, bool causal = false);
  NodeId log_softmax_rows(NodeId a);

  NodeId mean(NodeId a);
  NodeId sum(NodeId a);
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId slice_rows(NodeId a, std::size_t begin, std::size_t end);

  /// Generic dispatch used by tests that sweep over op kinds.
  NodeId forward_op(OpKind kind, std::span<const NodeId> inputs, const OpArgs& args = OpArgs());

  /// Zeroes every accumulator, seeds d(root)/d(root) = 1 and propagates.
  void backward(NodeId root);

  const DenseArray& value(NodeId id) const { return nodes_.at(id.index).value; }
  const DenseArray& grad(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> parents;
    DenseArray value;
    DenseArray grad;
    bool requires_grad = false;
    std::vector<std::size_t> indices;
    std::vector<double> cache;
    double factor = 1.0;
    std::size_t begin = 0;
    bool causal = false;
  };

  NodeId push(Node node);
  Node& node(NodeId id) { return nodes_.at(id.index); }
  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  bool any_requires_grad(std::initializer_list<NodeId> ids) const;
  void backward_node(Node& n);

  std::vector<Node> nodes_;
};

/// Central-difference gradient check for a scalar function built on a graph
/// from a single input leaf. Returns
///   max_i |analytic_i - fd_i| / max(1, |analytic_i|).
using ScalarBuilder = std::function<NodeId(Graph&, NodeId)>;
double finite_diff_check(const ScalarBuilder& f, const DenseArray& x, double h = 1e-5);

}  // namespace leaf::ad
