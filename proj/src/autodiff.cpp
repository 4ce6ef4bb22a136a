// SPDX-License-Identifier: Apache-2.0

#include "leaf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace leaf::ad {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t shape_product(const Shape& shape) {
  if (shape.empty() || shape.size() > 3) {
    throw ShapeError("array rank must be 1..3, got shape " + shape_to_string(shape));
  }
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("zero-sized dimension in shape " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                   shape_to_string(b));
}

void require_finite(const DenseArray& a, const char* op) {
  if (!a.all_finite()) throw NonFiniteError(std::string(op) + ": non-finite value produced");
}

// out[m, p] += a[m, k] * b[k, p], all row-major and non-overlapping.
void gemm_accumulate(const double* __restrict a, const double* __restrict b, double* __restrict out,
                     std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict orow = out + i * p;
    for (std::size_t j = 0; j < k; ++j) {
      const double aij = a[i * k + j];
      if (aij == 0.0) continue;
      const double* __restrict brow = b + j * p;
      for (std::size_t c = 0; c < p; ++c) orow[c] += aij * brow[c];
    }
  }
}

bool is_bias_row(const DenseArray& a, const DenseArray& b) {
  if (b.cols() != a.cols() || b.rows() != 1 || a.rank() != 2) return false;
  return b.rank() == 1 || (b.rank() == 2 && b.shape()[0] == 1);
}

}  // namespace

DenseArray::DenseArray(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_product(shape_), fill) {}

DenseArray::DenseArray(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_product(shape_) != values_.size()) {
    throw ShapeError("shape " + shape_to_string(shape_) + " does not match " +
                     std::to_string(values_.size()) + " values");
  }
}

void DenseArray::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool DenseArray::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::relu: return "relu";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::softmax_rows: return "softmax_rows";
    case OpKind::log_softmax_rows: return "log_softmax_rows";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_rows: return "slice_rows";
  }
  return "?";
}

NodeId Graph::push(Node n) {
  require_finite(n.value, op_name(n.kind));
  if (n.requires_grad) n.grad = DenseArray(n.value.shape());
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

bool Graph::any_requires_grad(std::initializer_list<NodeId> ids) const {
  return std::any_of(ids.begin(), ids.end(), [&](NodeId id) { return node(id).requires_grad; });
}

const DenseArray& Graph::grad(NodeId id) const {
  const Node& n = node(id);
  if (!n.requires_grad) throw std::logic_error("grad() on a node that does not require grad");
  return n.grad;
}

NodeId Graph::input(DenseArray value, bool requires_grad) {
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const DenseArray& va = value(a);
  const DenseArray& vb = value(b);
  Node n;
  n.kind = OpKind::add;
  n.parents = {a, b};
  n.requires_grad = any_requires_grad({a, b});
  if (va.shape() == vb.shape()) {
    n.value = va;
    auto out = n.value.values();
    auto in = vb.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
  } else if (is_bias_row(va, vb)) {
    n.value = va;
    for (std::size_t r = 0; r < va.rows(); ++r) {
      auto out = n.value.row(r);
      for (std::size_t c = 0; c < out.size(); ++c) out[c] += vb[c];
    }
  } else {
    shape_mismatch("add", va.shape(), vb.shape());
  }
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const DenseArray& va = value(a);
  const DenseArray& vb = value(b);
  if (va.shape() != vb.shape()) shape_mismatch("mul", va.shape(), vb.shape());
  Node n;
  n.kind = OpKind::mul;
  n.parents = {a, b};
  n.requires_grad = any_requires_grad({a, b});
  n.value = va;
  auto out = n.value.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
  Node n;
  n.kind = OpKind::scale;
  n.parents = {a};
  n.requires_grad = any_requires_grad({a});
  n.factor = factor;
  n.value = value(a);
  for (double& v : n.value.values()) v *= factor;
  return push(std::move(n));
}

NodeId Graph::relu(NodeId a) {
  Node n;
  n.kind = OpKind::relu;
  n.parents = {a};
  n.requires_grad = any_requires_grad({a});
  n.value = value(a);
  for (double& v : n.value.values()) v = v > 0.0 ? v : 0.0;
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const DenseArray& va = value(a);
  const DenseArray& vb = value(b);
  if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows()) {
    shape_mismatch("matmul", va.shape(), vb.shape());
  }
  const std::size_t m = va.rows(), k = va.cols(), p = vb.cols();
  Node n;
  n.kind = OpKind::matmul;
  n.parents = {a, b};
  n.requires_grad = any_requires_grad({a, b});
  n.value = DenseArray({m, p});
  gemm_accumulate(va.values().data(), vb.values().data(), n.value.values().data(), m, k, p);
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  const DenseArray& va = value(a);
  if (va.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_to_string(va.shape()));
  Node n;
  n.kind = OpKind::transpose;
  n.parents = {a};
  n.requires_grad = any_requires_grad({a});
  n.value = DenseArray({va.cols(), va.rows()});
  for (std::size_t r = 0; r < va.rows(); ++r) {
    for (std::size_t c = 0; c < va.cols(); ++c) n.value.at(c, r) = va.at(r, c);
  }
  return push(std::move(n));
}

NodeId Graph::gather_rows(NodeId table, std::span<const std::size_t> indices) {
  const DenseArray& vt = value(table);
  if (vt.rank() != 2) throw ShapeError("gather_rows: table must be rank 2, got " + shape_to_string(vt.shape()));
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  Node n;
  n.kind = OpKind::gather_rows;
  n.parents = {table};
  n.requires_grad = any_requires_grad({table});
  n.indices.assign(indices.begin(), indices.end());
  n.value = DenseArray({indices.size(), vt.cols()});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= vt.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[i]) + " out of range for table " +
                       shape_to_string(vt.shape()));
    }
    auto src = vt.row(indices[i]);
    std::copy(src.begin(), src.end(), n.value.row(i).begin());
  }
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId a) {
  const DenseArray& va = value(a);
  Node n;
  n.kind = OpKind::layer_norm;
  n.parents = {a};
  n.requires_grad = any_requires_grad({a});
  n.value = DenseArray(va.shape());
  const std::size_t cols = va.cols();
  n.cache.resize(va.rows());  // per-row reciprocal std
  for (std::size_t r = 0; r < va.rows(); ++r) {
    auto x = va.row(r);
    const double mu = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(cols);
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(cols);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    n.cache[r] = rstd;
    auto out = n.value.row(r);
    for (std::size_t c = 0; c < cols; ++c) out[c] = (x[c] - mu) * rstd;
  }
  return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId a, bool causal) {
  const DenseArray& va = value(a);
  if (causal && va.rows() != va.cols()) {
    throw ShapeError("softmax_rows: causal mask needs a square input, got " + shape_to_string(va.shape()));
  }
  Node n;
  n.kind = OpKind::softmax_rows;
  n.parents = {a};
  n.requires_grad = any_requires_grad({a});
  n.causal = causal;
  n.value = DenseArray(va.shape());
  for (std::size_t r = 0; r < va.rows(); ++r) {
    auto x = va.row(r);
    auto out = n.value.row(r);
    const std::size_t live = causal ? r + 1 : x.size();
    const double mx = *std::max_element(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(live));
    double z = 0.0;
    for (std::size_t c = 0; c < live; ++c) {
      out[c] = std::exp(x[c] - mx);
      z += out[c];
    }
    for (std::size_t c = 0; c < live; ++c) out[c] /= z;
  }
  return push(std::move(n));
}

NodeId Graph::log_softmax_rows(NodeId a) {
  const DenseArray& va = value(a);
  Node n;
  n.kind = OpKind::log_softmax_rows;
  n.parents = {a};
  n.requires_grad = any_requires_grad({a});
  n.value = DenseArray(va.shape());
  for (std::size_t r = 0; r < va.rows(); ++r) {
    auto x = va.row(r);
    auto out = n.value.row(r);
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (double v : x) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < x.size(); ++c) out[c] = x[c] - lse;
  }
  return push(std::move(n));
}

NodeId Graph::mean(NodeId a) {
  const DenseArray& va = value(a);
  Node n;
  n.kind = OpKind::mean;
  n.parents = {a};
  n.requires_grad = any_requires_grad({a});
  const auto v = va.values();
  n.value = DenseArray::scalar(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  const DenseArray& va = value(a);
  Node n;
  n.kind = OpKind::sum;
  n.parents = {a};
  n.requires_grad = any_requires_grad({a});
  const auto v = va.values();
  n.value = DenseArray::scalar(std::accumulate(v.begin(), v.end(), 0.0));
  return push(std::move(n));
}

NodeId Graph::concat_rows(std::span<const NodeId> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = value(parts[0]).cols();
  std::size_t rows = 0;
  Node n;
  n.kind = OpKind::concat_rows;
  for (NodeId p : parts) {
    const DenseArray& vp = value(p);
    if (vp.rank() != 2 || vp.cols() != cols) shape_mismatch("concat_rows", value(parts[0]).shape(), vp.shape());
    rows += vp.rows();
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  n.parents.assign(parts.begin(), parts.end());
  n.value = DenseArray({rows, cols});
  std::size_t at = 0;
  for (NodeId p : parts) {
    const auto v = value(p).values();
    std::copy(v.begin(), v.end(), n.value.values().begin() + static_cast<std::ptrdiff_t>(at));
    at += v.size();
  }
  return push(std::move(n));
}

NodeId Graph::slice_rows(NodeId a, std::size_t begin, std::size_t end) {
  const DenseArray& va = value(a);
  if (va.rank() != 2 || begin >= end || end > va.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for shape " + shape_to_string(va.shape()));
  }
  Node n;
  n.kind = OpKind::slice_rows;
  n.parents = {a};
  n.requires_grad = any_requires_grad({a});
  n.begin = begin;
  n.value = DenseArray({end - begin, va.cols()});
  const auto v = va.values();
  std::copy(v.begin() + static_cast<std::ptrdiff_t>(begin * va.cols()),
            v.begin() + static_cast<std::ptrdiff_t>(end * va.cols()), n.value.values().begin());
  return push(std::move(n));
}

NodeId Graph::forward_op(OpKind kind, std::span<const NodeId> inputs, const OpArgs& args) {
  auto need = [&](std::size_t k) {
    if (inputs.size() != k) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(k) +
                                  " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::leaf: throw std::invalid_argument("forward_op: leaf is not an operation");
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::scale: need(1); return scale(inputs[0], args.factor);
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::transpose: need(1); return transpose(inputs[0]);
    case OpKind::gather_rows: need(1); return gather_rows(inputs[0], args.indices);
    case OpKind::relu: need(1); return relu(inputs[0]);
    case OpKind::layer_norm: need(1); return layer_norm(inputs[0]);
    case OpKind::softmax_rows: need(1); return softmax_rows(inputs[0], args.causal);
    case OpKind::log_softmax_rows: need(1); return log_softmax_rows(inputs[0]);
    case OpKind::mean: need(1); return mean(inputs[0]);
    case OpKind::sum: need(1); return sum(inputs[0]);
    case OpKind::concat_rows: return concat_rows(inputs);
    case OpKind::slice_rows: need(1); return slice_rows(inputs[0], args.begin, args.end);
  }
  throw std::invalid_argument("forward_op: unknown kind");
}

void Graph::backward(NodeId root) {
  const Node& r = node(root);
  if (r.value.size() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + shape_to_string(r.value.shape()));
  }
  for (Node& n : nodes_) {
    if (n.requires_grad) n.grad.fill(0.0);
  }
  if (!r.requires_grad) return;
  node(root).grad[0] = 1.0;
  for (std::size_t i = root.index + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.kind != OpKind::leaf) backward_node(n);
  }
}

void Graph::backward_node(Node& n) {
  const DenseArray& g = n.grad;
  auto parent = [&](std::size_t k) -> Node& { return nodes_[n.parents[k].index]; };

  switch (n.kind) {
    case OpKind::leaf:
      break;

    case OpKind::add: {
      Node& a = parent(0);
      Node& b = parent(1);
      if (a.requires_grad) {
        auto ga = a.grad.values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad) {
        auto gb = b.grad.values();
        if (b.grad.size() == g.size()) {
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i];
        } else {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            auto gr = g.row(r);
            for (std::size_t c = 0; c < gb.size(); ++c) gb[c] += gr[c];
          }
        }
      }
      break;
    }

    case OpKind::mul: {
      Node& a = parent(0);
      Node& b = parent(1);
      if (a.requires_grad) {
        auto ga = a.grad.values();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b.value[i];
      }
      if (b.requires_grad) {
        auto gb = b.grad.values();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a.value[i];
      }
      break;
    }

    case OpKind::scale: {
      Node& a = parent(0);
      auto ga = a.grad.values();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * n.factor;
      break;
    }

    case OpKind::relu: {
      Node& a = parent(0);
      auto ga = a.grad.values();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        if (a.value[i] > 0.0) ga[i] += g[i];
      }
      break;
    }

    case OpKind::matmul: {
      Node& a = parent(0);
      Node& b = parent(1);
      const std::size_t m = a.value.rows(), k = a.value.cols(), p = b.value.cols();
      if (a.requires_grad) {
        // dA += dC * B^T
        std::vector<double> bt(p * k);
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t c = 0; c < p; ++c) bt[c * k + j] = b.value.at(j, c);
        }
        gemm_accumulate(g.values().data(), bt.data(), a.grad.values().data(), m, p, k);
      }
      if (b.requires_grad) {
        // dB += A^T * dC
        std::vector<double> at(k * m);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < k; ++j) at[j * m + i] = a.value.at(i, j);
        }
        gemm_accumulate(at.data(), g.values().data(), b.grad.values().data(), k, m, p);
      }
      break;
    }

    case OpKind::transpose: {
      Node& a = parent(0);
      for (std::size_t r = 0; r < a.value.rows(); ++r) {
        for (std::size_t c = 0; c < a.value.cols(); ++c) a.grad.at(r, c) += g.at(c, r);
      }
      break;
    }

    case OpKind::gather_rows: {
      Node& t = parent(0);
      for (std::size_t i = 0; i < n.indices.size(); ++i) {
        auto src = g.row(i);
        auto dst = t.grad.row(n.indices[i]);
        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
      }
      break;
    }

    case OpKind::layer_norm: {
      Node& a = parent(0);
      const std::size_t cols = n.value.cols();
      const double inv_n = 1.0 / static_cast<double>(cols);
      for (std::size_t r = 0; r < n.value.rows(); ++r) {
        auto y = n.value.row(r);
        auto gr = g.row(r);
        double mean_g = 0.0, mean_gy = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          mean_g += gr[c];
          mean_gy += gr[c] * y[c];
        }
        mean_g *= inv_n;
        mean_gy *= inv_n;
        auto da = a.grad.row(r);
        const double rstd = n.cache[r];
        for (std::size_t c = 0; c < cols; ++c) da[c] += rstd * (gr[c] - mean_g - y[c] * mean_gy);
      }
      break;
    }

    case OpKind::softmax_rows: {
      Node& a = parent(0);
      for (std::size_t r = 0; r < n.value.rows(); ++r) {
        auto y = n.value.row(r);
        auto gr = g.row(r);
        double dot = 0.0;
        for (std::size_t c = 0; c < y.size(); ++c) dot += gr[c] * y[c];
        auto da = a.grad.row(r);
        for (std::size_t c = 0; c < y.size(); ++c) da[c] += y[c] * (gr[c] - dot);
      }
      break;
    }

    case OpKind::log_softmax_rows: {
      Node& a = parent(0);
      for (std::size_t r = 0; r < n.value.rows(); ++r) {
        auto y = n.value.row(r);
        auto gr = g.row(r);
        const double gsum = std::accumulate(gr.begin(), gr.end(), 0.0);
        auto da = a.grad.row(r);
        for (std::size_t c = 0; c < y.size(); ++c) da[c] += gr[c] - std::exp(y[c]) * gsum;
      }
      break;
    }

    case OpKind::mean: {
      Node& a = parent(0);
      const double share = g[0] / static_cast<double>(a.value.size());
      for (double& v : a.grad.values()) v += share;
      break;
    }

    case OpKind::sum: {
      Node& a = parent(0);
      for (double& v : a.grad.values()) v += g[0];
      break;
    }

    case OpKind::concat_rows: {
      std::size_t at = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        Node& p = parent(k);
        const std::size_t len = p.value.size();
        if (p.requires_grad) {
          auto gp = p.grad.values();
          for (std::size_t i = 0; i < len; ++i) gp[i] += g[at + i];
        }
        at += len;
      }
      break;
    }

    case OpKind::slice_rows: {
      Node& a = parent(0);
      const std::size_t offset = n.begin * a.value.cols();
      auto ga = a.grad.values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[offset + i] += g[i];
      break;
    }
  }
}

double finite_diff_check(const ScalarBuilder& f, const DenseArray& x, double h) {
  if (!(h > 0.0 && h <= 1e-2)) throw std::invalid_argument("finite_diff_check: h must lie in (0, 1e-2]");

  Graph g;
  const NodeId in = g.input(x, true);
  const NodeId out = f(g, in);
  g.backward(out);
  const DenseArray analytic = g.grad(in);

  auto eval = [&](const DenseArray& at) {
    Graph ge;
    const NodeId i = ge.input(at, false);
    return ge.value(f(ge, i))[0];
  };

  double worst = 0.0;
  DenseArray probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = eval(probe);
    probe[i] = x[i] - h;
    const double down = eval(probe);
    probe[i] = x[i];
    const double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace leaf::ad
