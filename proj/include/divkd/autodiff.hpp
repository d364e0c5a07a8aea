#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "divkd/tensor.hpp"

namespace divkd {

class Node;
using NodePtr = std::shared_ptr<Node>;

/// One node of a reverse-mode computation graph. Graphs are acyclic and
/// freshly built per forward pass; a node owns its parents, so keeping the
/// root alive keeps the whole graph alive. Graphs are confined to a single
/// thread.
class Node {
public:
  Tensor value;
  std::vector<double> grad;  // same element count as value
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backprop;  // pushes this->grad into parents

  explicit Node(Tensor v, bool req = false)
      : value(std::move(v)), grad(value.count(), 0.0), requires_grad(req) {}
};

/// Leaf holding a trainable or differentiable-input tensor.
inline NodePtr leaf(Tensor v, bool requires_grad = true) {
  return std::make_shared<Node>(std::move(v), requires_grad);
}

/// Leaf treated as a constant (no gradient ever flows into it).
inline NodePtr constant(Tensor v) { return std::make_shared<Node>(std::move(v), false); }

namespace detail {

inline NodePtr make_op(Tensor value, std::vector<NodePtr> parents,
                       std::function<void(Node&)> backprop) {
  bool req = false;
  for (const auto& p : parents) req |= p->requires_grad;
  auto n = std::make_shared<Node>(std::move(value), req);
  if (req) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
}

}  // namespace detail

inline NodePtr add(const NodePtr& a, const NodePtr& b) {
  detail::check_same_shape("add", a->value, b->value);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.count(); ++i) out[i] += b->value[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (self.parents[0]->requires_grad) self.parents[0]->grad[i] += self.grad[i];
      if (self.parents[1]->requires_grad) self.parents[1]->grad[i] += self.grad[i];
    }
  });
}

/// Elementwise product.
inline NodePtr mul(const NodePtr& a, const NodePtr& b) {
  detail::check_same_shape("mul", a->value, b->value);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.count(); ++i) out[i] *= b->value[i];
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (a.requires_grad) a.grad[i] += self.grad[i] * b.value[i];
      if (b.requires_grad) b.grad[i] += self.grad[i] * a.value[i];
    }
  });
}

inline NodePtr scale(const NodePtr& a, double c) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.count(); ++i) out[i] *= c;
  return detail::make_op(std::move(out), {a}, [c](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += c * self.grad[i];
  });
}

inline NodePtr sub(const NodePtr& a, const NodePtr& b) { return add(a, scale(b, -1.0)); }

inline NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner dimensions disagree, " + av.shape().str() +
                     " vs " + bv.shape().str());
  Tensor out = matmul_value(av, bv);
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    std::size_t n = a.value.rows(), m = a.value.cols(), p = b.value.cols();
    if (a.requires_grad) {
      // a.grad += out.grad * b^T
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j) {
          double g = self.grad[i * p + j];
          if (g == 0.0) continue;
          for (std::size_t k = 0; k < m; ++k)
            a.grad[i * m + k] += g * b.value[k * p + j];
        }
    }
    if (b.requires_grad) {
      // b.grad += a^T * out.grad
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < m; ++k) {
          double av = a.value[i * m + k];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < p; ++j)
            b.grad[k * p + j] += av * self.grad[i * p + j];
        }
    }
  });
}

/// Broadcast-add a length-c vector to every row of an [r x c] matrix.
inline NodePtr add_rowvec(const NodePtr& a, const NodePtr& v) {
  std::size_t r = a->value.rows(), c = a->value.cols();
  if (v->value.count() != c)
    throw ShapeError("add_rowvec: vector " + v->value.shape().str() +
                     " does not match row width of " + a->value.shape().str());
  Tensor out = a->value;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += v->value[j];
  return detail::make_op(std::move(out), {a, v}, [r, c](Node& self) {
    Node& a = *self.parents[0];
    Node& v = *self.parents[1];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double g = self.grad[i * c + j];
        if (a.requires_grad) a.grad[i * c + j] += g;
        if (v.requires_grad) v.grad[j] += g;
      }
  });
}

/// Broadcast-multiply every row of an [r x c] matrix by a length-c vector.
inline NodePtr mul_rowvec(const NodePtr& a, const NodePtr& v) {
  std::size_t r = a->value.rows(), c = a->value.cols();
  if (v->value.count() != c)
    throw ShapeError("mul_rowvec: vector " + v->value.shape().str() +
                     " does not match row width of " + a->value.shape().str());
  Tensor out = a->value;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= v->value[j];
  return detail::make_op(std::move(out), {a, v}, [r, c](Node& self) {
    Node& a = *self.parents[0];
    Node& v = *self.parents[1];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) {
        double g = self.grad[i * c + j];
        if (a.requires_grad) a.grad[i * c + j] += g * v.value[j];
        if (v.requires_grad) v.grad[j] += g * a.value[i * c + j];
      }
  });
}

inline NodePtr relu(const NodePtr& a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.count(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (a.value[i] > 0.0) a.grad[i] += self.grad[i];
  });
}

/// Natural log with the 1e-300 floor applied to the argument.
inline NodePtr log(const NodePtr& a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.count(); ++i) out[i] = log_clamped(out[i]);
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      a.grad[i] += self.grad[i] / std::max(a.value[i], kLogFloor);
  });
}

inline NodePtr sum(const NodePtr& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a->value.count(); ++i) s += a->value[i];
  return detail::make_op(Tensor::scalar(s), {a}, [](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    for (double& g : a.grad) g += self.grad[0];
  });
}

inline NodePtr mean(const NodePtr& a) {
  std::size_t n = a->value.count();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a->value[i];
  return detail::make_op(Tensor::scalar(s / static_cast<double>(n)), {a},
                         [n](Node& self) {
                           Node& a = *self.parents[0];
                           if (!a.requires_grad) return;
                           double g = self.grad[0] / static_cast<double>(n);
                           for (double& ag : a.grad) ag += g;
                         });
}

/// Row-wise temperature softmax with max subtraction.
inline NodePtr softmax_row(const NodePtr& z, double temperature = 1.0) {
  Tensor out = softmax_rows_value(z->value, temperature);
  std::size_t r = out.rows(), c = out.cols();
  return detail::make_op(std::move(out), {z}, [r, c, temperature](Node& self) {
    Node& z = *self.parents[0];
    if (!z.requires_grad) return;
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        double y = self.value[i * c + j];
        z.grad[i * c + j] += y * (self.grad[i * c + j] - dot) / temperature;
      }
    }
  });
}

/// Single element as a scalar node (gather by flat index).
inline NodePtr gather(const NodePtr& a, std::size_t flat_index) {
  if (flat_index >= a->value.count())
    throw std::out_of_range("gather: index " + std::to_string(flat_index) +
                            " out of range for " + a->value.shape().str());
  return detail::make_op(Tensor::scalar(a->value[flat_index]), {a},
                         [flat_index](Node& self) {
                           Node& a = *self.parents[0];
                           if (a.requires_grad) a.grad[flat_index] += self.grad[0];
                         });
}

/// Weighted sum against a constant tensor (one-hot dot and friends).
inline NodePtr dot(const NodePtr& a, const Tensor& weights) {
  detail::check_same_shape("dot", a->value, weights);
  double s = 0.0;
  for (std::size_t i = 0; i < weights.count(); ++i) s += a->value[i] * weights[i];
  return detail::make_op(Tensor::scalar(s), {a}, [weights](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    for (std::size_t i = 0; i < weights.count(); ++i)
      a.grad[i] += self.grad[0] * weights[i];
  });
}

/// Reverse-mode sweep from a scalar root. Every reachable node is visited
/// exactly once in reverse topological order; afterwards grad of each
/// requires_grad node holds d(root)/d(node).
inline void backward(const NodePtr& root) {
  if (root->value.count() != 1)
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                root->value.shape().str());
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  // Iterative post-order DFS; parents before children in `order`.
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop && (*it)->requires_grad) (*it)->backprop(**it);
}

}  // namespace divkd
