// SPDX-License-Identifier: Apache-2.0
//
// Dense 2-D tensors with dynamically recorded reverse-mode autodiff.
// The scalar type is a template parameter: training runs on float,
// gradient-check tests instantiate the identical code at double precision.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mpl/error.hpp"
#include "mpl/rng.hpp"

namespace mpl::num {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

}  // namespace detail

// Value-semantics handle to a graph node. Copies share the node, so a
// tensor is cheap to pass around; the recorded graph is released when the
// last handle to its result drops.
template <typename T>
class TensorT {
 public:
  using Node = detail::Node<T>;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), T(0), requires_grad);
  }

  static TensorT filled(Shape shape, T v, bool requires_grad = false) {
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(numel(t.node_->shape), v);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<T> data,
                           bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar(T v, bool requires_grad = false) {
    return from_data({1, 1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rows() const { return node_->shape.at(0); }
  int cols() const { return node_->shape.at(1); }
  size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> data_mut() { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) {
      throw ContractError("item() called on non-scalar tensor of shape " +
                          shape_str(shape()));
    }
    return node_->value[0];
  }

  T at(int r, int c) const { return node_->value[idx(r, c)]; }
  void set(int r, int c, T v) { node_->value[idx(r, c)] = v; }

  // Value copy detached from any recorded graph.
  TensorT detached_copy() const {
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  // Reverse-mode sweep from a scalar. Grads accumulate into every
  // requires_grad tensor reachable from this node; calling again without
  // zeroing accumulates again.
  void backward() const {
    if (size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(shape()));
    }
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    topo_sort(node_.get(), seen, order);
    // Each sweep is independent for interior nodes; only leaf (parameter)
    // grads accumulate across calls.
    for (Node* n : order) {
      if (!n->parents.empty()) n->grad.clear();
    }
    node_->ensure_grad();
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

  static TensorT wrap(std::shared_ptr<Node> n) {
    TensorT t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  size_t idx(int r, int c) const {
    return static_cast<size_t>(r) * static_cast<size_t>(cols()) +
           static_cast<size_t>(c);
  }

  static void topo_sort(Node* root, std::unordered_set<Node*>& seen,
                        std::vector<Node*>& order) {
    // Iterative DFS; graphs for long titles exceed comfortable stack depth.
    struct Frame {
      Node* n;
      size_t next_parent;
    };
    std::vector<Frame> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.n->parents.size()) {
        Node* p = f.n->parents[f.next_parent++].get();
        if (seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_result(Shape shape,
                                     std::vector<std::shared_ptr<Node<T>>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value.assign(numel(n->shape), T(0));
  for (const auto& p : parents) n->requires_grad |= p->requires_grad;
  n->parents = std::move(parents);
  return n;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural operations
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  auto an = a.node(), bn = b.node();
  auto n = detail::make_result<T>(a.shape(), {an, bn});
  for (size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = an->value[i] + bn->value[i];
  n->backward_fn = [an, bn](const detail::Node<T>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  };
  return TensorT<T>::wrap(n);
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  auto an = a.node(), bn = b.node();
  auto n = detail::make_result<T>(a.shape(), {an, bn});
  for (size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = an->value[i] - bn->value[i];
  n->backward_fn = [an, bn](const detail::Node<T>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  };
  return TensorT<T>::wrap(n);
}

// Hadamard product.
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  auto an = a.node(), bn = b.node();
  auto n = detail::make_result<T>(a.shape(), {an, bn});
  for (size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = an->value[i] * bn->value[i];
  n->backward_fn = [an, bn](const detail::Node<T>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * an->value[i];
    }
  };
  return TensorT<T>::wrap(n);
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
  auto an = a.node();
  auto n = detail::make_result<T>(a.shape(), {an});
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = an->value[i] * c;
  n->backward_fn = [an, c](const detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * c;
  };
  return TensorT<T>::wrap(n);
}

// x[m,n] + b[1,n], b broadcast over rows.
template <typename T>
TensorT<T> add_rowvec(const TensorT<T>& x, const TensorT<T>& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  auto xn = x.node(), bn = b.node();
  auto n = detail::make_result<T>(x.shape(), {xn, bn});
  const int m = x.rows(), c = x.cols();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j)
      n->value[i * c + j] = xn->value[i * c + j] + bn->value[j];
  n->backward_fn = [xn, bn, m, c](const detail::Node<T>& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < c; ++j) bn->grad[j] += self.grad[i * c + j];
    }
  };
  return TensorT<T>::wrap(n);
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
  auto an = a.node();
  const int m = a.rows(), c = a.cols();
  auto n = detail::make_result<T>({c, m}, {an});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < c; ++j) n->value[j * m + i] = an->value[i * c + j];
  n->backward_fn = [an, m, c](const detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < c; ++j) an->grad[i * c + j] += self.grad[j * m + i];
  };
  return TensorT<T>::wrap(n);
}

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  auto an = a.node(), bn = b.node();
  const int m = a.rows(), k = a.cols(), p = b.cols();
  auto n = detail::make_result<T>({m, p}, {an, bn});
  const T* A = an->value.data();
  const T* B = bn->value.data();
  T* C = n->value.data();
  for (int i = 0; i < m; ++i) {
    T* crow = C + static_cast<size_t>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      const T av = A[static_cast<size_t>(i) * k + kk];
      const T* brow = B + static_cast<size_t>(kk) * p;
      for (int j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
  n->backward_fn = [an, bn, m, k, p](const detail::Node<T>& self) {
    const T* G = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      // dA[i,kk] = sum_j G[i,j] * B[kk,j]
      const T* B = bn->value.data();
      T* dA = an->grad.data();
      for (int i = 0; i < m; ++i) {
        const T* grow = G + static_cast<size_t>(i) * p;
        for (int kk = 0; kk < k; ++kk) {
          const T* brow = B + static_cast<size_t>(kk) * p;
          T acc = 0;
          for (int j = 0; j < p; ++j) acc += grow[j] * brow[j];
          dA[static_cast<size_t>(i) * k + kk] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      // dB[kk,j] = sum_i A[i,kk] * G[i,j]
      const T* A = an->value.data();
      T* dB = bn->grad.data();
      for (int i = 0; i < m; ++i) {
        const T* grow = G + static_cast<size_t>(i) * p;
        const T* arow = A + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
          const T av = arow[kk];
          T* dbrow = dB + static_cast<size_t>(kk) * p;
          for (int j = 0; j < p; ++j) dbrow[j] += av * grow[j];
        }
      }
    }
  };
  return TensorT<T>::wrap(n);
}

// Row-wise concatenation of any number of equal-width blocks. Blocks with
// zero rows are legal and contribute nothing.
template <typename T>
TensorT<T> concat_rows(const std::vector<TensorT<T>>& blocks) {
  if (blocks.empty()) throw ContractError("concat_rows: no blocks");
  const int width = blocks.front().cols();
  int total = 0;
  std::vector<std::shared_ptr<detail::Node<T>>> parents;
  parents.reserve(blocks.size());
  for (const auto& b : blocks) {
    if (b.cols() != width) {
      throw ShapeError("concat_rows: width mismatch " +
                       shape_str(blocks.front().shape()) + " vs " +
                       shape_str(b.shape()));
    }
    total += b.rows();
    parents.push_back(b.node());
  }
  auto n = detail::make_result<T>({total, width}, parents);
  size_t off = 0;
  for (const auto& p : n->parents) {
    std::copy(p->value.begin(), p->value.end(), n->value.begin() + off);
    off += p->value.size();
  }
  n->backward_fn = [](const detail::Node<T>& self) {
    size_t off = 0;
    for (const auto& p : self.parents) {
      if (p->requires_grad) {
        p->ensure_grad();
        for (size_t i = 0; i < p->value.size(); ++i)
          p->grad[i] += self.grad[off + i];
      }
      off += p->value.size();
    }
  };
  return TensorT<T>::wrap(n);
}

template <typename T>
TensorT<T> concat_rows(const TensorT<T>& a, const TensorT<T>& b) {
  return concat_rows(std::vector<TensorT<T>>{a, b});
}

// Column slice [c0, c1).
template <typename T>
TensorT<T> slice_cols(const TensorT<T>& a, int c0, int c1) {
  if (c0 < 0 || c1 > a.cols() || c0 >= c1) {
    throw ShapeError("slice_cols: [" + std::to_string(c0) + "," +
                     std::to_string(c1) + ") out of " + shape_str(a.shape()));
  }
  auto an = a.node();
  const int m = a.rows(), c = a.cols(), w = c1 - c0;
  auto n = detail::make_result<T>({m, w}, {an});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      n->value[i * w + j] = an->value[i * c + c0 + j];
  n->backward_fn = [an, m, c, c0, w](const detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        an->grad[i * c + c0 + j] += self.grad[i * w + j];
  };
  return TensorT<T>::wrap(n);
}

// Row slice [r0, r1).
template <typename T>
TensorT<T> slice_rows(const TensorT<T>& a, int r0, int r1) {
  if (r0 < 0 || r1 > a.rows() || r0 >= r1) {
    throw ShapeError("slice_rows: [" + std::to_string(r0) + "," +
                     std::to_string(r1) + ") out of " + shape_str(a.shape()));
  }
  auto an = a.node();
  const int c = a.cols(), m = r1 - r0;
  auto n = detail::make_result<T>({m, c}, {an});
  std::copy(an->value.begin() + static_cast<size_t>(r0) * c,
            an->value.begin() + static_cast<size_t>(r1) * c, n->value.begin());
  n->backward_fn = [an, r0, m, c](const detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < c; ++j)
        an->grad[(r0 + i) * c + j] += self.grad[i * c + j];
  };
  return TensorT<T>::wrap(n);
}

// Concatenate equal-height blocks side by side (inverse of slice_cols).
template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& blocks) {
  if (blocks.empty()) throw ContractError("concat_cols: no blocks");
  const int m = blocks.front().rows();
  int total = 0;
  std::vector<std::shared_ptr<detail::Node<T>>> parents;
  for (const auto& b : blocks) {
    if (b.rows() != m) {
      throw ShapeError("concat_cols: height mismatch " +
                       shape_str(blocks.front().shape()) + " vs " +
                       shape_str(b.shape()));
    }
    total += b.cols();
    parents.push_back(b.node());
  }
  auto n = detail::make_result<T>({m, total}, parents);
  int off = 0;
  for (const auto& p : n->parents) {
    const int w = p->shape[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        n->value[i * total + off + j] = p->value[i * w + j];
    off += w;
  }
  n->backward_fn = [m, total](const detail::Node<T>& self) {
    int off = 0;
    for (const auto& p : self.parents) {
      const int w = p->shape[1];
      if (p->requires_grad) {
        p->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j)
            p->grad[i * w + j] += self.grad[i * total + off + j];
      }
      off += w;
    }
  };
  return TensorT<T>::wrap(n);
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
  auto an = a.node();
  auto n = detail::make_result<T>(a.shape(), {an});
  for (size_t i = 0; i < n->value.size(); ++i)
    n->value[i] = an->value[i] > T(0) ? an->value[i] : T(0);
  n->backward_fn = [an](const detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (an->value[i] > T(0)) an->grad[i] += self.grad[i];
  };
  return TensorT<T>::wrap(n);
}

// Exact (erf-based) GELU; smooth everywhere, which keeps finite-difference
// gradient checks clean.
template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
  auto an = a.node();
  auto n = detail::make_result<T>(a.shape(), {an});
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  for (size_t i = 0; i < n->value.size(); ++i) {
    const T x = an->value[i];
    n->value[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  }
  n->backward_fn = [an](const detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const T x = an->value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      an->grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  };
  return TensorT<T>::wrap(n);
}

// Row-stochastic softmax with max-subtraction.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& a) {
  auto an = a.node();
  const int m = a.rows(), c = a.cols();
  for (T v : an->value) {
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
  }
  auto n = detail::make_result<T>(a.shape(), {an});
  for (int i = 0; i < m; ++i) {
    const T* x = an->value.data() + static_cast<size_t>(i) * c;
    T* y = n->value.data() + static_cast<size_t>(i) * c;
    T mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (int j = 0; j < c; ++j) y[j] /= sum;
  }
  n->backward_fn = [an, m, c](const detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const T* s = self.value.data() + static_cast<size_t>(i) * c;
      const T* g = self.grad.data() + static_cast<size_t>(i) * c;
      T dot = 0;
      for (int j = 0; j < c; ++j) dot += g[j] * s[j];
      T* dx = an->grad.data() + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) dx[j] += s[j] * (g[j] - dot);
    }
  };
  return TensorT<T>::wrap(n);
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
  auto an = a.node();
  auto n = detail::make_result<T>({1, 1}, {an});
  T acc = 0;
  for (T v : an->value) acc += v;
  n->value[0] = acc;
  n->backward_fn = [an](const detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[0];
  };
  return TensorT<T>::wrap(n);
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

// Per-row layer normalization with learned gain/bias of shape [1, n].
template <typename T>
TensorT<T> layer_norm_rows(const TensorT<T>& x, const TensorT<T>& gain,
                           const TensorT<T>& bias, T eps = T(1e-5)) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 ||
      bias.cols() != x.cols()) {
    throw ShapeError("layer_norm_rows: params " + shape_str(gain.shape()) +
                     "/" + shape_str(bias.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  const int m = x.rows(), c = x.cols();
  auto n = detail::make_result<T>(x.shape(), {xn, gn, bn});
  // Keep normalized activations for the backward pass.
  auto xhat = std::make_shared<std::vector<T>>(n->value.size());
  auto inv_std = std::make_shared<std::vector<T>>(m);
  for (int i = 0; i < m; ++i) {
    const T* xr = xn->value.data() + static_cast<size_t>(i) * c;
    T mean = 0;
    for (int j = 0; j < c; ++j) mean += xr[j];
    mean /= c;
    T var = 0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= c;
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    T* h = xhat->data() + static_cast<size_t>(i) * c;
    T* y = n->value.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) {
      h[j] = (xr[j] - mean) * is;
      y[j] = h[j] * gn->value[j] + bn->value[j];
    }
  }
  n->backward_fn = [xn, gn, bn, xhat, inv_std, m, c](const detail::Node<T>& self) {
    for (int i = 0; i < m; ++i) {
      const T* g = self.grad.data() + static_cast<size_t>(i) * c;
      const T* h = xhat->data() + static_cast<size_t>(i) * c;
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int j = 0; j < c; ++j) gn->grad[j] += g[j] * h[j];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int j = 0; j < c; ++j) bn->grad[j] += g[j];
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        // dx = (gy - mean(gy) - xhat * mean(gy*xhat)) * inv_std,
        // where gy = gain * dy.
        T mean_gy = 0, mean_gyh = 0;
        for (int j = 0; j < c; ++j) {
          const T gy = g[j] * gn->value[j];
          mean_gy += gy;
          mean_gyh += gy * h[j];
        }
        mean_gy /= c;
        mean_gyh /= c;
        T* dx = xn->grad.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
          const T gy = g[j] * gn->value[j];
          dx[j] += (gy - mean_gy - h[j] * mean_gyh) * (*inv_std)[i];
        }
      }
    }
  };
  return TensorT<T>::wrap(n);
}

// Gather rows of an embedding table by token id.
template <typename T>
TensorT<T> embedding_rows(const TensorT<T>& table, std::span<const int> ids) {
  if (ids.empty()) throw ContractError("embedding_rows: empty id sequence");
  auto tn = table.node();
  const int v = table.rows(), d = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw IndexError("embedding_rows: id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
    }
  }
  auto n = detail::make_result<T>({static_cast<int>(ids.size()), d}, {tn});
  auto idv = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  for (size_t i = 0; i < idv->size(); ++i) {
    std::copy(tn->value.begin() + static_cast<size_t>((*idv)[i]) * d,
              tn->value.begin() + static_cast<size_t>((*idv)[i] + 1) * d,
              n->value.begin() + i * d);
  }
  n->backward_fn = [tn, idv, d](const detail::Node<T>& self) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (size_t i = 0; i < idv->size(); ++i) {
      T* dst = tn->grad.data() + static_cast<size_t>((*idv)[i]) * d;
      const T* src = self.grad.data() + i * d;
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  return TensorT<T>::wrap(n);
}

// Inverted dropout. Identity when not training or p == 0.
template <typename T>
TensorT<T> dropout(const TensorT<T>& a, T p, bool training, Rng* rng) {
  if (!training || p <= T(0)) return a;
  if (p >= T(1)) throw ContractError("dropout: rate must be < 1");
  auto an = a.node();
  auto n = detail::make_result<T>(a.shape(), {an});
  auto mask = std::make_shared<std::vector<T>>(a.size());
  const T keep = T(1) - p;
  for (size_t i = 0; i < a.size(); ++i) {
    (*mask)[i] = (rng->uniform() < static_cast<double>(p)) ? T(0) : T(1) / keep;
    n->value[i] = an->value[i] * (*mask)[i];
  }
  n->backward_fn = [an, mask](const detail::Node<T>& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      an->grad[i] += self.grad[i] * (*mask)[i];
  };
  return TensorT<T>::wrap(n);
}

// Mean negative log-softmax probability of the targets over non-pad
// positions. Positions whose target equals pad_id are excluded entirely.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, std::span<const int> targets,
                         int pad_id) {
  const int rows = logits.rows(), vocab = logits.cols();
  if (static_cast<int>(targets.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets vs logits " + shape_str(logits.shape()));
  }
  int n_active = 0;
  for (int t : targets) {
    if (t == pad_id) continue;
    if (t < 0 || t >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(t) +
                       " out of range [0," + std::to_string(vocab) + ")");
    }
    ++n_active;
  }
  if (n_active == 0) {
    throw ContractError("cross_entropy: all targets are pad (degenerate batch)");
  }
  auto ln = logits.node();
  auto n = detail::make_result<T>({1, 1}, {ln});
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  // Stash softmax rows for the backward pass.
  auto probs = std::make_shared<std::vector<T>>(ln->value.size());
  T loss = 0;
  for (int i = 0; i < rows; ++i) {
    const T* x = ln->value.data() + static_cast<size_t>(i) * vocab;
    T* pr = probs->data() + static_cast<size_t>(i) * vocab;
    T mx = x[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int j = 0; j < vocab; ++j) {
      pr[j] = std::exp(x[j] - mx);
      sum += pr[j];
    }
    for (int j = 0; j < vocab; ++j) pr[j] /= sum;
    if ((*tgt)[i] != pad_id) {
      // log-sum-exp minus target logit; always >= 0.
      loss += (mx + std::log(sum)) - x[(*tgt)[i]];
    }
  }
  n->value[0] = loss / static_cast<T>(n_active);
  n->backward_fn = [ln, tgt, probs, rows, vocab, pad_id,
                    n_active](const detail::Node<T>& self) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    const T g = self.grad[0] / static_cast<T>(n_active);
    for (int i = 0; i < rows; ++i) {
      if ((*tgt)[i] == pad_id) continue;
      const T* pr = probs->data() + static_cast<size_t>(i) * vocab;
      T* dx = ln->grad.data() + static_cast<size_t>(i) * vocab;
      for (int j = 0; j < vocab; ++j) dx[j] += g * pr[j];
      dx[(*tgt)[i]] -= g;
    }
  };
  return TensorT<T>::wrap(n);
}

// ---------------------------------------------------------------------------
// Non-graph helpers
// ---------------------------------------------------------------------------

// Constant tensor (never takes grad) — used for masks and positional tables.
template <typename T>
TensorT<T> constant(Shape shape, std::vector<T> data) {
  return TensorT<T>::from_data(std::move(shape), std::move(data), false);
}

template <typename T>
TensorT<T> random_uniform(Shape shape, T lo, T hi, Rng& rng,
                          bool requires_grad = false) {
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
  return TensorT<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
TensorT<T> random_normal(Shape shape, T mean, T stddev, Rng& rng,
                         bool requires_grad = false) {
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.normal(mean, stddev));
  return TensorT<T>::from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
bool all_finite(const TensorT<T>& t) {
  for (T v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

// Log-softmax of a plain row, outside the graph (inference scoring).
template <typename T>
std::vector<T> log_softmax_row(std::span<const T> x) {
  T mx = x[0];
  for (T v : x) mx = std::max(mx, v);
  T sum = 0;
  for (T v : x) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  std::vector<T> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

}  // namespace mpl::num
