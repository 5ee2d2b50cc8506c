#ifndef FUNDUSAM_AUTOGRAD_HPP
#define FUNDUSAM_AUTOGRAD_HPP

// Minimal reverse-mode automatic differentiation over row-major matrices.
//
// Every activation in the model is a 2-D matrix: rows are tokens / pixels,
// columns are channels. Spatial operators take the grid height and width
// explicitly. Gradients accumulate into the leaf nodes held by parameters.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fundusam/error.hpp"

namespace fundusam::ag {

using Index = Eigen::Index;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Matrix<T>&)> backward;

  template <typename Expr>
  void accumulate(const Expr& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }

  void zero_grad() { grad.resize(0, 0); }
};

namespace detail {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording for the lifetime of the guard (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Matrix<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Matrix<T>& value() const { return node_->value; }
  [[nodiscard]] Matrix<T>& mutable_value() { return node_->value; }
  [[nodiscard]] const Matrix<T>& grad() const { return node_->grad; }
  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  [[nodiscard]] Index rows() const { return node_->value.rows(); }
  [[nodiscard]] Index cols() const { return node_->value.cols(); }
  [[nodiscard]] T item() const { return node_->value(0, 0); }
  [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }

  void zero_grad() { node_->zero_grad(); }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(Matrix<T> value) {
  return Var<T>(std::move(value), false);
}

namespace detail {

template <typename T>
bool any_requires_grad(const std::vector<Var<T>>& parents) {
  for (const auto& p : parents) {
    if (p.defined() && p.requires_grad()) return true;
  }
  return false;
}

/// Wraps a forward value into a graph node. `backward` receives the output
/// gradient and pushes contributions into the (captured) parent nodes.
template <typename T>
Var<T> record(Matrix<T> value, const std::vector<Var<T>>& parents,
              std::function<void(const Matrix<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_enabled() && any_requires_grad(parents)) {
    node->requires_grad = true;
    for (const auto& p : parents) {
      if (p.defined()) node->parents.push_back(p.node());
    }
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar root (gradient seeded with 1).
template <typename T>
void backward(const Var<T>& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw InvalidArgument("backward: root must be a 1x1 scalar");
  }
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix<T>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && node->grad.size() != 0) {
      node->backward(node->grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) throw InvalidArgument("matmul: inner dimensions differ");
  Matrix<T> out;
  out.noalias() = a.value() * b.value();
  auto an = a.node();
  auto bn = b.node();
  return detail::record<T>(std::move(out), {a, b}, [an, bn](const Matrix<T>& g) {
    if (an->requires_grad) an->accumulate(g * bn->value.transpose());
    if (bn->requires_grad) bn->accumulate(an->value.transpose() * g);
  });
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.cols()) throw InvalidArgument("matmul_nt: column counts differ");
  Matrix<T> out;
  out.noalias() = a.value() * b.value().transpose();
  auto an = a.node();
  auto bn = b.node();
  return detail::record<T>(std::move(out), {a, b}, [an, bn](const Matrix<T>& g) {
    if (an->requires_grad) an->accumulate(g * bn->value);
    if (bn->requires_grad) bn->accumulate(g.transpose() * an->value);
  });
}

/// x * w + b, with b a 1 x out row vector broadcast over rows (optional).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
  if (x.cols() != w.rows()) throw InvalidArgument("linear: input width does not match weight rows");
  Matrix<T> out;
  out.noalias() = x.value() * w.value();
  if (b.defined()) {
    if (b.rows() != 1 || b.cols() != w.cols()) throw InvalidArgument("linear: bias shape");
    out.rowwise() += b.value().row(0);
  }
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  return detail::record<T>(std::move(out), {x, w, b}, [xn, wn, bn](const Matrix<T>& g) {
    if (xn->requires_grad) xn->accumulate(g * wn->value.transpose());
    if (wn->requires_grad) wn->accumulate(xn->value.transpose() * g);
    if (bn && bn->requires_grad) bn->accumulate(g.colwise().sum());
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidArgument("add: shape mismatch");
  auto an = a.node();
  auto bn = b.node();
  return detail::record<T>(a.value() + b.value(), {a, b}, [an, bn](const Matrix<T>& g) {
    an->accumulate(g);
    bn->accumulate(g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidArgument("sub: shape mismatch");
  auto an = a.node();
  auto bn = b.node();
  return detail::record<T>(a.value() - b.value(), {a, b}, [an, bn](const Matrix<T>& g) {
    an->accumulate(g);
    bn->accumulate(-g);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidArgument("mul: shape mismatch");
  auto an = a.node();
  auto bn = b.node();
  return detail::record<T>(a.value().cwiseProduct(b.value()), {a, b}, [an, bn](const Matrix<T>& g) {
    if (an->requires_grad) an->accumulate(g.cwiseProduct(bn->value));
    if (bn->requires_grad) bn->accumulate(g.cwiseProduct(an->value));
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  auto an = a.node();
  return detail::record<T>(a.value() * s, {a}, [an, s](const Matrix<T>& g) { an->accumulate(g * s); });
}

/// x + r with r a 1 x C row broadcast over rows.
template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& r) {
  if (r.rows() != 1 || r.cols() != x.cols()) throw InvalidArgument("add_row: shape mismatch");
  Matrix<T> out = x.value();
  out.rowwise() += r.value().row(0);
  auto xn = x.node();
  auto rn = r.node();
  return detail::record<T>(std::move(out), {x, r}, [xn, rn](const Matrix<T>& g) {
    xn->accumulate(g);
    if (rn->requires_grad) rn->accumulate(g.colwise().sum());
  });
}

/// x .* r with r a 1 x C row broadcast over rows (per-channel gating).
template <typename T>
Var<T> mul_row(const Var<T>& x, const Var<T>& r) {
  if (r.rows() != 1 || r.cols() != x.cols()) throw InvalidArgument("mul_row: shape mismatch");
  Matrix<T> out = x.value().array().rowwise() * r.value().row(0).array();
  auto xn = x.node();
  auto rn = r.node();
  return detail::record<T>(std::move(out), {x, r}, [xn, rn](const Matrix<T>& g) {
    if (xn->requires_grad) {
      Matrix<T> gx = g.array().rowwise() * rn->value.row(0).array();
      xn->accumulate(gx);
    }
    if (rn->requires_grad) rn->accumulate(g.cwiseProduct(xn->value).colwise().sum());
  });
}

/// x .* c with c an N x 1 column broadcast over channels (per-position gating).
template <typename T>
Var<T> mul_col(const Var<T>& x, const Var<T>& c) {
  if (c.cols() != 1 || c.rows() != x.rows()) throw InvalidArgument("mul_col: shape mismatch");
  Matrix<T> out = x.value().array().colwise() * c.value().col(0).array();
  auto xn = x.node();
  auto cn = c.node();
  return detail::record<T>(std::move(out), {x, c}, [xn, cn](const Matrix<T>& g) {
    if (xn->requires_grad) {
      Matrix<T> gx = g.array().colwise() * cn->value.col(0).array();
      xn->accumulate(gx);
    }
    if (cn->requires_grad) cn->accumulate(g.cwiseProduct(xn->value).rowwise().sum());
  });
}

namespace detail {

/// Elementwise map. `df(x, y)` returns dy/dx given input and output.
template <typename T, typename F, typename DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Matrix<T> out = x.value().unaryExpr(f);
  auto xn = x.node();
  if (!(grad_enabled() && x.requires_grad())) return detail::record<T>(std::move(out), {x}, nullptr);
  auto saved = std::make_shared<Matrix<T>>(out);
  return detail::record<T>(std::move(out), {x}, [xn, saved, df](const Matrix<T>& g) {
    Matrix<T> d = xn->value.binaryExpr(*saved, df);
    xn->accumulate(g.cwiseProduct(d));
  });
}

}  // namespace detail

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sin(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::sin(v); }, [](T v, T) { return std::cos(v); });
}

template <typename T>
Var<T> cos(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::cos(v); }, [](T v, T) { return -std::sin(v); });
}

// ---------------------------------------------------------------------------
// Normalization

/// Row-wise layer normalization with affine 1 x C gamma / beta.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6)) {
  const Index n = x.rows();
  const Index c = x.cols();
  if (gamma.cols() != c || beta.cols() != c) throw InvalidArgument("layer_norm: affine shape");
  auto xhat = std::make_shared<Matrix<T>>(n, c);
  auto inv_std = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(n);
  for (Index i = 0; i < n; ++i) {
    const auto row = x.value().row(i);
    const T mean = row.mean();
    const T var = (row.array() - mean).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)(i) = is;
    xhat->row(i) = (row.array() - mean) * is;
  }
  Matrix<T> out = xhat->array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return detail::record<T>(std::move(out), {x, gamma, beta}, [xn, gn, bn, xhat, inv_std, c](const Matrix<T>& g) {
    if (gn->requires_grad) gn->accumulate(g.cwiseProduct(*xhat).colwise().sum());
    if (bn->requires_grad) bn->accumulate(g.colwise().sum());
    if (xn->requires_grad) {
      Matrix<T> dxhat = g.array().rowwise() * gn->value.row(0).array();
      Matrix<T> dx(dxhat.rows(), c);
      for (Index i = 0; i < dxhat.rows(); ++i) {
        const T m1 = dxhat.row(i).mean();
        const T m2 = dxhat.row(i).cwiseProduct(xhat->row(i)).mean();
        dx.row(i) = (*inv_std)(i) * (dxhat.row(i).array() - m1 - xhat->row(i).array() * m2);
      }
      xn->accumulate(dx);
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Var<T> slice_cols(const Var<T>& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw InvalidArgument("slice_cols: out of range");
  auto xn = x.node();
  return detail::record<T>(x.value().middleCols(start, count), {x}, [xn, start, count](const Matrix<T>& g) {
    if (!xn->requires_grad) return;
    if (xn->grad.size() == 0) xn->grad = Matrix<T>::Zero(xn->value.rows(), xn->value.cols());
    xn->grad.middleCols(start, count) += g;
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) throw InvalidArgument("slice_rows: out of range");
  auto xn = x.node();
  return detail::record<T>(x.value().middleRows(start, count), {x}, [xn, start, count](const Matrix<T>& g) {
    if (!xn->requires_grad) return;
    if (xn->grad.size() == 0) xn->grad = Matrix<T>::Zero(xn->value.rows(), xn->value.cols());
    xn->grad.middleRows(start, count) += g;
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_cols: no inputs");
  const Index n = parts.front().rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw InvalidArgument("concat_cols: row counts differ");
    total += p.cols();
  }
  Matrix<T> out(n, total);
  std::vector<std::shared_ptr<Node<T>>> nodes;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
    nodes.push_back(p.node());
  }
  return detail::record<T>(std::move(out), parts, [nodes](const Matrix<T>& g) {
    Index off = 0;
    for (const auto& node : nodes) {
      const Index w = node->value.cols();
      if (node->requires_grad) node->accumulate(g.middleCols(off, w));
      off += w;
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  const Index c = parts.front().cols();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw InvalidArgument("concat_rows: column counts differ");
    total += p.rows();
  }
  Matrix<T> out(total, c);
  std::vector<std::shared_ptr<Node<T>>> nodes;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
    nodes.push_back(p.node());
  }
  return detail::record<T>(std::move(out), parts, [nodes](const Matrix<T>& g) {
    Index off = 0;
    for (const auto& node : nodes) {
      const Index h = node->value.rows();
      if (node->requires_grad) node->accumulate(g.middleRows(off, h));
      off += h;
    }
  });
}

/// out.row(i) = x.row(index[i]), or zeros where index[i] < 0.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::shared_ptr<const std::vector<Index>> index) {
  Matrix<T> out(static_cast<Index>(index->size()), x.cols());
  for (Index i = 0; i < out.rows(); ++i) {
    const Index src = (*index)[static_cast<std::size_t>(i)];
    if (src < 0) {
      out.row(i).setZero();
    } else {
      if (src >= x.rows()) throw InvalidArgument("gather_rows: index out of range");
      out.row(i) = x.value().row(src);
    }
  }
  auto xn = x.node();
  return detail::record<T>(std::move(out), {x}, [xn, index](const Matrix<T>& g) {
    if (!xn->requires_grad) return;
    if (xn->grad.size() == 0) xn->grad = Matrix<T>::Zero(xn->value.rows(), xn->value.cols());
    for (Index i = 0; i < g.rows(); ++i) {
      const Index src = (*index)[static_cast<std::size_t>(i)];
      if (src >= 0) xn->grad.row(src) += g.row(i);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(const Var<T>& x) {
  Matrix<T> out(1, 1);
  out(0, 0) = x.value().sum();
  auto xn = x.node();
  return detail::record<T>(std::move(out), {x}, [xn](const Matrix<T>& g) {
    xn->accumulate(Matrix<T>::Constant(xn->value.rows(), xn->value.cols(), g(0, 0)));
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

/// Per-row mean over channels -> N x 1.
template <typename T>
Var<T> row_mean(const Var<T>& x) {
  Matrix<T> out = x.value().rowwise().mean();
  auto xn = x.node();
  const T inv = T(1) / static_cast<T>(x.cols());
  return detail::record<T>(std::move(out), {x}, [xn, inv](const Matrix<T>& g) {
    Matrix<T> d = (g * inv).replicate(1, xn->value.cols());
    xn->accumulate(d);
  });
}

/// Per-row max over channels -> N x 1.
template <typename T>
Var<T> row_max(const Var<T>& x) {
  const Index n = x.rows();
  Matrix<T> out(n, 1);
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index j = 0;
    out(i, 0) = x.value().row(i).maxCoeff(&j);
    (*arg)[static_cast<std::size_t>(i)] = j;
  }
  auto xn = x.node();
  return detail::record<T>(std::move(out), {x}, [xn, arg](const Matrix<T>& g) {
    if (!xn->requires_grad) return;
    if (xn->grad.size() == 0) xn->grad = Matrix<T>::Zero(xn->value.rows(), xn->value.cols());
    for (Index i = 0; i < g.rows(); ++i) xn->grad(i, (*arg)[static_cast<std::size_t>(i)]) += g(i, 0);
  });
}

/// Per-column mean over rows -> 1 x C.
template <typename T>
Var<T> col_mean(const Var<T>& x) {
  Matrix<T> out = x.value().colwise().mean();
  auto xn = x.node();
  const T inv = T(1) / static_cast<T>(x.rows());
  return detail::record<T>(std::move(out), {x}, [xn, inv](const Matrix<T>& g) {
    Matrix<T> d = (g * inv).replicate(xn->value.rows(), 1);
    xn->accumulate(d);
  });
}

/// Per-column max over rows -> 1 x C.
template <typename T>
Var<T> col_max(const Var<T>& x) {
  const Index c = x.cols();
  Matrix<T> out(1, c);
  auto arg = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(c));
  for (Index j = 0; j < c; ++j) {
    Index i = 0;
    out(0, j) = x.value().col(j).maxCoeff(&i);
    (*arg)[static_cast<std::size_t>(j)] = i;
  }
  auto xn = x.node();
  return detail::record<T>(std::move(out), {x}, [xn, arg](const Matrix<T>& g) {
    if (!xn->requires_grad) return;
    if (xn->grad.size() == 0) xn->grad = Matrix<T>::Zero(xn->value.rows(), xn->value.cols());
    for (Index j = 0; j < g.cols(); ++j) xn->grad((*arg)[static_cast<std::size_t>(j)], j) += g(0, j);
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention over contiguous row groups.
///
/// q is (G*gq) x dk, k is (G*gk) x dk, v is (G*gk) x dv. Rows of group g in q
/// attend only to rows of group g in k/v. Keys with key_valid[row] == 0 are
/// masked out (used for window padding). Global attention is one group.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, Index group_q, Index group_k,
                 std::shared_ptr<const std::vector<std::uint8_t>> key_valid = nullptr) {
  if (heads < 1 || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw InvalidArgument("attention: channel count not divisible by heads");
  }
  if (q.cols() != k.cols() || k.rows() != v.rows()) throw InvalidArgument("attention: q/k/v shape mismatch");
  if (group_q < 1 || group_k < 1 || q.rows() % group_q != 0 || k.rows() % group_k != 0 ||
      q.rows() / group_q != k.rows() / group_k) {
    throw InvalidArgument("attention: inconsistent grouping");
  }
  if (key_valid && static_cast<Index>(key_valid->size()) != k.rows()) {
    throw InvalidArgument("attention: key mask length");
  }
  const Index groups = q.rows() / group_q;
  const Index dk = q.cols() / heads;
  const Index dv = v.cols() / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dk));

  Matrix<T> out(q.rows(), v.cols());
  auto probs = std::make_shared<std::vector<Matrix<T>>>();
  probs->reserve(static_cast<std::size_t>(groups * heads));
  for (Index g = 0; g < groups; ++g) {
    for (Index h = 0; h < heads; ++h) {
      const auto qg = q.value().block(g * group_q, h * dk, group_q, dk);
      const auto kg = k.value().block(g * group_k, h * dk, group_k, dk);
      const auto vg = v.value().block(g * group_k, h * dv, group_k, dv);
      Matrix<T> s;
      s.noalias() = qg * kg.transpose();
      s *= scale_factor;
      for (Index i = 0; i < group_q; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Index j = 0; j < group_k; ++j) {
          if (key_valid && !(*key_valid)[static_cast<std::size_t>(g * group_k + j)]) continue;
          mx = std::max(mx, s(i, j));
        }
        T total = T(0);
        for (Index j = 0; j < group_k; ++j) {
          if (key_valid && !(*key_valid)[static_cast<std::size_t>(g * group_k + j)]) {
            s(i, j) = T(0);
            continue;
          }
          s(i, j) = std::exp(s(i, j) - mx);
          total += s(i, j);
        }
        if (total > T(0)) s.row(i) /= total;
      }
      out.block(g * group_q, h * dv, group_q, dv).noalias() = s * vg;
      probs->push_back(std::move(s));
    }
  }

  auto qn = q.node();
  auto kn = k.node();
  auto vn = v.node();
  return detail::record<T>(
      std::move(out), {q, k, v},
      [qn, kn, vn, probs, groups, heads, group_q, group_k, dk, dv, scale_factor](const Matrix<T>& grad) {
        Matrix<T> dq = Matrix<T>::Zero(qn->value.rows(), qn->value.cols());
        Matrix<T> dkm = Matrix<T>::Zero(kn->value.rows(), kn->value.cols());
        Matrix<T> dvm = Matrix<T>::Zero(vn->value.rows(), vn->value.cols());
        for (Index g = 0; g < groups; ++g) {
          for (Index h = 0; h < heads; ++h) {
            const Matrix<T>& p = (*probs)[static_cast<std::size_t>(g * heads + h)];
            const auto qg = qn->value.block(g * group_q, h * dk, group_q, dk);
            const auto kg = kn->value.block(g * group_k, h * dk, group_k, dk);
            const auto vg = vn->value.block(g * group_k, h * dv, group_k, dv);
            const auto go = grad.block(g * group_q, h * dv, group_q, dv);
            dvm.block(g * group_k, h * dv, group_k, dv).noalias() += p.transpose() * go;
            Matrix<T> dp;
            dp.noalias() = go * vg.transpose();
            Eigen::Matrix<T, Eigen::Dynamic, 1> rs = dp.cwiseProduct(p).rowwise().sum();
            Matrix<T> ds = p.cwiseProduct(dp.colwise() - rs);
            ds *= scale_factor;
            dq.block(g * group_q, h * dk, group_q, dk).noalias() += ds * kg;
            dkm.block(g * group_k, h * dk, group_k, dk).noalias() += ds.transpose() * qg;
          }
        }
        qn->accumulate(dq);
        kn->accumulate(dkm);
        vn->accumulate(dvm);
      });
}

// ---------------------------------------------------------------------------
// Spatial operators on (h*w) x C row-major grids

/// k x k convolution, stride 1, zero "same" padding. w is (k*k*Cin) x Cout with
/// row index (dy*k + dx)*Cin + c; b is 1 x Cout (optional).
template <typename T>
Var<T> conv2d(const Var<T>& x, Index height, Index width, const Var<T>& w, const Var<T>& b, Index k) {
  if (x.rows() != height * width) throw InvalidArgument("conv2d: grid size mismatch");
  if (k < 1 || k % 2 == 0) throw InvalidArgument("conv2d: kernel must be odd");
  const Index cin = x.cols();
  if (w.rows() != k * k * cin) throw InvalidArgument("conv2d: weight shape mismatch");
  const Index pad = k / 2;
  auto cols = std::make_shared<Matrix<T>>(Matrix<T>::Zero(height * width, k * k * cin));
  for (Index i = 0; i < height; ++i) {
    for (Index j = 0; j < width; ++j) {
      const Index row = i * width + j;
      for (Index dy = 0; dy < k; ++dy) {
        const Index si = i + dy - pad;
        if (si < 0 || si >= height) continue;
        for (Index dx = 0; dx < k; ++dx) {
          const Index sj = j + dx - pad;
          if (sj < 0 || sj >= width) continue;
          cols->block(row, (dy * k + dx) * cin, 1, cin) = x.value().row(si * width + sj);
        }
      }
    }
  }
  Matrix<T> out;
  out.noalias() = *cols * w.value();
  if (b.defined()) out.rowwise() += b.value().row(0);
  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.defined() ? b.node() : nullptr;
  return detail::record<T>(
      std::move(out), {x, w, b}, [xn, wn, bn, cols, height, width, k, pad, cin](const Matrix<T>& g) {
        if (wn->requires_grad) wn->accumulate(cols->transpose() * g);
        if (bn && bn->requires_grad) bn->accumulate(g.colwise().sum());
        if (xn->requires_grad) {
          Matrix<T> dcols;
          dcols.noalias() = g * wn->value.transpose();
          Matrix<T> dx = Matrix<T>::Zero(height * width, cin);
          for (Index i = 0; i < height; ++i) {
            for (Index j = 0; j < width; ++j) {
              const Index row = i * width + j;
              for (Index dy = 0; dy < k; ++dy) {
                const Index si = i + dy - pad;
                if (si < 0 || si >= height) continue;
                for (Index dx_ = 0; dx_ < k; ++dx_) {
                  const Index sj = j + dx_ - pad;
                  if (sj < 0 || sj >= width) continue;
                  dx.row(si * width + sj) += dcols.block(row, (dy * k + dx_) * cin, 1, cin);
                }
              }
            }
          }
          xn->accumulate(dx);
        }
      });
}

/// Rearranges (h*w) x (4*C) into (2h*2w) x C: channel block a*2+b of input
/// pixel (i, j) lands at output pixel (2i+a, 2j+b).
template <typename T>
Var<T> depth_to_space2(const Var<T>& x, Index height, Index width) {
  if (x.rows() != height * width || x.cols() % 4 != 0) throw InvalidArgument("depth_to_space2: shape");
  const Index c = x.cols() / 4;
  auto index = std::make_shared<std::vector<Index>>();
  // Expressed as a gather on the (h*w*4) x C view.
  Matrix<T> flat = Eigen::Map<const Matrix<T>>(x.value().data(), height * width * 4, c);
  index->resize(static_cast<std::size_t>(4 * height * width));
  const Index ow = 2 * width;
  for (Index i = 0; i < height; ++i) {
    for (Index j = 0; j < width; ++j) {
      for (Index a = 0; a < 2; ++a) {
        for (Index bb = 0; bb < 2; ++bb) {
          const Index dst = (2 * i + a) * ow + (2 * j + bb);
          (*index)[static_cast<std::size_t>(dst)] = (i * width + j) * 4 + a * 2 + bb;
        }
      }
    }
  }
  Matrix<T> out(4 * height * width, c);
  for (Index r = 0; r < out.rows(); ++r) out.row(r) = flat.row((*index)[static_cast<std::size_t>(r)]);
  auto xn = x.node();
  return detail::record<T>(std::move(out), {x}, [xn, index, c](const Matrix<T>& g) {
    Matrix<T> dflat = Matrix<T>::Zero(g.rows(), c);
    for (Index r = 0; r < g.rows(); ++r) dflat.row((*index)[static_cast<std::size_t>(r)]) += g.row(r);
    Matrix<T> dx = Eigen::Map<const Matrix<T>>(dflat.data(), xn->value.rows(), xn->value.cols());
    xn->accumulate(dx);
  });
}

namespace detail {

struct LinearTap {
  Index lo;
  Index hi;
  double w_hi;
};

/// Half-pixel-centre linear resampling taps from n_in samples to n_out.
inline std::vector<LinearTap> resample_taps(Index n_in, Index n_out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(n_out));
  const double ratio = static_cast<double>(n_in) / static_cast<double>(n_out);
  for (Index o = 0; o < n_out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    const Index hi = std::min(lo + 1, n_in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of an (h*w) x C grid to (oh*ow) x C (half-pixel centres).
template <typename T>
Var<T> resize_bilinear(const Var<T>& x, Index height, Index width, Index out_h, Index out_w) {
  if (x.rows() != height * width) throw InvalidArgument("resize_bilinear: grid size mismatch");
  auto ty = std::make_shared<std::vector<detail::LinearTap>>(detail::resample_taps(height, out_h));
  auto tx = std::make_shared<std::vector<detail::LinearTap>>(detail::resample_taps(width, out_w));
  const Index c = x.cols();
  Matrix<T> out(out_h * out_w, c);
  for (Index i = 0; i < out_h; ++i) {
    const auto& a = (*ty)[static_cast<std::size_t>(i)];
    for (Index j = 0; j < out_w; ++j) {
      const auto& b = (*tx)[static_cast<std::size_t>(j)];
      const T wy = static_cast<T>(a.w_hi);
      const T wx = static_cast<T>(b.w_hi);
      out.row(i * out_w + j) = (T(1) - wy) * (T(1) - wx) * x.value().row(a.lo * width + b.lo) +
                               (T(1) - wy) * wx * x.value().row(a.lo * width + b.hi) +
                               wy * (T(1) - wx) * x.value().row(a.hi * width + b.lo) +
                               wy * wx * x.value().row(a.hi * width + b.hi);
    }
  }
  auto xn = x.node();
  return detail::record<T>(std::move(out), {x}, [xn, ty, tx, width, out_h, out_w](const Matrix<T>& g) {
    Matrix<T> dx = Matrix<T>::Zero(xn->value.rows(), xn->value.cols());
    for (Index i = 0; i < out_h; ++i) {
      const auto& a = (*ty)[static_cast<std::size_t>(i)];
      for (Index j = 0; j < out_w; ++j) {
        const auto& b = (*tx)[static_cast<std::size_t>(j)];
        const T wy = static_cast<T>(a.w_hi);
        const T wx = static_cast<T>(b.w_hi);
        const auto gr = g.row(i * out_w + j);
        dx.row(a.lo * width + b.lo) += (T(1) - wy) * (T(1) - wx) * gr;
        dx.row(a.lo * width + b.hi) += (T(1) - wy) * wx * gr;
        dx.row(a.hi * width + b.lo) += wy * (T(1) - wx) * gr;
        dx.row(a.hi * width + b.hi) += wy * wx * gr;
      }
    }
    xn->accumulate(dx);
  });
}

}  // namespace fundusam::ag

#endif  // FUNDUSAM_AUTOGRAD_HPP
