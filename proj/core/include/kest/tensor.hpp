#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape owns every node created during one forward computation;
// nodes are appended in evaluation order, so walking the tape backwards is a
// valid topological order for the backward pass.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "kest/error.hpp"

namespace kest {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  // Accumulator written by backward passes; mutable so read-only forwards can
  // take parameters by const reference.
  mutable Matrix<T> grad;
  bool frozen = false;

  void zero_grad() const { grad.setZero(value.rows(), value.cols()); }
};

namespace ag {

template <typename T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::function<void(Node&)> backward;

  template <typename Expr>
  void accumulate(const Expr& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, Node<T>* node) : tape_(tape), node_(node) {}

  const Matrix<T>& value() const { return node_->value; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  T scalar() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return node_ != nullptr; }
  Node<T>* node() const { return node_; }
  Tape<T>* tape() const { return tape_; }
  /// Gradient accumulated into this node by the last backward pass.
  const Matrix<T>& grad() const { return node_->grad; }

 private:
  Tape<T>* tape_ = nullptr;
  Node<T>* node_ = nullptr;
};

template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  Var<T> constant(Matrix<T> value) { return make(std::move(value), false, nullptr); }

  /// A leaf whose gradient is differentiable on this tape without being a
  /// model parameter (used by gradient checks on intermediate inputs).
  Var<T> leaf(Matrix<T> value) { return make(std::move(value), true, [](Node<T>&) {}); }

  /// Leaf for a model parameter. Repeated calls for the same parameter return
  /// the same node, so shared weights accumulate a single gradient.
  Var<T> param(const Parameter<T>& p) {
    if (auto it = params_.find(&p); it != params_.end()) return Var<T>(this, it->second);
    const bool rg = grad_enabled_ && !p.frozen;
    const Parameter<T>* target = &p;
    Var<T> v = make(p.value, rg, [target](Node<T>& self) {
      if (target->grad.size() == 0) {
        target->grad = self.grad;
      } else {
        target->grad += self.grad;
      }
    });
    params_.emplace(&p, v.node());
    return v;
  }

  Var<T> make(Matrix<T> value, bool requires_grad, std::function<void(Node<T>&)> backward) {
    auto node = std::make_unique<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = grad_enabled_ && requires_grad;
    if (node->requires_grad) node->backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.back().get());
  }

  /// Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
  void backward(Var<T> root) {
    if (root.rows() != 1 || root.cols() != 1) throw PreconditionError("backward root must be a scalar");
    if (!root.requires_grad()) return;
    root.node()->grad = Matrix<T>::Ones(1, 1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.requires_grad && n.grad.size() != 0 && n.backward) n.backward(n);
    }
  }

 private:
  bool grad_enabled_;
  std::vector<std::unique_ptr<Node<T>>> nodes_;
  std::unordered_map<const Parameter<T>*, Node<T>*> params_;
};

namespace detail {

template <typename T>
void check_same_tape(const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw IntegrityError("operands live on different tapes");
}

template <typename T>
void check_shape(bool ok, const char* op) {
  if (!ok) throw IntegrityError(std::string("shape mismatch in ") + op);
}

}  // namespace detail

// --- linear algebra ---------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_shape<T>(a.cols() == b.rows(), "matmul");
  auto* na = a.node();
  auto* nb = b.node();
  return a.tape()->make(a.value() * b.value(), a.requires_grad() || b.requires_grad(),
                        [na, nb](Node<T>& self) {
                          if (na->requires_grad) na->accumulate(self.grad * nb->value.transpose());
                          if (nb->requires_grad) nb->accumulate(na->value.transpose() * self.grad);
                        });
}

/// a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_shape<T>(a.cols() == b.cols(), "matmul_nt");
  auto* na = a.node();
  auto* nb = b.node();
  return a.tape()->make(a.value() * b.value().transpose(), a.requires_grad() || b.requires_grad(),
                        [na, nb](Node<T>& self) {
                          if (na->requires_grad) na->accumulate(self.grad * nb->value);
                          if (nb->requires_grad) nb->accumulate(self.grad.transpose() * na->value);
                        });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_shape<T>(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  auto* na = a.node();
  auto* nb = b.node();
  return a.tape()->make(a.value() + b.value(), a.requires_grad() || b.requires_grad(),
                        [na, nb](Node<T>& self) {
                          if (na->requires_grad) na->accumulate(self.grad);
                          if (nb->requires_grad) nb->accumulate(self.grad);
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_tape(a, b);
  detail::check_shape<T>(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  auto* na = a.node();
  auto* nb = b.node();
  return a.tape()->make(a.value() - b.value(), a.requires_grad() || b.requires_grad(),
                        [na, nb](Node<T>& self) {
                          if (na->requires_grad) na->accumulate(self.grad);
                          if (nb->requires_grad) nb->accumulate(-self.grad);
                        });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  auto* na = a.node();
  return a.tape()->make(a.value() * s, a.requires_grad(),
                        [na, s](Node<T>& self) { na->accumulate(self.grad * s); });
}

/// Adds a 1 x n row to every row of a.
template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  detail::check_same_tape(a, row);
  detail::check_shape<T>(row.rows() == 1 && row.cols() == a.cols(), "add_row");
  auto* na = a.node();
  auto* nr = row.node();
  Matrix<T> v = a.value();
  v.rowwise() += row.value().row(0);
  return a.tape()->make(std::move(v), a.requires_grad() || row.requires_grad(),
                        [na, nr](Node<T>& self) {
                          if (na->requires_grad) na->accumulate(self.grad);
                          if (nr->requires_grad) nr->accumulate(self.grad.colwise().sum());
                        });
}

/// Elementwise product with a constant matrix (dropout masks).
template <typename T>
Var<T> mul_const(Var<T> a, const Matrix<T>& m) {
  detail::check_shape<T>(a.rows() == m.rows() && a.cols() == m.cols(), "mul_const");
  auto* na = a.node();
  return a.tape()->make(a.value().cwiseProduct(m), a.requires_grad(),
                        [na, m](Node<T>& self) { na->accumulate(self.grad.cwiseProduct(m)); });
}

// --- indexing ---------------------------------------------------------------

/// out.row(i) = a.row(rows[i]); repeated indices accumulate gradient.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<int> rows) {
  Matrix<T> v(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw IntegrityError("gather_rows index out of range");
    v.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  auto* na = a.node();
  return a.tape()->make(std::move(v), a.requires_grad(), [na, rows = std::move(rows)](Node<T>& self) {
    if (na->grad.size() == 0) na->grad.setZero(na->value.rows(), na->value.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) na->grad.row(rows[i]) += self.grad.row(static_cast<Index>(i));
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Index begin, Index count) {
  detail::check_shape<T>(begin >= 0 && begin + count <= a.cols(), "slice_cols");
  auto* na = a.node();
  return a.tape()->make(a.value().middleCols(begin, count), a.requires_grad(),
                        [na, begin, count](Node<T>& self) {
                          if (na->grad.size() == 0) na->grad.setZero(na->value.rows(), na->value.cols());
                          na->grad.middleCols(begin, count) += self.grad;
                        });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Index begin, Index count) {
  detail::check_shape<T>(begin >= 0 && begin + count <= a.rows(), "slice_rows");
  auto* na = a.node();
  return a.tape()->make(a.value().middleRows(begin, count), a.requires_grad(),
                        [na, begin, count](Node<T>& self) {
                          if (na->grad.size() == 0) na->grad.setZero(na->value.rows(), na->value.cols());
                          na->grad.middleRows(begin, count) += self.grad;
                        });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw IntegrityError("concat_cols of nothing");
  Index cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts.front(), p);
    detail::check_shape<T>(p.rows() == parts.front().rows(), "concat_cols");
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  Matrix<T> v(parts.front().rows(), cols);
  std::vector<Node<T>*> nodes;
  Index at = 0;
  for (const auto& p : parts) {
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    nodes.push_back(p.node());
  }
  return parts.front().tape()->make(std::move(v), rg, [nodes](Node<T>& self) {
    Index at2 = 0;
    for (auto* n : nodes) {
      const Index c = n->value.cols();
      if (n->requires_grad) n->accumulate(self.grad.middleCols(at2, c));
      at2 += c;
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw IntegrityError("concat_rows of nothing");
  Index rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::check_same_tape(parts.front(), p);
    detail::check_shape<T>(p.cols() == parts.front().cols(), "concat_rows");
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  Matrix<T> v(rows, parts.front().cols());
  std::vector<Node<T>*> nodes;
  Index at = 0;
  for (const auto& p : parts) {
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    nodes.push_back(p.node());
  }
  return parts.front().tape()->make(std::move(v), rg, [nodes](Node<T>& self) {
    Index at2 = 0;
    for (auto* n : nodes) {
      const Index r = n->value.rows();
      if (n->requires_grad) n->accumulate(self.grad.middleRows(at2, r));
      at2 += r;
    }
  });
}

/// Stacks `a` on top of `total_rows - a.rows()` copies of the constant `row`.
template <typename T>
Var<T> pad_rows(Var<T> a, Index total_rows, const Matrix<T>& row) {
  detail::check_shape<T>(row.rows() == 1 && row.cols() == a.cols() && total_rows >= a.rows(), "pad_rows");
  Matrix<T> v(total_rows, a.cols());
  v.topRows(a.rows()) = a.value();
  for (Index r = a.rows(); r < total_rows; ++r) v.row(r) = row.row(0);
  auto* na = a.node();
  const Index n = a.rows();
  return a.tape()->make(std::move(v), a.requires_grad(),
                        [na, n](Node<T>& self) { na->accumulate(self.grad.topRows(n)); });
}

// --- reductions -------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> a) {
  Matrix<T> v(1, 1);
  v(0, 0) = a.value().sum();
  auto* na = a.node();
  return a.tape()->make(std::move(v), a.requires_grad(), [na](Node<T>& self) {
    na->accumulate(Matrix<T>::Constant(na->value.rows(), na->value.cols(), self.grad(0, 0)));
  });
}

// --- nonlinearities ---------------------------------------------------------

template <typename T>
Var<T> tanh(Var<T> a) {
  Matrix<T> v = a.value().array().tanh().matrix();
  auto* na = a.node();
  return a.tape()->make(v, a.requires_grad(), [na, v](Node<T>& self) {
    na->accumulate((self.grad.array() * (T(1) - v.array().square())).matrix());
  });
}

/// tanh approximation of GELU.
template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  const auto& x = a.value();
  Matrix<T> t = (c * (x.array() + k * x.array().cube())).tanh().matrix();
  Matrix<T> v = (T(0.5) * x.array() * (T(1) + t.array())).matrix();
  auto* na = a.node();
  return a.tape()->make(std::move(v), a.requires_grad(), [na, t = std::move(t), c, k](Node<T>& self) {
    const auto& xx = na->value.array();
    auto d = T(0.5) * (T(1) + t.array()) +
             T(0.5) * xx * (T(1) - t.array().square()) * c * (T(1) + T(3) * k * xx.square());
    na->accumulate((self.grad.array() * d).matrix());
  });
}

/// Row-wise layer normalization with learned gain and bias (both 1 x d).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  detail::check_same_tape(x, gain);
  detail::check_same_tape(x, bias);
  const Index n = x.rows();
  const Index d = x.cols();
  Matrix<T> xhat(n, d);
  Matrix<T> rstd(n, 1);
  for (Index r = 0; r < n; ++r) {
    const T mu = x.value().row(r).mean();
    const T var = (x.value().row(r).array() - mu).square().mean();
    rstd(r, 0) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * rstd(r, 0);
  }
  Matrix<T> v = xhat.array().rowwise() * gain.value().row(0).array();
  v.rowwise() += bias.value().row(0);
  auto* nx = x.node();
  auto* ng = gain.node();
  auto* nb = bias.node();
  const bool rg = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  return x.tape()->make(std::move(v), rg, [nx, ng, nb, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
    const Index rows = self.grad.rows();
    const Index dim = self.grad.cols();
    if (ng->requires_grad) ng->accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
    if (nb->requires_grad) nb->accumulate(self.grad.colwise().sum());
    if (nx->requires_grad) {
      Matrix<T> dxhat = self.grad.array().rowwise() * ng->value.row(0).array();
      Matrix<T> dx(rows, dim);
      for (Index r = 0; r < rows; ++r) {
        const T s1 = dxhat.row(r).sum();
        const T s2 = dxhat.row(r).dot(xhat.row(r));
        dx.row(r) = (rstd(r, 0) / T(dim)) *
                    (T(dim) * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2);
      }
      nx->accumulate(dx);
    }
  });
}

/// Which entries of a row-wise softmax are structurally excluded (probability
/// exactly zero, no gradient).
struct SoftmaxMask {
  bool causal = false;               // exclude column j > row i
  std::vector<char> banned_columns;  // empty = none banned
};

template <typename T>
Matrix<T> softmax_rows_value(const Matrix<T>& a, const SoftmaxMask& mask) {
  Matrix<T> p(a.rows(), a.cols());
  const bool any_banned = !mask.banned_columns.empty();
  for (Index r = 0; r < a.rows(); ++r) {
    const Index limit = mask.causal ? std::min<Index>(r + 1, a.cols()) : a.cols();
    T mx = -std::numeric_limits<T>::infinity();
    for (Index c = 0; c < limit; ++c) {
      if (any_banned && mask.banned_columns[static_cast<std::size_t>(c)]) continue;
      mx = std::max(mx, a(r, c));
    }
    T z = 0;
    for (Index c = 0; c < a.cols(); ++c) {
      const bool excluded = c >= limit || (any_banned && mask.banned_columns[static_cast<std::size_t>(c)]);
      const T e = excluded ? T(0) : std::exp(a(r, c) - mx);
      p(r, c) = e;
      z += e;
    }
    p.row(r) /= z;
  }
  return p;
}

template <typename T>
Var<T> softmax_rows(Var<T> a, SoftmaxMask mask = {}) {
  if (!mask.banned_columns.empty() && static_cast<Index>(mask.banned_columns.size()) != a.cols()) {
    throw IntegrityError("softmax banned-column mask has wrong width");
  }
  Matrix<T> p = softmax_rows_value(a.value(), mask);
  auto* na = a.node();
  return a.tape()->make(p, a.requires_grad(), [na, p](Node<T>& self) {
    Matrix<T> g = p.cwiseProduct(self.grad);
    Matrix<T> rs = g.rowwise().sum();
    g -= (p.array().colwise() * rs.col(0).array()).matrix();
    na->accumulate(g);
  });
}

/// Sum over rows r with targets[r] >= 0 of -log softmax(logits.row(r))[targets[r]].
template <typename T>
Var<T> nll_rows(Var<T> logits, std::vector<int> targets) {
  detail::check_shape<T>(static_cast<Index>(targets.size()) == logits.rows(), "nll_rows");
  const auto& x = logits.value();
  Matrix<T> p(x.rows(), x.cols());
  T total = 0;
  for (Index r = 0; r < x.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0) {
      p.row(r).setZero();
      continue;
    }
    if (t >= x.cols()) throw IntegrityError("nll_rows target outside vocabulary");
    const T mx = x.row(r).maxCoeff();
    const T z = (x.row(r).array() - mx).exp().sum();
    total += -(x(r, t) - mx - std::log(z));
    p.row(r) = ((x.row(r).array() - mx).exp() / z).matrix();
  }
  Matrix<T> v(1, 1);
  v(0, 0) = total;
  auto* nl = logits.node();
  return logits.tape()->make(std::move(v), logits.requires_grad(),
                             [nl, p = std::move(p), targets = std::move(targets)](Node<T>& self) {
                               Matrix<T> g = p;
                               for (Index r = 0; r < g.rows(); ++r) {
                                 const int t = targets[static_cast<std::size_t>(r)];
                                 if (t >= 0) g(r, t) -= T(1);
                               }
                               nl->accumulate(g * self.grad(0, 0));
                             });
}

/// -log(max(probs(0, index), eps)). No gradient flows through a clamped value.
template <typename T>
Var<T> neg_log_pick(Var<T> probs, int index, T eps, bool* clamped = nullptr) {
  if (index < 0 || index >= probs.cols()) throw IntegrityError("neg_log_pick index out of range");
  const T p = probs.value()(0, index);
  const bool clamp = !(p > eps);
  if (clamped) *clamped = clamp;
  Matrix<T> v(1, 1);
  v(0, 0) = -std::log(clamp ? eps : p);
  auto* np = probs.node();
  return probs.tape()->make(std::move(v), probs.requires_grad() && !clamp, [np, index, p](Node<T>& self) {
    Matrix<T> g = Matrix<T>::Zero(np->value.rows(), np->value.cols());
    g(0, index) = -self.grad(0, 0) / p;
    np->accumulate(g);
  });
}

}  // namespace ag
}  // namespace kest
