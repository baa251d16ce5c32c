#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "inkline/common.hpp"
#include "inkline/tensor.hpp"

namespace inkline::ad {

template <typename S>
struct Node {
  Tensor<S> val;
  Tensor<S> grad;  // allocated lazily during backward
  bool requires_grad = false;
  int param_index = -1;  // >= 0 for persistent parameters/buffers
  long order = -1;       // creation index on the owning tape; -1 for leaves off-tape
  long visit_epoch = 0;
  std::vector<Node<S>*> parents;
  std::function<void(Node<S>&)> back;
};

/// Redirect target for parameter gradients during a backward pass. When a
/// sink is installed (one per worker thread), parameter gradients accumulate
/// into sink slots instead of the shared parameter nodes.
template <typename S>
struct GradSink {
  std::vector<Tensor<S>>* slots = nullptr;
};

template <typename S>
inline thread_local GradSink<S> t_grad_sink;

template <typename S>
Tensor<S>& grad_of(Node<S>* n) {
  if (n->param_index >= 0 && t_grad_sink<S>.slots) {
    Tensor<S>& g = (*t_grad_sink<S>.slots)[static_cast<std::size_t>(n->param_index)];
    if (g.v.empty()) g = Tensor<S>::zeros(n->val.shape);
    return g;
  }
  if (n->grad.v.empty()) n->grad = Tensor<S>::zeros(n->val.shape);
  return n->grad;
}

/// Records one forward computation. Creation order is a topological order, so
/// backward is a reverse sweep. Single-threaded; use one tape per thread.
template <typename S>
class Tape {
 public:
  bool grad_enabled = true;

  Node<S>* make(Tensor<S> val, std::vector<Node<S>*> parents,
                std::function<void(Node<S>&)> back) {
    auto node = std::make_unique<Node<S>>();
    node->val = std::move(val);
    node->order = static_cast<long>(nodes_.size());
    if (grad_enabled) {
      for (Node<S>* p : parents)
        if (p->requires_grad) {
          node->requires_grad = true;
          break;
        }
      if (node->requires_grad) {
        node->parents = std::move(parents);
        node->back = std::move(back);
      }
    }
    nodes_.push_back(std::move(node));
    return nodes_.back().get();
  }

  Node<S>* leaf(Tensor<S> val, bool requires_grad = false) {
    auto node = std::make_unique<Node<S>>();
    node->val = std::move(val);
    node->requires_grad = requires_grad && grad_enabled;
    node->order = static_cast<long>(nodes_.size());
    nodes_.push_back(std::move(node));
    return nodes_.back().get();
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node<S>>> nodes_;
};

/// Runs reverse-mode accumulation from the given seeds. Gradients of interior
/// nodes are reset per call; leaf/parameter gradients accumulate across calls.
template <typename S>
void backward_seeded(const std::vector<std::pair<Node<S>*, Tensor<S>>>& seeds) {
  static long epoch_counter = 0;
  const long epoch = ++epoch_counter;

  // Collect the reachable recorded subgraph (leaves excluded).
  std::vector<Node<S>*> reach;
  std::vector<Node<S>*> stack;
  for (const auto& [root, seed] : seeds) {
    (void)seed;
    if (root->back && root->visit_epoch != epoch) {
      root->visit_epoch = epoch;
      stack.push_back(root);
    }
  }
  while (!stack.empty()) {
    Node<S>* n = stack.back();
    stack.pop_back();
    reach.push_back(n);
    for (Node<S>* p : n->parents)
      if (p->back && p->requires_grad && p->visit_epoch != epoch) {
        p->visit_epoch = epoch;
        stack.push_back(p);
      }
  }
  for (Node<S>* n : reach) {
    n->grad = Tensor<S>::zeros(n->val.shape);
  }
  for (const auto& [root, seed] : seeds) {
    if (seed.shape != root->val.shape)
      throw std::runtime_error("backward seed shape mismatch");
    Tensor<S>& g = grad_of(root);
    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += seed.v[i];
  }
  std::sort(reach.begin(), reach.end(),
            [](Node<S>* a, Node<S>* b) { return a->order > b->order; });
  for (Node<S>* n : reach) n->back(*n);
}

template <typename S>
void backward(Node<S>* loss) {
  if (loss->val.numel() != 1) throw std::runtime_error("backward needs a scalar loss");
  backward_seeded<S>({{loss, Tensor<S>::scalar(S{1})}});
}

/// Handle to a node plus the tape ops should record onto.
template <typename S>
struct Var {
  Node<S>* node = nullptr;
  Tape<S>* tape = nullptr;

  const Tensor<S>& val() const { return node->val; }
  const std::vector<int>& shape() const { return node->val.shape; }
};

template <typename S>
Var<S> make_leaf(Tape<S>& tape, Tensor<S> val, bool requires_grad = false) {
  return {tape.leaf(std::move(val), requires_grad), &tape};
}

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

template <typename S>
void axpy(S a, const S* x, S* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  Tensor<S> out = a.val();
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.val().v[i];
  Node<S>* an = a.node;
  Node<S>* bn = b.node;
  return {a.tape->make(std::move(out), {an, bn},
                       [an, bn](Node<S>& self) {
                         if (an->requires_grad) {
                           Tensor<S>& g = grad_of(an);
                           for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
                         }
                         if (bn->requires_grad) {
                           Tensor<S>& g = grad_of(bn);
                           for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
                         }
                       }),
          a.tape};
}

template <typename S>
Var<S> add_n(const std::vector<Var<S>>& xs) {
  detail::require(!xs.empty(), "add_n: empty input");
  Tensor<S> out = xs[0].val();
  for (std::size_t k = 1; k < xs.size(); ++k) {
    detail::require(xs[k].shape() == xs[0].shape(), "add_n: shape mismatch");
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += xs[k].val().v[i];
  }
  std::vector<Node<S>*> parents;
  for (const auto& x : xs) parents.push_back(x.node);
  auto plist = parents;
  return {xs[0].tape->make(std::move(out), std::move(parents),
                           [plist](Node<S>& self) {
                             for (Node<S>* p : plist) {
                               if (!p->requires_grad) continue;
                               Tensor<S>& g = grad_of(p);
                               for (std::size_t i = 0; i < g.v.size(); ++i)
                                 g.v[i] += self.grad.v[i];
                             }
                           }),
          xs[0].tape};
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor<S> out = a.val();
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b.val().v[i];
  Node<S>* an = a.node;
  Node<S>* bn = b.node;
  return {a.tape->make(std::move(out), {an, bn},
                       [an, bn](Node<S>& self) {
                         if (an->requires_grad) {
                           Tensor<S>& g = grad_of(an);
                           for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
                         }
                         if (bn->requires_grad) {
                           Tensor<S>& g = grad_of(bn);
                           for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] -= self.grad.v[i];
                         }
                       }),
          a.tape};
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  Tensor<S> out = a.val();
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.val().v[i];
  Node<S>* an = a.node;
  Node<S>* bn = b.node;
  return {a.tape->make(std::move(out), {an, bn},
                       [an, bn](Node<S>& self) {
                         if (an->requires_grad) {
                           Tensor<S>& g = grad_of(an);
                           for (std::size_t i = 0; i < g.v.size(); ++i)
                             g.v[i] += self.grad.v[i] * bn->val.v[i];
                         }
                         if (bn->requires_grad) {
                           Tensor<S>& g = grad_of(bn);
                           for (std::size_t i = 0; i < g.v.size(); ++i)
                             g.v[i] += self.grad.v[i] * an->val.v[i];
                         }
                       }),
          a.tape};
}

template <typename S>
Var<S> scale(Var<S> x, double c) {
  Tensor<S> out = x.val();
  for (auto& v : out.v) v = static_cast<S>(v * c);
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, c](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (std::size_t i = 0; i < g.v.size(); ++i)
                           g.v[i] += static_cast<S>(self.grad.v[i] * c);
                       }),
          x.tape};
}

template <typename S>
Var<S> add_const(Var<S> x, double c) {
  Tensor<S> out = x.val();
  for (auto& v : out.v) v = static_cast<S>(v + c);
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
                       }),
          x.tape};
}

template <typename S, typename F, typename DF>
Var<S> unary_op(Var<S> x, const char*, F fwd, DF dval) {
  Tensor<S> out = x.val();
  for (auto& v : out.v) v = fwd(v);
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, dval](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (std::size_t i = 0; i < g.v.size(); ++i)
                           g.v[i] += self.grad.v[i] * dval(xn->val.v[i], self.val.v[i]);
                       }),
          x.tape};
}

template <typename S>
Var<S> relu(Var<S> x) {
  return unary_op(
      x, "relu", [](S v) { return v > S{0} ? v : S{0}; },
      [](S in, S) { return in > S{0} ? S{1} : S{0}; });
}

inline constexpr double kSeluAlpha = 1.6732632423543772848170429916717;
inline constexpr double kSeluScale = 1.0507009873554804934193349852946;

template <typename S>
Var<S> selu(Var<S> x) {
  const S a = static_cast<S>(kSeluAlpha);
  const S l = static_cast<S>(kSeluScale);
  return unary_op(
      x, "selu",
      [a, l](S v) { return v > S{0} ? l * v : l * a * (std::exp(v) - S{1}); },
      [a, l](S in, S) { return in > S{0} ? l : l * a * std::exp(in); });
}

template <typename S>
Var<S> tanh_op(Var<S> x) {
  return unary_op(
      x, "tanh", [](S v) { return std::tanh(v); },
      [](S, S out) { return S{1} - out * out; });
}

template <typename S>
Var<S> sigmoid(Var<S> x) {
  return unary_op(
      x, "sigmoid", [](S v) { return S{1} / (S{1} + std::exp(-v)); },
      [](S, S out) { return out * (S{1} - out); });
}

template <typename S>
Var<S> exp_op(Var<S> x) {
  return unary_op(
      x, "exp", [](S v) { return std::exp(v); }, [](S, S out) { return out; });
}

template <typename S>
Var<S> log_op(Var<S> x) {
  return unary_op(
      x, "log", [](S v) { return std::log(v); }, [](S in, S) { return S{1} / in; });
}

template <typename S>
Var<S> sqrt_op(Var<S> x) {
  return unary_op(
      x, "sqrt", [](S v) { return std::sqrt(v); },
      [](S, S out) { return S{0.5} / out; });
}

template <typename S>
Var<S> softplus(Var<S> x) {
  return unary_op(
      x, "softplus",
      [](S v) {
        // log(1 + e^v) without overflow for large |v|
        return v > S{0} ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      },
      [](S in, S) { return S{1} / (S{1} + std::exp(-in)); });
}

/// y = 1 / sqrt(x + eps), elementwise.
template <typename S>
Var<S> rsqrt(Var<S> x, double eps) {
  return unary_op(
      x, "rsqrt",
      [eps](S v) { return S{1} / std::sqrt(v + static_cast<S>(eps)); },
      [eps](S in, S) {
        const S t = in + static_cast<S>(eps);
        return static_cast<S>(-0.5) / (t * std::sqrt(t));
      });
}

// ---------------------------------------------------------------------------
// Reductions and reshapes
// ---------------------------------------------------------------------------

template <typename S>
Var<S> sum_all(Var<S> x) {
  S total{0};
  for (S v : x.val().v) total += v;
  Node<S>* xn = x.node;
  return {x.tape->make(Tensor<S>::scalar(total), {xn},
                       [xn](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         const S s = self.grad.v[0];
                         for (auto& gv : g.v) gv += s;
                       }),
          x.tape};
}

template <typename S>
Var<S> mean_all(Var<S> x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.val().numel()));
}

template <typename S>
Var<S> reshape(Var<S> x, std::vector<int> new_shape) {
  detail::require(Tensor<S>::numel_of(new_shape) == x.val().numel(),
                  "reshape: numel mismatch");
  Tensor<S> out(new_shape, x.val().v);
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
                       }),
          x.tape};
}

/// Picks one element of a vector as a {1} tensor.
template <typename S>
Var<S> pick(Var<S> x, int index) {
  detail::require(x.val().rank() == 1, "pick: rank-1 input expected");
  detail::require(index >= 0 && index < x.val().dim(0), "pick: index out of range");
  Node<S>* xn = x.node;
  return {x.tape->make(Tensor<S>::scalar(x.val().v[static_cast<std::size_t>(index)]), {xn},
                       [xn, index](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         grad_of(xn).v[static_cast<std::size_t>(index)] += self.grad.v[0];
                       }),
          x.tape};
}

/// Gathers entries (r, c) of a matrix into a vector.
template <typename S>
Var<S> gather2d(Var<S> x, std::vector<std::pair<int, int>> idx) {
  detail::require(x.val().rank() == 2, "gather2d: rank-2 input expected");
  const int cols = x.val().dim(1);
  Tensor<S> out({static_cast<int>(idx.size())});
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.v[k] = x.val().v[static_cast<std::size_t>(idx[k].first) * cols + idx[k].second];
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, idx = std::move(idx), cols](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (std::size_t k = 0; k < idx.size(); ++k)
                           g.v[static_cast<std::size_t>(idx[k].first) * cols + idx[k].second] +=
                               self.grad.v[k];
                       }),
          x.tape};
}

/// Stacks equal-length vectors into a {n, d} matrix.
template <typename S>
Var<S> stack_rows(const std::vector<Var<S>>& rows) {
  detail::require(!rows.empty(), "stack_rows: empty input");
  const int d = rows[0].val().dim(0);
  Tensor<S> out({static_cast<int>(rows.size()), d});
  std::vector<Node<S>*> parents;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    detail::require(rows[r].val().rank() == 1 && rows[r].val().dim(0) == d,
                    "stack_rows: shape mismatch");
    std::copy(rows[r].val().v.begin(), rows[r].val().v.end(),
              out.v.begin() + static_cast<std::ptrdiff_t>(r) * d);
    parents.push_back(rows[r].node);
  }
  auto plist = parents;
  return {rows[0].tape->make(std::move(out), std::move(parents),
                             [plist, d](Node<S>& self) {
                               for (std::size_t r = 0; r < plist.size(); ++r) {
                                 if (!plist[r]->requires_grad) continue;
                                 Tensor<S>& g = grad_of(plist[r]);
                                 const S* src = self.grad.data() + r * static_cast<std::size_t>(d);
                                 for (int i = 0; i < d; ++i) g.v[static_cast<std::size_t>(i)] += src[i];
                               }
                             }),
          rows[0].tape};
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename S>
Var<S> transpose(Var<S> x) {
  detail::require(x.val().rank() == 2, "transpose: rank-2 input expected");
  const int r = x.val().dim(0), c = x.val().dim(1);
  Tensor<S> out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out.v[static_cast<std::size_t>(j) * r + i] = x.val().v[static_cast<std::size_t>(i) * c + j];
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, r, c](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (int i = 0; i < r; ++i)
                           for (int j = 0; j < c; ++j)
                             g.v[static_cast<std::size_t>(i) * c + j] +=
                                 self.grad.v[static_cast<std::size_t>(j) * r + i];
                       }),
          x.tape};
}

namespace detail {

template <typename S>
void matmul_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  // c (m x n) += a (m x k) @ b (k x n)
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    S* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S ap = arow[p];
      if (ap == S{0}) continue;
      axpy(ap, b + static_cast<std::size_t>(p) * n, crow, static_cast<std::size_t>(n));
    }
  }
}

template <typename S>
void matmul_acc_at(const S* a, const S* b, S* c, int m, int k, int n) {
  // c (k x n) += a^T (k x m) @ b (m x n), a stored (m x k)
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * k;
    const S* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const S ap = arow[p];
      if (ap == S{0}) continue;
      axpy(ap, brow, c + static_cast<std::size_t>(p) * n, static_cast<std::size_t>(n));
    }
  }
}

template <typename S>
void matmul_acc_bt(const S* a, const S* b, S* c, int m, int k, int n) {
  // c (m x k) += a (m x n) @ b^T (n x k), b stored (k x n)
  for (int i = 0; i < m; ++i) {
    const S* arow = a + static_cast<std::size_t>(i) * n;
    S* crow = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S* brow = b + static_cast<std::size_t>(p) * n;
      S acc{0};
      for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

}  // namespace detail

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  detail::require(a.val().rank() == 2 && b.val().rank() == 2 &&
                      a.val().dim(1) == b.val().dim(0),
                  "matmul: shape mismatch " + shape_string(a.shape()) + " @ " +
                      shape_string(b.shape()));
  const int m = a.val().dim(0), k = a.val().dim(1), n = b.val().dim(1);
  Tensor<S> out({m, n});
  detail::matmul_acc(a.val().data(), b.val().data(), out.data(), m, k, n);
  Node<S>* an = a.node;
  Node<S>* bn = b.node;
  return {a.tape->make(std::move(out), {an, bn},
                       [an, bn, m, k, n](Node<S>& self) {
                         if (an->requires_grad)
                           detail::matmul_acc_bt(self.grad.data(), bn->val.data(),
                                                 grad_of(an).data(), m, k, n);
                         if (bn->requires_grad)
                           detail::matmul_acc_at(an->val.data(), self.grad.data(),
                                                 grad_of(bn).data(), m, k, n);
                       }),
          a.tape};
}

/// y = A @ x for A {m,n}, x {n}.
template <typename S>
Var<S> matvec(Var<S> a, Var<S> x) {
  detail::require(a.val().rank() == 2 && x.val().rank() == 1 &&
                      a.val().dim(1) == x.val().dim(0),
                  "matvec: shape mismatch " + shape_string(a.shape()) + " @ " +
                      shape_string(x.shape()));
  const int m = a.val().dim(0), n = a.val().dim(1);
  Tensor<S> out({m});
  for (int i = 0; i < m; ++i) {
    const S* arow = a.val().data() + static_cast<std::size_t>(i) * n;
    S acc{0};
    for (int j = 0; j < n; ++j) acc += arow[j] * x.val().v[static_cast<std::size_t>(j)];
    out.v[static_cast<std::size_t>(i)] = acc;
  }
  Node<S>* an = a.node;
  Node<S>* xn = x.node;
  return {a.tape->make(std::move(out), {an, xn},
                       [an, xn, m, n](Node<S>& self) {
                         if (an->requires_grad) {
                           Tensor<S>& g = grad_of(an);
                           for (int i = 0; i < m; ++i)
                             detail::axpy(self.grad.v[static_cast<std::size_t>(i)], xn->val.data(),
                                          g.data() + static_cast<std::size_t>(i) * n,
                                          static_cast<std::size_t>(n));
                         }
                         if (xn->requires_grad) {
                           Tensor<S>& g = grad_of(xn);
                           for (int i = 0; i < m; ++i)
                             detail::axpy(self.grad.v[static_cast<std::size_t>(i)],
                                          an->val.data() + static_cast<std::size_t>(i) * n,
                                          g.data(), static_cast<std::size_t>(n));
                         }
                       }),
          a.tape};
}

/// Dense layer on a vector: y = W^T x for W {in, out}, x {in}.
template <typename S>
Var<S> linear_vt(Var<S> x, Var<S> w) {
  detail::require(w.val().rank() == 2 && x.val().rank() == 1 &&
                      w.val().dim(0) == x.val().dim(0),
                  "linear_vt: shape mismatch");
  const int in = w.val().dim(0), out_dim = w.val().dim(1);
  Tensor<S> out({out_dim});
  for (int i = 0; i < in; ++i)
    detail::axpy(x.val().v[static_cast<std::size_t>(i)],
                 w.val().data() + static_cast<std::size_t>(i) * out_dim, out.data(),
                 static_cast<std::size_t>(out_dim));
  Node<S>* xn = x.node;
  Node<S>* wn = w.node;
  return {x.tape->make(std::move(out), {xn, wn},
                       [xn, wn, in, out_dim](Node<S>& self) {
                         if (wn->requires_grad) {
                           Tensor<S>& g = grad_of(wn);
                           for (int i = 0; i < in; ++i)
                             detail::axpy(xn->val.v[static_cast<std::size_t>(i)], self.grad.data(),
                                          g.data() + static_cast<std::size_t>(i) * out_dim,
                                          static_cast<std::size_t>(out_dim));
                         }
                         if (xn->requires_grad) {
                           Tensor<S>& g = grad_of(xn);
                           for (int i = 0; i < in; ++i) {
                             const S* wrow = wn->val.data() + static_cast<std::size_t>(i) * out_dim;
                             S acc{0};
                             for (int j = 0; j < out_dim; ++j) acc += wrow[j] * self.grad.v[static_cast<std::size_t>(j)];
                             g.v[static_cast<std::size_t>(i)] += acc;
                           }
                         }
                       }),
          x.tape};
}

// ---------------------------------------------------------------------------
// Softmax family (max-subtracted, shift-exact gradients)
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void softmax_row(const S* x, S* y, int n) {
  S m = x[0];
  for (int i = 1; i < n; ++i) m = std::max(m, x[i]);
  S total{0};
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - m);
    total += y[i];
  }
  for (int i = 0; i < n; ++i) y[i] /= total;
}

}  // namespace detail

/// Softmax over the last dimension of a rank-1 or rank-2 tensor. The internal
/// max shift is treated as constant, which leaves the gradient exact.
template <typename S>
Var<S> softmax_lastdim(Var<S> x) {
  detail::require(x.val().rank() == 1 || x.val().rank() == 2,
                  "softmax: rank-1 or rank-2 input expected");
  const int n = x.val().dim(x.val().rank() - 1);
  const int rows = static_cast<int>(x.val().numel()) / n;
  Tensor<S> out = x.val();
  for (int r = 0; r < rows; ++r)
    detail::softmax_row(x.val().data() + static_cast<std::size_t>(r) * n,
                        out.data() + static_cast<std::size_t>(r) * n, n);
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, rows, n](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (int r = 0; r < rows; ++r) {
                           const S* y = self.val.data() + static_cast<std::size_t>(r) * n;
                           const S* gy = self.grad.data() + static_cast<std::size_t>(r) * n;
                           S dot{0};
                           for (int i = 0; i < n; ++i) dot += y[i] * gy[i];
                           S* gx = g.data() + static_cast<std::size_t>(r) * n;
                           for (int i = 0; i < n; ++i) gx[i] += y[i] * (gy[i] - dot);
                         }
                       }),
          x.tape};
}

/// x - rowmax(x) with the max treated as constant (identity gradient); the
/// downstream softmax is shift-invariant so the composite gradient is exact.
template <typename S>
Var<S> sub_rowmax(Var<S> x) {
  detail::require(x.val().rank() == 2, "sub_rowmax: rank-2 input expected");
  const int rows = x.val().dim(0), n = x.val().dim(1);
  Tensor<S> out = x.val();
  for (int r = 0; r < rows; ++r) {
    S* row = out.data() + static_cast<std::size_t>(r) * n;
    S m = row[0];
    for (int i = 1; i < n; ++i) m = std::max(m, row[i]);
    for (int i = 0; i < n; ++i) row[i] -= m;
  }
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
                       }),
          x.tape};
}

/// log(sum(exp(x))) of a vector, stable via a detached max shift.
template <typename S>
Var<S> logsumexp_vec(Var<S> x) {
  detail::require(x.val().rank() == 1, "logsumexp: rank-1 input expected");
  const int n = x.val().dim(0);
  S m = x.val().v[0];
  for (int i = 1; i < n; ++i) m = std::max(m, x.val().v[static_cast<std::size_t>(i)]);
  S total{0};
  for (int i = 0; i < n; ++i) total += std::exp(x.val().v[static_cast<std::size_t>(i)] - m);
  Node<S>* xn = x.node;
  return {x.tape->make(Tensor<S>::scalar(m + std::log(total)), {xn},
                       [xn, m, total, n](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         const S s = self.grad.v[0];
                         for (int i = 0; i < n; ++i)
                           g.v[static_cast<std::size_t>(i)] +=
                               s * std::exp(xn->val.v[static_cast<std::size_t>(i)] - m) / total;
                       }),
          x.tape};
}

/// log(softmax(x)) of a vector, stable via a detached max shift.
template <typename S>
Var<S> log_softmax_vec(Var<S> x) {
  detail::require(x.val().rank() == 1, "log_softmax: rank-1 input expected");
  const int n = x.val().dim(0);
  S m = x.val().v[0];
  for (int i = 1; i < n; ++i) m = std::max(m, x.val().v[static_cast<std::size_t>(i)]);
  S total{0};
  for (int i = 0; i < n; ++i) total += std::exp(x.val().v[static_cast<std::size_t>(i)] - m);
  const S lse = m + std::log(total);
  Tensor<S> out({n});
  for (int i = 0; i < n; ++i) out.v[static_cast<std::size_t>(i)] = x.val().v[static_cast<std::size_t>(i)] - lse;
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, n](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         S gsum{0};
                         for (int i = 0; i < n; ++i) gsum += self.grad.v[static_cast<std::size_t>(i)];
                         for (int i = 0; i < n; ++i)
                           g.v[static_cast<std::size_t>(i)] +=
                               self.grad.v[static_cast<std::size_t>(i)] -
                               std::exp(self.val.v[static_cast<std::size_t>(i)]) * gsum;
                       }),
          x.tape};
}

// ---------------------------------------------------------------------------
// Sequence ops (tensors shaped {channels, length})
// ---------------------------------------------------------------------------

inline int conv1d_out_len(int L, int kernel, int stride, int pad) {
  return (L + 2 * pad - kernel) / stride + 1;
}

template <typename S>
Var<S> conv1d(Var<S> x, Var<S> w, const Var<S>* bias, int stride, int pad, int groups) {
  detail::require(x.val().rank() == 2 && w.val().rank() == 3,
                  "conv1d: expected x {C,L}, w {Cout,Cin/g,K}");
  const int cin = x.val().dim(0), L = x.val().dim(1);
  const int cout = w.val().dim(0), cin_g = w.val().dim(1), K = w.val().dim(2);
  detail::require(groups >= 1 && cin % groups == 0 && cout % groups == 0,
                  "conv1d: bad group count");
  detail::require(cin_g == cin / groups,
                  "conv1d: weight shape " + shape_string(w.shape()) +
                      " inconsistent with input " + shape_string(x.shape()) +
                      " and groups " + std::to_string(groups));
  const int Lout = conv1d_out_len(L, K, stride, pad);
  detail::require(Lout > 0, "conv1d: output length would be empty for input " +
                                shape_string(x.shape()));
  const int cout_g = cout / groups;

  Tensor<S> out({cout, Lout});
  const S* xd = x.val().data();
  const S* wd = w.val().data();
  for (int co = 0; co < cout; ++co) {
    S* yrow = out.data() + static_cast<std::size_t>(co) * Lout;
    if (bias) {
      const S b = bias->val().v[static_cast<std::size_t>(co)];
      for (int t = 0; t < Lout; ++t) yrow[t] = b;
    }
    const int gi = co / cout_g;
    for (int cl = 0; cl < cin_g; ++cl) {
      const S* xrow = xd + static_cast<std::size_t>(gi * cin_g + cl) * L;
      const S* wk = wd + (static_cast<std::size_t>(co) * cin_g + cl) * K;
      for (int k = 0; k < K; ++k) {
        const S wv = wk[k];
        const int off = k - pad;
        int t0 = off < 0 ? (-off + stride - 1) / stride : 0;
        int t1 = std::min(Lout, off < L ? (L - 1 - off) / stride + 1 : 0);
        if (stride == 1) {
          const S* xs = xrow + t0 + off;
          S* ys = yrow + t0;
          for (int t = t0; t < t1; ++t) *ys++ += wv * *xs++;
        } else {
          for (int t = t0; t < t1; ++t) yrow[t] += wv * xrow[t * stride + off];
        }
      }
    }
  }

  Node<S>* xn = x.node;
  Node<S>* wn = w.node;
  Node<S>* bn = bias ? bias->node : nullptr;
  std::vector<Node<S>*> parents{xn, wn};
  if (bn) parents.push_back(bn);
  return {x.tape->make(
              std::move(out), std::move(parents),
              [xn, wn, bn, stride, pad, groups, cin_g, K, L, cout, cout_g](Node<S>& self) {
                const int Lout = self.val.dim(1);
                const S* gy = self.grad.data();
                Tensor<S>* gx = xn->requires_grad ? &grad_of(xn) : nullptr;
                Tensor<S>* gw = wn->requires_grad ? &grad_of(wn) : nullptr;
                Tensor<S>* gb = bn && bn->requires_grad ? &grad_of(bn) : nullptr;
                for (int co = 0; co < cout; ++co) {
                  const S* gyrow = gy + static_cast<std::size_t>(co) * Lout;
                  if (gb) {
                    S acc{0};
                    for (int t = 0; t < Lout; ++t) acc += gyrow[t];
                    gb->v[static_cast<std::size_t>(co)] += acc;
                  }
                  const int gi = co / cout_g;
                  for (int cl = 0; cl < cin_g; ++cl) {
                    const int ci = gi * cin_g + cl;
                    const S* xrow = xn->val.data() + static_cast<std::size_t>(ci) * L;
                    const S* wk = wn->val.data() + (static_cast<std::size_t>(co) * cin_g + cl) * K;
                    S* gxrow = gx ? gx->data() + static_cast<std::size_t>(ci) * L : nullptr;
                    S* gwk = gw ? gw->data() + (static_cast<std::size_t>(co) * cin_g + cl) * K : nullptr;
                    for (int k = 0; k < K; ++k) {
                      const int off = k - pad;
                      int t0 = off < 0 ? (-off + stride - 1) / stride : 0;
                      int t1 = std::min(Lout, off < L ? (L - 1 - off) / stride + 1 : 0);
                      if (gx) {
                        const S wv = wk[k];
                        for (int t = t0; t < t1; ++t) gxrow[t * stride + off] += wv * gyrow[t];
                      }
                      if (gw) {
                        S acc{0};
                        for (int t = t0; t < t1; ++t) acc += xrow[t * stride + off] * gyrow[t];
                        gwk[k] += acc;
                      }
                    }
                  }
                }
                (void)groups;
              }),
          x.tape};
}

template <typename S>
Var<S> conv1d(Var<S> x, Var<S> w, Var<S> bias, int stride = 1, int pad = 0, int groups = 1) {
  return conv1d(x, w, &bias, stride, pad, groups);
}

template <typename S>
Var<S> conv1d_nobias(Var<S> x, Var<S> w, int stride = 1, int pad = 0, int groups = 1) {
  return conv1d(x, w, static_cast<const Var<S>*>(nullptr), stride, pad, groups);
}

/// Per-channel bias: y[c,l] = x[c,l] + b[c].
template <typename S>
Var<S> add_bias(Var<S> x, Var<S> b) {
  detail::require(x.val().rank() == 2 && b.val().rank() == 1 &&
                      b.val().dim(0) == x.val().dim(0),
                  "add_bias: shape mismatch");
  const int C = x.val().dim(0), L = x.val().dim(1);
  Tensor<S> out = x.val();
  for (int c = 0; c < C; ++c) {
    const S bv = b.val().v[static_cast<std::size_t>(c)];
    S* row = out.data() + static_cast<std::size_t>(c) * L;
    for (int l = 0; l < L; ++l) row[l] += bv;
  }
  Node<S>* xn = x.node;
  Node<S>* bn = b.node;
  return {x.tape->make(std::move(out), {xn, bn},
                       [xn, bn, C, L](Node<S>& self) {
                         if (xn->requires_grad) {
                           Tensor<S>& g = grad_of(xn);
                           for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
                         }
                         if (bn->requires_grad) {
                           Tensor<S>& g = grad_of(bn);
                           for (int c = 0; c < C; ++c) {
                             const S* row = self.grad.data() + static_cast<std::size_t>(c) * L;
                             S acc{0};
                             for (int l = 0; l < L; ++l) acc += row[l];
                             g.v[static_cast<std::size_t>(c)] += acc;
                           }
                         }
                       }),
          x.tape};
}

/// Per-channel scaling: y[c,l] = x[c,l] * s[c].
template <typename S>
Var<S> scale_channels(Var<S> x, Var<S> s) {
  detail::require(x.val().rank() == 2 && s.val().rank() == 1 &&
                      s.val().dim(0) == x.val().dim(0),
                  "scale_channels: shape mismatch");
  const int C = x.val().dim(0), L = x.val().dim(1);
  Tensor<S> out = x.val();
  for (int c = 0; c < C; ++c) {
    const S sv = s.val().v[static_cast<std::size_t>(c)];
    S* row = out.data() + static_cast<std::size_t>(c) * L;
    for (int l = 0; l < L; ++l) row[l] *= sv;
  }
  Node<S>* xn = x.node;
  Node<S>* sn = s.node;
  return {x.tape->make(std::move(out), {xn, sn},
                       [xn, sn, C, L](Node<S>& self) {
                         if (xn->requires_grad) {
                           Tensor<S>& g = grad_of(xn);
                           for (int c = 0; c < C; ++c) {
                             const S sv = sn->val.v[static_cast<std::size_t>(c)];
                             const S* grow = self.grad.data() + static_cast<std::size_t>(c) * L;
                             S* gxr = g.data() + static_cast<std::size_t>(c) * L;
                             for (int l = 0; l < L; ++l) gxr[l] += sv * grow[l];
                           }
                         }
                         if (sn->requires_grad) {
                           Tensor<S>& g = grad_of(sn);
                           for (int c = 0; c < C; ++c) {
                             const S* grow = self.grad.data() + static_cast<std::size_t>(c) * L;
                             const S* xrow = xn->val.data() + static_cast<std::size_t>(c) * L;
                             S acc{0};
                             for (int l = 0; l < L; ++l) acc += grow[l] * xrow[l];
                             g.v[static_cast<std::size_t>(c)] += acc;
                           }
                         }
                       }),
          x.tape};
}

/// y = x * s[0] with a learnable scalar s of shape {1}.
template <typename S>
Var<S> scale_scalar(Var<S> x, Var<S> s) {
  detail::require(s.val().numel() == 1, "scale_scalar: scalar tensor expected");
  const S sv = s.val().v[0];
  Tensor<S> out = x.val();
  for (auto& v : out.v) v *= sv;
  Node<S>* xn = x.node;
  Node<S>* sn = s.node;
  return {x.tape->make(std::move(out), {xn, sn},
                       [xn, sn](Node<S>& self) {
                         const S sv2 = sn->val.v[0];
                         if (xn->requires_grad) {
                           Tensor<S>& g = grad_of(xn);
                           for (std::size_t i = 0; i < g.v.size(); ++i)
                             g.v[i] += sv2 * self.grad.v[i];
                         }
                         if (sn->requires_grad) {
                           S acc{0};
                           for (std::size_t i = 0; i < self.grad.v.size(); ++i)
                             acc += self.grad.v[i] * xn->val.v[i];
                           grad_of(sn).v[0] += acc;
                         }
                       }),
          x.tape};
}

template <typename S>
Var<S> slice_channels(Var<S> x, int c0, int c1) {
  detail::require(x.val().rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= x.val().dim(0),
                  "slice_channels: bad range");
  const int L = x.val().dim(1);
  Tensor<S> out({c1 - c0, L});
  std::copy(x.val().data() + static_cast<std::size_t>(c0) * L,
            x.val().data() + static_cast<std::size_t>(c1) * L, out.data());
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, c0, L](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         S* dst = g.data() + static_cast<std::size_t>(c0) * L;
                         for (std::size_t i = 0; i < self.grad.v.size(); ++i) dst[i] += self.grad.v[i];
                       }),
          x.tape};
}

template <typename S>
Var<S> concat_channels(Var<S> a, Var<S> b) {
  detail::require(a.val().rank() == 2 && b.val().rank() == 2 &&
                      a.val().dim(1) == b.val().dim(1),
                  "concat_channels: length mismatch");
  const int Ca = a.val().dim(0), Cb = b.val().dim(0), L = a.val().dim(1);
  Tensor<S> out({Ca + Cb, L});
  std::copy(a.val().v.begin(), a.val().v.end(), out.v.begin());
  std::copy(b.val().v.begin(), b.val().v.end(),
            out.v.begin() + static_cast<std::ptrdiff_t>(Ca) * L);
  Node<S>* an = a.node;
  Node<S>* bn = b.node;
  return {a.tape->make(std::move(out), {an, bn},
                       [an, bn, Ca, L](Node<S>& self) {
                         if (an->requires_grad) {
                           Tensor<S>& g = grad_of(an);
                           for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
                         }
                         if (bn->requires_grad) {
                           Tensor<S>& g = grad_of(bn);
                           const S* src = self.grad.data() + static_cast<std::size_t>(Ca) * L;
                           for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += src[i];
                         }
                       }),
          a.tape};
}

template <typename S>
Var<S> concat_vec(Var<S> a, Var<S> b) {
  detail::require(a.val().rank() == 1 && b.val().rank() == 1, "concat_vec: rank-1 inputs");
  const int na = a.val().dim(0), nb = b.val().dim(0);
  Tensor<S> out({na + nb});
  std::copy(a.val().v.begin(), a.val().v.end(), out.v.begin());
  std::copy(b.val().v.begin(), b.val().v.end(), out.v.begin() + na);
  Node<S>* an = a.node;
  Node<S>* bn = b.node;
  return {a.tape->make(std::move(out), {an, bn},
                       [an, bn, na, nb](Node<S>& self) {
                         if (an->requires_grad) {
                           Tensor<S>& g = grad_of(an);
                           for (int i = 0; i < na; ++i) g.v[static_cast<std::size_t>(i)] += self.grad.v[static_cast<std::size_t>(i)];
                         }
                         if (bn->requires_grad) {
                           Tensor<S>& g = grad_of(bn);
                           for (int i = 0; i < nb; ++i)
                             g.v[static_cast<std::size_t>(i)] += self.grad.v[static_cast<std::size_t>(na + i)];
                         }
                       }),
          a.tape};
}

/// Interleaves channel groups: with C = g*n, input channel c = i*n + j maps to
/// output channel j*g + i.
template <typename S>
Var<S> channel_shuffle(Var<S> x, int groups) {
  detail::require(x.val().rank() == 2 && groups >= 1 && x.val().dim(0) % groups == 0,
                  "channel_shuffle: channels not divisible by groups");
  const int C = x.val().dim(0), L = x.val().dim(1);
  const int n = C / groups;
  Tensor<S> out({C, L});
  for (int i = 0; i < groups; ++i)
    for (int j = 0; j < n; ++j)
      std::copy(x.val().data() + static_cast<std::size_t>(i * n + j) * L,
                x.val().data() + static_cast<std::size_t>(i * n + j + 1) * L,
                out.data() + static_cast<std::size_t>(j * groups + i) * L);
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, groups, n, L](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (int i = 0; i < groups; ++i)
                           for (int j = 0; j < n; ++j) {
                             const S* src = self.grad.data() + static_cast<std::size_t>(j * groups + i) * L;
                             S* dst = g.data() + static_cast<std::size_t>(i * n + j) * L;
                             for (int l = 0; l < L; ++l) dst[l] += src[l];
                           }
                       }),
          x.tape};
}

template <typename S>
Var<S> global_avg_pool(Var<S> x) {
  detail::require(x.val().rank() == 2, "global_avg_pool: rank-2 input expected");
  const int C = x.val().dim(0), L = x.val().dim(1);
  Tensor<S> out({C});
  for (int c = 0; c < C; ++c) {
    const S* row = x.val().data() + static_cast<std::size_t>(c) * L;
    S acc{0};
    for (int l = 0; l < L; ++l) acc += row[l];
    out.v[static_cast<std::size_t>(c)] = acc / static_cast<S>(L);
  }
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, C, L](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (int c = 0; c < C; ++c) {
                           const S gv = self.grad.v[static_cast<std::size_t>(c)] / static_cast<S>(L);
                           S* row = g.data() + static_cast<std::size_t>(c) * L;
                           for (int l = 0; l < L; ++l) row[l] += gv;
                         }
                       }),
          x.tape};
}

template <typename S>
Var<S> global_max_pool(Var<S> x) {
  detail::require(x.val().rank() == 2, "global_max_pool: rank-2 input expected");
  const int C = x.val().dim(0), L = x.val().dim(1);
  Tensor<S> out({C});
  std::vector<int> argmax(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    const S* row = x.val().data() + static_cast<std::size_t>(c) * L;
    int best = 0;
    for (int l = 1; l < L; ++l)
      if (row[l] > row[best]) best = l;
    argmax[static_cast<std::size_t>(c)] = best;
    out.v[static_cast<std::size_t>(c)] = row[best];
  }
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, argmax = std::move(argmax), L](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (std::size_t c = 0; c < argmax.size(); ++c)
                           g.v[c * static_cast<std::size_t>(L) +
                               static_cast<std::size_t>(argmax[c])] += self.grad.v[c];
                       }),
          x.tape};
}

/// Doubles the time axis with linear interpolation (align_corners = false):
/// output index i samples source coordinate i/2 - 0.25, clamped to the edges.
template <typename S>
Var<S> upsample_linear2x(Var<S> x) {
  detail::require(x.val().rank() == 2, "upsample_linear2x: rank-2 input expected");
  const int C = x.val().dim(0), L = x.val().dim(1);
  const int Lo = 2 * L;
  std::vector<int> i0(static_cast<std::size_t>(Lo)), i1(static_cast<std::size_t>(Lo));
  std::vector<S> w1(static_cast<std::size_t>(Lo));
  for (int i = 0; i < Lo; ++i) {
    const double s = 0.5 * i - 0.25;
    double f = std::floor(s);
    int lo = static_cast<int>(f);
    double frac = s - f;
    if (lo < 0) {
      lo = 0;
      frac = 0.0;
    }
    int hi = lo + 1;
    if (hi > L - 1) {
      hi = L - 1;
      if (lo > L - 1) lo = L - 1;
      if (lo == hi) frac = 0.0;
    }
    i0[static_cast<std::size_t>(i)] = lo;
    i1[static_cast<std::size_t>(i)] = hi;
    w1[static_cast<std::size_t>(i)] = static_cast<S>(frac);
  }
  Tensor<S> out({C, Lo});
  for (int c = 0; c < C; ++c) {
    const S* row = x.val().data() + static_cast<std::size_t>(c) * L;
    S* orow = out.data() + static_cast<std::size_t>(c) * Lo;
    for (int i = 0; i < Lo; ++i) {
      const S f = w1[static_cast<std::size_t>(i)];
      orow[i] = (S{1} - f) * row[i0[static_cast<std::size_t>(i)]] +
                f * row[i1[static_cast<std::size_t>(i)]];
    }
  }
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, i0 = std::move(i0), i1 = std::move(i1), w1 = std::move(w1), C,
                        L, Lo](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (int c = 0; c < C; ++c) {
                           S* grow = g.data() + static_cast<std::size_t>(c) * L;
                           const S* gout = self.grad.data() + static_cast<std::size_t>(c) * Lo;
                           for (int i = 0; i < Lo; ++i) {
                             const S f = w1[static_cast<std::size_t>(i)];
                             grow[i0[static_cast<std::size_t>(i)]] += (S{1} - f) * gout[i];
                             grow[i1[static_cast<std::size_t>(i)]] += f * gout[i];
                           }
                         }
                       }),
          x.tape};
}

/// Haar analysis high band: h_k = (x_{2k} - x_{2k+1}) / sqrt(2) per channel.
/// An odd trailing sample is dropped.
template <typename S>
Var<S> haar_high(Var<S> x) {
  detail::require(x.val().rank() == 2 && x.val().dim(1) >= 2,
                  "haar_high: sequence of length >= 2 expected, got " +
                      shape_string(x.shape()));
  const int C = x.val().dim(0), L = x.val().dim(1), H = L / 2;
  const S r = static_cast<S>(0.7071067811865475244008443621048490);
  Tensor<S> out({C, H});
  for (int c = 0; c < C; ++c) {
    const S* row = x.val().data() + static_cast<std::size_t>(c) * L;
    S* orow = out.data() + static_cast<std::size_t>(c) * H;
    for (int k = 0; k < H; ++k) orow[k] = (row[2 * k] - row[2 * k + 1]) * r;
  }
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, C, L, H, r](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (int c = 0; c < C; ++c) {
                           S* grow = g.data() + static_cast<std::size_t>(c) * L;
                           const S* gout = self.grad.data() + static_cast<std::size_t>(c) * H;
                           for (int k = 0; k < H; ++k) {
                             grow[2 * k] += r * gout[k];
                             grow[2 * k + 1] -= r * gout[k];
                           }
                         }
                       }),
          x.tape};
}

/// Haar analysis low band: l_k = (x_{2k} + x_{2k+1}) / sqrt(2) per channel.
template <typename S>
Var<S> haar_low(Var<S> x) {
  detail::require(x.val().rank() == 2 && x.val().dim(1) >= 2,
                  "haar_low: sequence of length >= 2 expected");
  const int C = x.val().dim(0), L = x.val().dim(1), H = L / 2;
  const S r = static_cast<S>(0.7071067811865475244008443621048490);
  Tensor<S> out({C, H});
  for (int c = 0; c < C; ++c) {
    const S* row = x.val().data() + static_cast<std::size_t>(c) * L;
    S* orow = out.data() + static_cast<std::size_t>(c) * H;
    for (int k = 0; k < H; ++k) orow[k] = (row[2 * k] + row[2 * k + 1]) * r;
  }
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, C, L, H, r](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (int c = 0; c < C; ++c) {
                           S* grow = g.data() + static_cast<std::size_t>(c) * L;
                           const S* gout = self.grad.data() + static_cast<std::size_t>(c) * H;
                           for (int k = 0; k < H; ++k) {
                             grow[2 * k] += r * gout[k];
                             grow[2 * k + 1] += r * gout[k];
                           }
                         }
                       }),
          x.tape};
}

/// Inverted dropout. Train mode scales kept entries by 1/(1-rate); eval mode
/// is the identity. The mask comes from the caller's RNG stream.
template <typename S>
Var<S> dropout(Var<S> x, double rate, bool train, Rng& rng) {
  detail::require(rate >= 0.0 && rate < 1.0, "dropout: rate must lie in [0,1)");
  if (!train || rate == 0.0) {
    Node<S>* xn = x.node;
    return {x.tape->make(Tensor<S>(x.val()), {xn},
                         [xn](Node<S>& self) {
                           if (!xn->requires_grad) return;
                           Tensor<S>& g = grad_of(xn);
                           for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] += self.grad.v[i];
                         }),
            x.tape};
  }
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  std::vector<S> mask(x.val().v.size());
  for (auto& m : mask) m = rng.uniform() < rate ? S{0} : keep_scale;
  Tensor<S> out = x.val();
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= mask[i];
  Node<S>* xn = x.node;
  return {x.tape->make(std::move(out), {xn},
                       [xn, mask = std::move(mask)](Node<S>& self) {
                         if (!xn->requires_grad) return;
                         Tensor<S>& g = grad_of(xn);
                         for (std::size_t i = 0; i < g.v.size(); ++i)
                           g.v[i] += self.grad.v[i] * mask[i];
                       }),
          x.tape};
}

// ---------------------------------------------------------------------------
// Batch normalization over the time axis of a {C, L} sequence
// ---------------------------------------------------------------------------

/// One deferred running-stat update; the tensors pointed at must outlive the
/// sink (they live in a ParamStore).
template <typename S>
struct BnStatsUpdate {
  Tensor<S>* running_mean;
  Tensor<S>* running_var;
  Tensor<S> mean;
  Tensor<S> var_unbiased;
  double momentum;
};

template <typename S>
struct BnStatsSink {
  std::vector<BnStatsUpdate<S>> updates;
};

template <typename S>
void bn_apply_update(const BnStatsUpdate<S>& u) {
  for (std::size_t i = 0; i < u.running_mean->v.size(); ++i) {
    u.running_mean->v[i] = static_cast<S>((1.0 - u.momentum) * u.running_mean->v[i] +
                                          u.momentum * u.mean.v[i]);
    u.running_var->v[i] = static_cast<S>((1.0 - u.momentum) * u.running_var->v[i] +
                                         u.momentum * u.var_unbiased.v[i]);
  }
}

template <typename S>
Var<S> batchnorm1d(Var<S> x, Var<S> gamma, Var<S> beta, Tensor<S>& running_mean,
                   Tensor<S>& running_var, bool train, double momentum = 0.1,
                   double eps = 1e-5, BnStatsSink<S>* sink = nullptr) {
  detail::require(x.val().rank() == 2, "batchnorm1d: rank-2 input expected");
  const int C = x.val().dim(0), L = x.val().dim(1);
  detail::require(gamma.val().dim(0) == C && beta.val().dim(0) == C,
                  "batchnorm1d: parameter shape mismatch");

  Node<S>* xn = x.node;
  Node<S>* gn = gamma.node;
  Node<S>* bn = beta.node;

  if (!train) {
    Tensor<S> out({C, L});
    std::vector<S> inv_sd(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
      inv_sd[static_cast<std::size_t>(c)] =
          S{1} / std::sqrt(running_var.v[static_cast<std::size_t>(c)] + static_cast<S>(eps));
      const S m = running_mean.v[static_cast<std::size_t>(c)];
      const S a = gamma.val().v[static_cast<std::size_t>(c)] * inv_sd[static_cast<std::size_t>(c)];
      const S b = beta.val().v[static_cast<std::size_t>(c)];
      const S* row = x.val().data() + static_cast<std::size_t>(c) * L;
      S* orow = out.data() + static_cast<std::size_t>(c) * L;
      for (int l = 0; l < L; ++l) orow[l] = a * (row[l] - m) + b;
    }
    return {x.tape->make(std::move(out), {xn, gn, bn},
                         [xn, gn, bn, inv_sd = std::move(inv_sd), m = running_mean, C,
                          L](Node<S>& self) {
                           for (int c = 0; c < C; ++c) {
                             const S* grow = self.grad.data() + static_cast<std::size_t>(c) * L;
                             const S isd = inv_sd[static_cast<std::size_t>(c)];
                             if (xn->requires_grad) {
                               const S a = gn->val.v[static_cast<std::size_t>(c)] * isd;
                               S* gx = grad_of(xn).data() + static_cast<std::size_t>(c) * L;
                               for (int l = 0; l < L; ++l) gx[l] += a * grow[l];
                             }
                             if (gn->requires_grad) {
                               const S* xrow = xn->val.data() + static_cast<std::size_t>(c) * L;
                               const S mc = m.v[static_cast<std::size_t>(c)];
                               S acc{0};
                               for (int l = 0; l < L; ++l) acc += grow[l] * (xrow[l] - mc) * isd;
                               grad_of(gn).v[static_cast<std::size_t>(c)] += acc;
                             }
                             if (bn->requires_grad) {
                               S acc{0};
                               for (int l = 0; l < L; ++l) acc += grow[l];
                               grad_of(bn).v[static_cast<std::size_t>(c)] += acc;
                             }
                           }
                         }),
            x.tape};
  }

  detail::require(L >= 2, "batchnorm1d: train mode needs L >= 2");
  Tensor<S> mean({C}), var({C});
  for (int c = 0; c < C; ++c) {
    const S* row = x.val().data() + static_cast<std::size_t>(c) * L;
    S m{0};
    for (int l = 0; l < L; ++l) m += row[l];
    m /= static_cast<S>(L);
    S v{0};
    for (int l = 0; l < L; ++l) {
      const S d = row[l] - m;
      v += d * d;
    }
    v /= static_cast<S>(L);
    mean.v[static_cast<std::size_t>(c)] = m;
    var.v[static_cast<std::size_t>(c)] = v;
  }

  // Normalized activations are saved for the backward pass.
  std::vector<S> xhat(static_cast<std::size_t>(C) * L);
  std::vector<S> inv_sd(static_cast<std::size_t>(C));
  Tensor<S> out({C, L});
  for (int c = 0; c < C; ++c) {
    const S isd = S{1} / std::sqrt(var.v[static_cast<std::size_t>(c)] + static_cast<S>(eps));
    inv_sd[static_cast<std::size_t>(c)] = isd;
    const S m = mean.v[static_cast<std::size_t>(c)];
    const S gw = gamma.val().v[static_cast<std::size_t>(c)];
    const S bw = beta.val().v[static_cast<std::size_t>(c)];
    const S* row = x.val().data() + static_cast<std::size_t>(c) * L;
    S* xh = xhat.data() + static_cast<std::size_t>(c) * L;
    S* orow = out.data() + static_cast<std::size_t>(c) * L;
    for (int l = 0; l < L; ++l) {
      xh[l] = (row[l] - m) * isd;
      orow[l] = gw * xh[l] + bw;
    }
  }

  Tensor<S> var_unbiased = var;
  for (auto& v : var_unbiased.v) v = v * static_cast<S>(L) / static_cast<S>(L - 1);
  BnStatsUpdate<S> update{&running_mean, &running_var, std::move(mean),
                          std::move(var_unbiased), momentum};
  if (sink)
    sink->updates.push_back(std::move(update));
  else
    bn_apply_update(update);

  return {x.tape->make(std::move(out), {xn, gn, bn},
                       [xn, gn, bn, xhat = std::move(xhat), inv_sd = std::move(inv_sd), C,
                        L](Node<S>& self) {
                         for (int c = 0; c < C; ++c) {
                           const S* grow = self.grad.data() + static_cast<std::size_t>(c) * L;
                           const S* xh = xhat.data() + static_cast<std::size_t>(c) * L;
                           S gsum{0}, gxsum{0};
                           for (int l = 0; l < L; ++l) {
                             gsum += grow[l];
                             gxsum += grow[l] * xh[l];
                           }
                           if (bn->requires_grad)
                             grad_of(bn).v[static_cast<std::size_t>(c)] += gsum;
                           if (gn->requires_grad)
                             grad_of(gn).v[static_cast<std::size_t>(c)] += gxsum;
                           if (xn->requires_grad) {
                             const S a = gn->val.v[static_cast<std::size_t>(c)] *
                                         inv_sd[static_cast<std::size_t>(c)];
                             const S mg = gsum / static_cast<S>(L);
                             const S mgx = gxsum / static_cast<S>(L);
                             S* gx = grad_of(xn).data() + static_cast<std::size_t>(c) * L;
                             for (int l = 0; l < L; ++l)
                               gx[l] += a * (grow[l] - mg - xh[l] * mgx);
                           }
                         }
                       }),
          x.tape};
}

/// Layer normalization across channels at every time step of a {C, L}
/// sequence, with per-channel affine parameters.
template <typename S>
Var<S> layernorm_channels(Var<S> x, Var<S> gamma, Var<S> beta, double eps = 1e-5) {
  detail::require(x.val().rank() == 2, "layernorm: rank-2 input expected");
  const int C = x.val().dim(0), L = x.val().dim(1);
  detail::require(gamma.val().dim(0) == C && beta.val().dim(0) == C,
                  "layernorm: parameter shape mismatch");
  detail::require(C >= 2, "layernorm: needs at least 2 channels");

  std::vector<S> xhat(static_cast<std::size_t>(C) * L);
  std::vector<S> inv_sd(static_cast<std::size_t>(L));
  Tensor<S> out({C, L});
  const S* xd = x.val().data();
  for (int l = 0; l < L; ++l) {
    S m{0};
    for (int c = 0; c < C; ++c) m += xd[static_cast<std::size_t>(c) * L + l];
    m /= static_cast<S>(C);
    S v{0};
    for (int c = 0; c < C; ++c) {
      const S d = xd[static_cast<std::size_t>(c) * L + l] - m;
      v += d * d;
    }
    v /= static_cast<S>(C);
    const S isd = S{1} / std::sqrt(v + static_cast<S>(eps));
    inv_sd[static_cast<std::size_t>(l)] = isd;
    for (int c = 0; c < C; ++c) {
      const std::size_t i = static_cast<std::size_t>(c) * L + l;
      xhat[i] = (xd[i] - m) * isd;
      out.v[i] = gamma.val().v[static_cast<std::size_t>(c)] * xhat[i] +
                 beta.val().v[static_cast<std::size_t>(c)];
    }
  }

  Node<S>* xn = x.node;
  Node<S>* gn = gamma.node;
  Node<S>* bn = beta.node;
  return {x.tape->make(
              std::move(out), {xn, gn, bn},
              [xn, gn, bn, xhat = std::move(xhat), inv_sd = std::move(inv_sd), C,
               L](Node<S>& self) {
                if (gn->requires_grad || bn->requires_grad) {
                  Tensor<S>* gg = gn->requires_grad ? &grad_of(gn) : nullptr;
                  Tensor<S>* gb = bn->requires_grad ? &grad_of(bn) : nullptr;
                  for (int c = 0; c < C; ++c) {
                    const S* grow = self.grad.data() + static_cast<std::size_t>(c) * L;
                    const S* xh = xhat.data() + static_cast<std::size_t>(c) * L;
                    S sg{0}, sgx{0};
                    for (int l = 0; l < L; ++l) {
                      sg += grow[l];
                      sgx += grow[l] * xh[l];
                    }
                    if (gb) gb->v[static_cast<std::size_t>(c)] += sg;
                    if (gg) gg->v[static_cast<std::size_t>(c)] += sgx;
                  }
                }
                if (xn->requires_grad) {
                  Tensor<S>& gx = grad_of(xn);
                  for (int l = 0; l < L; ++l) {
                    S mh{0}, mhx{0};
                    for (int c = 0; c < C; ++c) {
                      const std::size_t i = static_cast<std::size_t>(c) * L + l;
                      const S h = self.grad.v[i] * gn->val.v[static_cast<std::size_t>(c)];
                      mh += h;
                      mhx += h * xhat[i];
                    }
                    mh /= static_cast<S>(C);
                    mhx /= static_cast<S>(C);
                    const S isd = inv_sd[static_cast<std::size_t>(l)];
                    for (int c = 0; c < C; ++c) {
                      const std::size_t i = static_cast<std::size_t>(c) * L + l;
                      const S h = self.grad.v[i] * gn->val.v[static_cast<std::size_t>(c)];
                      gx.v[i] += isd * (h - mh - xhat[i] * mhx);
                    }
                  }
                }
              }),
          x.tape};
}

// ---------------------------------------------------------------------------
// Composite helpers
// ---------------------------------------------------------------------------

/// x / sqrt(sum(x^2) + eps), composed from primitive ops.
template <typename S>
Var<S> l2_normalize(Var<S> x, double eps = 1e-12) {
  Var<S> ss = sum_all(mul(x, x));
  return scale_scalar(x, rsqrt(ss, eps));
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  return add(a, b);
}
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
  return sub(a, b);
}
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) {
  return mul(a, b);
}

}  // namespace inkline::ad
