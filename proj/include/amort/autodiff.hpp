#pragma once

#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "amort/tensor.hpp"

// Reverse-mode automatic differentiation over TensorT. Graphs are built
// define-by-run: every forward pass creates fresh interior nodes, while
// named parameters are long-lived leaves shared across passes. backward()
// never mutates the graph; it returns gradients in a side map, so a graph
// stays valid for inspection and leaves can be reused immediately.
namespace amort::ad {

namespace detail {
inline thread_local int nograd_depth = 0;
inline thread_local bool finite_checks = true;
}  // namespace detail

inline bool grad_enabled() { return detail::nograd_depth == 0; }
inline bool finite_checks_enabled() { return detail::finite_checks; }

class NoGradGuard {
 public:
  NoGradGuard() { ++detail::nograd_depth; }
  ~NoGradGuard() { --detail::nograd_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class FiniteCheckGuard {
 public:
  explicit FiniteCheckGuard(bool enabled) : prev_(detail::finite_checks) {
    detail::finite_checks = enabled;
  }
  ~FiniteCheckGuard() { detail::finite_checks = prev_; }

 private:
  bool prev_;
};

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

// Gradients keyed by node identity; filled during backward().
template <typename T>
using GradMap = std::unordered_map<const Node<T>*, TensorT<T>>;

template <typename T>
struct Node {
  TensorT<T> value;
  bool requires_grad = false;
  std::string name;  // non-empty only for named parameters
  std::vector<NodePtr<T>> parents;
  // Receives d(loss)/d(this) and accumulates d(loss)/d(parent) into the map.
  std::function<void(const TensorT<T>&, GradMap<T>&)> backprop;
};

template <typename T>
void accumulate(GradMap<T>& sink, const Node<T>* node, const TensorT<T>& g) {
  auto it = sink.find(node);
  if (it == sink.end())
    sink.emplace(node, g);
  else
    it->second.add_inplace(g);
}

// Value handle over a graph node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

  static Var constant(TensorT<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var leaf(TensorT<T> value, bool requires_grad,
                  std::string name = {}) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const TensorT<T>& val() const { return node_->value; }
  TensorT<T>& mutable_val() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const NodePtr<T>& node() const { return node_; }
  Node<T>* raw() const { return node_.get(); }
  int64_t rows() const { return node_->value.rows(); }
  int64_t cols() const { return node_->value.cols(); }

 private:
  NodePtr<T> node_;
};

namespace detail {

template <typename T>
void check_value(const TensorT<T>& v, const char* op) {
  if (finite_checks && !v.all_finite())
    throw std::runtime_error(std::string("non-finite values produced by ") +
                             op);
}

template <typename T>
Var<T> make_op(const char* op, TensorT<T> value, std::vector<Var<T>> inputs,
               std::function<void(const TensorT<T>&, GradMap<T>&)> backprop) {
  check_value(value, op);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool track = grad_enabled();
  if (track) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    track = any;
  }
  if (track) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node());
    n->backprop = std::move(backprop);
  }
  return Var<T>(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.val().require_same_shape(b.val());
  TensorT<T> out = a.val();
  out.add_inplace(b.val());
  auto pa = a.raw();
  auto pb = b.raw();
  return detail::make_op<T>("add", std::move(out), {a, b},
                            [pa, pb](const TensorT<T>& g, GradMap<T>& sink) {
                              accumulate(sink, pa, g);
                              accumulate(sink, pb, g);
                            });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  a.val().require_same_shape(b.val());
  TensorT<T> out = a.val();
  out.add_inplace(b.val(), T(-1));
  auto pa = a.raw();
  auto pb = b.raw();
  return detail::make_op<T>("sub", std::move(out), {a, b},
                            [pa, pb](const TensorT<T>& g, GradMap<T>& sink) {
                              accumulate(sink, pa, g);
                              TensorT<T> neg = g;
                              neg.map() = -neg.map();
                              accumulate(sink, pb, neg);
                            });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.val().require_same_shape(b.val());
  TensorT<T> out = a.val();
  out.map() = out.map().cwiseProduct(b.val().map());
  auto pa = a.raw();
  auto pb = b.raw();
  TensorT<T> av = a.val(), bv = b.val();
  return detail::make_op<T>(
      "mul", std::move(out), {a, b},
      [pa, pb, av, bv](const TensorT<T>& g, GradMap<T>& sink) {
        TensorT<T> ga = g;
        ga.map() = ga.map().cwiseProduct(bv.map());
        accumulate(sink, pa, ga);
        TensorT<T> gb = g;
        gb.map() = gb.map().cwiseProduct(av.map());
        accumulate(sink, pb, gb);
      });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  TensorT<T> out = a.val();
  out.map() *= c;
  auto pa = a.raw();
  return detail::make_op<T>("scale", std::move(out), {a},
                            [pa, c](const TensorT<T>& g, GradMap<T>& sink) {
                              TensorT<T> ga = g;
                              ga.map() *= c;
                              accumulate(sink, pa, ga);
                            });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  TensorT<T> out = a.val();
  out.map().array() += c;
  auto pa = a.raw();
  return detail::make_op<T>("add_scalar", std::move(out), {a},
                            [pa](const TensorT<T>& g, GradMap<T>& sink) {
                              accumulate(sink, pa, g);
                            });
}

// Adds a constant tensor (no gradient path through it), e.g. attention masks.
template <typename T>
Var<T> add_const(const Var<T>& a, const TensorT<T>& c) {
  a.val().require_same_shape(c);
  TensorT<T> out = a.val();
  out.add_inplace(c);
  auto pa = a.raw();
  return detail::make_op<T>("add_const", std::move(out), {a},
                            [pa](const TensorT<T>& g, GradMap<T>& sink) {
                              accumulate(sink, pa, g);
                            });
}

// Broadcast add of a [1,n] row vector over every row of a [m,n] matrix.
template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& b) {
  if (b.rows() != 1 || b.cols() != a.cols())
    throw std::invalid_argument("add_rowvec: expected [1,n] bias");
  TensorT<T> out = a.val();
  out.map().rowwise() += b.val().map().row(0);
  auto pa = a.raw();
  auto pb = b.raw();
  return detail::make_op<T>("add_rowvec", std::move(out), {a, b},
                            [pa, pb](const TensorT<T>& g, GradMap<T>& sink) {
                              accumulate(sink, pa, g);
                              TensorT<T> gb(1, g.cols());
                              gb.map() = g.map().colwise().sum();
                              accumulate(sink, pb, gb);
                            });
}

template <typename T>
Var<T> exp_elem(const Var<T>& a) {
  TensorT<T> out = a.val();
  out.map() = out.map().array().exp().matrix();
  auto pa = a.raw();
  TensorT<T> saved = out;
  return detail::make_op<T>("exp", std::move(out), {a},
                            [pa, saved](const TensorT<T>& g, GradMap<T>& s) {
                              TensorT<T> ga = g;
                              ga.map() = ga.map().cwiseProduct(saved.map());
                              accumulate(s, pa, ga);
                            });
}

template <typename T>
Var<T> log_elem(const Var<T>& a) {
  TensorT<T> out = a.val();
  out.map() = out.map().array().log().matrix();
  auto pa = a.raw();
  TensorT<T> av = a.val();
  return detail::make_op<T>("log", std::move(out), {a},
                            [pa, av](const TensorT<T>& g, GradMap<T>& s) {
                              TensorT<T> ga = g;
                              ga.map() = ga.map().cwiseQuotient(av.map());
                              accumulate(s, pa, ga);
                            });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false,
              bool tb = false) {
  const auto& A = a.val();
  const auto& B = b.val();
  int64_t am = ta ? A.cols() : A.rows();
  int64_t ak = ta ? A.rows() : A.cols();
  int64_t bk = tb ? B.cols() : B.rows();
  int64_t bn = tb ? B.rows() : B.cols();
  if (ak != bk) throw std::invalid_argument("matmul: inner dim mismatch");
  TensorT<T> out(am, bn);
  if (!ta && !tb)
    out.map().noalias() = A.map() * B.map();
  else if (ta && !tb)
    out.map().noalias() = A.map().transpose() * B.map();
  else if (!ta && tb)
    out.map().noalias() = A.map() * B.map().transpose();
  else
    out.map().noalias() = A.map().transpose() * B.map().transpose();
  auto pa = a.raw();
  auto pb = b.raw();
  TensorT<T> av = A, bv = B;
  return detail::make_op<T>(
      "matmul", std::move(out), {a, b},
      [pa, pb, av, bv, ta, tb](const TensorT<T>& g, GradMap<T>& sink) {
        TensorT<T> ga(av.rows(), av.cols());
        TensorT<T> gb(bv.rows(), bv.cols());
        if (!ta && !tb) {
          ga.map().noalias() = g.map() * bv.map().transpose();
          gb.map().noalias() = av.map().transpose() * g.map();
        } else if (ta && !tb) {
          ga.map().noalias() = bv.map() * g.map().transpose();
          gb.map().noalias() = av.map() * g.map();
        } else if (!ta && tb) {
          ga.map().noalias() = g.map() * bv.map();
          gb.map().noalias() = g.map().transpose() * av.map();
        } else {
          ga.map().noalias() = bv.map().transpose() * g.map().transpose();
          gb.map().noalias() = g.map().transpose() * av.map().transpose();
        }
        accumulate(sink, pa, ga);
        accumulate(sink, pb, gb);
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

template <typename T>
Var<T> gelu(const Var<T>& a) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt2pi = T(0.39894228040143267794);
  TensorT<T> out = a.val();
  for (auto& v : out.data()) {
    T phi = T(0.5) * (T(1) + T(std::erf(double(v) * double(inv_sqrt2))));
    v = v * phi;
  }
  auto pa = a.raw();
  TensorT<T> av = a.val();
  return detail::make_op<T>(
      "gelu", std::move(out), {a},
      [pa, av, inv_sqrt2, inv_sqrt2pi](const TensorT<T>& g, GradMap<T>& sink) {
        TensorT<T> ga = g;
        for (int64_t i = 0; i < ga.numel(); ++i) {
          T x = av.data()[size_t(i)];
          T phi = T(0.5) * (T(1) + T(std::erf(double(x) * double(inv_sqrt2))));
          T dens = inv_sqrt2pi * T(std::exp(-0.5 * double(x) * double(x)));
          ga.data()[size_t(i)] *= phi + x * dens;
        }
        accumulate(sink, pa, ga);
      });
}

// Row-wise softmax with an optional additive mask applied before
// normalization. Blocked entries carry a large negative constant and end up
// with exactly zero weight after exponentiation.
template <typename T>
Var<T> softmax_rows(const Var<T>& a, const TensorT<T>* mask = nullptr) {
  if (mask) a.val().require_same_shape(*mask);
  TensorT<T> out = a.val();
  if (mask) out.add_inplace(*mask);
  for (int64_t r = 0; r < out.rows(); ++r) {
    T m = out(r, 0);
    for (int64_t c = 1; c < out.cols(); ++c) m = std::max(m, out(r, c));
    T sum = T(0);
    for (int64_t c = 0; c < out.cols(); ++c) {
      T e = T(std::exp(double(out(r, c) - m)));
      out(r, c) = e;
      sum += e;
    }
    for (int64_t c = 0; c < out.cols(); ++c) out(r, c) /= sum;
  }
  auto pa = a.raw();
  TensorT<T> saved = out;
  return detail::make_op<T>(
      "softmax", std::move(out), {a},
      [pa, saved](const TensorT<T>& g, GradMap<T>& sink) {
        TensorT<T> ga = g;
        for (int64_t r = 0; r < ga.rows(); ++r) {
          T dot = T(0);
          for (int64_t c = 0; c < ga.cols(); ++c)
            dot += g(r, c) * saved(r, c);
          for (int64_t c = 0; c < ga.cols(); ++c)
            ga(r, c) = saved(r, c) * (g(r, c) - dot);
        }
        accumulate(sink, pa, ga);
      });
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& a) {
  TensorT<T> out = a.val();
  for (int64_t r = 0; r < out.rows(); ++r) {
    T m = out(r, 0);
    for (int64_t c = 1; c < out.cols(); ++c) m = std::max(m, out(r, c));
    double sum = 0;
    for (int64_t c = 0; c < out.cols(); ++c)
      sum += std::exp(double(out(r, c) - m));
    T lse = m + T(std::log(sum));
    for (int64_t c = 0; c < out.cols(); ++c) out(r, c) -= lse;
  }
  auto pa = a.raw();
  TensorT<T> saved = out;
  return detail::make_op<T>(
      "log_softmax", std::move(out), {a},
      [pa, saved](const TensorT<T>& g, GradMap<T>& sink) {
        TensorT<T> ga = g;
        for (int64_t r = 0; r < ga.rows(); ++r) {
          T rowsum = T(0);
          for (int64_t c = 0; c < ga.cols(); ++c) rowsum += g(r, c);
          for (int64_t c = 0; c < ga.cols(); ++c)
            ga(r, c) = g(r, c) - T(std::exp(double(saved(r, c)))) * rowsum;
        }
        accumulate(sink, pa, ga);
      });
}

// Row-wise layer normalization with learned gain/bias of shape [1,n].
template <typename T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                       T eps = T(1e-5)) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 ||
      bias.cols() != x.cols())
    throw std::invalid_argument("layer_norm: gain/bias must be [1,n]");
  int64_t n = x.cols();
  TensorT<T> xhat(x.rows(), n);
  TensorT<T> inv_sigma(x.rows(), 1);
  TensorT<T> out(x.rows(), n);
  for (int64_t r = 0; r < x.rows(); ++r) {
    double mean = 0;
    for (int64_t c = 0; c < n; ++c) mean += double(x.val()(r, c));
    mean /= double(n);
    double var = 0;
    for (int64_t c = 0; c < n; ++c) {
      double d = double(x.val()(r, c)) - mean;
      var += d * d;
    }
    var /= double(n);
    T is = T(1.0 / std::sqrt(var + double(eps)));
    inv_sigma(r, 0) = is;
    for (int64_t c = 0; c < n; ++c) {
      T xh = (x.val()(r, c) - T(mean)) * is;
      xhat(r, c) = xh;
      out(r, c) = gain.val()(0, c) * xh + bias.val()(0, c);
    }
  }
  auto px = x.raw();
  auto pg = gain.raw();
  auto pb = bias.raw();
  TensorT<T> gv = gain.val();
  return detail::make_op<T>(
      "layer_norm", std::move(out), {x, gain, bias},
      [px, pg, pb, xhat, inv_sigma, gv, n](const TensorT<T>& g,
                                           GradMap<T>& sink) {
        TensorT<T> gx(g.rows(), n);
        TensorT<T> ggain(1, n);
        TensorT<T> gbias(1, n);
        for (int64_t r = 0; r < g.rows(); ++r) {
          T mean_gy = T(0), mean_gyx = T(0);
          for (int64_t c = 0; c < n; ++c) {
            T gy = g(r, c) * gv(0, c);
            mean_gy += gy;
            mean_gyx += gy * xhat(r, c);
            ggain(0, c) += g(r, c) * xhat(r, c);
            gbias(0, c) += g(r, c);
          }
          mean_gy /= T(n);
          mean_gyx /= T(n);
          for (int64_t c = 0; c < n; ++c) {
            T gy = g(r, c) * gv(0, c);
            gx(r, c) = (gy - mean_gy - xhat(r, c) * mean_gyx) * inv_sigma(r, 0);
          }
        }
        accumulate(sink, px, gx);
        accumulate(sink, pg, ggain);
        accumulate(sink, pb, gbias);
      });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Var<T> reshape(const Var<T>& a, int64_t r, int64_t c) {
  TensorT<T> out = a.val().reshaped(r, c);
  auto pa = a.raw();
  int64_t ar = a.rows(), ac = a.cols();
  return detail::make_op<T>("reshape", std::move(out), {a},
                            [pa, ar, ac](const TensorT<T>& g, GradMap<T>& s) {
                              accumulate(s, pa, g.reshaped(ar, ac));
                            });
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, int64_t r0, int64_t r1) {
  TensorT<T> out = a.val().slice_rows(r0, r1);
  auto pa = a.raw();
  int64_t ar = a.rows(), ac = a.cols();
  return detail::make_op<T>(
      "slice_rows", std::move(out), {a},
      [pa, ar, ac, r0](const TensorT<T>& g, GradMap<T>& s) {
        TensorT<T> ga(ar, ac);
        for (int64_t r = 0; r < g.rows(); ++r)
          for (int64_t c = 0; c < ac; ++c) ga(r0 + r, c) = g(r, c);
        accumulate(s, pa, ga);
      });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, int64_t c0, int64_t c1) {
  TensorT<T> out = a.val().slice_cols(c0, c1);
  auto pa = a.raw();
  int64_t ar = a.rows(), ac = a.cols();
  return detail::make_op<T>(
      "slice_cols", std::move(out), {a},
      [pa, ar, ac, c0](const TensorT<T>& g, GradMap<T>& s) {
        TensorT<T> ga(ar, ac);
        for (int64_t r = 0; r < g.rows(); ++r)
          for (int64_t c = 0; c < g.cols(); ++c) ga(r, c0 + c) = g(r, c);
        accumulate(s, pa, ga);
      });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  int64_t cols = parts[0].cols();
  int64_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols)
      throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
  }
  TensorT<T> out(rows, cols);
  std::vector<int64_t> offsets;
  int64_t r = 0;
  for (const auto& p : parts) {
    offsets.push_back(r);
    for (int64_t i = 0; i < p.rows(); ++i)
      for (int64_t c = 0; c < cols; ++c) out(r + i, c) = p.val()(i, c);
    r += p.rows();
  }
  std::vector<Node<T>*> raw;
  std::vector<int64_t> sizes;
  for (const auto& p : parts) {
    raw.push_back(p.raw());
    sizes.push_back(p.rows());
  }
  return detail::make_op<T>(
      "concat_rows", std::move(out), parts,
      [raw, sizes, offsets](const TensorT<T>& g, GradMap<T>& s) {
        for (size_t i = 0; i < raw.size(); ++i)
          accumulate(s, raw[i], g.slice_rows(offsets[i], offsets[i] + sizes[i]));
      });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  int64_t rows = parts[0].rows();
  int64_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows)
      throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  TensorT<T> out(rows, cols);
  std::vector<int64_t> offsets;
  int64_t c0 = 0;
  for (const auto& p : parts) {
    offsets.push_back(c0);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < p.cols(); ++c) out(r, c0 + c) = p.val()(r, c);
    c0 += p.cols();
  }
  std::vector<Node<T>*> raw;
  std::vector<int64_t> sizes;
  for (const auto& p : parts) {
    raw.push_back(p.raw());
    sizes.push_back(p.cols());
  }
  return detail::make_op<T>(
      "concat_cols", std::move(out), parts,
      [raw, sizes, offsets](const TensorT<T>& g, GradMap<T>& s) {
        for (size_t i = 0; i < raw.size(); ++i)
          accumulate(s, raw[i], g.slice_cols(offsets[i], offsets[i] + sizes[i]));
      });
}

// ---------------------------------------------------------------------------
// Reductions and indexing

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  T s = T(0);
  for (T v : a.val().data()) s += v;
  auto pa = a.raw();
  int64_t ar = a.rows(), ac = a.cols();
  return detail::make_op<T>("sum_all", TensorT<T>::scalar(s), {a},
                            [pa, ar, ac](const TensorT<T>& g, GradMap<T>& s2) {
                              accumulate(s2, pa,
                                         TensorT<T>::full(ar, ac, g.item()));
                            });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  if (a.val().numel() == 0) throw std::invalid_argument("mean_all: empty");
  T s = T(0);
  for (T v : a.val().data()) s += v;
  T scale_v = T(1) / T(a.val().numel());
  auto pa = a.raw();
  int64_t ar = a.rows(), ac = a.cols();
  return detail::make_op<T>(
      "mean_all", TensorT<T>::scalar(s * scale_v), {a},
      [pa, ar, ac, scale_v](const TensorT<T>& g, GradMap<T>& s2) {
        accumulate(s2, pa, TensorT<T>::full(ar, ac, g.item() * scale_v));
      });
}

// Selects one column per row: out[r,0] = a[r, idx[r]].
template <typename T>
Var<T> pick_cols(const Var<T>& a, const std::vector<int>& idx) {
  if (int64_t(idx.size()) != a.rows())
    throw std::invalid_argument("pick_cols: index count mismatch");
  TensorT<T> out(a.rows(), 1);
  for (int64_t r = 0; r < a.rows(); ++r) {
    if (idx[size_t(r)] < 0 || idx[size_t(r)] >= a.cols())
      throw std::out_of_range("pick_cols: index out of range");
    out(r, 0) = a.val()(r, idx[size_t(r)]);
  }
  auto pa = a.raw();
  int64_t ar = a.rows(), ac = a.cols();
  return detail::make_op<T>("pick_cols", std::move(out), {a},
                            [pa, ar, ac, idx](const TensorT<T>& g,
                                              GradMap<T>& s) {
                              TensorT<T> ga(ar, ac);
                              for (int64_t r = 0; r < ar; ++r)
                                ga(r, idx[size_t(r)]) = g(r, 0);
                              accumulate(s, pa, ga);
                            });
}

// Embedding-style lookup: out row r = table row idx[r].
template <typename T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& idx) {
  TensorT<T> out(int64_t(idx.size()), table.cols());
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= table.rows())
      throw std::out_of_range("gather_rows: index out of range");
    for (int64_t c = 0; c < table.cols(); ++c)
      out(int64_t(r), c) = table.val()(idx[r], c);
  }
  auto pt = table.raw();
  int64_t tr = table.rows(), tc = table.cols();
  return detail::make_op<T>(
      "gather_rows", std::move(out), {table},
      [pt, tr, tc, idx](const TensorT<T>& g, GradMap<T>& s) {
        TensorT<T> gt(tr, tc);
        for (size_t r = 0; r < idx.size(); ++r)
          for (int64_t c = 0; c < tc; ++c) gt(idx[r], c) += g(int64_t(r), c);
        accumulate(s, pt, gt);
      });
}

// Numerically stable elementwise binary cross entropy on logits against
// constant targets in [0,1]; returns the per-element loss matrix.
template <typename T>
Var<T> bce_with_logits(const Var<T>& z, const TensorT<T>& targets) {
  z.val().require_same_shape(targets);
  TensorT<T> out = z.val();
  for (int64_t i = 0; i < out.numel(); ++i) {
    double zv = double(out.data()[size_t(i)]);
    double t = double(targets.data()[size_t(i)]);
    out.data()[size_t(i)] =
        T(std::max(zv, 0.0) - zv * t + std::log1p(std::exp(-std::abs(zv))));
  }
  auto pz = z.raw();
  TensorT<T> zv = z.val();
  return detail::make_op<T>(
      "bce_with_logits", std::move(out), {z},
      [pz, zv, targets](const TensorT<T>& g, GradMap<T>& s) {
        TensorT<T> gz = g;
        for (int64_t i = 0; i < gz.numel(); ++i) {
          double sig = 1.0 / (1.0 + std::exp(-double(zv.data()[size_t(i)])));
          gz.data()[size_t(i)] *= T(sig - double(targets.data()[size_t(i)]));
        }
        accumulate(s, pz, gz);
      });
}

// Identity forward; gradients do not pass through.
template <typename T>
Var<T> stop_gradient(const Var<T>& a) {
  return Var<T>::constant(a.val());
}

// ---------------------------------------------------------------------------
// Loss helpers

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const TensorT<T>& target) {
  Var<T> d = sub(pred, Var<T>::constant(target));
  return mean_all(mul(d, d));
}

template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, const std::vector<int>& labels) {
  Var<T> lsm = log_softmax_rows(logits);
  Var<T> picked = pick_cols(lsm, labels);
  return scale(mean_all(picked), T(-1));
}

// ---------------------------------------------------------------------------
// Backward pass

// Computes d(loss)/d(node) for every node reachable from a scalar loss.
// The graph itself is left untouched; results are keyed by node pointer.
template <typename T>
GradMap<T> backward(const Var<T>& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: empty var");
  if (loss.val().numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  if (!loss.val().all_finite())
    throw std::runtime_error("backward: non-finite loss");

  // Iterative post-order topological sort over grad-requiring nodes.
  std::vector<const Node<T>*> topo;
  std::unordered_set<const Node<T>*> visited;
  std::vector<std::pair<const Node<T>*, size_t>> stack;
  if (loss.requires_grad()) stack.emplace_back(loss.raw(), 0);
  while (!stack.empty()) {
    auto [node, child] = stack.back();
    if (child == 0 && visited.count(node)) {
      stack.pop_back();
      continue;
    }
    if (child < node->parents.size()) {
      stack.back().second = child + 1;
      const Node<T>* next = node->parents[child].get();
      if (next->requires_grad && !visited.count(next))
        stack.emplace_back(next, 0);
    } else {
      visited.insert(node);
      topo.push_back(node);
      stack.pop_back();
    }
  }

  GradMap<T> sink;
  if (topo.empty()) return sink;
  sink.emplace(loss.raw(), TensorT<T>::ones(1, 1));
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    const Node<T>* node = *it;
    auto found = sink.find(node);
    if (found == sink.end()) continue;
    if (!found->second.all_finite())
      throw std::runtime_error("backward: non-finite gradient at node " +
                               (node->name.empty() ? std::string("<op>")
                                                   : node->name));
    if (node->backprop) node->backprop(found->second, sink);
  }
  return sink;
}

// ---------------------------------------------------------------------------
// Named parameter registry

template <typename T>
class ParamStore {
 public:
  Var<T> create(const std::string& name, TensorT<T> init) {
    if (index_.count(name))
      throw std::invalid_argument("param already registered: " + name);
    Var<T> v = Var<T>::leaf(std::move(init), true, name);
    index_[name] = params_.size();
    params_.push_back(v);
    names_.push_back(name);
    return v;
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Var<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
  }

  const std::vector<std::string>& names() const { return names_; }
  size_t size() const { return params_.size(); }
  Var<T>& at(size_t i) { return params_[i]; }
  const Var<T>& at(size_t i) const { return params_[i]; }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.val().numel();
    return n;
  }

  // Extracts this store's gradients from a backward() result, zero-filled
  // for parameters the loss did not touch.
  std::map<std::string, TensorT<T>> named_grads(const GradMap<T>& sink) const {
    std::map<std::string, TensorT<T>> out;
    for (size_t i = 0; i < params_.size(); ++i) {
      auto it = sink.find(params_[i].raw());
      if (it != sink.end())
        out.emplace(names_[i], it->second);
      else
        out.emplace(names_[i], TensorT<T>::zeros(params_[i].rows(),
                                                 params_[i].cols()));
    }
    return out;
  }

 private:
  std::vector<Var<T>> params_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, size_t> index_;
};

// Convenience wrapper matching the "gradient per named leaf" contract.
template <typename T>
std::map<std::string, TensorT<T>> backward_named(const Var<T>& loss,
                                                 const ParamStore<T>& store) {
  GradMap<T> sink = backward(loss);
  return store.named_grads(sink);
}

}  // namespace amort::ad
