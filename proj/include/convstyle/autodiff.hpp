// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "convstyle/param_store.hpp"
#include "convstyle/random.hpp"
#include "convstyle/tensor.hpp"

namespace convstyle {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Dynamic reverse-mode tape. One forward pass records nodes in topological
/// order; `backward` walks them in reverse and then adds parameter gradients
/// into the bound ParamStore. A tape is single-use and single-threaded.
class Tape {
 public:
  /// Receives the gradient of the op's output and accumulates into inputs.
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  /// With gradients disabled, parameters enter as constants and no backward
  /// closures are recorded (inference only).
  explicit Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(std::move(t), false, nullptr); }

  /// A free leaf with a gradient slot (used by tests and the gradient checker).
  Var leaf(Tensor t) { return push(std::move(t), true, nullptr); }

  /// Bind a named parameter. Repeated requests for the same name return the
  /// same node, so gradients from every use are summed.
  Var param(ParamStore& store, const std::string& name) {
    for (const auto& b : bindings_)
      if (b.store == &store && b.name == name) return Var(this, b.node);
    Var v = push(store.value(name), grad_enabled_, nullptr);
    bindings_.push_back({&store, name, v.id()});
    return v;
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
  }

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool rg = false;
    for (const auto& in : inputs) {
      if (in.tape() != this) throw DimensionError("op mixes variables from different tapes");
      rg = rg || nodes_[in.id()].requires_grad;
    }
    return push(std::move(value), rg, rg ? std::move(fn) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient slot of a node, allocated zero on first use.
  Tensor& grad_slot(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  void accumulate(std::size_t id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    Tensor& slot = grad_slot(id);
    require_same_shape(slot, g, "accumulate");
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

  /// Backpropagate from a scalar output with seed 1.
  void backward(const Var& out) {
    if (out.value().size() != 1)
      throw DimensionError("backward() without seed needs a scalar, got " +
                           shape_str(out.value().shape()));
    backward(out, Tensor(out.value().shape(), 1.0));
  }

  void backward(const Var& out, const Tensor& seed) {
    require_same_shape(out.value(), seed, "backward seed");
    if (!nodes_[out.id()].requires_grad) return;
    grad_slot(out.id()) = seed;
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // Callbacks only touch their inputs' slots and never record nodes.
      n.backward(*this, n.grad);
    }
    for (const auto& b : bindings_) {
      const auto& g = nodes_[b.node].grad;
      if (g.empty()) continue;
      Tensor& acc = b.store->grad(b.name);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  struct Binding {
    ParamStore* store;
    std::string name;
    std::size_t node;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(fn)});
    return Var(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;  // deque: references to values stay valid as the tape grows
  std::vector<Binding> bindings_;
  bool grad_enabled_ = true;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) {
      Tensor& s = t.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) s[i] -= g[i];
    }
  });
}

inline Var scale(const Var& a, double k) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= k;
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, k](Tape& t, const Tensor& g) {
    Tensor& s = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += k * g[i];
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(ia);
    const Tensor& bv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& s = t.grad_slot(ia);
      for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& s = t.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * av[i];
    }
  });
}

/// Sum of all entries, as a length-1 vector.
inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const auto ia = a.id();
  return a.tape()->record(Tensor::vector({s}), {a}, [ia](Tape& t, const Tensor& g) {
    Tensor& slot = t.grad_slot(ia);
    for (auto& v : slot.data()) v += g[0];
  });
}

/// Row-broadcast bias: X [N x n] + b [n].
inline Var add_bias(const Var& x, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (bv.rank() != 1 || bv.size() != xv.cols())
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not fit " +
                         shape_str(xv.shape()));
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  const auto ix = x.id(), ib = b.id();
  return x.tape()->record(std::move(out), {x, b}, [ix, ib](Tape& t, const Tensor& g) {
    t.accumulate(ix, g);
    if (t.requires_grad(ib)) {
      Tensor& s = t.grad_slot(ib);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) s[c] += g(r, c);
    }
  });
}

/// Column-wise concatenation. Rank-1 inputs give a rank-1 result; rank-2
/// inputs must agree on row count.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  const bool vec = parts[0].value().rank() == 1;
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if ((p.value().rank() == 1) != vec || p.value().rows() != rows)
      throw DimensionError("concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                           shape_str(p.shape()));
    cols += p.value().cols();
  }
  Tensor out(vec ? Shape{cols} : Shape{rows, cols});
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(pv.row(r).begin(), pv.row(r).end(), out.row(r).begin() + off);
    ids.push_back(p.id());
    offsets.push_back(off);
    off += pv.cols();
  }
  return parts[0].tape()->record(
      std::move(out), parts, [ids, offsets](Tape& t, const Tensor& g) {
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.requires_grad(ids[k])) continue;
          Tensor& s = t.grad_slot(ids[k]);
          for (std::size_t r = 0; r < s.rows(); ++r)
            for (std::size_t c = 0; c < s.cols(); ++c) s(r, c) += g(r, offsets[k] + c);
        }
      });
}

inline Var concat(const Var& a, const Var& b) {
  const std::array<Var, 2> parts{a, b};
  return concat(std::span<const Var>(parts));
}

/// Columns [begin, end) of every row.
inline Var slice(const Var& a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  if (begin >= end || end > av.cols())
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(av.shape()));
  const std::size_t w = end - begin;
  Tensor out(av.rank() == 1 ? Shape{w} : Shape{av.rows(), w});
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < w; ++c) out(r, c) = av(r, begin + c);
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, begin](Tape& t, const Tensor& g) {
    Tensor& s = t.grad_slot(ia);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) s(r, begin + c) += g(r, c);
  });
}

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(ia);
    Tensor& s = t.grad_slot(ia);
#ifdef CONVSTYLE_MUTATE_RELU_BACKWARD
    constexpr double kSign = -1.0;
#else
    constexpr double kSign = 1.0;
#endif
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) s[i] += kSign * g[i];
  });
}

inline Var tanh(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  const auto ia = a.id();
  const Tensor y = out;
  return a.tape()->record(std::move(out), {a}, [ia, y](Tape& t, const Tensor& g) {
    Tensor& s = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = sigmoid_scalar(v);
  const auto ia = a.id();
  const Tensor y = out;
  return a.tape()->record(std::move(out), {a}, [ia, y](Tape& t, const Tensor& g) {
    Tensor& s = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

enum class Mode { Train, Eval };

/// Inverted dropout. The keep mask is a pure function of (p, seed, shape).
inline Var dropout(const Var& a, double p, std::uint64_t seed, Mode mode) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return a;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - p);
  Tensor mask(a.value().shape());
  for (auto& m : mask.data()) m = rng.uniform() < p ? 0.0 : keep_scale;
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  const auto ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, mask](Tape& t, const Tensor& g) {
    Tensor& s = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) s[i] += g[i] * mask[i];
  });
}

/// Gradient reversal: identity forward, gradient scaled by -lambda backward.
inline Var grad_reverse(const Var& a, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("grad_reverse lambda must be non-negative");
  const auto ia = a.id();
  return a.tape()->record(a.value(), {a}, [ia, lambda](Tape& t, const Tensor& g) {
    Tensor& s = t.grad_slot(ia);
    for (std::size_t i = 0; i < g.size(); ++i) s[i] -= lambda * g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows())
    throw DimensionError("matmul: cannot multiply " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out({m, n});
  gemm_nn_acc(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia))  // dA = dC * B^T
      gemm_nt_acc(g.data().data(), t.value(ib).data().data(), t.grad_slot(ia).data().data(), m, n,
                  k);
    if (t.requires_grad(ib))  // dB = A^T * dC
      gemm_tn_acc(t.value(ia).data().data(), g.data().data(), t.grad_slot(ib).data().data(), k, m,
                  n);
  });
}

/// X W^T (+ b). X is [N x in] or a length-in vector, W is [out x in].
inline Var linear(const Var& x, const Var& w, const Var* b = nullptr) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.cols() != wv.cols())
    throw DimensionError("linear: input " + shape_str(xv.shape()) + " does not fit weight " +
                         shape_str(wv.shape()));
  if (b && (b->value().rank() != 1 || b->value().size() != wv.rows()))
    throw DimensionError("linear: bias " + shape_str(b->shape()) + " does not fit weight " +
                         shape_str(wv.shape()));
  const std::size_t n = xv.rows(), in = wv.cols(), outd = wv.rows();
  Tensor out(xv.rank() == 1 ? Shape{outd} : Shape{n, outd});
  if (b)
    for (std::size_t r = 0; r < n; ++r)
      std::copy(b->value().data().begin(), b->value().data().end(), out.row(r).begin());
  gemm_nt_acc(xv.data().data(), wv.data().data(), out.data().data(), n, in, outd);
  const auto ix = x.id(), iw = w.id();
  const std::size_t ib = b ? b->id() : SIZE_MAX;
  std::vector<Var> ins{x, w};
  if (b) ins.push_back(*b);
  return x.tape()->record(
      std::move(out), ins, [ix, iw, ib, n, in, outd](Tape& t, const Tensor& g) {
        if (t.requires_grad(ix))  // dX = dY * W
          gemm_nn_acc(g.data().data(), t.value(iw).data().data(), t.grad_slot(ix).data().data(),
                      n, outd, in);
        if (t.requires_grad(iw))  // dW = dY^T * X
          gemm_tn_acc(g.data().data(), t.value(ix).data().data(), t.grad_slot(iw).data().data(),
                      outd, n, in);
        if (ib != SIZE_MAX && t.requires_grad(ib)) {
          Tensor& s = t.grad_slot(ib);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < outd; ++c) s[c] += g[r * outd + c];
        }
      });
}

inline Var linear(const Var& x, const Var& w, const Var& b) { return linear(x, w, &b); }

/// Block-diagonal batched product. A is `blocks` stacked [m x k] matrices,
/// B is `blocks` stacked [k x n] matrices; the result stacks the [m x n] products.
inline Var batched_matmul(const Var& a, const Var& b, std::size_t blocks) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (blocks == 0 || av.rows() % blocks || bv.rows() % blocks || av.cols() != bv.rows() / blocks)
    throw DimensionError("batched_matmul: " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()) + " with " + std::to_string(blocks) + " blocks");
  const std::size_t m = av.rows() / blocks, k = av.cols(), n = bv.cols();
  Tensor out({blocks * m, n});
  for (std::size_t q = 0; q < blocks; ++q)
    gemm_nn_acc(av.data().data() + q * m * k, bv.data().data() + q * k * n,
                out.data().data() + q * m * n, m, k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(
      std::move(out), {a, b}, [ia, ib, blocks, m, k, n](Tape& t, const Tensor& g) {
        for (std::size_t q = 0; q < blocks; ++q) {
          const double* gq = g.data().data() + q * m * n;
          if (t.requires_grad(ia))
            gemm_nt_acc(gq, t.value(ib).data().data() + q * k * n,
                        t.grad_slot(ia).data().data() + q * m * k, m, n, k);
          if (t.requires_grad(ib))
            gemm_tn_acc(t.value(ia).data().data() + q * m * k, gq,
                        t.grad_slot(ib).data().data() + q * k * n, k, m, n);
        }
      });
}

/// Block-diagonal batched A B^T. A stacks [m x k] blocks, B stacks [n x k]
/// blocks; the result stacks [m x n] blocks.
inline Var batched_matmul_nt(const Var& a, const Var& b, std::size_t blocks) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (blocks == 0 || av.rows() % blocks || bv.rows() % blocks || av.cols() != bv.cols())
    throw DimensionError("batched_matmul_nt: " + shape_str(av.shape()) + " by " +
                         shape_str(bv.shape()) + " with " + std::to_string(blocks) + " blocks");
  const std::size_t m = av.rows() / blocks, k = av.cols(), n = bv.rows() / blocks;
  Tensor out({blocks * m, n});
  for (std::size_t q = 0; q < blocks; ++q)
    gemm_nt_acc(av.data().data() + q * m * k, bv.data().data() + q * n * k,
                out.data().data() + q * m * n, m, k, n);
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(
      std::move(out), {a, b}, [ia, ib, blocks, m, k, n](Tape& t, const Tensor& g) {
        for (std::size_t q = 0; q < blocks; ++q) {
          const double* gq = g.data().data() + q * m * n;
          if (t.requires_grad(ia))  // dA = dC * B
            gemm_nn_acc(gq, t.value(ib).data().data() + q * n * k,
                        t.grad_slot(ia).data().data() + q * m * k, m, n, k);
          if (t.requires_grad(ib))  // dB = dC^T * A
            gemm_tn_acc(gq, t.value(ia).data().data() + q * m * k,
                        t.grad_slot(ib).data().data() + q * n * k, n, m, k);
        }
      });
}

// ---------------------------------------------------------------------------
// Probability and loss
// ---------------------------------------------------------------------------

/// Max-subtracted softmax over each row (a rank-1 tensor is one row).
inline Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (auto& v : row) {
      v = std::exp(v - mx);
      s += v;
    }
    for (auto& v : row) v /= s;
  }
  return out;
}

inline Var softmax(const Var& a) {
  if (a.value().empty()) throw DimensionError("softmax of empty input");
  Tensor out = softmax_rows(a.value());
  const auto ia = a.id();
  const Tensor y = out;
  return a.tape()->record(std::move(out), {a}, [ia, y](Tape& t, const Tensor& g) {
    Tensor& s = t.grad_slot(ia);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) s(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

/// Mean squared error over all entries, as a length-1 vector.
inline Var mse(const Var& pred, const Var& target) {
  require_same_shape(pred.value(), target.value(), "mse");
  const Tensor& p = pred.value();
  const Tensor& y = target.value();
  const double n = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - y[i];
    acc += d * d;
  }
  const auto ip = pred.id(), iy = target.id();
  return pred.tape()->record(
      Tensor::vector({acc / n}), {pred, target}, [ip, iy, n](Tape& t, const Tensor& g) {
        const Tensor& pv = t.value(ip);
        const Tensor& yv = t.value(iy);
        const double k = 2.0 * g[0] / n;
        if (t.requires_grad(ip)) {
          Tensor& s = t.grad_slot(ip);
          for (std::size_t i = 0; i < pv.size(); ++i) s[i] += k * (pv[i] - yv[i]);
        }
        if (t.requires_grad(iy)) {
          Tensor& s = t.grad_slot(iy);
          for (std::size_t i = 0; i < pv.size(); ++i) s[i] -= k * (pv[i] - yv[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// Graph aggregation
// ---------------------------------------------------------------------------

/// Relation-typed, edge-weighted message passing over per-block complete
/// graphs. Each block has `n` nodes; `projected[r]` holds W_r x_s for every
/// node row, `alpha` is [blocks*n x n] (row = destination, column = source)
/// and `relation` lists the relation code of edge (dst, src) in row-major
/// order per block. out[d] = sum_s alpha[d][s] * projected[relation(s->d)][s].
inline Var relational_aggregate(std::span<const Var> projected, const Var& alpha,
                                std::vector<std::uint8_t> relation, std::size_t n) {
  if (projected.empty()) throw DimensionError("relational_aggregate: no relation projections");
  const Tensor& av = alpha.value();
  const std::size_t rows = projected[0].value().rows();
  const std::size_t h = projected[0].value().cols();
  for (const auto& p : projected)
    if (p.value().rank() != 2 || p.value().rows() != rows || p.value().cols() != h)
      throw DimensionError("relational_aggregate: projection shapes differ");
  if (n == 0 || rows % n || av.rows() != rows || av.cols() != n || relation.size() != rows * n)
    throw DimensionError("relational_aggregate: alpha " + shape_str(av.shape()) +
                         " / relations do not fit " + std::to_string(rows) + " nodes");
  for (auto r : relation)
    if (r >= projected.size()) throw DimensionError("relational_aggregate: relation code out of range");
  Tensor out({rows, h});
  for (std::size_t d = 0; d < rows; ++d) {
    const std::size_t base = d - d % n;
    auto od = out.row(d);
    for (std::size_t s = 0; s < n; ++s) {
      const double w = av(d, s);
      const auto ps = projected[relation[d * n + s]].value().row(base + s);
      for (std::size_t c = 0; c < h; ++c) od[c] += w * ps[c];
    }
  }
  std::vector<std::size_t> pids;
  std::vector<Var> ins(projected.begin(), projected.end());
  for (const auto& p : projected) pids.push_back(p.id());
  ins.push_back(alpha);
  const auto ia = alpha.id();
  return alpha.tape()->record(
      std::move(out), ins,
      [pids, ia, relation = std::move(relation), n, rows, h](Tape& t, const Tensor& g) {
        const bool need_alpha = t.requires_grad(ia);
        for (std::size_t d = 0; d < rows; ++d) {
          const std::size_t base = d - d % n;
          const auto gd = g.row(d);
          for (std::size_t s = 0; s < n; ++s) {
            const std::size_t pid = pids[relation[d * n + s]];
            if (need_alpha) {
              const auto ps = t.value(pid).row(base + s);
              double dot = 0.0;
              for (std::size_t c = 0; c < h; ++c) dot += gd[c] * ps[c];
              t.grad_slot(ia)(d, s) += dot;
            }
            if (t.requires_grad(pid)) {
              const double w = t.value(ia)(d, s);
              auto gs = t.grad_slot(pid).row(base + s);
              for (std::size_t c = 0; c < h; ++c) gs[c] += w * gd[c];
            }
          }
        }
      });
}

/// out[d] = mean over in_neighbors[d] of x[s] (row indices into x).
inline Var neighbor_mean(const Var& x, std::vector<std::vector<std::size_t>> in_neighbors) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || in_neighbors.size() != xv.rows())
    throw DimensionError("neighbor_mean: neighbor lists do not fit " + shape_str(xv.shape()));
  Tensor out(xv.shape());
  for (std::size_t d = 0; d < xv.rows(); ++d) {
    const auto& nb = in_neighbors[d];
    if (nb.empty()) continue;
    const double w = 1.0 / static_cast<double>(nb.size());
    for (auto s : nb) {
      if (s >= xv.rows()) throw DimensionError("neighbor_mean: neighbor index out of range");
      for (std::size_t c = 0; c < xv.cols(); ++c) out(d, c) += w * xv(s, c);
    }
  }
  const auto ix = x.id();
  return x.tape()->record(std::move(out), {x},
                          [ix, nbs = std::move(in_neighbors)](Tape& t, const Tensor& g) {
                            Tensor& sl = t.grad_slot(ix);
                            for (std::size_t d = 0; d < nbs.size(); ++d) {
                              if (nbs[d].empty()) continue;
                              const double w = 1.0 / static_cast<double>(nbs[d].size());
                              for (auto s : nbs[d])
                                for (std::size_t c = 0; c < g.cols(); ++c) sl(s, c) += w * g(d, c);
                            }
                          });
}

}  // namespace convstyle
