#pragma once

// Tape-based reverse-mode differentiation over double tensors.
//
// A Tape records primitive applications in execution order, which is a
// topological order by construction. Each recorded node keeps its forward
// value and a vector-Jacobian rule; backward() walks the tape once in
// reverse. Nodes whose inputs are all constants carry no rule and are
// skipped, so model weights recorded as constants cost nothing in backward.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mosguard/error.hpp"
#include "mosguard/signal.hpp"
#include "mosguard/tensor.hpp"

namespace mosguard::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Accumulation targets for a node's inputs; null where an input needs no gradient.
using GradRefs = std::span<Tensor* const>;

/// (forward output, gradient wrt output, input gradient accumulators)
using Vjp = std::function<void(const Tensor& out, const Tensor& grad_out, GradRefs grads)>;

class Gradients {
 public:
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  bool has(Var v) const { return v.id() < grads_.size() && !grads_[v.id()].empty(); }

  /// Gradient for a leaf; zeros if the output did not depend on it.
  Tensor operator[](Var v) const {
    if (has(v)) return grads_[v.id()];
    return Tensor(v.shape(), 0.0);
  }

 private:
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A differentiable input.
  Var leaf(Tensor value) { return push(std::move(value), {}, nullptr, true, true); }

  /// A value treated as fixed during differentiation.
  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, true); }

  Var record(Tensor value, std::vector<Var> inputs, Vjp vjp) {
    if (!value.all_finite()) throw numeric_error("non-finite value produced on tape");
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    bool needs = false;
    for (const Var& v : inputs) {
      if (v.tape() != this) throw contract_error("input belongs to a different tape");
      ids.push_back(v.id());
      needs = needs || nodes_[v.id()].requires_grad;
    }
    return push(std::move(value), std::move(ids), needs ? std::move(vjp) : nullptr, needs, false);
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar output. Returns gradients for every leaf.
  Gradients backward(Var output) const {
    if (output.tape() != this) throw contract_error("backward: output belongs to a different tape");
    const Node& out_node = nodes_[output.id()];
    if (out_node.value.size() != 1) {
      throw contract_error("backward: output must be scalar, got shape " + shape_string(out_node.value.shape()));
    }
    std::vector<Tensor> grads(nodes_.size());
    if (!out_node.requires_grad) return Gradients(std::move(grads));
    grads[output.id()] = Tensor(out_node.value.shape(), 1.0);

    std::vector<Tensor*> refs;
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (grads[i].empty() || !node.vjp) continue;
      refs.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t in = node.inputs[k];
        if (!nodes_[in].requires_grad) continue;
        if (grads[in].empty()) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
        refs[k] = &grads[in];
      }
      node.vjp(node.value, grads[i], refs);
      if (!node.is_leaf) grads[i] = Tensor();
    }
    return Gradients(std::move(grads));
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    Vjp vjp;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, Vjp vjp, bool requires_grad, bool is_leaf) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(vjp), requires_grad, is_leaf});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (tape_ == nullptr) throw contract_error("use of an unbound Var");
  return tape_->value(*this);
}

namespace detail {

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw dimension_error(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                          shape_string(b.shape()));
  }
}

inline void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a.value().rank() != rank) {
    throw dimension_error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                          shape_string(a.shape()));
  }
}

template <typename Fn>
Var unary(const Var& a, Fn&& fn, Vjp vjp) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fn(av[i]);
  return a.tape()->record(std::move(out), {a}, std::move(vjp));
}

}  // namespace detail

// ---- elementwise --------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape()->record(std::move(out), {a, b}, [](const Tensor&, const Tensor& g, GradRefs gr) {
    for (Tensor* t : gr) {
      if (!t) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*t)[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape()->record(std::move(out), {a, b}, [](const Tensor&, const Tensor& g, GradRefs gr) {
    if (gr[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gr[0])[i] += g[i];
    }
    if (gr[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gr[1])[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](const Tensor&, const Tensor& g, GradRefs gr) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (gr[0]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gr[0])[i] += g[i] * bv[i];
    }
    if (gr[1]) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gr[1])[i] += g[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  return detail::unary(a, [s](double v) { return s * v; }, [s](const Tensor&, const Tensor& g, GradRefs gr) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gr[0])[i] += s * g[i];
  });
}

/// a + s elementwise.
inline Var shift(const Var& a, double s) {
  return detail::unary(a, [s](double v) { return v + s; }, [](const Tensor&, const Tensor& g, GradRefs gr) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gr[0])[i] += g[i];
  });
}

inline Var tanh(const Var& a) {
  return detail::unary(a, [](double v) { return mosguard::detail::strict_tanh(v); },
                       [](const Tensor& out, const Tensor& g, GradRefs gr) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*gr[0])[i] += g[i] * (1.0 - out[i] * out[i]);
                       });
}

inline Var relu(const Var& a) {
  return detail::unary(a, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](const Tensor& out, const Tensor& g, GradRefs gr) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           if (out[i] > 0.0) (*gr[0])[i] += g[i];
                         }
                       });
}

/// Subgradient at 0 is 0.
inline Var abs(const Var& a) {
  return detail::unary(a, [](double v) { return std::abs(v); }, [a](const Tensor&, const Tensor& g, GradRefs gr) {
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) (*gr[0])[i] += g[i];
      else if (av[i] < 0.0) (*gr[0])[i] -= g[i];
    }
  });
}

inline Var log(const Var& a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw domain_error("log of non-positive value " + std::to_string(v));
  }
  return detail::unary(a, [](double v) { return std::log(v); }, [a](const Tensor&, const Tensor& g, GradRefs gr) {
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < g.size(); ++i) (*gr[0])[i] += g[i] / av[i];
  });
}

/// Modulus of interleaved complex values: shape [..., 2] -> [...].
/// The gradient at 0 is taken as 0.
inline Var complex_modulus(const Var& a) {
  const Tensor& av = a.value();
  if (av.rank() < 1 || av.shape().back() != 2) {
    throw dimension_error("complex_modulus: trailing extent must be 2, got " + shape_string(av.shape()));
  }
  Shape s(av.shape().begin(), av.shape().end() - 1);
  if (s.empty()) s = {1};
  Tensor out(s);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::hypot(av[2 * i], av[2 * i + 1]);
  return a.tape()->record(std::move(out), {a}, [a](const Tensor& out, const Tensor& g, GradRefs gr) {
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i] == 0.0) continue;
      const double k = g[i] / out[i];
      (*gr[0])[2 * i] += k * av[2 * i];
      (*gr[0])[2 * i + 1] += k * av[2 * i + 1];
    }
  });
}

// ---- shape --------------------------------------------------------------

inline Var reshape(const Var& a, Shape s) {
  if (shape_size(s) != a.size()) {
    throw dimension_error("reshape: " + shape_string(a.shape()) + " -> " + shape_string(s));
  }
  return a.tape()->record(a.value().reshaped(std::move(s)), {a}, [](const Tensor&, const Tensor& g, GradRefs gr) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gr[0])[i] += g[i];
  });
}

/// Single flat element as a scalar.
inline Var index(const Var& a, std::size_t i) {
  if (i >= a.size()) throw dimension_error("index " + std::to_string(i) + " out of range");
  return a.tape()->record(Tensor::scalar(a.value()[i]), {a}, [i](const Tensor&, const Tensor& g, GradRefs gr) {
    (*gr[0])[i] += g[0];
  });
}

// ---- reductions ---------------------------------------------------------

inline Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return a.tape()->record(Tensor::scalar(acc), {a}, [](const Tensor&, const Tensor& g, GradRefs gr) {
    for (double& v : gr[0]->data()) v += g[0];
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var l1_norm(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += std::abs(v);
  return a.tape()->record(Tensor::scalar(acc), {a}, [a](const Tensor&, const Tensor& g, GradRefs gr) {
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) {
      if (av[i] > 0.0) (*gr[0])[i] += g[0];
      else if (av[i] < 0.0) (*gr[0])[i] -= g[0];
    }
  });
}

inline Var l2_norm_sq(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v * v;
  return a.tape()->record(Tensor::scalar(acc), {a}, [a](const Tensor&, const Tensor& g, GradRefs gr) {
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i) (*gr[0])[i] += 2.0 * g[0] * av[i];
  });
}

/// Mean over the trailing two axes: [C, H, W] -> [C].
inline Var spatial_mean(const Var& a) {
  detail::require_rank(a, 3, "spatial_mean");
  const std::size_t c = a.shape()[0];
  const std::size_t plane = a.shape()[1] * a.shape()[2];
  const Tensor& av = a.value();
  Tensor out(Shape{c});
  for (std::size_t k = 0; k < c; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += av[k * plane + i];
    out[k] = acc / static_cast<double>(plane);
  }
  return a.tape()->record(std::move(out), {a}, [c, plane](const Tensor&, const Tensor& g, GradRefs gr) {
    for (std::size_t k = 0; k < c; ++k) {
      const double v = g[k] / static_cast<double>(plane);
      for (std::size_t i = 0; i < plane; ++i) (*gr[0])[k * plane + i] += v;
    }
  });
}

// ---- linear algebra -----------------------------------------------------

/// [m, k] x [k, n] -> [m, n]
inline Var matmul(const Var& a, const Var& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw dimension_error("matmul: inner extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  return a.tape()->record(std::move(out), {a, b}, [a, b, m, k, n](const Tensor&, const Tensor& g, GradRefs gr) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (gr[0]) {  // dA = G B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
          (*gr[0])[i * k + p] += acc;
        }
      }
    }
    if (gr[1]) {  // dB = A^T G
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) (*gr[1])[p * n + j] += aip * g[i * n + j];
        }
      }
    }
  });
}

/// Fully connected layer: W [out, in] times x [in], plus b [out].
inline Var dense(const Var& x, const Var& w, const Var& b) {
  const std::size_t in = x.size();
  const Var y = matmul(w, reshape(x, Shape{in, 1}));
  return add(reshape(y, Shape{y.size()}), b);
}

// ---- convolution --------------------------------------------------------

/// Stride-1 cross-correlation with zero padding.
/// x [Cin, L], w [Cout, Cin, K], b [Cout] -> [Cout, L + 2 pad - K + 1]
inline Var conv1d(const Var& x, const Var& w, const Var& b, std::size_t pad) {
  detail::require_rank(x, 2, "conv1d");
  detail::require_rank(w, 3, "conv1d");
  const std::size_t cin = x.shape()[0], len = x.shape()[1];
  const std::size_t cout = w.shape()[0], kw = w.shape()[2];
  if (w.shape()[1] != cin || b.size() != cout || len + 2 * pad < kw) {
    throw dimension_error("conv1d: incompatible shapes x" + shape_string(x.shape()) + " w" +
                          shape_string(w.shape()) + " b" + shape_string(b.shape()));
  }
  const std::size_t lout = len + 2 * pad - kw + 1;
  const auto in_index = [pad, len](std::size_t o, std::size_t k) -> std::ptrdiff_t {
    const auto i = static_cast<std::ptrdiff_t>(o + k) - static_cast<std::ptrdiff_t>(pad);
    return (i < 0 || i >= static_cast<std::ptrdiff_t>(len)) ? -1 : i;
  };
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  Tensor out(Shape{cout, lout});
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t o = 0; o < lout; ++o) {
      double acc = bv[co];
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t k = 0; k < kw; ++k) {
          const auto i = in_index(o, k);
          if (i >= 0) acc += wv[(co * cin + ci) * kw + k] * xv[ci * len + static_cast<std::size_t>(i)];
        }
      }
      out[co * lout + o] = acc;
    }
  }
  return x.tape()->record(std::move(out), {x, w, b},
                          [x, w, cin, len, cout, kw, lout, in_index](const Tensor&, const Tensor& g, GradRefs gr) {
                            const Tensor& xv = x.value();
                            const Tensor& wv = w.value();
                            for (std::size_t co = 0; co < cout; ++co) {
                              for (std::size_t o = 0; o < lout; ++o) {
                                const double go = g[co * lout + o];
                                if (gr[2]) (*gr[2])[co] += go;
                                for (std::size_t ci = 0; ci < cin; ++ci) {
                                  for (std::size_t k = 0; k < kw; ++k) {
                                    const auto i = in_index(o, k);
                                    if (i < 0) continue;
                                    const std::size_t xi = ci * len + static_cast<std::size_t>(i);
                                    const std::size_t wi = (co * cin + ci) * kw + k;
                                    if (gr[0]) (*gr[0])[xi] += go * wv[wi];
                                    if (gr[1]) (*gr[1])[wi] += go * xv[xi];
                                  }
                                }
                              }
                            }
                          });
}

namespace detail {

struct Conv2dGeometry {
  std::size_t cin, h, w, cout, kh, kw, pad, hout, wout;

  std::size_t hp() const { return h + 2 * pad; }
  std::size_t wp() const { return w + 2 * pad; }
};

// Copies x [C, H, W] into a zero border of `pad` cells: [C, H + 2 pad, W + 2 pad].
inline std::vector<double> zero_pad(std::span<const double> x, std::size_t c, std::size_t h, std::size_t w,
                                    std::size_t pad) {
  const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
  std::vector<double> out(c * hp * wp, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* src = x.data() + (k * h + y) * w;
      std::copy(src, src + w, out.data() + (k * hp + y + pad) * wp + pad);
    }
  }
  return out;
}

// out[co] += sum_ci sum_taps kernel[co, ci] * in[ci] over a padded input
// [Cin, Hin, Win] producing [Cout, Hout, Wout] with Hout = Hin - KH + 1.
// `kernel_at(co, ci, ky, kx)` supplies the tap weight, which lets the
// backward pass reuse this loop with a flipped, transposed kernel.
template <typename KernelAt>
void correlate(std::span<const double> in, std::size_t cin, std::size_t hin, std::size_t win, std::size_t cout,
               std::size_t kh, std::size_t kw, KernelAt&& kernel_at, std::span<double> out) {
  const std::size_t hout = hin - kh + 1, wout = win - kw + 1;
  std::vector<double> taps(kh * kw);
  std::size_t co = 0;
  if (kh == 3 && kw == 3) {
    // Two output channels per pass share the input row loads.
    double t[2][9];
    for (; co + 2 <= cout; co += 2) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        for (std::size_t j = 0; j < 2; ++j) {
          for (std::size_t k = 0; k < 9; ++k) t[j][k] = kernel_at(co + j, ci, k / 3, k % 3);
        }
        const double* ip = in.data() + ci * hin * win;
        for (std::size_t oy = 0; oy < hout; ++oy) {
          double* o0 = out.data() + (co * hout + oy) * wout;
          double* o1 = o0 + hout * wout;
          const double* r0 = ip + oy * win;
          const double* r1 = r0 + win;
          const double* r2 = r1 + win;
          for (std::size_t ox = 0; ox < wout; ++ox) {
            const double a0 = r0[ox], a1 = r0[ox + 1], a2 = r0[ox + 2], a3 = r1[ox], a4 = r1[ox + 1],
                         a5 = r1[ox + 2], a6 = r2[ox], a7 = r2[ox + 1], a8 = r2[ox + 2];
            o0[ox] += t[0][0] * a0 + t[0][1] * a1 + t[0][2] * a2 + t[0][3] * a3 + t[0][4] * a4 + t[0][5] * a5 +
                      t[0][6] * a6 + t[0][7] * a7 + t[0][8] * a8;
            o1[ox] += t[1][0] * a0 + t[1][1] * a1 + t[1][2] * a2 + t[1][3] * a3 + t[1][4] * a4 + t[1][5] * a5 +
                      t[1][6] * a6 + t[1][7] * a7 + t[1][8] * a8;
          }
        }
      }
    }
  }
  for (; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) taps[ky * kw + kx] = kernel_at(co, ci, ky, kx);
      }
      const double* ip = in.data() + ci * hin * win;
      for (std::size_t oy = 0; oy < hout; ++oy) {
        double* orow = out.data() + (co * hout + oy) * wout;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const double* row = ip + (oy + ky) * win;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double tap = taps[ky * kw + kx];
            for (std::size_t ox = 0; ox < wout; ++ox) orow[ox] += tap * row[ox + kx];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Stride-1 2D cross-correlation with zero padding.
/// x [Cin, H, W], w [Cout, Cin, KH, KW], b [Cout] -> [Cout, H + 2 pad - KH + 1, W + 2 pad - KW + 1]
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t pad) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(w, 4, "conv2d");
  detail::Conv2dGeometry geo{x.shape()[0], x.shape()[1], x.shape()[2], w.shape()[0], w.shape()[2], w.shape()[3],
                             pad, 0, 0};
  if (w.shape()[1] != geo.cin || b.size() != geo.cout || geo.hp() < geo.kh || geo.wp() < geo.kw) {
    throw dimension_error("conv2d: incompatible shapes x" + shape_string(x.shape()) + " w" +
                          shape_string(w.shape()) + " b" + shape_string(b.shape()));
  }
  geo.hout = geo.hp() - geo.kh + 1;
  geo.wout = geo.wp() - geo.kw + 1;

  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  const auto padded = detail::zero_pad(x.value().data(), geo.cin, geo.h, geo.w, pad);
  Tensor out(Shape{geo.cout, geo.hout, geo.wout});
  const std::size_t out_plane = geo.hout * geo.wout;
  for (std::size_t co = 0; co < geo.cout; ++co) {
    std::fill_n(out.data().data() + co * out_plane, out_plane, bv[co]);
  }
  const auto weight_at = [&wv, &geo](std::size_t co, std::size_t ci, std::size_t ky, std::size_t kx) {
    return wv[((co * geo.cin + ci) * geo.kh + ky) * geo.kw + kx];
  };
  detail::correlate(padded, geo.cin, geo.hp(), geo.wp(), geo.cout, geo.kh, geo.kw, weight_at, out.data());

  return x.tape()->record(std::move(out), {x, w, b}, [x, w, geo](const Tensor&, const Tensor& g, GradRefs gr) {
    const std::size_t out_plane = geo.hout * geo.wout;
    if (gr[2]) {
      for (std::size_t co = 0; co < geo.cout; ++co) {
        double acc = 0.0;
        for (std::size_t i = 0; i < out_plane; ++i) acc += g[co * out_plane + i];
        (*gr[2])[co] += acc;
      }
    }
    if (gr[0]) {
      // d(padded input) is the full correlation of g with the flipped kernel.
      const Tensor& wv = w.value();
      const std::size_t gy = geo.kh - 1, gx = geo.kw - 1;
      const auto gpad = detail::zero_pad(g.data(), geo.cout, geo.hout, geo.wout, 0);
      std::vector<double> gfull(geo.cout * (geo.hout + 2 * gy) * (geo.wout + 2 * gx), 0.0);
      for (std::size_t co = 0; co < geo.cout; ++co) {
        for (std::size_t y = 0; y < geo.hout; ++y) {
          const double* src = gpad.data() + (co * geo.hout + y) * geo.wout;
          std::copy(src, src + geo.wout,
                    gfull.data() + (co * (geo.hout + 2 * gy) + y + gy) * (geo.wout + 2 * gx) + gx);
        }
      }
      const auto flipped = [&wv, &geo](std::size_t ci, std::size_t co, std::size_t ky, std::size_t kx) {
        return wv[((co * geo.cin + ci) * geo.kh + (geo.kh - 1 - ky)) * geo.kw + (geo.kw - 1 - kx)];
      };
      std::vector<double> gin(geo.cin * geo.hp() * geo.wp(), 0.0);
      detail::correlate(gfull, geo.cout, geo.hout + 2 * gy, geo.wout + 2 * gx, geo.cin, geo.kh, geo.kw, flipped,
                        gin);
      for (std::size_t ci = 0; ci < geo.cin; ++ci) {
        for (std::size_t y = 0; y < geo.h; ++y) {
          const double* src = gin.data() + (ci * geo.hp() + y + geo.pad) * geo.wp() + geo.pad;
          double* dst = gr[0]->data().data() + (ci * geo.h + y) * geo.w;
          for (std::size_t i = 0; i < geo.w; ++i) dst[i] += src[i];
        }
      }
    }
    if (gr[1]) {
      const auto padded = detail::zero_pad(x.value().data(), geo.cin, geo.h, geo.w, geo.pad);
      std::vector<double> lane(geo.wout);
      for (std::size_t co = 0; co < geo.cout; ++co) {
        const double* gp = g.data().data() + co * out_plane;
        for (std::size_t ci = 0; ci < geo.cin; ++ci) {
          const double* ip = padded.data() + ci * geo.hp() * geo.wp();
          for (std::size_t ky = 0; ky < geo.kh; ++ky) {
            for (std::size_t kx = 0; kx < geo.kw; ++kx) {
              std::fill(lane.begin(), lane.end(), 0.0);
              for (std::size_t oy = 0; oy < geo.hout; ++oy) {
                const double* grow = gp + oy * geo.wout;
                const double* irow = ip + (oy + ky) * geo.wp() + kx;
                for (std::size_t ox = 0; ox < geo.wout; ++ox) lane[ox] += grow[ox] * irow[ox];
              }
              double acc = 0.0;
              for (double v : lane) acc += v;
              (*gr[1])[((co * geo.cin + ci) * geo.kh + ky) * geo.kw + kx] += acc;
            }
          }
        }
      }
    }
  });
}

/// Non-overlapping 2x2 average pooling over [C, H, W]. Odd trailing rows or
/// columns form partial windows averaged over the cells they contain.
inline Var mean_pool2d(const Var& a) {
  detail::require_rank(a, 3, "mean_pool2d");
  const std::size_t c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  const std::size_t ho = (h + 1) / 2, wo = (w + 1) / 2;
  const Tensor& av = a.value();
  Tensor out(Shape{c, ho, wo});
  const auto cell_count = [h, w](std::size_t oy, std::size_t ox) {
    return static_cast<double>(std::min<std::size_t>(2, h - 2 * oy) * std::min<std::size_t>(2, w - 2 * ox));
  };
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) out[(k * ho + y / 2) * wo + x / 2] += av[(k * h + y) * w + x];
    }
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) out[(k * ho + oy) * wo + ox] /= cell_count(oy, ox);
    }
  }
  return a.tape()->record(std::move(out), {a}, [c, h, w, ho, wo, cell_count](const Tensor&, const Tensor& g, GradRefs gr) {
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t oi = (k * ho + y / 2) * wo + x / 2;
          (*gr[0])[(k * h + y) * w + x] += g[oi] / cell_count(y / 2, x / 2);
        }
      }
    }
  });
}

}  // namespace mosguard::ad
