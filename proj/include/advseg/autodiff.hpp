#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Tape records every operation applied to Vars created on it. backward()
// replays the records in exact reverse order, accumulating adjoints. Only
// nodes that depend on a differentiable leaf keep a backprop closure, so
// constant sub-graphs (e.g. the input image when no input gradient is
// requested) cost nothing on the way back.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "advseg/tensor.hpp"

namespace advseg::ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
};

using Gradients = std::map<std::string, Tensor>;

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Tensor& grad_out)>;

  /// Differentiable input. Named leaves are reported by backward().
  Var leaf(Tensor value, std::string name = {}) {
    nodes_.push_back(Node{std::move(value), {}, {}, std::move(name), true, false});
    return {this, nodes_.size() - 1};
  }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, false, false});
    return {this, nodes_.size() - 1};
  }

  /// Records the result of an operation. The closure is dropped when no input
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backprop backprop) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    if (!value.all_finite()) throw NumericalError("non-finite value produced on tape");
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backprop) : Backprop{}, {}, needs, false});
    return {this, nodes_.size() - 1};
  }

  /// Same as record() for a variable-length input list.
  Var record(Tensor value, const std::vector<Var>& inputs, Backprop backprop) {
    bool needs = false;
    for (const Var& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    if (!value.all_finite()) throw NumericalError("non-finite value produced on tape");
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backprop) : Backprop{}, {}, needs, false});
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(Var v) const {
    check_owner(v);
    return nodes_[v.id].value;
  }

  bool requires_grad(Var v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }

  /// Adjoint buffer of v, allocated as zeros on first use. Backprop closures
  /// accumulate into it.
  Tensor& grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Adjoint of v after backward(); zeros when v was not reached.
  Tensor grad(Var v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    return n.has_grad ? n.grad : Tensor(n.value.shape());
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Returns the gradient of every named
  /// leaf, zero-filled for leaves the loss does not depend on.
  Gradients backward(Var loss) {
    check_owner(loss);
    if (nodes_[loss.id].value.size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          to_string(nodes_[loss.id].value.shape()));
    }
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    grad_ref(loss).fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backprop) continue;
      n.backprop(*this, n.grad);
    }
    Gradients out;
    for (const Node& n : nodes_) {
      if (n.name.empty()) continue;
      out[n.name] = n.has_grad ? n.grad : Tensor(n.value.shape());
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backprop backprop;
    std::string name;
    bool requires_grad = false;
    bool has_grad = false;
  };

  void check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ContractError("Var does not belong to this tape");
  }

  std::vector<Node> nodes_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* t = vars.begin()->tape;
  for (const Var& v : vars)
    if (v.tape != t || t == nullptr) throw ContractError("operands recorded on different tapes");
  return *t;
}

inline Tape& same_tape(const std::vector<Var>& vars) {
  if (vars.empty()) throw ContractError("empty operand list");
  Tape* t = vars.front().tape;
  for (const Var& v : vars)
    if (v.tape != t || t == nullptr) throw ContractError("operands recorded on different tapes");
  return *t;
}

inline void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(t.shape()));
  }
}

struct ConvGeometry {
  int cin, h, w;
  int cout, kh, kw;
  int pad_top, pad_left;
  int oh, ow;
};

// cols[(c*kh+u)*kw+v][oy*ow+ox] = x[c][oy+u-pad_top][ox+v-pad_left], zero outside.
inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t plane = static_cast<std::size_t>(g.oh) * g.ow;
  for (int c = 0; c < g.cin; ++c)
    for (int u = 0; u < g.kh; ++u)
      for (int v = 0; v < g.kw; ++v) {
        double* row = cols + (static_cast<std::size_t>(c * g.kh + u) * g.kw + v) * plane;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy + u - g.pad_top;
          double* dst = row + static_cast<std::size_t>(oy) * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox + v - g.pad_left;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t plane = static_cast<std::size_t>(g.oh) * g.ow;
  for (int c = 0; c < g.cin; ++c)
    for (int u = 0; u < g.kh; ++u)
      for (int v = 0; v < g.kw; ++v) {
        const double* row = cols + (static_cast<std::size_t>(c * g.kh + u) * g.kw + v) * plane;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy + u - g.pad_top;
          if (iy < 0 || iy >= g.h) continue;
          double* dst = dx + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          const double* src = row + static_cast<std::size_t>(oy) * g.ow;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox + v - g.pad_left;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "add");
  return t.record(av + bv, {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a) += g;
    if (tp.requires_grad(b)) tp.grad_ref(b) += g;
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "sub");
  return t.record(av - bv, {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) tp.grad_ref(a) += g;
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_ref(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape({a, b});
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_ref(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_ref(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.record(s * t.value(a), {a}, [a, s](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

inline Var neg(Var a) { return scale(a, -1.0); }

/// weights[index] * x, with weights a learnable vector.
inline Var scale_by(Var weights, std::size_t index, Var x) {
  Tape& t = detail::same_tape({weights, x});
  const Tensor& wv = t.value(weights);
  if (index >= wv.size()) throw ShapeError("scale_by: weight index out of range");
  const double w = wv[index];
  return t.record(w * t.value(x), {weights, x}, [weights, index, x](Tape& tp, const Tensor& g) {
    const double w = tp.value(weights)[index];
    if (tp.requires_grad(weights)) tp.grad_ref(weights)[index] += dot(g, tp.value(x));
    if (tp.requires_grad(x)) {
      Tensor& gx = tp.grad_ref(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += w * g[i];
    }
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  double s = 0.0;
  for (double v : av.data()) s += v;
  return t.record(Tensor::scalar(s), {a}, [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_ref(a);
    const double gs = g[0];
    for (double& v : ga.data()) v += gs;
  });
}

/// Sum of squared entries.
inline Var square_sum(Var a) {
  Tape& t = *a.tape;
  return t.record(Tensor::scalar(squared_norm(t.value(a))), {a}, [a](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    Tensor& ga = tp.grad_ref(a);
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += 2.0 * av[i] * g[0];
  });
}

inline Var tanh(Var a) {
  Tape& t = *a.tape;
  Tensor out = map(t.value(a), [](double v) { return std::tanh(v); });
  Tensor saved = out;
  return t.record(std::move(out), {a}, [a, saved = std::move(saved)](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - saved[i] * saved[i]);
  });
}

inline Var exp(Var a) {
  Tape& t = *a.tape;
  Tensor out = map(t.value(a), [](double v) { return std::exp(v); });
  Tensor saved = out;
  return t.record(std::move(out), {a}, [a, saved = std::move(saved)](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * saved[i];
  });
}

// ---------------------------------------------------------------------------
// Convolution, transpose convolution, pooling
// ---------------------------------------------------------------------------

enum class Padding { valid, same };

/// Stride-1 cross-correlation. input [Cin,H,W], kernels [Cout,Cin,kh,kw],
/// bias [Cout]. Same padding puts the extra row/column of even kernels at the
/// bottom/right.
inline Var conv2d(Var input, Var kernels, Var bias, Padding padding) {
  Tape& t = detail::same_tape({input, kernels, bias});
  const Tensor& x = t.value(input);
  const Tensor& k = t.value(kernels);
  const Tensor& b = t.value(bias);
  detail::require_rank(x, 3, "conv2d input");
  detail::require_rank(k, 4, "conv2d kernels");
  if (k.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: kernel input channels " + std::to_string(k.dim(1)) + " != input channels " +
                     std::to_string(x.dim(0)) + " (input " + to_string(x.shape()) + ", kernels " +
                     to_string(k.shape()) + ")");
  }
  require_shape(b, {k.dim(0)}, "conv2d bias");

  detail::ConvGeometry g{};
  g.cin = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cout = k.dim(0);
  g.kh = k.dim(2);
  g.kw = k.dim(3);
  if (padding == Padding::same) {
    g.pad_top = (g.kh - 1) / 2;
    g.pad_left = (g.kw - 1) / 2;
    g.oh = g.h;
    g.ow = g.w;
  } else {
    if (g.kh > g.h || g.kw > g.w) {
      throw ShapeError("conv2d: kernel " + to_string(k.shape()) + " larger than input " + to_string(x.shape()));
    }
    g.pad_top = g.pad_left = 0;
    g.oh = g.h - g.kh + 1;
    g.ow = g.w - g.kw + 1;
  }

  const int ckk = g.cin * g.kh * g.kw;
  const int plane = g.oh * g.ow;
  // Left uninitialized: im2col writes every entry.
  std::shared_ptr<double[]> cols(new double[static_cast<std::size_t>(ckk) * plane]);
  detail::im2col(x.raw(), g, cols.get());

  Tensor out({g.cout, g.oh, g.ow});
  detail::MatMap om(out.raw(), g.cout, plane);
  om.noalias() = detail::ConstMatMap(k.raw(), g.cout, ckk) * detail::ConstMatMap(cols.get(), ckk, plane);
  for (int o = 0; o < g.cout; ++o) om.row(o).array() += b[static_cast<std::size_t>(o)];

  return t.record(std::move(out), {input, kernels, bias},
                  [input, kernels, bias, g, cols](Tape& tp, const Tensor& grad) {
                    const int ckk = g.cin * g.kh * g.kw;
                    const int plane = g.oh * g.ow;
                    detail::ConstMatMap gm(grad.raw(), g.cout, plane);
                    if (tp.requires_grad(kernels)) {
                      detail::MatMap dk(tp.grad_ref(kernels).raw(), g.cout, ckk);
                      dk.noalias() += gm * detail::ConstMatMap(cols.get(), ckk, plane).transpose();
                    }
                    if (tp.requires_grad(bias)) {
                      Tensor& db = tp.grad_ref(bias);
                      // Plain loop: Eigen's vectorized row sum depends on the buffer's alignment,
                      // which would make training runs differ in the last bit.
                      for (int o = 0; o < g.cout; ++o) {
                        const double* row = grad.raw() + static_cast<std::size_t>(o) * plane;
                        db[static_cast<std::size_t>(o)] += std::accumulate(row, row + plane, 0.0);
                      }
                    }
                    if (tp.requires_grad(input)) {
                      detail::RowMat dc(ckk, plane);
                      dc.noalias() = detail::ConstMatMap(tp.value(kernels).raw(), g.cout, ckk).transpose() * gm;
                      detail::col2im_add(dc.data(), g, tp.grad_ref(input).raw());
                    }
                  });
}

/// Stride-1 transpose convolution: out[o][y][x] = sum_{c,u,v} in[c][y-u][x-v] * K[o][c][u][v].
/// input [Cin,h,w], kernels [Cout,Cin,kh,kw] -> [Cout, h+kh-1, w+kw-1].
/// For single-channel kernels this is exactly the input-adjoint of a valid
/// conv2d with the same kernel; with channels, the adjoint uses the kernel
/// with its two channel axes swapped.
inline Var transpose_conv2d(Var input, Var kernels) {
  Tape& t = detail::same_tape({input, kernels});
  const Tensor& x = t.value(input);
  const Tensor& k = t.value(kernels);
  detail::require_rank(x, 3, "transpose_conv2d input");
  detail::require_rank(k, 4, "transpose_conv2d kernels");
  if (k.dim(1) != x.dim(0)) {
    throw ShapeError("transpose_conv2d: kernel input channels " + std::to_string(k.dim(1)) +
                     " != input channels " + std::to_string(x.dim(0)));
  }
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = h + kh - 1, ow = w + kw - 1;
  const int hw = h * w, kk = kh * kw;

  Tensor out({cout, oh, ow});
  detail::ConstMatMap p(x.raw(), cin, hw);
  detail::RowMat z(hw, kk);
  for (int o = 0; o < cout; ++o) {
    detail::ConstMatMap ko(k.raw() + static_cast<std::size_t>(o) * cin * kk, cin, kk);
    z.noalias() = p.transpose() * ko;
    double* dst = out.raw() + static_cast<std::size_t>(o) * oh * ow;
    for (int y0 = 0; y0 < h; ++y0)
      for (int x0 = 0; x0 < w; ++x0) {
        const double* zr = z.data() + static_cast<std::size_t>(y0 * w + x0) * kk;
        for (int u = 0; u < kh; ++u) {
          double* drow = dst + static_cast<std::size_t>(y0 + u) * ow + x0;
          const double* zrow = zr + static_cast<std::size_t>(u) * kw;
          for (int v = 0; v < kw; ++v) drow[v] += zrow[v];
        }
      }
  }

  return t.record(std::move(out), {input, kernels},
                  [input, kernels, cin, h, w, cout, kh, kw, oh, ow](Tape& tp, const Tensor& grad) {
                    const int hw = h * w, kk = kh * kw;
                    const Tensor& x = tp.value(input);
                    const Tensor& k = tp.value(kernels);
                    detail::RowMat d(hw, kk);
                    const bool want_x = tp.requires_grad(input);
                    const bool want_k = tp.requires_grad(kernels);
                    for (int o = 0; o < cout; ++o) {
                      const double* src = grad.raw() + static_cast<std::size_t>(o) * oh * ow;
                      for (int y0 = 0; y0 < h; ++y0)
                        for (int x0 = 0; x0 < w; ++x0) {
                          double* dr = d.data() + static_cast<std::size_t>(y0 * w + x0) * kk;
                          for (int u = 0; u < kh; ++u) {
                            const double* srow = src + static_cast<std::size_t>(y0 + u) * ow + x0;
                            std::copy(srow, srow + kw, dr + static_cast<std::size_t>(u) * kw);
                          }
                        }
                      detail::ConstMatMap ko(k.raw() + static_cast<std::size_t>(o) * cin * kk, cin, kk);
                      if (want_x) {
                        detail::MatMap dx(tp.grad_ref(input).raw(), cin, hw);
                        dx.noalias() += ko * d.transpose();
                      }
                      if (want_k) {
                        detail::MatMap dk(tp.grad_ref(kernels).raw() + static_cast<std::size_t>(o) * cin * kk, cin,
                                          kk);
                        dk.noalias() += detail::ConstMatMap(x.raw(), cin, hw) * d;
                      }
                    }
                  });
}

/// 2x2 max pooling with stride 2. Ties go to the first element of the block in
/// row-major order.
inline Var maxpool2(Var input) {
  Tape& t = *input.tape;
  const Tensor& x = t.value(input);
  detail::require_rank(x, 3, "maxpool2 input");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2: spatial dimensions must be even, got " + to_string(x.shape()));
  }
  const int oh = h / 2, ow = w / 2;
  Tensor out({c, oh, ow});
  std::vector<std::size_t> argmax(out.size());
  std::size_t o = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx, ++o) {
        const std::size_t base = (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * xx;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int i = 1; i < 4; ++i)
          if (x[cand[i]] > x[best]) best = cand[i];
        argmax[o] = best;
        out[o] = x[best];
      }
  return t.record(std::move(out), {input}, [input, argmax = std::move(argmax)](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_ref(input);
    for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Per-pixel softmax family. Channel axis 0 holds the labels.
// ---------------------------------------------------------------------------

namespace detail {

using LabelArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Softmax over axis 0 of [L,H,W]. When `log_out` is given it also receives
/// the log-softmax.
inline Tensor softmax_channels(const Tensor& x, Tensor* log_out = nullptr) {
  require_rank(x, 3, "softmax input");
  const int l = x.dim(0);
  if (l < 2) throw ShapeError("softmax needs at least two labels, got " + to_string(x.shape()));
  const Eigen::Index plane = static_cast<Eigen::Index>(x.dim(1)) * x.dim(2);
  Eigen::Map<const LabelArray> in(x.raw(), l, plane);
  const Eigen::Array<double, 1, Eigen::Dynamic> m = in.colwise().maxCoeff();
  const LabelArray shifted = in.rowwise() - m;
  const LabelArray e = shifted.exp();
  const Eigen::Array<double, 1, Eigen::Dynamic> total = e.colwise().sum();
  Tensor out(x.shape());
  Eigen::Map<LabelArray>(out.raw(), l, plane) = e.rowwise() / total;
  if (log_out) {
    *log_out = Tensor(x.shape());
    Eigen::Map<LabelArray>(log_out->raw(), l, plane) = shifted.rowwise() - total.log();
  }
  return out;
}

}  // namespace detail

inline Var softmax_pixelwise(Var logits) {
  Tape& t = *logits.tape;
  Tensor y = detail::softmax_channels(t.value(logits));
  Tensor saved = y;
  return t.record(std::move(y), {logits}, [logits, saved = std::move(saved)](Tape& tp, const Tensor& g) {
    const int l = saved.dim(0);
    const std::size_t plane = saved.size() / l;
    Tensor& gx = tp.grad_ref(logits);
    for (std::size_t p = 0; p < plane; ++p) {
      double s = 0.0;
      for (int c = 0; c < l; ++c) s += g[c * plane + p] * saved[c * plane + p];
      for (int c = 0; c < l; ++c) gx[c * plane + p] += saved[c * plane + p] * (g[c * plane + p] - s);
    }
  });
}

inline Var log_softmax_pixelwise(Var logits) {
  Tape& t = *logits.tape;
  Tensor out;
  Tensor probs = detail::softmax_channels(t.value(logits), &out);
  return t.record(std::move(out), {logits}, [logits, probs = std::move(probs)](Tape& tp, const Tensor& g) {
    const int l = probs.dim(0);
    const std::size_t plane = probs.size() / l;
    Tensor& gx = tp.grad_ref(logits);
    for (std::size_t p = 0; p < plane; ++p) {
      double s = 0.0;
      for (int c = 0; c < l; ++c) s += g[c * plane + p];
      for (int c = 0; c < l; ++c) gx[c * plane + p] += g[c * plane + p] - probs[c * plane + p] * s;
    }
  });
}

/// Negative log-likelihood summed over pixels: -sum_i logp[label_i][i].
/// labels is [H,W] with integer entries in [0, L).
inline Var pixel_nll_sum(Var log_probs, const Tensor& labels) {
  Tape& t = *log_probs.tape;
  const Tensor& lp = t.value(log_probs);
  detail::require_rank(lp, 3, "pixel_nll_sum log_probs");
  require_shape(labels, {lp.dim(1), lp.dim(2)}, "pixel_nll_sum labels");
  const int l = lp.dim(0);
  const std::size_t plane = labels.size();
  std::vector<std::size_t> picked(plane);
  double s = 0.0;
  for (std::size_t p = 0; p < plane; ++p) {
    const double lab = labels[p];
    if (lab != std::floor(lab) || lab < 0 || lab >= l) {
      throw ContractError("pixel_nll_sum: label " + std::to_string(lab) + " outside [0," + std::to_string(l) + ")");
    }
    picked[p] = static_cast<std::size_t>(lab) * plane + p;
    s -= lp[picked[p]];
  }
  return t.record(Tensor::scalar(s), {log_probs}, [log_probs, picked = std::move(picked)](Tape& tp, const Tensor& g) {
    Tensor& gl = tp.grad_ref(log_probs);
    for (std::size_t idx : picked) gl[idx] -= g[0];
  });
}

/// Potts label compatibility: out[l] = sum_{l' != l} x[l'].
inline Var potts_compat(Var x) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  detail::require_rank(xv, 3, "potts_compat input");
  const int l = xv.dim(0);
  const std::size_t plane = xv.size() / l;
  auto apply = [l, plane](const Tensor& in, Tensor& out) {
    for (std::size_t p = 0; p < plane; ++p) {
      double total = 0.0;
      for (int c = 0; c < l; ++c) total += in[c * plane + p];
      for (int c = 0; c < l; ++c) out[c * plane + p] += total - in[c * plane + p];
    }
  };
  Tensor out(xv.shape());
  apply(xv, out);
  return t.record(std::move(out), {x}, [x, apply](Tape& tp, const Tensor& g) { apply(g, tp.grad_ref(x)); });
}

/// Elementwise mean of equally shaped values.
inline Var mean_of(const std::vector<Var>& xs) {
  Tape& t = detail::same_tape(xs);
  Tensor out(t.value(xs.front()).shape());
  for (const Var& v : xs) {
    require_same_shape(out, t.value(v), "mean_of");
    out += t.value(v);
  }
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (double& v : out.data()) v *= inv;
  return t.record(std::move(out), xs, [xs, inv](Tape& tp, const Tensor& g) {
    for (const Var& v : xs) {
      if (!tp.requires_grad(v)) continue;
      Tensor& gv = tp.grad_ref(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += inv * g[i];
    }
  });
}

/// log(mean_u exp(x_u)) elementwise, computed stably. Used to average
/// probabilities given log-probabilities.
inline Var log_mean_exp(const std::vector<Var>& xs) {
  Tape& t = detail::same_tape(xs);
  const Tensor& first = t.value(xs.front());
  for (const Var& v : xs) require_same_shape(first, t.value(v), "log_mean_exp");
  const std::size_t n = first.size();
  const double log_count = std::log(static_cast<double>(xs.size()));
  Tensor out(first.shape());
  std::vector<Tensor> weights(xs.size(), Tensor(first.shape()));
  for (std::size_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (const Var& v : xs) m = std::max(m, t.value(v)[i]);
    double s = 0.0;
    for (std::size_t u = 0; u < xs.size(); ++u) {
      weights[u][i] = std::exp(t.value(xs[u])[i] - m);
      s += weights[u][i];
    }
    for (auto& wt : weights) wt[i] /= s;
    out[i] = m + std::log(s) - log_count;
  }
  return t.record(std::move(out), xs, [xs, weights = std::move(weights)](Tape& tp, const Tensor& g) {
    for (std::size_t u = 0; u < xs.size(); ++u) {
      if (!tp.requires_grad(xs[u])) continue;
      Tensor& gu = tp.grad_ref(xs[u]);
      for (std::size_t i = 0; i < g.size(); ++i) gu[i] += g[i] * weights[u][i];
    }
  });
}

/// sum_u weights[u] * xs[u], with weights a learnable vector of length xs.size().
inline Var weighted_sum(const std::vector<Var>& xs, Var weights) {
  Tape& t = *weights.tape;
  if (t.value(weights).size() != xs.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " inputs but " +
                     std::to_string(t.value(weights).size()) + " weights");
  }
  Var acc = scale_by(weights, 0, xs[0]);
  for (std::size_t u = 1; u < xs.size(); ++u) acc = add(acc, scale_by(weights, u, xs[u]));
  return acc;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Builds a scalar on the given tape from the input Var.
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares backward()'s gradient of f at x against central differences.
/// `tamper`, when set, edits the analytic gradient before comparison; the
/// self-test uses it to confirm the check can fail.
inline GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double step,
                                         const std::function<void(Tensor&)>& tamper = {}) {
  if (!(step > 0.0)) throw ContractError("finite_diff_check: step must be positive");
  Tensor analytic;
  {
    Tape tape;
    Var in = tape.leaf(x, "x");
    Var out = f(tape, in);
    analytic = tape.backward(out).at("x");
  }
  if (tamper) tamper(analytic);

  auto eval = [&](const Tensor& probe) {
    Tape tape;
    Var in = tape.constant(probe);
    return tape.value(f(tape, in)).item();
  };

  GradCheckResult r;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = eval(probe);
    probe[i] = x[i] - step;
    const double down = eval(probe);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * step);
    const double err = relative_error(analytic[i], numeric);
    if (i == 0 || err > r.max_rel_error) r = {err, i, analytic[i], numeric};
  }
  return r;
}

}  // namespace advseg::ad
