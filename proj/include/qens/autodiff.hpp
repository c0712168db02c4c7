#pragma once

// Reverse-mode differentiation over Tensor<T>.
//
// A Tape records every op in execution order; backward() replays the
// recorded closures in reverse. Trainable tensors live in Parameter objects
// owned by the caller; leaves created with Tape::param() accumulate their
// gradients into Parameter::grad.

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "qens/conv.hpp"
#include "qens/error.hpp"
#include "qens/tensor.hpp"

namespace qens {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    std::function<void(Tape&, std::size_t)> backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }

  Var<T> param(Parameter<T>& p) {
    auto v = push(p.value, true, {});
    nodes_[v.id].param = &p;
    return v;
  }

  Var<T> push(Tensor<T> value, bool requires_grad, std::function<void(Tape&, std::size_t)> bw) {
    nodes_.push_back(Node{std::move(value), {}, std::move(bw), nullptr, requires_grad});
    return Var<T>{this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Returns the gradient buffer of node `id`, allocating zeros if needed.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Seeds d(loss)/d(loss) = 1 on a scalar node and replays the tape in reverse.
  void backward(Var<T> loss) {
    if (nodes_.at(loss.id).value.size() != 1) throw ShapeError("backward: loss must be a scalar");
    grad(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        auto& pg = n.param->grad;
        if (pg.shape() != n.value.shape()) pg = Tensor<T>(n.value.shape());
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

namespace ops {

namespace detail {

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw ValueError(std::string(op) + ": operands recorded on different tapes");
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.rank() != b.rank()) throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(a.shape()) +
                                             " vs " + shape_str(b.shape()));
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i)) throw ShapeError(op, static_cast<int>(i), a.dim(i), b.dim(i));
}

// Splits a shape around `axis` into (outer, extent, inner) loop counts.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& extent,
                       std::size_t& inner) {
  if (axis >= s.size()) throw ShapeError("channel axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

template <typename T>
T softplus_scalar(T x) {
  return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

/// Dilated same-padded convolution without bias.
template <typename T>
Var<T> conv(Var<T> x, Var<T> kernel, std::size_t dilation, int spatial_rank) {
  detail::same_tape(x, kernel, "conv");
  const auto g = qens::conv::make_geometry(x.shape(), kernel.shape(), dilation, spatial_rank);
  Tensor<T> out(qens::conv::output_shape(g));
  qens::conv::forward(g, x.value().data(), kernel.value().data(), out.data());
  Tape<T>& tp = *x.tape;
  const bool rg = tp.requires_grad(x.id) || tp.requires_grad(kernel.id);
  const std::size_t xi = x.id, ki = kernel.id;
  return tp.push(std::move(out), rg, [g, xi, ki](Tape<T>& t, std::size_t self) {
    const Tensor<T>& go = t.grad(self);
    if (t.requires_grad(ki))
      qens::conv::backward_weight(g, t.value(xi).data(), go.data(), t.grad(ki).data());
    if (t.requires_grad(xi))
      qens::conv::backward_input(g, go.data(), t.value(ki).data(), t.grad(xi).data());
  });
}

/// Adds a per-channel bias b[C] along `channel_axis`.
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias, std::size_t channel_axis = 1) {
  detail::same_tape(x, bias, "add_bias");
  std::size_t outer, C, inner;
  detail::split_axis(x.shape(), channel_axis, outer, C, inner);
  if (bias.value().size() != C) throw ShapeError("add_bias", static_cast<int>(channel_axis), C, bias.value().size());
  Tensor<T> out = x.value();
  const T* b = bias.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      T* p = out.data() + (o * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
    }
  Tape<T>& tp = *x.tape;
  const bool rg = tp.requires_grad(x.id) || tp.requires_grad(bias.id);
  const std::size_t xi = x.id, bi = bias.id;
  return tp.push(std::move(out), rg, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& go = t.grad(self);
    if (t.requires_grad(xi)) {
      Tensor<T>& gx = t.grad(xi);
      for (std::size_t k = 0; k < go.size(); ++k) gx[k] += go[k];
    }
    if (t.requires_grad(bi)) {
      Tensor<T>& gb = t.grad(bi);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < C; ++c) {
          const T* p = go.data() + (o * C + c) * inner;
          T acc{};
          for (std::size_t i = 0; i < inner; ++i) acc += p[i];
          gb[c] += acc;
        }
    }
  });
}

/// Per-position affine map over the channel axis: y[o] = sum_i W[o,i] x[i] + b[o].
template <typename T>
Var<T> affine(Var<T> x, Var<T> weight, Var<T> bias, std::size_t channel_axis = 1) {
  detail::same_tape(x, weight, "affine");
  detail::same_tape(x, bias, "affine");
  std::size_t outer, Cin, inner;
  detail::split_axis(x.shape(), channel_axis, outer, Cin, inner);
  const Shape& ws = weight.shape();
  if (ws.size() != 2) throw ShapeError("affine: weight must be [out, in], got " + shape_str(ws));
  if (ws[1] != Cin) throw ShapeError("affine", static_cast<int>(channel_axis), Cin, ws[1]);
  const std::size_t Cout = ws[0];
  if (bias.value().size() != Cout) throw ShapeError("affine: bias", 0, bias.value().size(), Cout);
  Shape os = x.shape();
  os[channel_axis] = Cout;
  Tensor<T> out(os);
  const T* W = weight.value().data();
  const T* b = bias.value().data();
  const T* X = x.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t co = 0; co < Cout; ++co) {
      T* dst = out.data() + (o * Cout + co) * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] = b[co];
      for (std::size_t ci = 0; ci < Cin; ++ci) {
        const T w = W[co * Cin + ci];
        const T* src = X + (o * Cin + ci) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
      }
    }
  Tape<T>& tp = *x.tape;
  const bool rg = tp.requires_grad(x.id) || tp.requires_grad(weight.id) || tp.requires_grad(bias.id);
  const std::size_t xi = x.id, wi = weight.id, bi = bias.id;
  return tp.push(std::move(out), rg, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& go = t.grad(self);
    const T* Xv = t.value(xi).data();
    const T* Wv = t.value(wi).data();
    if (t.requires_grad(wi)) {
      T* gw = t.grad(wi).data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t co = 0; co < Cout; ++co) {
          const T* g = go.data() + (o * Cout + co) * inner;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            const T* src = Xv + (o * Cin + ci) * inner;
            T acc{};
            for (std::size_t i = 0; i < inner; ++i) acc += g[i] * src[i];
            gw[co * Cin + ci] += acc;
          }
        }
    }
    if (t.requires_grad(bi)) {
      T* gb = t.grad(bi).data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t co = 0; co < Cout; ++co) {
          const T* g = go.data() + (o * Cout + co) * inner;
          T acc{};
          for (std::size_t i = 0; i < inner; ++i) acc += g[i];
          gb[co] += acc;
        }
    }
    if (t.requires_grad(xi)) {
      T* gx = t.grad(xi).data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          T* dst = gx + (o * Cin + ci) * inner;
          for (std::size_t co = 0; co < Cout; ++co) {
            const T w = Wv[co * Cin + ci];
            const T* g = go.data() + (o * Cout + co) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += w * g[i];
          }
        }
    }
  });
}

/// Concatenates along `channel_axis`. All other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t channel_axis = 1) {
  if (xs.empty()) throw ValueError("concat: no inputs");
  if (xs.size() == 1) return xs.front();
  const Shape& s0 = xs[0].shape();
  std::size_t outer, c0, inner;
  detail::split_axis(s0, channel_axis, outer, c0, inner);
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (const auto& v : xs) {
    detail::same_tape(xs[0], v, "concat");
    const Shape& s = v.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t a = 0; a < s.size(); ++a)
      if (a != channel_axis && s[a] != s0[a]) throw ShapeError("concat", static_cast<int>(a), s[a], s0[a]);
    chans.push_back(s[channel_axis]);
    total += s[channel_axis];
  }
  Shape os = s0;
  os[channel_axis] = total;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t c_off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      const T* src = xs[k].value().data() + o * chans[k] * inner;
      std::copy(src, src + chans[k] * inner, out.data() + (o * total + c_off) * inner);
      c_off += chans[k];
    }
  }
  Tape<T>& tp = *xs[0].tape;
  std::vector<std::size_t> ids;
  bool rg = false;
  for (const auto& v : xs) {
    ids.push_back(v.id);
    rg = rg || tp.requires_grad(v.id);
  }
  return tp.push(std::move(out), rg, [=](Tape<T>& t, std::size_t self) {
    const Tensor<T>& go = t.grad(self);
    for (std::size_t o = 0; o < outer; ++o) {
      std::size_t c_off = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        if (t.requires_grad(ids[k])) {
          T* dst = t.grad(ids[k]).data() + o * chans[k] * inner;
          const T* src = go.data() + (o * total + c_off) * inner;
          for (std::size_t i = 0; i < chans[k] * inner; ++i) dst[i] += src[i];
        }
        c_off += chans[k];
      }
    }
  });
}

namespace detail {

// Elementwise unary op with derivative expressed through (input, output).
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> x, F f, DF df) {
  Tensor<T> out(x.shape());
  const Tensor<T>& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  Tape<T>& tp = *x.tape;
  const std::size_t xi = x.id;
  return tp.push(std::move(out), tp.requires_grad(xi), [xi, df](Tape<T>& t, std::size_t self) {
    const Tensor<T>& go = t.grad(self);
    const Tensor<T>& in = t.value(xi);
    const Tensor<T>& y = t.value(self);
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * df(in[i], y[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> relu(Var<T> x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

/// ln(1 + e^x), evaluated as max(x, 0) + log1p(e^{-|x|}).
template <typename T>
Var<T> softplus(Var<T> x) {
  return detail::unary(
      x, [](T v) { return detail::softplus_scalar(v); }, [](T v, T) { return detail::sigmoid_scalar(v); });
}

/// Clamps channel c to [lo[c], hi[c]]. A single-element lo/hi applies to all
/// channels. Gradient passes only strictly inside the range.
template <typename T>
Var<T> clamp(Var<T> x, const std::vector<T>& lo, const std::vector<T>& hi, std::size_t channel_axis = 1) {
  std::size_t outer, C, inner;
  detail::split_axis(x.shape(), channel_axis, outer, C, inner);
  if (lo.size() != hi.size() || (lo.size() != 1 && lo.size() != C))
    throw ShapeError("clamp: range has " + std::to_string(lo.size()) + " entries for " + std::to_string(C) +
                     " channels");
  for (std::size_t c = 0; c < lo.size(); ++c)
    if (!(lo[c] <= hi[c])) throw ValueError("clamp: lo > hi on channel " + std::to_string(c));
  Tensor<T> out = x.value();
  Tensor<T> mask(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      const T l = lo.size() == 1 ? lo[0] : lo[c];
      const T h = hi.size() == 1 ? hi[0] : hi[c];
      const std::size_t base = (o * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        T& v = out[base + i];
        if (v < l) v = l;
        else if (v > h) v = h;
        else mask[base + i] = (v > l && v < h) ? T{1} : T{0};
      }
    }
  Tape<T>& tp = *x.tape;
  const std::size_t xi = x.id;
  return tp.push(std::move(out), tp.requires_grad(xi), [xi, mask = std::move(mask)](Tape<T>& t, std::size_t self) {
    const Tensor<T>& go = t.grad(self);
    Tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * mask[i];
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "add");
  detail::check_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  Tape<T>& tp = *a.tape;
  const std::size_t ai = a.id, bi = b.id;
  return tp.push(std::move(out), tp.requires_grad(ai) || tp.requires_grad(bi), [ai, bi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& go = t.grad(self);
    for (std::size_t id : {ai, bi}) {
      if (!t.requires_grad(id)) continue;
      Tensor<T>& g = t.grad(id);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "sub");
  detail::check_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  Tape<T>& tp = *a.tape;
  const std::size_t ai = a.id, bi = b.id;
  return tp.push(std::move(out), tp.requires_grad(ai) || tp.requires_grad(bi), [ai, bi](Tape<T>& t, std::size_t self) {
    const Tensor<T>& go = t.grad(self);
    if (t.requires_grad(ai)) {
      Tensor<T>& g = t.grad(ai);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
    }
    if (t.requires_grad(bi)) {
      Tensor<T>& g = t.grad(bi);
      for (std::size_t i = 0; i < go.size(); ++i) g[i] -= go[i];
    }
  });
}

/// Scalar sum_i w_i x_i with constant weights; used to reduce tensors for checks.
template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights) {
  detail::check_same_shape(x.value(), weights, "weighted_sum");
  T acc{};
  for (std::size_t i = 0; i < weights.size(); ++i) acc += weights[i] * x.value()[i];
  Tape<T>& tp = *x.tape;
  const std::size_t xi = x.id;
  return tp.push(Tensor<T>({1}, acc), tp.requires_grad(xi), [xi, weights](Tape<T>& t, std::size_t self) {
    const T go = t.grad(self)[0];
    Tensor<T>& g = t.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * weights[i];
  });
}

/// Mean pinball loss: mean of max(q r, (q - 1) r) with r = target - pred.
/// The subgradient at r = 0 is taken as 0.
template <typename T>
Var<T> pinball_loss(Var<T> pred, const Tensor<T>& target, double q) {
  if (!(q > 0.0 && q < 1.0)) throw ValueError("pinball_loss: quantile level must lie in (0,1), got " + std::to_string(q));
  detail::check_same_shape(pred.value(), target, "pinball_loss");
  const Tensor<T>& p = pred.value();
  const T qq = static_cast<T>(q);
  const std::size_t n = p.size();
  if (n == 0) throw ShapeError("pinball_loss: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const T r = target[i] - p[i];
    acc += static_cast<double>(r >= T{0} ? qq * r : (qq - T{1}) * r);
  }
  Tape<T>& tp = *pred.tape;
  const std::size_t pi = pred.id;
  Tensor<T> out({1}, static_cast<T>(acc / static_cast<double>(n)));
  return tp.push(std::move(out), tp.requires_grad(pi), [pi, qq, n, target](Tape<T>& t, std::size_t self) {
    const T go = t.grad(self)[0] / static_cast<T>(n);
    const Tensor<T>& pv = t.value(pi);
    Tensor<T>& g = t.grad(pi);
    for (std::size_t i = 0; i < n; ++i) {
      const T r = target[i] - pv[i];
      if (r > T{0}) g[i] -= go * qq;
      else if (r < T{0}) g[i] += go * (T{1} - qq);
    }
  });
}

}  // namespace ops
}  // namespace qens
