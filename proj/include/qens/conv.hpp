#pragma once

// Direct dilated convolution kernels with zero "same" padding.
//
// Feature maps are [N, C, D, H, W]; 2D inputs are handled as D = 1 with a
// kernel depth of 1. The innermost loops run over contiguous W segments so the
// compiler can vectorize them; accumulation order is fixed, which keeps every
// result bit-stable between runs.

#include <algorithm>
#include <cstddef>

#include "qens/error.hpp"
#include "qens/tensor.hpp"

namespace qens::conv {

struct Geometry {
  std::size_t batch = 1;
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t depth = 1, height = 1, width = 1;
  std::size_t kd = 1, kh = 1, kw = 1;
  std::size_t dilation = 1;
  int spatial_rank = 2;
  bool batched = false;

  std::size_t plane() const { return depth * height * width; }
};

/// Validates shapes and derives the loop geometry. Accepts [C, spatial...]
/// or [N, C, spatial...] inputs and [OC, IC, k...] kernels.
inline Geometry make_geometry(const Shape& in, const Shape& kernel, std::size_t dilation,
                              int spatial_rank) {
  if (spatial_rank != 2 && spatial_rank != 3)
    throw ValueError("conv: spatial_rank must be 2 or 3, got " + std::to_string(spatial_rank));
  if (dilation < 1) throw ValueError("conv: dilation must be >= 1");
  const std::size_t sr = static_cast<std::size_t>(spatial_rank);
  if (in.size() != sr + 1 && in.size() != sr + 2)
    throw ShapeError("conv: input rank " + std::to_string(in.size()) + " incompatible with spatial rank " +
                     std::to_string(spatial_rank));
  if (kernel.size() != sr + 2)
    throw ShapeError("conv: kernel rank " + std::to_string(kernel.size()) + ", expected " +
                     std::to_string(sr + 2));
  Geometry g;
  g.spatial_rank = spatial_rank;
  g.batched = in.size() == sr + 2;
  const std::size_t c_axis = g.batched ? 1 : 0;
  g.batch = g.batched ? in[0] : 1;
  g.in_ch = in[c_axis];
  g.out_ch = kernel[0];
  if (kernel[1] != g.in_ch) throw ShapeError("conv", static_cast<int>(c_axis), g.in_ch, kernel[1]);
  for (std::size_t a = 2; a < kernel.size(); ++a) {
    if (kernel[a] != 1 && kernel[a] != 3)
      throw ShapeError("conv: kernel spatial size must be 1 or 3 on axis " + std::to_string(a));
    if (kernel[a] != kernel[2]) throw ShapeError("conv", static_cast<int>(a), kernel[a], kernel[2]);
  }
  if (sr == 3) {
    g.depth = in[c_axis + 1];
    g.kd = kernel[2];
  }
  g.height = in[c_axis + sr - 1];
  g.width = in[c_axis + sr];
  g.kh = kernel[sr];
  g.kw = kernel[sr + 1];
  g.dilation = dilation;
  return g;
}

inline Shape output_shape(const Geometry& g) {
  Shape s;
  if (g.batched) s.push_back(g.batch);
  s.push_back(g.out_ch);
  if (g.spatial_rank == 3) s.push_back(g.depth);
  s.push_back(g.height);
  s.push_back(g.width);
  return s;
}

namespace detail {

// Valid output range [lo, hi) along an axis of length n for a tap offset.
inline void valid_range(std::ptrdiff_t n, std::ptrdiff_t off, std::ptrdiff_t& lo, std::ptrdiff_t& hi) {
  lo = std::max<std::ptrdiff_t>(0, -off);
  hi = std::min<std::ptrdiff_t>(n, n - off);
  if (hi < lo) hi = lo;
}

// Visits every (tap, output row) pair with its valid x-range. The callback
// receives (tap_index, out_row_offset, in_row_offset, x_lo, x_hi), where the
// offsets index into a single [D, H, W] plane.
template <typename F>
void for_each_tap_row(const Geometry& g, F&& f) {
  const auto D = static_cast<std::ptrdiff_t>(g.depth);
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  const auto dil = static_cast<std::ptrdiff_t>(g.dilation);
  const auto cd = static_cast<std::ptrdiff_t>(g.kd / 2);
  const auto ch = static_cast<std::ptrdiff_t>(g.kh / 2);
  const auto cw = static_cast<std::ptrdiff_t>(g.kw / 2);
  std::size_t tap = 0;
  for (std::ptrdiff_t tz = 0; tz < static_cast<std::ptrdiff_t>(g.kd); ++tz) {
    const std::ptrdiff_t oz = (tz - cd) * dil;
    std::ptrdiff_t z0, z1;
    valid_range(D, oz, z0, z1);
    for (std::ptrdiff_t ty = 0; ty < static_cast<std::ptrdiff_t>(g.kh); ++ty) {
      const std::ptrdiff_t oy = (ty - ch) * dil;
      std::ptrdiff_t y0, y1;
      valid_range(H, oy, y0, y1);
      for (std::ptrdiff_t tx = 0; tx < static_cast<std::ptrdiff_t>(g.kw); ++tx, ++tap) {
        const std::ptrdiff_t ox = (tx - cw) * dil;
        std::ptrdiff_t x0, x1;
        valid_range(W, ox, x0, x1);
        if (x1 <= x0) continue;
        for (std::ptrdiff_t z = z0; z < z1; ++z) {
          for (std::ptrdiff_t y = y0; y < y1; ++y) {
            const std::ptrdiff_t out_row = (z * H + y) * W;
            const std::ptrdiff_t in_row = ((z + oz) * H + (y + oy)) * W + ox;
            f(tap, out_row, in_row, x0, x1);
          }
        }
      }
    }
  }
}

}  // namespace detail

/// out[n, oc] += sum_ic sum_tap w[oc, ic, tap] * shift(in[n, ic], tap).
/// `out` must be zero-initialized (or hold a value to accumulate onto).
template <typename T>
void forward(const Geometry& g, const T* __restrict in, const T* __restrict w, T* __restrict out) {
  const std::size_t P = g.plane();
  const std::size_t taps = g.kd * g.kh * g.kw;
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* in_n = in + n * g.in_ch * P;
    T* out_n = out + n * g.out_ch * P;
    for (std::size_t ic = 0; ic < g.in_ch; ++ic) {
      const T* src = in_n + ic * P;
      detail::for_each_tap_row(g, [&](std::size_t tap, std::ptrdiff_t orow, std::ptrdiff_t irow,
                                      std::ptrdiff_t x0, std::ptrdiff_t x1) {
        const T* s = src + irow;
        for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
          const T wv = w[(oc * g.in_ch + ic) * taps + tap];
          T* d = out_n + oc * P + orow;
          for (std::ptrdiff_t x = x0; x < x1; ++x) d[x] += wv * s[x];
        }
      });
    }
  }
}

/// grad_in[n, ic] += sum_oc sum_tap w[oc, ic, tap] * unshift(grad_out[n, oc], tap).
template <typename T>
void backward_input(const Geometry& g, const T* __restrict grad_out, const T* __restrict w,
                    T* __restrict grad_in) {
  const std::size_t P = g.plane();
  const std::size_t taps = g.kd * g.kh * g.kw;
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* go_n = grad_out + n * g.out_ch * P;
    T* gi_n = grad_in + n * g.in_ch * P;
    for (std::size_t ic = 0; ic < g.in_ch; ++ic) {
      T* dst = gi_n + ic * P;
      detail::for_each_tap_row(g, [&](std::size_t tap, std::ptrdiff_t orow, std::ptrdiff_t irow,
                                      std::ptrdiff_t x0, std::ptrdiff_t x1) {
        T* d = dst + irow;
        for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
          const T wv = w[(oc * g.in_ch + ic) * taps + tap];
          const T* s = go_n + oc * P + orow;
          for (std::ptrdiff_t x = x0; x < x1; ++x) d[x] += wv * s[x];
        }
      });
    }
  }
}

/// grad_w[oc, ic, tap] += sum_n sum_pos grad_out[n, oc, pos] * in[n, ic, pos + tap].
template <typename T>
void backward_weight(const Geometry& g, const T* __restrict in, const T* __restrict grad_out,
                     T* __restrict grad_w) {
  const std::size_t P = g.plane();
  const std::size_t taps = g.kd * g.kh * g.kw;
  for (std::size_t n = 0; n < g.batch; ++n) {
    const T* in_n = in + n * g.in_ch * P;
    const T* go_n = grad_out + n * g.out_ch * P;
    for (std::size_t ic = 0; ic < g.in_ch; ++ic) {
      const T* src = in_n + ic * P;
      detail::for_each_tap_row(g, [&](std::size_t tap, std::ptrdiff_t orow, std::ptrdiff_t irow,
                                      std::ptrdiff_t x0, std::ptrdiff_t x1) {
        const T* s = src + irow;
        for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
          const T* go = go_n + oc * P + orow;
          T acc{};
          for (std::ptrdiff_t x = x0; x < x1; ++x) acc += go[x] * s[x];
          grad_w[(oc * g.in_ch + ic) * taps + tap] += acc;
        }
      });
    }
  }
}

}  // namespace qens::conv
