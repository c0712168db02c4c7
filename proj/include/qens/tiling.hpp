#pragma once

// Overlapping patch extraction, weighted stitching and spatially disjoint
// splits. Patches tile the trailing `spatial_rank` axes; leading axes
// (channels, frames) travel with each patch.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qens/error.hpp"
#include "qens/tensor.hpp"

namespace qens::tiling {

struct PatchGrid {
  Shape source;                              // full source shape
  std::vector<std::size_t> patch;            // spatial patch extents
  std::vector<std::size_t> stride;           // spatial strides
  std::vector<std::vector<std::size_t>> origins;  // row-major, one entry per patch

  std::size_t spatial_rank() const { return patch.size(); }
  std::size_t lead_rank() const { return source.size() - patch.size(); }
  std::size_t count() const { return origins.size(); }
};

/// Origins along one axis: multiples of the stride, with the last patch
/// shifted inward to end at the boundary.
inline std::vector<std::size_t> axis_origins(std::size_t n, std::size_t p, std::size_t stride) {
  if (p > n) throw ValueError("tiling: patch " + std::to_string(p) + " larger than extent " + std::to_string(n));
  if (stride == 0) throw ValueError("tiling: stride must be positive");
  std::vector<std::size_t> o;
  for (std::size_t x = 0; x + p < n; x += stride) o.push_back(x);
  if (o.empty() || o.back() != n - p) o.push_back(n - p);
  return o;
}

inline PatchGrid make_grid(const Shape& source, const std::vector<std::size_t>& patch,
                           const std::vector<std::size_t>& overlap) {
  if (patch.empty() || patch.size() != overlap.size() || patch.size() > source.size())
    throw ValueError("tiling: patch/overlap rank must match and not exceed the source rank");
  PatchGrid g;
  g.source = source;
  g.patch = patch;
  const std::size_t lead = source.size() - patch.size();
  std::vector<std::vector<std::size_t>> per_axis;
  for (std::size_t a = 0; a < patch.size(); ++a) {
    if (patch[a] == 0) throw ValueError("tiling: zero patch extent");
    if (overlap[a] >= patch[a])
      throw ValueError("tiling: overlap " + std::to_string(overlap[a]) + " must be smaller than patch " +
                       std::to_string(patch[a]) + " on axis " + std::to_string(a));
    g.stride.push_back(patch[a] - overlap[a]);
    per_axis.push_back(axis_origins(source[lead + a], patch[a], g.stride[a]));
  }
  std::vector<std::size_t> idx(patch.size(), 0);
  while (true) {
    std::vector<std::size_t> o(patch.size());
    for (std::size_t a = 0; a < patch.size(); ++a) o[a] = per_axis[a][idx[a]];
    g.origins.push_back(o);
    std::size_t a = patch.size();
    while (a > 0) {
      --a;
      if (++idx[a] < per_axis[a].size()) break;
      idx[a] = 0;
      if (a == 0) return g;
    }
  }
}

namespace detail {

// Visits every element of a patch: `fn(src_offset, patch_offset)`.
template <typename Fn>
void for_each_patch_element(const PatchGrid& g, const std::vector<std::size_t>& origin, Fn&& fn) {
  const std::size_t lead = g.lead_rank(), sr = g.spatial_rank();
  std::size_t lead_n = 1;
  for (std::size_t a = 0; a < lead; ++a) lead_n *= g.source[a];
  std::size_t src_inner = 1, patch_inner = 1;
  for (std::size_t a = 0; a < sr; ++a) {
    src_inner *= g.source[lead + a];
    patch_inner *= g.patch[a];
  }
  const std::size_t row = g.patch[sr - 1];
  std::vector<std::size_t> idx(sr, 0);
  for (std::size_t l = 0; l < lead_n; ++l) {
    std::size_t p_off = l * patch_inner;
    std::fill(idx.begin(), idx.end(), 0);
    while (true) {
      std::size_t s_off = 0;
      for (std::size_t a = 0; a < sr; ++a) s_off = s_off * g.source[lead + a] + origin[a] + idx[a];
      s_off += l * src_inner;
      for (std::size_t i = 0; i < row; ++i) fn(s_off + i, p_off + i, idx, i);
      p_off += row;
      if (sr == 1) break;
      std::size_t a = sr - 1;
      bool done = true;
      while (a > 0) {
        --a;
        if (++idx[a] < g.patch[a]) {
          done = false;
          break;
        }
        idx[a] = 0;
      }
      if (done) break;
    }
  }
}

}  // namespace detail

/// Center-peaked triangular weights min(i + 1, p - i) along one axis.
inline std::vector<double> triangular_window(std::size_t p) {
  std::vector<double> w(p);
  for (std::size_t i = 0; i < p; ++i) w[i] = static_cast<double>(std::min(i + 1, p - i));
  return w;
}

template <typename T>
struct Patches {
  Tensor<T> stack;  // [P, leading..., patch...]
  PatchGrid grid;
};

template <typename T>
Patches<T> extract_patches(const Tensor<T>& image, const std::vector<std::size_t>& patch,
                           const std::vector<std::size_t>& overlap) {
  Patches<T> out;
  out.grid = make_grid(image.shape(), patch, overlap);
  const auto& g = out.grid;
  Shape s{g.count()};
  for (std::size_t a = 0; a < g.lead_rank(); ++a) s.push_back(g.source[a]);
  for (auto p : patch) s.push_back(p);
  out.stack = Tensor<T>(s);
  const std::size_t per = shape_numel(s) / g.count();
  for (std::size_t k = 0; k < g.count(); ++k) {
    T* dst = out.stack.data() + k * per;
    detail::for_each_patch_element(g, g.origins[k],
                                   [&](std::size_t so, std::size_t po, const auto&, std::size_t) { dst[po] = image[so]; });
  }
  return out;
}

/// Weight-normalized overlap average of a patch stack back onto the grid's
/// source extents. Leading axes of the stack may differ from the source
/// (e.g. model output channels); the output takes them from the stack.
template <typename T>
Tensor<T> stitch(const Tensor<T>& stack, const PatchGrid& g) {
  const std::size_t sr = g.spatial_rank();
  if (stack.rank() < sr + 1 || stack.dim(0) != g.count())
    throw ShapeError("stitch: stack " + shape_str(stack.shape()) + " does not match a grid of " +
                     std::to_string(g.count()) + " patches");
  for (std::size_t a = 0; a < sr; ++a)
    if (stack.dim(stack.rank() - sr + a) != g.patch[a])
      throw ShapeError("stitch", stack.rank() - sr + a, stack.dim(stack.rank() - sr + a), g.patch[a]);
  PatchGrid og = g;
  og.source.assign(stack.shape().begin() + 1, stack.shape().end() - static_cast<std::ptrdiff_t>(sr));
  og.source.insert(og.source.end(), g.source.end() - static_cast<std::ptrdiff_t>(sr), g.source.end());
  if (g.count() == 1 && og.source == Shape(stack.shape().begin() + 1, stack.shape().end())) {
    Tensor<T> out(og.source);
    std::copy(stack.data(), stack.data() + stack.size(), out.data());
    return out;
  }
  std::vector<std::vector<double>> win;
  for (auto p : g.patch) win.push_back(triangular_window(p));
  const std::size_t n = shape_numel(og.source);
  std::vector<double> acc(n, 0.0), wsum(n, 0.0);
  const std::size_t per = stack.size() / g.count();
  for (std::size_t k = 0; k < g.count(); ++k) {
    const T* src = stack.data() + k * per;
    detail::for_each_patch_element(og, g.origins[k], [&](std::size_t so, std::size_t po, const auto& idx, std::size_t i) {
      double w = win[sr - 1][i];
      for (std::size_t a = 0; a + 1 < sr; ++a) w *= win[a][idx[a]];
      acc[so] += w * static_cast<double>(src[po]);
      wsum[so] += w;
    });
  }
  Tensor<T> out(og.source);
  for (std::size_t i = 0; i < n; ++i) {
    if (wsum[i] <= 0.0) throw ValueError("stitch: grid leaves an element uncovered");
    out[i] = static_cast<T>(acc[i] / wsum[i]);
  }
  return out;
}

inline nlohmann::json to_json(const PatchGrid& g) {
  return {{"source", g.source}, {"patch", g.patch}, {"stride", g.stride}, {"origins", g.origins}};
}

inline PatchGrid grid_from_json(const nlohmann::json& j) {
  PatchGrid g;
  try {
    g.source = j.at("source").get<Shape>();
    g.patch = j.at("patch").get<std::vector<std::size_t>>();
    g.stride = j.at("stride").get<std::vector<std::size_t>>();
    g.origins = j.at("origins").get<std::vector<std::vector<std::size_t>>>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("patch grid JSON: ") + ex.what());
  }
  if (g.patch.size() > g.source.size() || g.stride.size() != g.patch.size()) throw FormatError("patch grid JSON: rank mismatch");
  for (const auto& o : g.origins) {
    if (o.size() != g.patch.size()) throw FormatError("patch grid JSON: origin rank mismatch");
    for (std::size_t a = 0; a < o.size(); ++a)
      if (o[a] + g.patch[a] > g.source[g.lead_rank() + a]) throw FormatError("patch grid JSON: origin out of bounds");
  }
  return g;
}

// ---------------------------------------------------------------------------
// Spatial splits
// ---------------------------------------------------------------------------

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct SplitRanges {
  Range train, test, calibration;
};

inline SplitRanges ranges_from_sizes(std::size_t n_train, std::size_t n_test, std::size_t n_cal) {
  return {{0, n_train}, {n_train, n_train + n_test}, {n_train + n_test, n_train + n_test + n_cal}};
}

/// Boundaries at round(cumulative fraction * extent).
inline SplitRanges ranges_from_fractions(std::size_t extent, double f_train, double f_test, double f_cal) {
  if (f_train < 0 || f_test < 0 || f_cal < 0) throw ValueError("spatial_split: negative fraction");
  const double total = f_train + f_test + f_cal;
  if (std::abs(total - 1.0) > 1e-9) throw ValueError("spatial_split: fractions must sum to 1");
  const auto b1 = static_cast<std::size_t>(std::llround(f_train * static_cast<double>(extent)));
  const auto b2 = static_cast<std::size_t>(std::llround((f_train + f_test) * static_cast<double>(extent)));
  return {{0, b1}, {b1, b2}, {b2, extent}};
}

template <typename T>
struct SplitRegions {
  Tensor<T> train, test, calibration;
  SplitRanges ranges;
  std::size_t axis = 0;
};

/// Slice [r.begin, r.end) along `axis`.
template <typename T>
Tensor<T> slice_axis(const Tensor<T>& t, std::size_t axis, Range r) {
  if (axis >= t.rank()) throw ValueError("slice_axis: axis out of range");
  if (r.begin > r.end || r.end > t.dim(axis)) throw ValueError("slice_axis: range out of bounds");
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= t.dim(a);
  for (std::size_t a = axis + 1; a < t.rank(); ++a) inner *= t.dim(a);
  Shape s = t.shape();
  s[axis] = r.size();
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(t.data() + (o * t.dim(axis) + r.begin) * inner, t.data() + (o * t.dim(axis) + r.end) * inner,
              out.data() + o * r.size() * inner);
  return out;
}

template <typename T>
SplitRegions<T> spatial_split(const Tensor<T>& image, const SplitRanges& r, std::size_t axis) {
  if (axis >= image.rank()) throw ValueError("spatial_split: axis out of range");
  const std::array<Range, 3> rs{r.train, r.test, r.calibration};
  for (const auto& x : rs)
    if (x.begin > x.end || x.end > image.dim(axis)) throw ValueError("spatial_split: range out of bounds");
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j)
      if (rs[i].begin < rs[j].end && rs[j].begin < rs[i].end && rs[i].size() && rs[j].size())
        throw ValueError("spatial_split: ranges overlap");
  return {slice_axis(image, axis, r.train), slice_axis(image, axis, r.test), slice_axis(image, axis, r.calibration), r,
          axis};
}

inline nlohmann::json to_json(const SplitRanges& r) {
  return {{"train", {r.train.begin, r.train.end}},
          {"test", {r.test.begin, r.test.end}},
          {"calibration", {r.calibration.begin, r.calibration.end}}};
}

}  // namespace qens::tiling
