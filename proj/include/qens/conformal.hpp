#pragma once

// Conformalized quantile regression on pixel-level calibration data.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qens/error.hpp"
#include "qens/smsnet.hpp"
#include "qens/tensor.hpp"

namespace qens::conformal {

/// Correction value used when the calibration set is too small for the
/// requested miscoverage.
inline constexpr double kInsufficient = std::numeric_limits<double>::infinity();

struct CalibrationRecord {
  std::vector<double> scores;  // sorted ascending
  double alpha = 0.1;
  std::size_t n = 0;
  std::size_t k = 0;  // 1-based rank of the selected score
  double correction = 0.0;

  bool insufficient() const { return std::isinf(correction); }
};

namespace detail {

template <typename T>
void check_field(const QuantileField<T>& f, const Tensor<T>& truth, const char* op) {
  if (f.lower.shape() != truth.shape() || f.upper.shape() != truth.shape() || f.median.shape() != truth.shape())
    throw ShapeError(std::string(op) + ": field " + shape_str(f.median.shape()) + " vs truth " + shape_str(truth.shape()));
}

// Channel axis of a [C, spatial...] or [N, C, spatial...] tensor.
inline std::size_t channel_axis(const Shape& s, int spatial_rank) {
  return s.size() == static_cast<std::size_t>(spatial_rank) + 2 ? 1 : 0;
}

}  // namespace detail

/// s = max(lower - y, y - upper) per element; negative inside the interval.
template <typename T>
std::vector<double> nonconformity_scores(const QuantileField<T>& f, const Tensor<T>& truth) {
  detail::check_field(f, truth, "nonconformity_scores");
  std::vector<double> s(truth.size());
  for (std::size_t i = 0; i < truth.size(); ++i)
    s[i] = std::max(static_cast<double>(f.lower[i]) - truth[i], static_cast<double>(truth[i]) - f.upper[i]);
  return s;
}

/// Scores grouped by channel, pooled over every field in `fields`.
template <typename T>
std::vector<std::vector<double>> channel_scores(const std::vector<QuantileField<T>>& fields,
                                                const std::vector<Tensor<T>>& truths, int spatial_rank) {
  if (fields.size() != truths.size()) throw ShapeError("channel_scores: field/truth count mismatch");
  std::vector<std::vector<double>> out;
  for (std::size_t f = 0; f < fields.size(); ++f) {
    const auto s = nonconformity_scores(fields[f], truths[f]);
    const Shape& shp = truths[f].shape();
    std::size_t outer, C, inner;
    ops::detail::split_axis(shp, detail::channel_axis(shp, spatial_rank), outer, C, inner);
    if (out.empty()) out.resize(C);
    if (out.size() != C) throw ShapeError("channel_scores: channel count differs between fields");
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t c = 0; c < C; ++c)
        out[c].insert(out[c].end(), s.begin() + static_cast<std::ptrdiff_t>((o * C + c) * inner),
                      s.begin() + static_cast<std::ptrdiff_t>((o * C + c + 1) * inner));
  }
  return out;
}

/// correction = k-th smallest score with k = ceil((n + 1)(1 - alpha));
/// kInsufficient when k > n.
inline CalibrationRecord calibrate(std::vector<double> scores, double alpha) {
  if (scores.empty()) throw ValueError("calibrate: no calibration scores");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValueError("calibrate: alpha must lie in (0,1)");
  for (double s : scores)
    if (std::isnan(s)) throw ValueError("calibrate: NaN score");
  std::sort(scores.begin(), scores.end());
  CalibrationRecord r;
  r.alpha = alpha;
  r.n = scores.size();
  // Guard the product against rounding just above an integer.
  const double raw = static_cast<double>(r.n + 1) * (1.0 - alpha);
  r.k = static_cast<std::size_t>(std::ceil(raw - 1e-9 * raw));
  if (r.k < 1) r.k = 1;
  r.correction = r.k > r.n ? kInsufficient : scores[r.k - 1];
  r.scores = std::move(scores);
  return r;
}

struct ChannelCalibration {
  double alpha = 0.1;
  std::vector<CalibrationRecord> channels;

  std::vector<double> corrections() const {
    std::vector<double> c;
    for (const auto& r : channels) c.push_back(r.correction);
    return c;
  }
};

inline ChannelCalibration calibrate_channels(const std::vector<std::vector<double>>& scores, double alpha) {
  ChannelCalibration cc;
  cc.alpha = alpha;
  for (const auto& s : scores) cc.channels.push_back(calibrate(s, alpha));
  return cc;
}

/// Widens (or, for negative corrections, narrows) each channel's interval.
/// A narrowing correction is truncated at the median on each side, so
/// lower <= median <= upper still holds. The result is re-clamped to the
/// domain range when one is given.
template <typename T>
QuantileField<T> apply_correction(const QuantileField<T>& f, const std::vector<double>& corrections, int spatial_rank,
                                  const ClampRange<T>& clamp = {}) {
  for (double c : corrections)
    if (std::isinf(c) || std::isnan(c))
      throw ValueError("apply_correction: calibration set too small for the requested alpha; "
                       "use more calibration data or a larger alpha");
  QuantileField<T> out = f;
  const Shape& shp = f.median.shape();
  std::size_t outer, C, inner;
  ops::detail::split_axis(shp, detail::channel_axis(shp, spatial_rank), outer, C, inner);
  if (corrections.size() != C && corrections.size() != 1)
    throw ShapeError("apply_correction: " + std::to_string(corrections.size()) + " corrections for " +
                     std::to_string(C) + " channels");
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      const T corr = static_cast<T>(corrections.size() == 1 ? corrections[0] : corrections[c]);
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t j = (o * C + c) * inner + i;
        T lo = f.lower[j] - corr;
        T hi = f.upper[j] + corr;
        if (corr < T{0}) {
          lo = std::min(lo, f.median[j]);
          hi = std::max(hi, f.median[j]);
        }
        if (clamp.enabled()) {
          const T l = clamp.lo.size() == 1 ? clamp.lo[0] : clamp.lo[c];
          const T h = clamp.hi.size() == 1 ? clamp.hi[0] : clamp.hi[c];
          lo = std::clamp(lo, l, h);
          hi = std::clamp(hi, l, h);
        }
        out.lower[j] = lo;
        out.upper[j] = hi;
      }
    }
  return out;
}

template <typename T>
QuantileField<T> apply_correction(const QuantileField<T>& f, const CalibrationRecord& r, int spatial_rank,
                                  const ClampRange<T>& clamp = {}) {
  return apply_correction(f, std::vector<double>{r.correction}, spatial_rank, clamp);
}

/// Fraction of elements with lower <= y <= upper.
template <typename T>
double coverage(const QuantileField<T>& f, const Tensor<T>& truth) {
  detail::check_field(f, truth, "coverage");
  if (truth.size() == 0) throw ShapeError("coverage: empty input");
  std::size_t inside = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) inside += (f.lower[i] <= truth[i] && truth[i] <= f.upper[i]) ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(truth.size());
}

/// Empirical quantile with linear interpolation between order statistics.
inline double empirical_quantile(std::vector<double> v, double q) {
  if (v.empty()) throw ValueError("empirical_quantile: no values");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

/// (q95 - q05 of the clean reference) / mean(upper - lower).
template <typename T>
double width_ratio(const QuantileField<T>& f, const Tensor<T>& reference) {
  detail::check_field(f, reference, "width_ratio");
  std::vector<double> ref(reference.values().begin(), reference.values().end());
  const double spread = empirical_quantile(ref, 0.95) - empirical_quantile(ref, 0.05);
  double w = 0.0;
  for (std::size_t i = 0; i < f.lower.size(); ++i) w += static_cast<double>(f.upper[i]) - f.lower[i];
  w /= static_cast<double>(f.lower.size());
  if (!(w > 0.0)) throw ValueError("width_ratio: mean predicted width is zero");
  return spread / w;
}

inline nlohmann::json to_json(const ChannelCalibration& c) {
  nlohmann::json j;
  j["alpha"] = c.alpha;
  nlohmann::json ch = nlohmann::json::array();
  for (const auto& r : c.channels) {
    nlohmann::json e;
    e["n"] = r.n;
    e["k"] = r.k;
    if (r.insufficient()) e["correction"] = nullptr;
    else e["correction"] = r.correction;
    ch.push_back(e);
  }
  j["channels"] = ch;
  return j;
}

inline ChannelCalibration calibration_from_json(const nlohmann::json& j) {
  ChannelCalibration c;
  try {
    c.alpha = j.at("alpha").get<double>();
    for (const auto& e : j.at("channels")) {
      CalibrationRecord r;
      r.alpha = c.alpha;
      r.n = e.at("n").get<std::size_t>();
      r.k = e.at("k").get<std::size_t>();
      r.correction = e.at("correction").is_null() ? kInsufficient : e.at("correction").get<double>();
      c.channels.push_back(r);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("calibration JSON: ") + ex.what());
  }
  return c;
}

}  // namespace qens::conformal
