#pragma once

// Ensembles of independently generated networks: construction, training
// fan-out, aggregation, metrics, exceedance maps and the two sweeps.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "qens/conformal.hpp"
#include "qens/error.hpp"
#include "qens/graph.hpp"
#include "qens/io.hpp"
#include "qens/rng.hpp"
#include "qens/smsnet.hpp"
#include "qens/tensor.hpp"

namespace qens::ensemble {

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Work is handed out
/// in index order; the first failure (lowest index) is rethrown after all
/// workers stop.
template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  const std::size_t w = std::max<std::size_t>(1, std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers))));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex mu;
  std::size_t err_index = n;
  std::exception_ptr err;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < w; ++t)
    pool.emplace_back([&] {
      while (!failed.load()) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(mu);
          if (i < err_index) {
            err_index = i;
            err = std::current_exception();
          }
          failed = true;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

enum class Aggregation { median, mean };

inline const char* aggregation_name(Aggregation a) { return a == Aggregation::median ? "median" : "mean"; }

inline Aggregation aggregation_from_name(const std::string& s) {
  if (s == "median") return Aggregation::median;
  if (s == "mean") return Aggregation::mean;
  throw ValueError("unknown aggregation rule '" + s + "' (expected median or mean)");
}

struct Member {
  std::string model_file;
  std::uint64_t graph_seed = 0;
  std::uint64_t weight_seed = 0;
  std::uint64_t task_seed = 0;
  NetworkSpec spec;
};

struct EnsembleManifest {
  GraphHyperparams hyper;
  std::uint64_t master_seed = 0;
  int out_channels = 1;
  int head_width = 0;
  double q_lo = 0.05;
  double q_hi = 0.95;
  Aggregation aggregation = Aggregation::median;
  std::string calibration_file;
  std::vector<Member> members;
};

/// n member specs with graph/weight/task seeds drawn from named substreams
/// of `master_seed`.
inline EnsembleManifest build_ensemble(int n, const GraphHyperparams& h, std::uint64_t master_seed) {
  if (n < 1) throw ValueError("build_ensemble: member count must be >= 1");
  h.validate();
  EnsembleManifest m;
  m.hyper = h;
  m.master_seed = master_seed;
  for (int i = 0; i < n; ++i) {
    Member mem;
    const auto idx = static_cast<std::uint64_t>(i);
    mem.graph_seed = substream(master_seed, "graph", idx);
    mem.weight_seed = substream(master_seed, "weights", idx);
    mem.task_seed = substream(master_seed, "tasks", idx);
    GraphHyperparams hi = h;
    hi.seed = mem.graph_seed;
    mem.spec = sample_graph(hi);
    mem.model_file = "member_" + std::to_string(i) + ".bnm";
    m.members.push_back(std::move(mem));
  }
  return m;
}

template <typename T>
ModelOptions<T> model_options(const EnsembleManifest& m) {
  ModelOptions<T> o;
  o.out_channels = m.out_channels;
  o.head_width = m.head_width;
  o.q_lo = m.q_lo;
  o.q_hi = m.q_hi;
  return o;
}

/// Freshly initialized (untrained) model for member i.
template <typename T>
Model<T> materialize(const EnsembleManifest& m, std::size_t i, const ClampRange<T>& clamp = {}) {
  ModelOptions<T> o = model_options<T>(m);
  o.clamp = clamp;
  return Model<T>(m.members.at(i).spec, o, m.members.at(i).weight_seed);
}

inline nlohmann::json to_json(const EnsembleManifest& m) {
  nlohmann::json j;
  j["hyper"] = to_json(m.hyper);
  j["master_seed"] = m.master_seed;
  j["out_channels"] = m.out_channels;
  j["head_width"] = m.head_width;
  j["q_lo"] = m.q_lo;
  j["q_hi"] = m.q_hi;
  j["aggregation"] = aggregation_name(m.aggregation);
  j["calibration_file"] = m.calibration_file;
  j["members"] = nlohmann::json::array();
  for (const auto& mem : m.members)
    j["members"].push_back({{"model_file", mem.model_file},
                            {"graph_seed", mem.graph_seed},
                            {"weight_seed", mem.weight_seed},
                            {"task_seed", mem.task_seed},
                            {"spec", to_json(mem.spec)}});
  return j;
}

inline EnsembleManifest manifest_from_json(const nlohmann::json& j) {
  EnsembleManifest m;
  try {
    m.hyper = hyperparams_from_json(j.at("hyper"));
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.out_channels = j.at("out_channels").get<int>();
    m.head_width = j.at("head_width").get<int>();
    m.q_lo = j.at("q_lo").get<double>();
    m.q_hi = j.at("q_hi").get<double>();
    m.aggregation = aggregation_from_name(j.at("aggregation").get<std::string>());
    m.calibration_file = j.value("calibration_file", std::string());
    for (const auto& e : j.at("members")) {
      Member mem;
      mem.model_file = e.at("model_file").get<std::string>();
      mem.graph_seed = e.at("graph_seed").get<std::uint64_t>();
      mem.weight_seed = e.at("weight_seed").get<std::uint64_t>();
      mem.task_seed = e.at("task_seed").get<std::uint64_t>();
      mem.spec = spec_from_json(e.at("spec"));
      m.members.push_back(std::move(mem));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("ensemble manifest: ") + ex.what());
  }
  if (m.members.empty()) throw FormatError("ensemble manifest: no members");
  return m;
}

// ---------------------------------------------------------------------------
// Aggregation and metrics
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
T reduce(std::vector<T>& v, Aggregation rule) {
  if (rule == Aggregation::mean) {
    double s = 0.0;
    for (T x : v) s += static_cast<double>(x);
    return static_cast<T>(s / static_cast<double>(v.size()));
  }
  const std::size_t n = v.size(), h = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h), v.end());
  if (n % 2 == 1) return v[h];
  const T hi = v[h];
  const T lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(h));
  return static_cast<T>((static_cast<double>(lo) + static_cast<double>(hi)) / 2.0);
}

}  // namespace detail

/// Elementwise median (or mean) across members for each quantile level.
/// Order statistics are monotone, so lower <= median <= upper survives.
template <typename T>
QuantileField<T> aggregate(const std::vector<QuantileField<T>>& fields, Aggregation rule = Aggregation::median) {
  if (fields.empty()) throw ValueError("aggregate: no member fields");
  const Shape& s = fields[0].median.shape();
  for (std::size_t m = 0; m < fields.size(); ++m) {
    const auto& f = fields[m];
    if (f.median.shape() != s || f.lower.shape() != s || f.upper.shape() != s)
      throw ShapeError("aggregate: member " + std::to_string(m) + " has shape " + shape_str(f.median.shape()) +
                       ", expected " + shape_str(s));
    if (f.q_lo != fields[0].q_lo || f.q_hi != fields[0].q_hi)
      throw ValueError("aggregate: member " + std::to_string(m) + " has different quantile levels");
  }
  QuantileField<T> out{Tensor<T>(s), Tensor<T>(s), Tensor<T>(s), fields[0].q_lo, fields[0].q_hi};
  std::vector<T> buf(fields.size());
  auto run = [&](Tensor<T> QuantileField<T>::*level) {
    for (std::size_t i = 0; i < out.median.size(); ++i) {
      for (std::size_t m = 0; m < fields.size(); ++m) buf[m] = (fields[m].*level)[i];
      (out.*level)[i] = detail::reduce(buf, rule);
    }
  };
  run(&QuantileField<T>::lower);
  run(&QuantileField<T>::median);
  run(&QuantileField<T>::upper);
  return out;
}

/// Pearson correlation over all elements.
template <typename A, typename B>
double correlation(const Tensor<A>& pred, const Tensor<B>& truth) {
  if (pred.shape() != truth.shape())
    throw ShapeError("correlation: " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  const std::size_t n = pred.size();
  if (n == 0) throw ValueError("correlation: empty input");
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += static_cast<double>(pred[i]);
    mb += static_cast<double>(truth[i]);
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = static_cast<double>(pred[i]) - ma, b = static_cast<double>(truth[i]) - mb;
    sab += a * b;
    saa += a * a;
    sbb += b * b;
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) throw ValueError("correlation: zero variance input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// True where the lower bound of `channel` is >= threshold. Fields are
/// [C, spatial...]; the map has the spatial extents.
template <typename T>
Tensor<std::uint8_t> exceedance_map(const QuantileField<T>& f, double threshold, int channel) {
  const Shape& s = f.lower.shape();
  if (s.empty() || channel < 0 || static_cast<std::size_t>(channel) >= s[0])
    throw ValueError("exceedance_map: channel " + std::to_string(channel) + " out of range for " + shape_str(s));
  const Shape sp(s.begin() + 1, s.end());
  const std::size_t inner = shape_numel(sp);
  Tensor<std::uint8_t> out(sp);
  const T* lo = f.lower.data() + static_cast<std::size_t>(channel) * inner;
  for (std::size_t i = 0; i < inner; ++i) out[i] = static_cast<double>(lo[i]) >= threshold ? 1 : 0;
  return out;
}

/// Concatenates per-image tensors [C, spatial...] into [N, C, spatial...].
template <typename T>
Tensor<T> stack_images(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ValueError("stack_images: no images");
  Shape s{xs.size()};
  s.insert(s.end(), xs[0].shape().begin(), xs[0].shape().end());
  Tensor<T> out(s);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].shape() != xs[0].shape()) throw ShapeError("stack_images: inconsistent image shapes");
    std::copy(xs[i].data(), xs[i].data() + xs[i].size(), out.data() + i * xs[0].size());
  }
  return out;
}

template <typename T>
QuantileField<T> stack_fields(const std::vector<QuantileField<T>>& fs) {
  std::vector<Tensor<T>> lo, me, up;
  for (const auto& f : fs) {
    lo.push_back(f.lower);
    me.push_back(f.median);
    up.push_back(f.upper);
  }
  return {stack_images(lo), stack_images(me), stack_images(up), fs.at(0).q_lo, fs.at(0).q_hi};
}

struct MetricsReport {
  double cc = 0.0;
  double width_ratio = 0.0;
  double coverage = 0.0;
  std::vector<double> corrections;
  std::vector<double> member_cc;  // per-member median CC when available
};

/// Calibrates on the (aggregated) calibration fields, applies the
/// per-channel correction to the test fields and scores the result. CC is
/// the Pearson correlation of the median over all test pixels (0 when the
/// median is constant).
template <typename T>
MetricsReport evaluate(const std::vector<QuantileField<T>>& cal_fields, const std::vector<Tensor<T>>& cal_truth,
                       const std::vector<QuantileField<T>>& test_fields, const std::vector<Tensor<T>>& test_truth,
                       double alpha, int spatial_rank, const ClampRange<T>& clamp = {}) {
  const auto scores = conformal::channel_scores(cal_fields, cal_truth, spatial_rank);
  const auto cal = conformal::calibrate_channels(scores, alpha);
  const auto corr = cal.corrections();
  std::vector<QuantileField<T>> fixed;
  for (const auto& f : test_fields) fixed.push_back(conformal::apply_correction(f, corr, spatial_rank, clamp));
  const QuantileField<T> all = stack_fields(fixed);
  const Tensor<T> truth = stack_images(test_truth);
  MetricsReport r;
  try {
    r.cc = correlation(all.median, truth);
  } catch (const ValueError&) {
    // A constant median carries no signal.
    r.cc = 0.0;
  }
  r.coverage = conformal::coverage(all, truth);
  r.width_ratio = conformal::width_ratio(all, truth);
  r.corrections = corr;
  return r;
}

/// Quantile-level predictions of one member on a set of inputs.
template <typename T>
std::vector<QuantileField<T>> predict_all(const Model<T>& m, const std::vector<Tensor<T>>& inputs) {
  std::vector<QuantileField<T>> out;
  for (const auto& x : inputs) out.push_back(m.predict_quantiles(x));
  return out;
}

// ---------------------------------------------------------------------------
// Trend test
// ---------------------------------------------------------------------------

struct TrendResult {
  double s = 0.0;
  double var = 0.0;
  double z = 0.0;
  double p_increasing = 1.0;  // one-sided
  double p_two_sided = 1.0;
};

/// Mann-Kendall statistic S = sum_{i<j} sign(x_j - x_i) sign(y_j - y_i)
/// with the tie-corrected normal approximation (Kendall tau-b variance).
/// With x strictly increasing this is the classic Mann-Kendall test; with
/// repeated x (replicates per level) ties in x are excluded from S.
inline TrendResult mann_kendall(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3) throw ValueError("mann_kendall: need >= 3 paired observations");
  const std::size_t n = x.size();
  auto sgn = [](double v) { return (v > 0) - (v < 0); };
  double S = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) S += sgn(x[j] - x[i]) * sgn(y[j] - y[i]);
  auto tie_groups = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::vector<double> t;
    for (std::size_t i = 0; i < v.size();) {
      std::size_t j = i;
      while (j < v.size() && v[j] == v[i]) ++j;
      if (j - i > 1) t.push_back(static_cast<double>(j - i));
      i = j;
    }
    return t;
  };
  const auto tx = tie_groups(x), ty = tie_groups(y);
  const double dn = static_cast<double>(n);
  double v0 = dn * (dn - 1) * (2 * dn + 5);
  double a1 = 0, a2 = 0, b1 = 0, b2 = 0;
  for (double t : tx) {
    v0 -= t * (t - 1) * (2 * t + 5);
    a1 += t * (t - 1) * (t - 2);
    a2 += t * (t - 1);
  }
  for (double u : ty) {
    v0 -= u * (u - 1) * (2 * u + 5);
    b1 += u * (u - 1) * (u - 2);
    b2 += u * (u - 1);
  }
  TrendResult r;
  r.s = S;
  r.var = v0 / 18.0 + a1 * b1 / (9.0 * dn * (dn - 1) * (dn - 2)) + a2 * b2 / (2.0 * dn * (dn - 1));
  if (r.var <= 0) return r;
  const double cc = S > 0 ? S - 1 : (S < 0 ? S + 1 : 0);  // continuity correction
  r.z = cc / std::sqrt(r.var);
  r.p_increasing = 0.5 * std::erfc(r.z / std::sqrt(2.0));
  r.p_two_sided = std::erfc(std::abs(r.z) / std::sqrt(2.0));
  return r;
}

// ---------------------------------------------------------------------------
// Ensemble-size sweep
// ---------------------------------------------------------------------------

/// Predictions of a trained member pool on the calibration and test splits.
template <typename T>
struct PoolPredictions {
  std::vector<std::vector<QuantileField<T>>> calibration;  // [member][image]
  std::vector<std::vector<QuantileField<T>>> test;         // [member][image]
  std::vector<Tensor<T>> calibration_truth;
  std::vector<Tensor<T>> test_truth;
  int spatial_rank = 2;
};

struct SizeSweepRow {
  int size = 0;
  int repeat = 0;
  std::vector<std::size_t> members;
  double cc = 0.0;
  double width_ratio = 0.0;
  double coverage = 0.0;
};

struct SizeSweepConfig {
  std::vector<int> sizes{1, 2, 5, 10, 25};
  int repeats = 20;
  double alpha = 0.1;
  std::uint64_t seed = 0;
  Aggregation aggregation = Aggregation::median;
};

/// Members drawn without replacement from a pool of `pool` using the
/// "subsets" substream for (size, repeat).
inline std::vector<std::size_t> draw_subset(std::size_t pool, int size, int repeat, std::uint64_t seed) {
  if (size < 1 || static_cast<std::size_t>(size) > pool)
    throw ValueError("ensemble size " + std::to_string(size) + " cannot be drawn from a pool of " + std::to_string(pool));
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(substream(seed, "subsets", (static_cast<std::uint64_t>(size) << 32) | static_cast<std::uint32_t>(repeat)));
  for (std::size_t i = 0; i < static_cast<std::size_t>(size); ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(pool - i));
    std::swap(idx[i], idx[std::min(j, pool - 1)]);
  }
  idx.resize(static_cast<std::size_t>(size));
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
MetricsReport evaluate_subset(const PoolPredictions<T>& pool, const std::vector<std::size_t>& members, double alpha,
                              Aggregation rule = Aggregation::median) {
  auto agg = [&](const std::vector<std::vector<QuantileField<T>>>& preds) {
    std::vector<QuantileField<T>> out;
    for (std::size_t img = 0; img < preds.at(members.at(0)).size(); ++img) {
      std::vector<QuantileField<T>> fs;
      for (auto m : members) fs.push_back(preds.at(m).at(img));
      out.push_back(aggregate(fs, rule));
    }
    return out;
  };
  return evaluate(agg(pool.calibration), pool.calibration_truth, agg(pool.test), pool.test_truth, alpha,
                  pool.spatial_rank);
}

template <typename T>
std::vector<SizeSweepRow> ensemble_size_sweep(const PoolPredictions<T>& pool, const SizeSweepConfig& cfg) {
  const std::size_t n = pool.test.size();
  if (n == 0 || pool.calibration.size() != n) throw ValueError("ensemble_size_sweep: empty or inconsistent pool");
  if (cfg.repeats < 1) throw ValueError("ensemble_size_sweep: repeats must be >= 1");
  for (int s : cfg.sizes)
    if (s < 1 || static_cast<std::size_t>(s) > n)
      throw ValueError("ensemble_size_sweep: pool of " + std::to_string(n) + " is too small for size " + std::to_string(s));
  std::vector<SizeSweepRow> rows;
  for (int s : cfg.sizes)
    for (int r = 0; r < cfg.repeats; ++r) {
      SizeSweepRow row;
      row.size = s;
      row.repeat = r;
      row.members = draw_subset(n, s, r, cfg.seed);
      const auto m = evaluate_subset(pool, row.members, cfg.alpha, cfg.aggregation);
      row.cc = m.cc;
      row.width_ratio = m.width_ratio;
      row.coverage = m.coverage;
      rows.push_back(std::move(row));
    }
  return rows;
}

struct SizeSummary {
  int size = 0;
  std::vector<double> cc_quantiles;  // at summary_levels()
  double median_cc = 0.0;
  double median_width_ratio = 0.0;
  double median_coverage = 0.0;
};

inline const std::vector<double>& summary_levels() {
  static const std::vector<double> q{0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95};
  return q;
}

inline std::vector<SizeSummary> summarize(const std::vector<SizeSweepRow>& rows) {
  std::map<int, std::vector<const SizeSweepRow*>> by;
  for (const auto& r : rows) by[r.size].push_back(&r);
  std::vector<SizeSummary> out;
  for (const auto& [size, rs] : by) {
    std::vector<double> cc, wr, cov;
    for (const auto* r : rs) {
      cc.push_back(r->cc);
      wr.push_back(r->width_ratio);
      cov.push_back(r->coverage);
    }
    SizeSummary s;
    s.size = size;
    for (double q : summary_levels()) s.cc_quantiles.push_back(conformal::empirical_quantile(cc, q));
    s.median_cc = conformal::empirical_quantile(cc, 0.5);
    s.median_width_ratio = conformal::empirical_quantile(wr, 0.5);
    s.median_coverage = conformal::empirical_quantile(cov, 0.5);
    out.push_back(s);
  }
  return out;
}

inline std::string size_sweep_csv(const std::vector<SizeSweepRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "size,repeat,members,cc,width_ratio,coverage\n";
  for (const auto& r : rows) {
    os << r.size << ',' << r.repeat << ',';
    for (std::size_t i = 0; i < r.members.size(); ++i) os << (i ? ";" : "") << r.members[i];
    os << ',' << r.cc << ',' << r.width_ratio << ',' << r.coverage << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep
// ---------------------------------------------------------------------------

struct SweepGrid {
  std::vector<double> alphas{0.0, 1.5};
  std::vector<double> gammas{0.0, 1.5};
  std::vector<int> depths{5, 25};
  int per_cell = 3;

  static SweepGrid full() {
    return {{0.0, 0.5, 1.0, 1.5}, {0.0, 0.5, 1.0, 1.5}, {5, 10, 15, 20, 25, 30}, 10};
  }
};

struct SweepRow {
  double alpha = 0.0;
  double gamma = 0.0;
  int depth = 0;
  int index = 0;
  std::uint64_t seed = 0;
  long long params = 0;
  int longest_path = 0;
  double avg_degree = 0.0;
  double cc = 0.0;
  std::string bin;  // filled once the full table is known
};

inline std::string sweep_key(double alpha, double gamma, int depth, int index) {
  std::ostringstream os;
  os.precision(17);
  os << alpha << '/' << gamma << '/' << depth << '/' << index;
  return os.str();
}

inline const char* kSweepHeader = "alpha,gamma,depth,index,seed,params,longest_path,avg_degree,cc,bin";

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << kSweepHeader << '\n';
  for (const auto& r : rows)
    os << r.alpha << ',' << r.gamma << ',' << r.depth << ',' << r.index << ',' << r.seed << ',' << r.params << ','
       << r.longest_path << ',' << r.avg_degree << ',' << r.cc << ',' << r.bin << '\n';
  return os.str();
}

inline std::vector<SweepRow> parse_sweep_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kSweepHeader) throw FormatError("sweep CSV: unexpected header");
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 10) throw FormatError("sweep CSV: expected 10 fields in '" + line + "'");
    try {
      SweepRow r;
      r.alpha = std::stod(f[0]);
      r.gamma = std::stod(f[1]);
      r.depth = std::stoi(f[2]);
      r.index = std::stoi(f[3]);
      r.seed = std::stoull(f[4]);
      r.params = std::stoll(f[5]);
      r.longest_path = std::stoi(f[6]);
      r.avg_degree = std::stod(f[7]);
      r.cc = std::stod(f[8]);
      r.bin = f[9];
      rows.push_back(r);
    } catch (const std::exception&) {
      throw FormatError("sweep CSV: malformed row '" + line + "'");
    }
  }
  return rows;
}

/// Assigns quantile-bin labels by CC across the whole table.
inline void assign_bins(std::vector<SweepRow>& rows, const std::vector<double>& edges = default_bin_edges()) {
  std::vector<double> cc;
  for (const auto& r : rows) cc.push_back(r.cc);
  const auto labels = bin_labels(bin_by_quantiles(cc, edges));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].bin = labels[i];
}

struct SweepConfig {
  SweepGrid grid;
  GraphHyperparams base;  // depth/alpha/gamma/seed are overwritten per network
  TrainConfig train;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string checkpoint;  // CSV path; completed networks are skipped on resume
};

/// Trains grid.per_cell networks per (alpha, gamma, depth) cell and records
/// graph statistics plus the median's CC against the clean test targets.
/// Completed networks are appended to the checkpoint after each one.
template <typename T>
std::vector<SweepRow> hyperparameter_sweep(const SweepConfig& cfg, const std::vector<ImagePair<T>>& train_data,
                                           const std::vector<ImagePair<T>>& test_data) {
  if (cfg.grid.per_cell < 1) throw ValueError("hyperparameter_sweep: per_cell must be >= 1");
  if (test_data.empty()) throw ValueError("hyperparameter_sweep: empty test set");
  std::vector<SweepRow> todo;
  for (int depth : cfg.grid.depths)
    for (double a : cfg.grid.alphas)
      for (double g : cfg.grid.gammas)
        for (int i = 0; i < cfg.grid.per_cell; ++i) {
          SweepRow r;
          r.alpha = a;
          r.gamma = g;
          r.depth = depth;
          r.index = i;
          r.seed = substream(cfg.seed, "sweep:" + sweep_key(a, g, depth, i));
          todo.push_back(r);
        }
  std::map<std::string, SweepRow> done;
  if (!cfg.checkpoint.empty() && std::filesystem::exists(cfg.checkpoint))
    for (const auto& r : parse_sweep_csv(io::read_text(cfg.checkpoint))) done[sweep_key(r.alpha, r.gamma, r.depth, r.index)] = r;

  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < todo.size(); ++i)
    if (!done.count(sweep_key(todo[i].alpha, todo[i].gamma, todo[i].depth, todo[i].index))) pending.push_back(i);

  std::vector<Tensor<T>> test_in, test_truth;
  for (const auto& p : test_data) {
    test_in.push_back(p.noisy);
    test_truth.push_back(p.target);
  }
  std::mutex mu;
  parallel_for(pending.size(), cfg.workers, [&](std::size_t k) {
    SweepRow r = todo[pending[k]];
    GraphHyperparams h = cfg.base;
    h.depth = r.depth;
    h.alpha = r.alpha;
    h.gamma = r.gamma;
    h.seed = substream(r.seed, "graph");
    const NetworkSpec spec = sample_graph(h);
    ModelOptions<T> mo;
    mo.out_channels = static_cast<int>(train_data.at(0).target.dim(0));
    mo.q_lo = cfg.train.q_lo;
    mo.q_hi = cfg.train.q_hi;
    Model<T> model(spec, mo, substream(r.seed, "weights"));
    TrainConfig tc = cfg.train;
    tc.task_switch_seed = substream(r.seed, "tasks");
    train(model, train_data, tc);
    std::vector<Tensor<T>> med;
    for (const auto& x : test_in) med.push_back(model.predict_quantiles(x).median);
    const GraphStats st = graph_stats(spec, h.in_channels, h.latent_dim, mo.head_width);
    r.params = model.parameter_count();
    r.longest_path = st.longest_path;
    r.avg_degree = st.avg_degree;
    try {
      r.cc = correlation(stack_images(med), stack_images(test_truth));
    } catch (const ValueError&) {
      // A constant median carries no signal.
      r.cc = 0.0;
    }
    std::lock_guard<std::mutex> lk(mu);
    done[sweep_key(r.alpha, r.gamma, r.depth, r.index)] = r;
    if (!cfg.checkpoint.empty()) {
      std::vector<SweepRow> snapshot;
      for (const auto& t : todo) {
        auto it = done.find(sweep_key(t.alpha, t.gamma, t.depth, t.index));
        if (it != done.end()) snapshot.push_back(it->second);
      }
      io::write_text(cfg.checkpoint, sweep_csv(snapshot));
    }
  });
  std::vector<SweepRow> rows;
  for (const auto& t : todo) rows.push_back(done.at(sweep_key(t.alpha, t.gamma, t.depth, t.index)));
  assign_bins(rows);
  return rows;
}

}  // namespace qens::ensemble
