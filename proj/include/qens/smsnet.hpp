#pragma once

// Sparse mixed-scale network: a sampled NetworkSpec materialized as dilated
// convolutions on its edges, channel concatenation at its nodes, a latent
// encoder output at the sink and three quantile projection heads.
//
// Edges into the sink are 1x1 linear maps to latent_dim channels whose
// outputs are summed, which equals one 1x1 convolution over the concatenated
// sink inputs. Every other edge is conv + bias + ReLU.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qens/adam.hpp"
#include "qens/autodiff.hpp"
#include "qens/conv.hpp"
#include "qens/graph.hpp"
#include "qens/rng.hpp"
#include "qens/tensor.hpp"

namespace qens {

enum class Task : int { median = 0, lower = 1, upper = 2 };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::median: return "median";
    case Task::lower: return "lower";
    case Task::upper: return "upper";
  }
  return "?";
}

/// Per-channel [lo, hi] domain limits; empty vectors mean "no clamping".
template <typename T>
struct ClampRange {
  std::vector<T> lo;
  std::vector<T> hi;
  bool enabled() const { return !lo.empty(); }
};

template <typename T>
struct QuantileField {
  Tensor<T> lower;
  Tensor<T> median;
  Tensor<T> upper;
  double q_lo = 0.05;
  double q_hi = 0.95;
};

template <typename T>
struct ModelOptions {
  int out_channels = 1;
  int head_width = 0;  // 0: same as latent_dim
  ClampRange<T> clamp;
  double q_lo = 0.05;
  double q_hi = 0.95;
};

template <typename T>
struct Head {
  Parameter<T> w1, b1, w2, b2, w3, b3;

  std::vector<Parameter<T>*> params() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
  std::vector<const Parameter<T>*> params() const { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
};

/// Cache bookkeeping from an inference pass, in channels per batch element.
struct CacheStats {
  long long peak_live_channels = 0;
  long long keep_all_channels = 0;
};

template <typename T>
class Model {
 public:
  Model() = default;

  /// Builds a model for `spec` with Kaiming fan-in initialization (std
  /// sqrt(2 / fan_in) before ReLU, sqrt(1 / fan_in) for linear outputs) and
  /// zero biases.
  Model(NetworkSpec spec, ModelOptions<T> opt, std::uint64_t weight_seed) : spec_(std::move(spec)), opt_(std::move(opt)) {
    if (auto err = validate_spec(spec_); !err.empty()) throw ValueError("model: invalid spec: " + err);
    if (opt_.out_channels < 1) throw ValueError("model: out_channels must be >= 1");
    if (!(opt_.q_lo > 0 && opt_.q_lo < 0.5 && opt_.q_hi > 0.5 && opt_.q_hi < 1))
      throw ValueError("model: quantile levels must satisfy 0 < q_lo < 0.5 < q_hi < 1");
    if (opt_.head_width <= 0) opt_.head_width = latent_dim();
    if (opt_.clamp.enabled()) {
      const auto n = opt_.clamp.lo.size();
      if (n != opt_.clamp.hi.size() || (n != 1 && n != static_cast<std::size_t>(opt_.out_channels)))
        throw ValueError("model: clamp range must have 1 or out_channels entries");
    }
    Rng rng = make_rng(weight_seed);
    const auto ch = node_channels(spec_, in_channels());
    const int sr = spatial_rank();
    long long sink_fan_in = 0;
    for (const auto& e : spec_.edges)
      if (e.dst == spec_.output_node()) sink_fan_in += ch[static_cast<std::size_t>(e.src)];
    for (const auto& e : spec_.edges) {
      const bool to_sink = e.dst == spec_.output_node();
      const std::size_t out = static_cast<std::size_t>(to_sink ? latent_dim() : e.channels);
      const std::size_t in = static_cast<std::size_t>(ch[static_cast<std::size_t>(e.src)]);
      Shape ks{out, in};
      std::size_t taps = 1;
      for (int a = 0; a < sr; ++a) {
        ks.push_back(static_cast<std::size_t>(e.kernel));
        taps *= static_cast<std::size_t>(e.kernel);
      }
      const double fan_in = to_sink ? static_cast<double>(sink_fan_in) : static_cast<double>(in * taps);
      const double gain = to_sink ? 1.0 : 2.0;
      const std::string tag = "edge_" + std::to_string(e.src) + "_" + std::to_string(e.dst);
      edges_.push_back({Parameter<T>(tag + ".weight", random_tensor(ks, std::sqrt(gain / fan_in), rng)),
                        Parameter<T>(tag + ".bias", Tensor<T>({out}))});
    }
    const std::size_t d = static_cast<std::size_t>(latent_dim());
    const std::size_t w = static_cast<std::size_t>(opt_.head_width);
    const std::size_t c = static_cast<std::size_t>(opt_.out_channels);
    const char* names[3] = {"head_median", "head_lower", "head_upper"};
    for (int h = 0; h < 3; ++h) {
      const std::string n = names[h];
      heads_[h].w1 = Parameter<T>(n + ".w1", random_tensor({w, d}, std::sqrt(2.0 / d), rng));
      heads_[h].b1 = Parameter<T>(n + ".b1", Tensor<T>({w}));
      heads_[h].w2 = Parameter<T>(n + ".w2", random_tensor({w, w}, std::sqrt(2.0 / w), rng));
      heads_[h].b2 = Parameter<T>(n + ".b2", Tensor<T>({w}));
      heads_[h].w3 = Parameter<T>(n + ".w3", random_tensor({c, w}, std::sqrt(1.0 / w), rng));
      heads_[h].b3 = Parameter<T>(n + ".b3", Tensor<T>({c}));
    }
  }

  const NetworkSpec& spec() const { return spec_; }
  const ModelOptions<T>& options() const { return opt_; }
  ModelOptions<T>& options() { return opt_; }
  int in_channels() const { return spec_.hyper.in_channels; }
  int out_channels() const { return opt_.out_channels; }
  int latent_dim() const { return spec_.hyper.latent_dim; }
  int spatial_rank() const { return spec_.hyper.spatial_rank; }

  struct EdgeParams {
    Parameter<T> weight;
    Parameter<T> bias;
  };
  std::vector<EdgeParams>& edge_params() { return edges_; }
  const std::vector<EdgeParams>& edge_params() const { return edges_; }
  Head<T>& head(Task t) { return heads_[static_cast<int>(t)]; }
  const Head<T>& head(Task t) const { return heads_[static_cast<int>(t)]; }

  std::vector<Parameter<T>*> encoder_params() {
    std::vector<Parameter<T>*> out;
    for (auto& e : edges_) {
      out.push_back(&e.weight);
      out.push_back(&e.bias);
    }
    return out;
  }
  /// Canonical parameter order: edges (weight, bias) then median, lower, upper heads.
  std::vector<Parameter<T>*> all_params() {
    auto out = encoder_params();
    for (auto& h : heads_)
      for (auto* p : h.params()) out.push_back(p);
    return out;
  }
  std::vector<const Parameter<T>*> all_params() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& e : edges_) {
      out.push_back(&e.weight);
      out.push_back(&e.bias);
    }
    for (const auto& h : heads_)
      for (const auto* p : h.params()) out.push_back(p);
    return out;
  }
  long long parameter_count() const {
    long long n = 0;
    for (const auto* p : all_params()) n += static_cast<long long>(p->value.size());
    return n;
  }
  void zero_grad() {
    for (auto* p : all_params()) p->zero_grad();
  }

  // -------------------------------------------------------------------------
  // Differentiable forward (training)
  // -------------------------------------------------------------------------

  /// Records the encoder on `tape` for a batched input [N, C, spatial...] and
  /// returns the latent map [N, d, spatial...].
  Var<T> encode(Tape<T>& tape, Var<T> input) {
    check_input(input.shape(), true);
    const auto& order = spec_.topo_order;
    std::vector<std::optional<Var<T>>> feat(static_cast<std::size_t>(spec_.node_count()));
    feat[0] = input;
    const int O = spec_.output_node();
    for (int v : order) {
      if (v == 0) continue;
      std::vector<Var<T>> parts;
      for (std::size_t k = 0; k < spec_.edges.size(); ++k) {
        const Edge& e = spec_.edges[k];
        if (e.dst != v) continue;
        Var<T> src = *feat[static_cast<std::size_t>(e.src)];
        Var<T> y = ops::conv(src, tape.param(edges_[k].weight), static_cast<std::size_t>(e.dilation), spatial_rank());
        if (v != O) {
          parts.push_back(ops::relu(ops::add_bias(y, tape.param(edges_[k].bias))));
        } else {
          parts.push_back(ops::add_bias(y, tape.param(edges_[k].bias)));
        }
      }
      if (v == O) {
        Var<T> acc = parts[0];
        for (std::size_t i = 1; i < parts.size(); ++i) acc = ops::add(acc, parts[i]);
        feat[static_cast<std::size_t>(v)] = acc;
      } else {
        feat[static_cast<std::size_t>(v)] = ops::concat(parts);
      }
    }
    return *feat[static_cast<std::size_t>(O)];
  }

  Var<T> head_forward(Tape<T>& tape, Var<T> latent, Task t) {
    Head<T>& h = head(t);
    Var<T> a = ops::relu(ops::affine(latent, tape.param(h.w1), tape.param(h.b1)));
    Var<T> b = ops::relu(ops::affine(a, tape.param(h.w2), tape.param(h.b2)));
    return ops::affine(b, tape.param(h.w3), tape.param(h.b3));
  }

  Var<T> apply_clamp(Var<T> x) const {
    if (!opt_.clamp.enabled()) return x;
    return ops::clamp(x, opt_.clamp.lo, opt_.clamp.hi);
  }

  /// Output for one task as used in training. For the offset tasks the
  /// median enters as a constant, so only the task's own head (and the
  /// shared encoder) receives gradient.
  Var<T> task_output(Tape<T>& tape, Var<T> latent, Task t) {
    if (t == Task::median) return apply_clamp(head_forward(tape, latent, Task::median));
    Var<T> med = tape.constant(head_forward_value(latent.value(), Task::median));
    Var<T> off = ops::softplus(head_forward(tape, latent, t));
    return apply_clamp(t == Task::lower ? ops::sub(med, off) : ops::add(med, off));
  }

  // -------------------------------------------------------------------------
  // Inference
  // -------------------------------------------------------------------------

  /// Latent map for [C, spatial...] or [N, C, spatial...] input. Feature maps
  /// are released as soon as no later node consumes them.
  Tensor<T> encode(const Tensor<T>& input, CacheStats* stats = nullptr) const {
    const bool batched = check_input(input.shape(), false);
    Tensor<T> x = batched ? input : with_batch_axis(input);
    const auto& order = spec_.topo_order;
    const int O = spec_.output_node();
    const std::size_t n_nodes = static_cast<std::size_t>(spec_.node_count());
    std::vector<int> pos(n_nodes), last_use(n_nodes, -1);
    for (std::size_t i = 0; i < order.size(); ++i) pos[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
    for (const auto& e : spec_.edges)
      last_use[static_cast<std::size_t>(e.src)] =
          std::max(last_use[static_cast<std::size_t>(e.src)], pos[static_cast<std::size_t>(e.dst)]);
    std::vector<Tensor<T>> feat(n_nodes);
    std::vector<long long> chans(n_nodes, 0);
    long long live = 0, peak = 0, all = 0;
    feat[0] = std::move(x);
    chans[0] = in_channels();
    live = all = chans[0];
    peak = live;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const int v = order[i];
      if (v != 0) {
        std::vector<Tensor<T>> parts;
        for (std::size_t k = 0; k < spec_.edges.size(); ++k) {
          const Edge& e = spec_.edges[k];
          if (e.dst != v) continue;
          parts.push_back(edge_forward(feat[static_cast<std::size_t>(e.src)], k, v != O));
        }
        Tensor<T> out;
        if (v == O) {
          out = std::move(parts[0]);
          for (std::size_t p = 1; p < parts.size(); ++p)
            for (std::size_t j = 0; j < out.size(); ++j) out[j] += parts[p][j];
        } else {
          out = concat_values(parts);
        }
        chans[static_cast<std::size_t>(v)] = static_cast<long long>(out.dim(1));
        feat[static_cast<std::size_t>(v)] = std::move(out);
        live += chans[static_cast<std::size_t>(v)];
        all += chans[static_cast<std::size_t>(v)];
        peak = std::max(peak, live);
      }
      for (std::size_t u = 0; u < n_nodes; ++u) {
        if (static_cast<int>(u) == O || feat[u].empty()) continue;
        if (last_use[u] <= static_cast<int>(i)) {
          feat[u] = Tensor<T>();
          live -= chans[u];
        }
      }
    }
    if (stats) {
      stats->peak_live_channels = peak;
      stats->keep_all_channels = all;
    }
    Tensor<T> latent = std::move(feat[static_cast<std::size_t>(O)]);
    if (!batched) latent = drop_batch_axis(latent);
    return latent;
  }

  Tensor<T> head_forward_value(const Tensor<T>& latent, Task t) const {
    Tape<T> tape;
    const Head<T>& h = head(t);
    const std::size_t axis = latent.rank() == static_cast<std::size_t>(spatial_rank()) + 2 ? 1 : 0;
    auto c = [&](const Parameter<T>& p) { return tape.constant(p.value); };
    Var<T> a = ops::relu(ops::affine(tape.constant(latent), c(h.w1), c(h.b1), axis));
    Var<T> b = ops::relu(ops::affine(a, c(h.w2), c(h.b2), axis));
    return ops::affine(b, c(h.w3), c(h.b3), axis).value();
  }

  /// Quantile field from a latent map: median head, softplus offsets, then
  /// clamping of median, lower and upper (in that order).
  QuantileField<T> predict_from_latent(const Tensor<T>& latent) const {
    QuantileField<T> f;
    f.q_lo = opt_.q_lo;
    f.q_hi = opt_.q_hi;
    f.median = head_forward_value(latent, Task::median);
    Tensor<T> raw_lo = head_forward_value(latent, Task::lower);
    Tensor<T> raw_hi = head_forward_value(latent, Task::upper);
    f.lower = f.median;
    f.upper = f.median;
    for (std::size_t i = 0; i < f.median.size(); ++i) {
      f.lower[i] -= ops::detail::softplus_scalar(raw_lo[i]);
      f.upper[i] += ops::detail::softplus_scalar(raw_hi[i]);
    }
    if (opt_.clamp.enabled()) {
      const bool batched = latent.rank() == static_cast<std::size_t>(spatial_rank()) + 2;
      clamp_in_place(f.median, batched);
      clamp_in_place(f.lower, batched);
      clamp_in_place(f.upper, batched);
    }
    return f;
  }

  QuantileField<T> predict_quantiles(const Tensor<T>& input) const { return predict_from_latent(encode(input)); }

  void clamp_in_place(Tensor<T>& t, bool batched) const {
    const std::size_t axis = batched ? 1 : 0;
    std::size_t outer, C, inner;
    ops::detail::split_axis(t.shape(), axis, outer, C, inner);
    const auto& lo = opt_.clamp.lo;
    const auto& hi = opt_.clamp.hi;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t c = 0; c < C; ++c) {
        const T l = lo.size() == 1 ? lo[0] : lo[c];
        const T h = hi.size() == 1 ? hi[0] : hi[c];
        T* p = t.data() + (o * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) p[i] = std::clamp(p[i], l, h);
      }
  }

 private:
  static Tensor<T> random_tensor(const Shape& s, double stddev, Rng& rng) {
    Tensor<T> t(s);
    std::normal_distribution<double> nd(0.0, stddev);
    for (auto& v : t.values()) v = static_cast<T>(nd(rng));
    return t;
  }

  static Tensor<T> with_batch_axis(const Tensor<T>& t) {
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return t.reshaped(s);
  }
  static Tensor<T> drop_batch_axis(const Tensor<T>& t) {
    Shape s(t.shape().begin() + 1, t.shape().end());
    return t.reshaped(s);
  }

  // Returns true when the input carries a batch axis.
  bool check_input(const Shape& s, bool require_batch) const {
    const std::size_t sr = static_cast<std::size_t>(spatial_rank());
    bool batched;
    if (s.size() == sr + 2) batched = true;
    else if (s.size() == sr + 1 && !require_batch) batched = false;
    else throw ShapeError("model: input " + shape_str(s) + " has wrong rank for spatial rank " + std::to_string(sr));
    const std::size_t c_axis = batched ? 1 : 0;
    if (s[c_axis] != static_cast<std::size_t>(in_channels()))
      throw ShapeError("model input", static_cast<int>(c_axis), s[c_axis], static_cast<std::size_t>(in_channels()));
    return batched;
  }

  Tensor<T> edge_forward(const Tensor<T>& src, std::size_t k, bool activate) const {
    const Edge& e = spec_.edges[k];
    const auto& w = edges_[k].weight.value;
    const auto g = conv::make_geometry(src.shape(), w.shape(), static_cast<std::size_t>(e.dilation), spatial_rank());
    Tensor<T> out(conv::output_shape(g));
    conv::forward(g, src.data(), w.data(), out.data());
    const T* b = edges_[k].bias.value.data();
    const std::size_t P = g.plane();
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t c = 0; c < g.out_ch; ++c) {
        T* p = out.data() + (n * g.out_ch + c) * P;
        for (std::size_t i = 0; i < P; ++i) {
          p[i] += b[c];
          if (activate) p[i] = p[i] > T{0} ? p[i] : T{0};
        }
      }
    return out;
  }

  static Tensor<T> concat_values(std::vector<Tensor<T>>& parts) {
    if (parts.size() == 1) return std::move(parts[0]);
    Shape s = parts[0].shape();
    const std::size_t N = s[0];
    const std::size_t inner = shape_numel(s) / (s[0] * s[1]);
    std::size_t total = 0;
    for (const auto& p : parts) total += p.dim(1);
    s[1] = total;
    Tensor<T> out(s);
    for (std::size_t n = 0; n < N; ++n) {
      std::size_t off = 0;
      for (const auto& p : parts) {
        const std::size_t c = p.dim(1);
        std::copy(p.data() + n * c * inner, p.data() + (n + 1) * c * inner, out.data() + (n * total + off) * inner);
        off += c;
      }
    }
    return out;
  }

  NetworkSpec spec_;
  ModelOptions<T> opt_;
  std::vector<EdgeParams> edges_;
  std::array<Head<T>, 3> heads_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 50;
  double learning_rate = 1e-3;
  int batch_size = 1;
  double q_lo = 0.05;
  double q_hi = 0.95;
  std::uint64_t task_switch_seed = 0;
  bool shuffle = true;
  std::optional<Task> fixed_task;  // pins every batch to one task

  void validate() const {
    if (epochs < 1) throw ValueError("train: epochs must be >= 1");
    if (batch_size < 1) throw ValueError("train: batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ValueError("train: learning_rate must be > 0");
    if (!(q_lo > 0 && q_lo < 0.5 && q_hi > 0.5 && q_hi < 1))
      throw ValueError("train: quantile levels must satisfy 0 < q_lo < 0.5 < q_hi < 1");
  }
};

struct LossRecord {
  int epoch = 0;
  int batch = 0;
  Task task = Task::median;
  double loss = 0.0;
};

template <typename T>
struct ImagePair {
  Tensor<T> noisy;   // [C, spatial...]
  Tensor<T> target;  // [C_out, spatial...]
};

inline double task_quantile(Task t, double q_lo, double q_hi) {
  return t == Task::median ? 0.5 : (t == Task::lower ? q_lo : q_hi);
}

namespace detail {

template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& items) {
  Shape s{items.size()};
  s.insert(s.end(), items[0]->shape().begin(), items[0]->shape().end());
  Tensor<T> out(s);
  const std::size_t n = items[0]->size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != items[0]->shape()) throw ShapeError("train: inconsistent image shapes in batch");
    std::copy(items[i]->data(), items[i]->data() + n, out.data() + i * n);
  }
  return out;
}

}  // namespace detail

/// Optimizer state for one training run: one Adam state for the encoder and
/// one per head, so a head only advances on its own batches.
template <typename T>
struct TrainerState {
  AdamState<T> encoder;
  std::array<AdamState<T>, 3> heads;
};

/// Trains with batch-wise stochastic task switching: every batch draws one
/// of {median, lower, upper} uniformly, evaluates the pinball loss of that
/// output at its quantile level and updates the encoder plus that head.
template <typename T>
std::vector<LossRecord> train(Model<T>& model, const std::vector<ImagePair<T>>& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw ValueError("train: empty dataset");
  for (const auto& p : data) {
    if (p.noisy.rank() != static_cast<std::size_t>(model.spatial_rank()) + 1)
      throw ShapeError("train: inputs must be [C, spatial...], got " + shape_str(p.noisy.shape()));
    if (p.target.dim(0) != static_cast<std::size_t>(model.out_channels()))
      throw ShapeError("train: target", 0, p.target.dim(0), static_cast<std::size_t>(model.out_channels()));
  }
  model.options().q_lo = cfg.q_lo;
  model.options().q_hi = cfg.q_hi;
  AdamConfig ac;
  ac.learning_rate = cfg.learning_rate;
  TrainerState<T> st{AdamState<T>(ac), {AdamState<T>(ac), AdamState<T>(ac), AdamState<T>(ac)}};
  Rng task_rng = make_rng(substream(cfg.task_switch_seed, "tasks"));
  Rng order_rng = make_rng(substream(cfg.task_switch_seed, "shuffle"));
  std::vector<std::size_t> order(data.size());
  std::vector<LossRecord> history;
  const auto enc_params = model.encoder_params();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), order_rng);
    int batch_idx = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_idx) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Tensor<T>*> xs, ys;
      for (std::size_t j = start; j < end; ++j) {
        xs.push_back(&data[order[j]].noisy);
        ys.push_back(&data[order[j]].target);
      }
      const Task task = cfg.fixed_task ? *cfg.fixed_task : static_cast<Task>(task_rng() % 3);
      const Tensor<T> target = detail::stack(ys);

      model.zero_grad();
      Tape<T> tape;
      Var<T> latent = model.encode(tape, tape.constant(detail::stack(xs)));
      Var<T> pred = model.task_output(tape, latent, task);
      Var<T> loss = ops::pinball_loss(pred, target, task_quantile(task, cfg.q_lo, cfg.q_hi));
      const double lv = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(lv))
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_idx));
      tape.backward(loss);
      st.encoder.step(enc_params);
      st.heads[static_cast<int>(task)].step(model.head(task).params());
      history.push_back({epoch, batch_idx, task, lv});
    }
  }
  return history;
}

// ---------------------------------------------------------------------------
// Model file: "BNMODEL1", u64 JSON length, JSON header, weight tensors in
// canonical order (edges, then median/lower/upper heads).
// ---------------------------------------------------------------------------

inline constexpr char kModelMagic[8] = {'B', 'N', 'M', 'O', 'D', 'E', 'L', '1'};

template <typename T>
nlohmann::json model_header(const Model<T>& m) {
  nlohmann::json j;
  j["spec"] = to_json(m.spec());
  j["out_channels"] = m.out_channels();
  j["head_width"] = m.options().head_width;
  j["q_lo"] = m.options().q_lo;
  j["q_hi"] = m.options().q_hi;
  j["clamp_lo"] = m.options().clamp.lo;
  j["clamp_hi"] = m.options().clamp.hi;
  return j;
}

template <typename T>
void write_model(std::ostream& os, const Model<T>& m) {
  const std::string hdr = model_header(m).dump();
  os.write(kModelMagic, 8);
  detail::write_u64(os, hdr.size());
  os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (const auto* p : m.all_params()) write_tensor(os, p->value);
  if (!os) throw IoError("model: write failed");
}

template <typename T>
Model<T> read_model(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8)) throw FormatError("model: truncated magic");
  if (std::memcmp(magic, kModelMagic, 8) != 0) throw FormatError("model: bad magic or unsupported version");
  const std::uint64_t n = detail::read_u64(is);
  if (n > (1ULL << 30)) throw FormatError("model: implausible header length");
  std::string hdr(n, '\0');
  if (!is.read(hdr.data(), static_cast<std::streamsize>(n))) throw FormatError("model: truncated header");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(hdr);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("model: header JSON: ") + ex.what());
  }
  ModelOptions<T> opt;
  try {
    opt.out_channels = j.at("out_channels").get<int>();
    opt.head_width = j.at("head_width").get<int>();
    opt.q_lo = j.at("q_lo").get<double>();
    opt.q_hi = j.at("q_hi").get<double>();
    opt.clamp.lo = j.at("clamp_lo").get<std::vector<T>>();
    opt.clamp.hi = j.at("clamp_hi").get<std::vector<T>>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("model: header fields: ") + ex.what());
  }
  Model<T> m(spec_from_json(j.at("spec")), opt, 0);
  for (auto* p : m.all_params()) {
    Tensor<T> t = read_tensor<T>(is);
    if (t.shape() != p->value.shape())
      throw FormatError("model: tensor '" + p->name + "' has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(p->value.shape()));
    p->value = std::move(t);
    p->zero_grad();
  }
  return m;
}

}  // namespace qens
