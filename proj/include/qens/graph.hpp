#pragma once

// Random single-source / single-sink DAG generation for sparse mixed-scale
// networks, plus topological ordering and emergent graph statistics.
//
// Node ids: 0 is the input node I, 1..D are intermediate nodes and D + 1 is
// the output node O.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qens/error.hpp"
#include "qens/rng.hpp"

namespace qens {

struct GraphHyperparams {
  int depth = 10;           // number of intermediate nodes D
  double alpha = 0.0;       // skip-length bias
  double gamma = 0.0;       // degree bias
  double p_il = 0.2;        // input -> intermediate
  double p_lo = 0.2;        // intermediate -> output
  bool p_io = true;         // direct input -> output edge
  std::vector<int> dilation_choices{1, 2, 3, 4, 5};
  std::optional<std::pair<int, int>> degree_clamp;
  int hidden_channels = 6;
  std::vector<int> channel_choices;  // non-empty: per-edge channels drawn from this list
  int in_channels = 1;
  int latent_dim = 8;
  int spatial_rank = 2;
  std::uint64_t seed = 0;

  void validate() const {
    if (depth < 1) throw ValueError("graph: depth must be >= 1");
    if (alpha < 0 || gamma < 0) throw ValueError("graph: alpha and gamma must be >= 0");
    for (double p : {p_il, p_lo})
      if (!(p >= 0.0 && p <= 1.0)) throw ValueError("graph: probabilities must lie in [0,1]");
    if (dilation_choices.empty()) throw ValueError("graph: dilation_choices must be non-empty");
    for (int d : dilation_choices)
      if (d < 1) throw ValueError("graph: dilations must be >= 1");
    if (degree_clamp && (degree_clamp->first < 1 || degree_clamp->first > degree_clamp->second))
      throw ValueError("graph: degree clamp must satisfy 1 <= min <= max");
    if (hidden_channels < 1 || in_channels < 1 || latent_dim < 1)
      throw ValueError("graph: channel counts must be >= 1");
    for (int c : channel_choices)
      if (c < 1) throw ValueError("graph: channel choices must be >= 1");
    if (spatial_rank != 2 && spatial_rank != 3) throw ValueError("graph: spatial_rank must be 2 or 3");
  }
};

struct Edge {
  int src = 0;
  int dst = 0;
  int dilation = 1;
  int kernel = 1;
  int channels = 1;

  friend bool operator==(const Edge&, const Edge&) = default;
};

struct NetworkSpec {
  GraphHyperparams hyper;
  int depth = 0;
  std::vector<Edge> edges;  // canonical order: sorted by (src, dst)
  std::vector<int> topo_order;

  int input_node() const { return 0; }
  int output_node() const { return depth + 1; }
  int node_count() const { return depth + 2; }
};

inline bool same_edges(const NetworkSpec& a, const NetworkSpec& b) { return a.edges == b.edges; }

struct GraphStats {
  long long parameter_count = 0;
  int longest_path = 0;
  double avg_degree = 0.0;
};

namespace detail {

// Draws an index with probability proportional to `weights`.
inline std::size_t draw_weighted(const std::vector<double>& weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = uniform01(rng) * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  for (std::size_t i = weights.size(); i-- > 0;)
    if (weights[i] > 0) return i;
  return 0;
}

}  // namespace detail

/// Out-degree law for node k: P(d) ∝ exp(-gamma d) on {1, ..., D - k},
/// restricted to [min(a, D-k), min(b, D-k)] when a clamp [a, b] is set.
/// Restricting and renormalizing is the same law as re-drawing until the
/// degree falls in range.
inline std::vector<double> out_degree_weights(int depth, int k, double gamma,
                                              const std::optional<std::pair<int, int>>& clamp) {
  const int n = depth - k;
  std::vector<double> w(static_cast<std::size_t>(std::max(n, 0)));
  int lo = 1, hi = n;
  if (clamp) {
    lo = std::min(clamp->first, n);
    hi = std::min(clamp->second, n);
  }
  for (int d = 1; d <= n; ++d) w[static_cast<std::size_t>(d - 1)] = (d >= lo && d <= hi) ? std::exp(-gamma * d) : 0.0;
  return w;
}

/// Kahn's algorithm with a min-heap, so ties resolve by ascending node id.
/// Throws with the offending back edge when the graph has a cycle.
inline std::vector<int> topological_order(int node_count, const std::vector<Edge>& edges) {
  std::vector<std::vector<int>> succ(static_cast<std::size_t>(node_count));
  std::vector<int> indeg(static_cast<std::size_t>(node_count), 0);
  for (const auto& e : edges) {
    if (e.src < 0 || e.dst < 0 || e.src >= node_count || e.dst >= node_count)
      throw ValueError("topological_order: edge references unknown node");
    succ[static_cast<std::size_t>(e.src)].push_back(e.dst);
    ++indeg[static_cast<std::size_t>(e.dst)];
  }
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (int v = 0; v < node_count; ++v)
    if (indeg[static_cast<std::size_t>(v)] == 0) ready.push(v);
  std::vector<int> order;
  while (!ready.empty()) {
    const int v = ready.top();
    ready.pop();
    order.push_back(v);
    for (int w : succ[static_cast<std::size_t>(v)])
      if (--indeg[static_cast<std::size_t>(w)] == 0) ready.push(w);
  }
  if (static_cast<int>(order.size()) == node_count) return order;

  // Locate a back edge among the unsorted nodes with an iterative DFS.
  std::vector<int> color(static_cast<std::size_t>(node_count), 0);
  for (int start = 0; start < node_count; ++start) {
    if (indeg[static_cast<std::size_t>(start)] == 0 || color[static_cast<std::size_t>(start)] != 0) continue;
    std::vector<std::pair<int, std::size_t>> stack{{start, 0}};
    color[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      auto& [v, next] = stack.back();
      const auto& s = succ[static_cast<std::size_t>(v)];
      if (next == s.size()) {
        color[static_cast<std::size_t>(v)] = 2;
        stack.pop_back();
        continue;
      }
      const int w = s[next++];
      if (color[static_cast<std::size_t>(w)] == 1)
        throw ValueError("topological_order: cycle through back edge (" + std::to_string(v) + " -> " +
                         std::to_string(w) + ")");
      if (color[static_cast<std::size_t>(w)] == 0) {
        color[static_cast<std::size_t>(w)] = 1;
        stack.emplace_back(w, 0);
      }
    }
  }
  throw ValueError("topological_order: cycle detected");
}

inline std::vector<int> topological_order(const NetworkSpec& spec) {
  return topological_order(spec.node_count(), spec.edges);
}

/// Samples a network graph following the six-step procedure: intermediate
/// edges, input edges, output edges, optional direct skip, isolation fixes,
/// then dilation/kernel/channel assignment in canonical edge order.
inline NetworkSpec sample_graph(const GraphHyperparams& h) {
  h.validate();
  Rng rng = make_rng(h.seed);
  const int D = h.depth;
  const int I = 0, O = D + 1;
  std::set<std::pair<int, int>> E;

  // 1. intermediate -> intermediate
  for (int k = 1; k <= D; ++k) {
    auto w = out_degree_weights(D, k, h.gamma, h.degree_clamp);
    if (w.empty()) continue;
    const int dk = static_cast<int>(detail::draw_weighted(w, rng)) + 1;
    std::vector<int> cand;
    std::vector<double> cw;
    for (int t = k + 1; t <= D; ++t) {
      cand.push_back(t);
      cw.push_back(std::exp(-h.alpha * (t - k)));
    }
    for (int j = 0; j < dk; ++j) {
      const std::size_t pick = detail::draw_weighted(cw, rng);
      E.emplace(k, cand[pick]);
      cw[pick] = 0.0;
    }
  }
  // 2. input -> intermediate
  E.emplace(I, 1);
  for (int k = 2; k <= D; ++k)
    if (uniform01(rng) < h.p_il) E.emplace(I, k);
  // 3. intermediate -> output
  E.emplace(D, O);
  for (int k = 1; k <= D - 1; ++k)
    if (uniform01(rng) < h.p_lo) E.emplace(k, O);
  // 4. direct skip
  if (h.p_io) E.emplace(I, O);
  // 5. isolation check
  for (int k = 1; k <= D; ++k) {
    bool has_in = false, has_out = false;
    for (const auto& [s, d] : E) {
      has_in = has_in || d == k;
      has_out = has_out || s == k;
    }
    if (!has_in) E.emplace(I, k);
    if (!has_out) E.emplace(k, O);
  }
  // 6. dilations, kernel sizes, channels
  NetworkSpec spec;
  spec.hyper = h;
  spec.depth = D;
  for (const auto& [s, d] : E) {
    Edge e{s, d, 1, 1, h.hidden_channels};
    if (s != I && d != O) {
      e.kernel = 3;
      e.dilation = h.dilation_choices[static_cast<std::size_t>(rng() % h.dilation_choices.size())];
    }
    if (d == O) e.channels = h.latent_dim;
    else if (!h.channel_choices.empty())
      e.channels = h.channel_choices[static_cast<std::size_t>(rng() % h.channel_choices.size())];
    spec.edges.push_back(e);
  }
  spec.topo_order = topological_order(spec);
  return spec;
}

/// Checks every structural invariant; returns an empty string when valid.
inline std::string validate_spec(const NetworkSpec& spec) {
  const int I = spec.input_node(), O = spec.output_node();
  std::vector<int> indeg(static_cast<std::size_t>(spec.node_count()), 0), outdeg(indeg);
  for (const auto& e : spec.edges) {
    if (e.dst == I) return "input node has an incoming edge";
    if (e.src == O) return "output node has an outgoing edge";
    if (e.src == e.dst) return "self loop";
    const bool boundary = e.src == I || e.dst == O;
    if (boundary && (e.kernel != 1 || e.dilation != 1)) return "boundary edge must be 1x1, dilation 1";
    if (!boundary && e.kernel != 3) return "intermediate edge must have kernel 3";
    if (e.dilation < 1 || e.channels < 1) return "invalid edge attributes";
    ++outdeg[static_cast<std::size_t>(e.src)];
    ++indeg[static_cast<std::size_t>(e.dst)];
  }
  for (int k = 1; k <= spec.depth; ++k)
    if (indeg[static_cast<std::size_t>(k)] < 1 || outdeg[static_cast<std::size_t>(k)] < 1)
      return "intermediate node " + std::to_string(k) + " is isolated";
  const auto& order = spec.topo_order;
  if (static_cast<int>(order.size()) != spec.node_count()) return "topological order has wrong length";
  if (order.front() != I || order.back() != O) return "topological order must start at I and end at O";
  std::vector<int> pos(static_cast<std::size_t>(spec.node_count()), -1);
  for (std::size_t i = 0; i < order.size(); ++i) pos[static_cast<std::size_t>(order[i])] = static_cast<int>(i);
  for (const auto& e : spec.edges)
    if (pos[static_cast<std::size_t>(e.src)] >= pos[static_cast<std::size_t>(e.dst)]) return "edge points backward";
  return {};
}

/// Channel count of every node: the input's channels for I, otherwise the
/// sum of incoming edge channels.
inline std::vector<int> node_channels(const NetworkSpec& spec, int in_channels) {
  std::vector<int> ch(static_cast<std::size_t>(spec.node_count()), 0);
  ch[0] = in_channels;
  for (const auto& e : spec.edges)
    if (e.dst != spec.output_node()) ch[static_cast<std::size_t>(e.dst)] += e.channels;
  return ch;
}

/// Parameter count of an encoder plus three heads of shape d -> w -> w -> C.
inline long long head_parameter_count(int latent_dim, int head_width, int out_channels) {
  const long long d = latent_dim, w = head_width, c = out_channels;
  return 3 * ((d * w + w) + (w * w + w) + (w * c + c));
}

inline long long encoder_parameter_count(const NetworkSpec& spec, int in_channels, int latent_dim) {
  const auto ch = node_channels(spec, in_channels);
  long long total = 0;
  for (const auto& e : spec.edges) {
    long long taps = 1;
    for (int a = 0; a < spec.hyper.spatial_rank; ++a) taps *= e.kernel;
    const long long out = e.dst == spec.output_node() ? latent_dim : e.channels;
    total += out * ch[static_cast<std::size_t>(e.src)] * taps + out;
  }
  return total;
}

inline GraphStats graph_stats(const NetworkSpec& spec, int channels, int latent_dim, int head_width = 0) {
  GraphStats s;
  if (head_width <= 0) head_width = latent_dim;
  s.parameter_count = encoder_parameter_count(spec, channels, latent_dim) +
                      head_parameter_count(latent_dim, head_width, channels);
  const auto order = spec.topo_order.empty() ? topological_order(spec) : spec.topo_order;
  std::vector<int> dist(static_cast<std::size_t>(spec.node_count()), -1);
  dist[static_cast<std::size_t>(spec.input_node())] = 0;
  std::vector<std::vector<int>> succ(static_cast<std::size_t>(spec.node_count()));
  for (const auto& e : spec.edges) succ[static_cast<std::size_t>(e.src)].push_back(e.dst);
  for (int v : order) {
    const int dv = dist[static_cast<std::size_t>(v)];
    if (dv < 0) continue;
    for (int w : succ[static_cast<std::size_t>(v)])
      dist[static_cast<std::size_t>(w)] = std::max(dist[static_cast<std::size_t>(w)], dv + 1);
  }
  s.longest_path = dist[static_cast<std::size_t>(spec.output_node())];
  s.avg_degree = static_cast<double>(spec.edges.size()) / static_cast<double>(spec.depth + 2);
  return s;
}

/// Largest offset (in pixels, per axis) by which an input pixel can influence
/// an output pixel: the maximum over I -> O paths of sum(dilation * (k/2)).
inline int receptive_radius(const NetworkSpec& spec) {
  const auto order = spec.topo_order.empty() ? topological_order(spec) : spec.topo_order;
  std::vector<int> reach(static_cast<std::size_t>(spec.node_count()), -1);
  reach[0] = 0;
  for (int v : order) {
    if (reach[static_cast<std::size_t>(v)] < 0) continue;
    for (const auto& e : spec.edges)
      if (e.src == v)
        reach[static_cast<std::size_t>(e.dst)] =
            std::max(reach[static_cast<std::size_t>(e.dst)], reach[static_cast<std::size_t>(v)] + e.dilation * (e.kernel / 2));
  }
  return reach[static_cast<std::size_t>(spec.output_node())];
}

// ---------------------------------------------------------------------------
// Performance binning
// ---------------------------------------------------------------------------

inline const std::vector<double>& default_bin_edges() {
  static const std::vector<double> edges{0.0, 0.10, 0.30, 0.70, 0.90, 1.0};
  return edges;
}

inline const std::vector<std::string>& default_bin_labels() {
  static const std::vector<std::string> labels{"low", "mid-low", "mid", "mid-high", "high"};
  return labels;
}

/// Assigns each value the bin of its empirical quantile. The quantile of a
/// value is (number of strictly smaller values) / n, so tied values share
/// the lowest rank and therefore the lower bin. Bins are [e_i, e_{i+1}),
/// the last one closed.
inline std::vector<int> bin_by_quantiles(const std::vector<double>& values, const std::vector<double>& edges) {
  if (values.empty()) throw ValueError("bin_by_quantiles: no values");
  if (edges.size() < 2 || edges.front() != 0.0 || edges.back() != 1.0)
    throw ValueError("bin_by_quantiles: edges must start at 0 and end at 1");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw ValueError("bin_by_quantiles: edges must be strictly increasing");
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(values.size());
  const int nbins = static_cast<int>(edges.size()) - 1;
  std::vector<int> out;
  out.reserve(values.size());
  for (double v : values) {
    const auto below = std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin();
    const double q = static_cast<double>(below) / n;
    int b = 0;
    while (b < nbins - 1 && q >= edges[static_cast<std::size_t>(b + 1)]) ++b;
    out.push_back(b);
  }
  return out;
}

inline std::vector<std::string> bin_labels(const std::vector<int>& bins) {
  std::vector<std::string> out;
  for (int b : bins) out.push_back(default_bin_labels().at(static_cast<std::size_t>(b)));
  return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const GraphHyperparams& h) {
  nlohmann::json j;
  j["depth"] = h.depth;
  j["alpha"] = h.alpha;
  j["gamma"] = h.gamma;
  j["p_il"] = h.p_il;
  j["p_lo"] = h.p_lo;
  j["p_io"] = h.p_io;
  j["dilation_choices"] = h.dilation_choices;
  j["degree_clamp"] = h.degree_clamp ? nlohmann::json::array({h.degree_clamp->first, h.degree_clamp->second})
                                     : nlohmann::json();
  j["hidden_channels"] = h.hidden_channels;
  j["channel_choices"] = h.channel_choices;
  j["in_channels"] = h.in_channels;
  j["latent_dim"] = h.latent_dim;
  j["spatial_rank"] = h.spatial_rank;
  j["seed"] = h.seed;
  return j;
}

inline GraphHyperparams hyperparams_from_json(const nlohmann::json& j) {
  GraphHyperparams h;
  h.depth = j.value("depth", h.depth);
  h.alpha = j.value("alpha", h.alpha);
  h.gamma = j.value("gamma", h.gamma);
  h.p_il = j.value("p_il", h.p_il);
  h.p_lo = j.value("p_lo", h.p_lo);
  h.p_io = j.value("p_io", h.p_io);
  h.dilation_choices = j.value("dilation_choices", h.dilation_choices);
  if (j.contains("degree_clamp") && !j["degree_clamp"].is_null())
    h.degree_clamp = std::make_pair(j["degree_clamp"][0].get<int>(), j["degree_clamp"][1].get<int>());
  h.hidden_channels = j.value("hidden_channels", h.hidden_channels);
  h.channel_choices = j.value("channel_choices", h.channel_choices);
  h.in_channels = j.value("in_channels", h.in_channels);
  h.latent_dim = j.value("latent_dim", h.latent_dim);
  h.spatial_rank = j.value("spatial_rank", h.spatial_rank);
  h.seed = j.value("seed", h.seed);
  return h;
}

/// Canonical document (keys sorted by nlohmann::json's ordered map).
inline nlohmann::json to_json(const NetworkSpec& s) {
  nlohmann::json j;
  j["hyperparams"] = to_json(s.hyper);
  std::vector<std::string> nodes{"I"};
  for (int k = 1; k <= s.depth; ++k) nodes.push_back(std::to_string(k));
  nodes.push_back("O");
  j["nodes"] = nodes;
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : s.edges)
    edges.push_back({{"src", e.src}, {"dst", e.dst}, {"dilation", e.dilation}, {"kernel", e.kernel}, {"channels", e.channels}});
  j["edges"] = edges;
  j["topo_order"] = s.topo_order;
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  try {
    s.hyper = hyperparams_from_json(j.at("hyperparams"));
    s.depth = s.hyper.depth;
    for (const auto& e : j.at("edges"))
      s.edges.push_back(Edge{e.at("src").get<int>(), e.at("dst").get<int>(), e.at("dilation").get<int>(),
                             e.at("kernel").get<int>(), e.at("channels").get<int>()});
    s.topo_order = j.at("topo_order").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("network spec JSON: ") + ex.what());
  }
  if (auto err = validate_spec(s); !err.empty()) throw FormatError("network spec JSON: " + err);
  return s;
}

}  // namespace qens
