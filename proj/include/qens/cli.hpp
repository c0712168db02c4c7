#pragma once

// Command-line pipeline: synth, netgen, train, calibrate, infer, sweep,
// tokenize and report. Every command resolves its configuration (defaults,
// then an optional JSON file, then dotted --set overrides), writes the
// resolved snapshot beside its outputs and writes every file atomically.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qens/conformal.hpp"
#include "qens/ensemble.hpp"
#include "qens/error.hpp"
#include "qens/graph.hpp"
#include "qens/io.hpp"
#include "qens/latent.hpp"
#include "qens/smsnet.hpp"
#include "qens/synth.hpp"
#include "qens/tensor.hpp"
#include "qens/tiling.hpp"

namespace qens::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum ExitCode : int { kOk = 0, kValidation = 2, kRuntime = 3 };

inline constexpr const char* kSnapshotName = "resolved_config.json";
// Snapshot name for calibrate runs written into the ensemble directory, so
// the training snapshot there is kept.
inline constexpr const char* kCalibrateSnapshotName = "calibrate_config.json";
inline constexpr const char* kDatasetFormat = "qens-dataset-1";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

inline json train_defaults() {
  return {{"epochs", 50}, {"learning_rate", 1e-3}, {"batch_size", 1}, {"q_lo", 0.05}, {"q_hi", 0.95}, {"shuffle", true}};
}

inline json graph_defaults() {
  GraphHyperparams h;
  h.depth = 25;
  h.hidden_channels = 2;
  json j = to_json(h);
  j.erase("seed");
  return j;
}

inline json defaults(const std::string& cmd) {
  if (cmd == "synth") return {{"out", ""}, {"overwrite", false}, {"synth", synth::to_json(synth::SynthConfig{})}};
  if (cmd == "netgen")
    return {{"out", ""}, {"overwrite", false}, {"members", 1}, {"seed", 0}, {"graph", graph_defaults()},
            {"out_channels", 1}, {"head_width", 0}};
  if (cmd == "train")
    return {{"data", ""},
            {"out", ""},
            {"overwrite", false},
            {"members", 2},
            {"seed", 0},
            {"workers", 1},
            {"graph", graph_defaults()},
            {"model", {{"head_width", 0}, {"clamp_lo", json::array()}, {"clamp_hi", json::array()}}},
            {"train", train_defaults()}};
  if (cmd == "calibrate")
    return {{"data", ""}, {"ensemble", ""}, {"out", ""}, {"overwrite", true}, {"alpha", 0.1}, {"aggregation", ""}};
  if (cmd == "infer")
    return {{"ensemble", ""},      {"input", ""},   {"out", ""},          {"overwrite", false},
            {"calibration", ""},   {"patch", json::array()}, {"overlap", json::array()},
            {"threshold", nullptr}, {"channel", 0}, {"aggregation", ""}};
  if (cmd == "sweep")
    return {{"kind", "hyper"},
            {"data", ""},
            {"out", ""},
            {"overwrite", false},
            {"seed", 0},
            {"workers", 1},
            {"full", false},
            {"grid", {{"alphas", {0.0, 1.5}}, {"gammas", {0.0, 1.5}}, {"depths", {5, 25}}, {"per_cell", 3}}},
            {"graph", graph_defaults()},
            {"train", train_defaults()},
            {"size", {{"ensemble", ""}, {"sizes", {1, 2, 5, 10, 25}}, {"repeats", 20}, {"alpha", 0.1}}}};
  if (cmd == "tokenize")
    return {{"ensemble", ""}, {"input", ""},       {"out", ""},         {"overwrite", false}, {"rank", 20},
            {"oversample", 10}, {"power_iters", 2}, {"k", 20},          {"seed", 0},          {"max_iters", 100},
            {"chunk_cols", 4096}, {"bins", 32},     {"intensity", ""}};
  if (cmd == "report") return {{"size_sweep", ""}, {"hyper_sweep", ""}, {"out", ""}, {"overwrite", true}};
  throw ValueError("unknown command '" + cmd + "'");
}

namespace detail {

inline void check_known(const json& user, const json& ref, const std::string& prefix) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!ref.contains(it.key())) throw ValueError("unknown config key '" + key + "'");
    const json& r = ref.at(it.key());
    if (r.is_object()) {
      if (!it.value().is_object()) throw ValueError("config key '" + key + "' must be an object");
      check_known(it.value(), r, key);
    }
  }
}

// Recursive merge where explicit nulls replace values instead of deleting keys.
inline void overlay(json& base, const json& top) {
  for (auto it = top.begin(); it != top.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      overlay(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

}  // namespace detail

/// defaults <- file <- overrides; unknown keys are rejected.
inline json resolve_config(const std::string& cmd, const std::string& file, const std::vector<std::string>& overrides) {
  json user = io::load_config(file, overrides);
  if (user.contains("command")) {
    if (user["command"] != cmd)
      throw ValueError("config was written for '" + user["command"].get<std::string>() + "', not '" + cmd + "'");
    user.erase("command");
  }
  const json def = defaults(cmd);
  detail::check_known(user, def, "");
  json cfg = def;
  detail::overlay(cfg, user);
  cfg["command"] = cmd;
  return cfg;
}

template <typename V>
V get(const json& cfg, const std::string& key) {
  try {
    return cfg.at(key).get<V>();
  } catch (const json::exception&) {
    throw ValueError("config key '" + key + "' has the wrong type");
  }
}

inline std::string require_path(const json& cfg, const std::string& key) {
  const auto s = get<std::string>(cfg, key);
  if (s.empty()) throw ValueError("config key '" + key + "' is required");
  return s;
}

/// Creates the output directory; refuses to reuse one holding `marker`
/// unless overwrite is set.
inline fs::path prepare_out(const json& cfg, const std::string& marker) {
  const fs::path out = require_path(cfg, "out");
  if (!get<bool>(cfg, "overwrite") && fs::exists(out / marker))
    throw ValueError("output '" + (out / marker).string() + "' exists; set overwrite=true to replace it");
  io::ensure_dir(out);
  return out;
}

inline void write_snapshot(const fs::path& out, const json& cfg, const char* name = kSnapshotName) {
  io::write_json(out / name, cfg);
}

inline TrainConfig train_config(const json& j) {
  TrainConfig t;
  t.epochs = get<int>(j, "epochs");
  t.learning_rate = get<double>(j, "learning_rate");
  t.batch_size = get<int>(j, "batch_size");
  t.q_lo = get<double>(j, "q_lo");
  t.q_hi = get<double>(j, "q_hi");
  t.shuffle = get<bool>(j, "shuffle");
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Datasets on disk
// ---------------------------------------------------------------------------

struct DiskDataset {
  std::vector<ImagePair<double>> train, test, calibration;
};

inline void save_dataset(const fs::path& dir, const synth::SynthConfig& cfg, const synth::Dataset& d) {
  json images = json::array();
  auto put = [&](const std::string& role, const std::vector<ImagePair<double>>& pairs,
                 const std::vector<std::uint64_t>& seeds) {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      char stem[64];
      std::snprintf(stem, sizeof stem, "%s_%03zu", role.c_str(), i);
      const std::string noisy = std::string(stem) + "_noisy.bnt", clean = std::string(stem) + "_clean.bnt";
      io::save_tensor(dir / noisy, pairs[i].noisy);
      io::save_tensor(dir / clean, pairs[i].target);
      images.push_back({{"role", role}, {"index", i}, {"seed", seeds[i]}, {"noisy", noisy}, {"clean", clean}});
    }
  };
  put("train", d.train, d.train_seeds);
  put("test", d.test, d.test_seeds);
  put("calibration", d.calibration, d.calibration_seeds);
  io::write_json(dir / "manifest.json", {{"format", kDatasetFormat}, {"config", synth::to_json(cfg)}, {"images", images}});
}

inline DiskDataset load_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw ValueError("dataset '" + dir.string() + "' has no manifest.json");
  const json m = io::read_json(dir / "manifest.json");
  if (m.value("format", "") != kDatasetFormat) throw FormatError("dataset '" + dir.string() + "': unknown format");
  DiskDataset d;
  try {
    for (const auto& e : m.at("images")) {
      ImagePair<double> p{io::load_tensor<double>(dir / e.at("noisy").get<std::string>()),
                          io::load_tensor<double>(dir / e.at("clean").get<std::string>())};
      const auto role = e.at("role").get<std::string>();
      if (role == "train") d.train.push_back(std::move(p));
      else if (role == "test") d.test.push_back(std::move(p));
      else if (role == "calibration") d.calibration.push_back(std::move(p));
      else throw FormatError("dataset: unknown role '" + role + "'");
    }
  } catch (const json::exception& ex) {
    throw FormatError("dataset manifest: " + std::string(ex.what()));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Ensembles on disk
// ---------------------------------------------------------------------------

struct LoadedEnsemble {
  ensemble::EnsembleManifest manifest;
  std::vector<Model<float>> models;
  fs::path dir;
};

inline Model<float> load_model_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open model '" + p.string() + "'");
  try {
    return read_model<float>(is);
  } catch (const FormatError& ex) {
    throw FormatError("'" + p.string() + "': " + ex.what());
  }
}

inline LoadedEnsemble load_ensemble(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw ValueError("ensemble '" + dir.string() + "' has no manifest.json");
  LoadedEnsemble e;
  e.dir = dir;
  e.manifest = ensemble::manifest_from_json(io::read_json(dir / "manifest.json"));
  for (const auto& m : e.manifest.members) {
    if (!fs::exists(dir / m.model_file))
      throw ValueError("ensemble member '" + m.model_file + "' is missing; run train to completion first");
    e.models.push_back(load_model_file(dir / m.model_file));
  }
  return e;
}

inline std::vector<Tensor<float>> inputs_of(const std::vector<ImagePair<double>>& pairs) {
  std::vector<Tensor<float>> out;
  for (const auto& p : pairs) out.push_back(p.noisy.cast<float>());
  return out;
}

inline std::vector<Tensor<float>> targets_of(const std::vector<ImagePair<double>>& pairs) {
  std::vector<Tensor<float>> out;
  for (const auto& p : pairs) out.push_back(p.target.cast<float>());
  return out;
}

inline QuantileField<float> ensemble_predict(const LoadedEnsemble& e, const Tensor<float>& x, ensemble::Aggregation rule) {
  std::vector<QuantileField<float>> fs;
  for (const auto& m : e.models) fs.push_back(m.predict_quantiles(x));
  return ensemble::aggregate(fs, rule);
}

inline ensemble::Aggregation rule_of(const json& cfg, const LoadedEnsemble& e) {
  const auto s = get<std::string>(cfg, "aggregation");
  return s.empty() ? e.manifest.aggregation : ensemble::aggregation_from_name(s);
}

inline std::string loss_csv(const std::vector<LossRecord>& h) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,batch,task,loss\n";
  for (const auto& r : h) os << r.epoch << ',' << r.batch << ',' << task_name(r.task) << ',' << r.loss << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void cmd_synth(const json& cfg, std::ostream& log) {
  const fs::path out = prepare_out(cfg, "manifest.json");
  const synth::SynthConfig sc = synth::synth_config_from_json(cfg.at("synth"));
  sc.validate();
  write_snapshot(out, cfg);
  const auto d = synth::make_dataset(sc);
  save_dataset(out, sc, d);
  log << "synth: wrote " << d.train.size() + d.test.size() + d.calibration.size() << " image pairs to " << out.string()
      << "\n";
}

inline GraphHyperparams graph_from(const json& j) { return hyperparams_from_json(j); }

inline void cmd_netgen(const json& cfg, std::ostream& log) {
  const fs::path out = prepare_out(cfg, "manifest.json");
  const GraphHyperparams h = graph_from(cfg.at("graph"));
  write_snapshot(out, cfg);
  auto m = ensemble::build_ensemble(get<int>(cfg, "members"), h, get<std::uint64_t>(cfg, "seed"));
  m.out_channels = get<int>(cfg, "out_channels");
  m.head_width = get<int>(cfg, "head_width");
  std::ostringstream stats;
  stats.precision(17);
  stats << "member,edges,params,longest_path,avg_degree,receptive_radius\n";
  for (std::size_t i = 0; i < m.members.size(); ++i) {
    const auto& s = m.members[i].spec;
    const GraphStats st = graph_stats(s, h.in_channels, h.latent_dim, m.head_width);
    const Model<float> model = ensemble::materialize<float>(m, i);
    io::write_json(out / ("spec_" + std::to_string(i) + ".json"), to_json(s));
    stats << i << ',' << s.edges.size() << ',' << model.parameter_count() << ',' << st.longest_path << ','
          << st.avg_degree << ',' << receptive_radius(s) << '\n';
  }
  io::write_text(out / "stats.csv", stats.str());
  io::write_json(out / "manifest.json", ensemble::to_json(m));
  log << "netgen: wrote " << m.members.size() << " specs to " << out.string() << "\n";
}

inline void cmd_train(const json& cfg, std::ostream& log) {
  const fs::path out = require_path(cfg, "out");
  const DiskDataset data = load_dataset(require_path(cfg, "data"));
  if (data.train.empty()) throw ValueError("train: dataset has no training images");
  GraphHyperparams h = graph_from(cfg.at("graph"));
  h.in_channels = static_cast<int>(data.train[0].noisy.dim(0));
  h.spatial_rank = static_cast<int>(data.train[0].noisy.rank()) - 1;
  const TrainConfig tc = train_config(cfg.at("train"));
  auto m = ensemble::build_ensemble(get<int>(cfg, "members"), h, get<std::uint64_t>(cfg, "seed"));
  m.out_channels = static_cast<int>(data.train[0].target.dim(0));
  m.head_width = get<int>(cfg.at("model"), "head_width");
  m.q_lo = tc.q_lo;
  m.q_hi = tc.q_hi;
  m.calibration_file = "calibration.json";
  ClampRange<float> clamp{get<std::vector<float>>(cfg.at("model"), "clamp_lo"),
                          get<std::vector<float>>(cfg.at("model"), "clamp_hi")};
  const json mj = ensemble::to_json(m);

  bool resume = false;
  if (fs::exists(out / "manifest.json") && !get<bool>(cfg, "overwrite")) {
    if (io::read_json(out / "manifest.json") != mj)
      throw ValueError("train: '" + out.string() + "' holds a different ensemble; set overwrite=true to replace it");
    resume = true;
  }
  io::ensure_dir(out);
  write_snapshot(out, cfg);
  io::write_json(out / "manifest.json", mj);

  const auto pairs = synth::cast_pairs<float>(data.train);
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < m.members.size(); ++i)
    if (!(resume && fs::exists(out / m.members[i].model_file))) pending.push_back(i);
  ensemble::parallel_for(pending.size(), get<int>(cfg, "workers"), [&](std::size_t k) {
    const std::size_t i = pending[k];
    Model<float> model = ensemble::materialize<float>(m, i, clamp);
    TrainConfig t = tc;
    t.task_switch_seed = m.members[i].task_seed;
    std::vector<LossRecord> hist;
    try {
      hist = train(model, pairs, t);
    } catch (const NumericError& ex) {
      throw NumericError("member " + std::to_string(i) + ": " + ex.what());
    }
    io::write_text(out / ("losses_" + std::to_string(i) + ".csv"), loss_csv(hist));
    io::atomic_write(out / m.members[i].model_file, [&](std::ostream& os) { write_model(os, model); });
  });
  log << "train: " << pending.size() << " trained, " << m.members.size() - pending.size() << " reused in "
      << out.string() << "\n";
}

inline void cmd_calibrate(const json& cfg, std::ostream& log) {
  const LoadedEnsemble e = load_ensemble(require_path(cfg, "ensemble"));
  const DiskDataset data = load_dataset(require_path(cfg, "data"));
  if (data.calibration.empty()) throw ValueError("calibrate: dataset has no calibration images");
  json c = cfg;
  const bool in_place = get<std::string>(c, "out").empty();
  if (in_place) c["out"] = e.dir.string();
  const fs::path out = prepare_out(c, "calibration.json");
  const double alpha = get<double>(cfg, "alpha");
  const auto rule = rule_of(cfg, e);
  std::vector<QuantileField<float>> fields;
  for (const auto& x : inputs_of(data.calibration)) fields.push_back(ensemble_predict(e, x, rule));
  const auto scores = conformal::channel_scores(fields, targets_of(data.calibration), e.models[0].spatial_rank());
  const auto rec = conformal::calibrate_channels(scores, alpha);
  for (std::size_t ch = 0; ch < rec.channels.size(); ++ch)
    if (rec.channels[ch].insufficient())
      throw ValueError("calibrate: channel " + std::to_string(ch) + " has " + std::to_string(rec.channels[ch].n) +
                       " calibration elements but alpha=" + std::to_string(alpha) + " needs at least " +
                       std::to_string(rec.channels[ch].k) + "; use a larger calibration set or a larger alpha");
  json j = conformal::to_json(rec);
  j["aggregation"] = ensemble::aggregation_name(rule);
  j["members"] = e.models.size();
  write_snapshot(out, in_place ? cfg : c, in_place ? kCalibrateSnapshotName : kSnapshotName);
  io::write_json(out / "calibration.json", j);
  log << "calibrate: alpha=" << alpha;
  for (double v : rec.corrections()) log << " correction=" << v;
  log << "\n";
}

inline void cmd_infer(const json& cfg, std::ostream& log) {
  const LoadedEnsemble e = load_ensemble(require_path(cfg, "ensemble"));
  const fs::path out = prepare_out(cfg, "median.bnt");
  const auto rule = rule_of(cfg, e);
  const Tensor<float> x = io::load_tensor<float>(require_path(cfg, "input"));
  const std::size_t sr = static_cast<std::size_t>(e.models[0].spatial_rank());
  if (x.rank() != sr + 1) throw ShapeError("infer: input must be [C, spatial...], got " + shape_str(x.shape()));
  auto patch = get<std::vector<std::size_t>>(cfg, "patch");
  auto overlap = get<std::vector<std::size_t>>(cfg, "overlap");
  if (patch.empty()) patch.assign(x.shape().begin() + 1, x.shape().end());
  if (overlap.empty()) overlap.assign(sr, 0);
  if (patch.size() != sr || overlap.size() != sr) throw ValueError("infer: patch and overlap need one entry per spatial axis");
  for (std::size_t a = 0; a < sr; ++a) {
    patch[a] = std::min(patch[a], x.dim(a + 1));
    if (overlap[a] >= patch[a]) overlap[a] = patch[a] - 1;
  }
  const auto tiles = tiling::extract_patches(x, patch, overlap);
  const std::size_t per = tiles.stack.size() / tiles.grid.count();
  std::vector<Tensor<float>> lo, me, up;
  for (std::size_t k = 0; k < tiles.grid.count(); ++k) {
    Shape ps(tiles.stack.shape().begin() + 1, tiles.stack.shape().end());
    Tensor<float> p(ps, std::vector<float>(tiles.stack.data() + k * per, tiles.stack.data() + (k + 1) * per));
    const auto f = ensemble_predict(e, p, rule);
    lo.push_back(f.lower);
    me.push_back(f.median);
    up.push_back(f.upper);
  }
  QuantileField<float> field{tiling::stitch(ensemble::stack_images(lo), tiles.grid),
                             tiling::stitch(ensemble::stack_images(me), tiles.grid),
                             tiling::stitch(ensemble::stack_images(up), tiles.grid), e.manifest.q_lo, e.manifest.q_hi};
  fs::path cal = get<std::string>(cfg, "calibration");
  if (cal.empty() && !e.manifest.calibration_file.empty() && fs::exists(e.dir / e.manifest.calibration_file))
    cal = e.dir / e.manifest.calibration_file;
  json info = {{"grid", tiling::to_json(tiles.grid)}, {"calibrated", !cal.empty()}};
  if (!cal.empty()) {
    const auto rec = conformal::calibration_from_json(io::read_json(cal));
    field = conformal::apply_correction(field, rec.corrections(), static_cast<int>(sr), e.models[0].options().clamp);
    info["calibration"] = cal.string();
  }
  write_snapshot(out, cfg);
  io::save_tensor(out / "lower.bnt", field.lower);
  io::save_tensor(out / "median.bnt", field.median);
  io::save_tensor(out / "upper.bnt", field.upper);
  if (!cfg.at("threshold").is_null()) {
    const auto ex = ensemble::exceedance_map(field, get<double>(cfg, "threshold"), get<int>(cfg, "channel"));
    io::save_tensor(out / "exceedance.bnt", ex);
  }
  io::write_json(out / "prediction.json", info);
  log << "infer: " << tiles.grid.count() << " patch(es), output " << shape_str(field.median.shape()) << "\n";
}

inline void cmd_sweep(const json& cfg, std::ostream& log) {
  const auto kind = get<std::string>(cfg, "kind");
  const DiskDataset data = load_dataset(require_path(cfg, "data"));
  if (kind == "hyper") {
    const fs::path out = prepare_out(cfg, "hyper_sweep.csv");
    ensemble::SweepConfig sc;
    const json& g = cfg.at("grid");
    sc.grid.alphas = get<std::vector<double>>(g, "alphas");
    sc.grid.gammas = get<std::vector<double>>(g, "gammas");
    sc.grid.depths = get<std::vector<int>>(g, "depths");
    sc.grid.per_cell = get<int>(g, "per_cell");
    if (get<bool>(cfg, "full")) sc.grid = ensemble::SweepGrid::full();
    sc.base = graph_from(cfg.at("graph"));
    sc.base.in_channels = static_cast<int>(data.train.at(0).noisy.dim(0));
    sc.base.spatial_rank = static_cast<int>(data.train.at(0).noisy.rank()) - 1;
    sc.train = train_config(cfg.at("train"));
    sc.seed = get<std::uint64_t>(cfg, "seed");
    sc.workers = get<int>(cfg, "workers");
    sc.checkpoint = (out / "hyper_checkpoint.csv").string();
    write_snapshot(out, cfg);
    const auto rows = ensemble::hyperparameter_sweep(sc, synth::cast_pairs<float>(data.train),
                                                     synth::cast_pairs<float>(data.test));
    io::write_text(out / "hyper_sweep.csv", ensemble::sweep_csv(rows));
    log << "sweep: " << rows.size() << " networks\n";
  } else if (kind == "size") {
    const fs::path out = prepare_out(cfg, "size_sweep.csv");
    const json& s = cfg.at("size");
    const LoadedEnsemble e = load_ensemble(require_path(s, "ensemble"));
    ensemble::PoolPredictions<float> pool;
    pool.spatial_rank = e.models[0].spatial_rank();
    pool.calibration_truth = targets_of(data.calibration);
    pool.test_truth = targets_of(data.test);
    const auto cal_in = inputs_of(data.calibration), test_in = inputs_of(data.test);
    for (const auto& m : e.models) {
      pool.calibration.push_back(ensemble::predict_all(m, cal_in));
      pool.test.push_back(ensemble::predict_all(m, test_in));
    }
    ensemble::SizeSweepConfig sc;
    sc.sizes = get<std::vector<int>>(s, "sizes");
    sc.repeats = get<int>(s, "repeats");
    sc.alpha = get<double>(s, "alpha");
    sc.seed = get<std::uint64_t>(cfg, "seed");
    sc.aggregation = e.manifest.aggregation;
    write_snapshot(out, cfg);
    const auto rows = ensemble::ensemble_size_sweep(pool, sc);
    io::write_text(out / "size_sweep.csv", ensemble::size_sweep_csv(rows));
    log << "sweep: " << rows.size() << " ensemble constructions\n";
  } else {
    throw ValueError("sweep: kind must be 'hyper' or 'size'");
  }
}

inline void cmd_tokenize(const json& cfg, std::ostream& log) {
  const LoadedEnsemble e = load_ensemble(require_path(cfg, "ensemble"));
  const fs::path out = prepare_out(cfg, "tokens.bnt");
  const Tensor<float> x = io::load_tensor<float>(require_path(cfg, "input"));
  std::vector<Tensor<float>> maps;
  for (const auto& m : e.models) maps.push_back(m.encode(x));
  latent::LatentStack stack = latent::stack_latents(maps);
  stack.chunk_cols = get<std::size_t>(cfg, "chunk_cols");
  latent::TokenizeOptions opt;
  opt.svd.rank = get<std::size_t>(cfg, "rank");
  opt.svd.oversample = get<std::size_t>(cfg, "oversample");
  opt.svd.power_iters = get<int>(cfg, "power_iters");
  opt.svd.seed = get<std::uint64_t>(cfg, "seed");
  opt.kmeans.k = get<std::size_t>(cfg, "k");
  opt.kmeans.seed = get<std::uint64_t>(cfg, "seed");
  opt.kmeans.max_iters = get<int>(cfg, "max_iters");
  const auto r = latent::tokenize(stack, opt);
  Tensor<float> intensity;
  const auto ipath = get<std::string>(cfg, "intensity");
  if (ipath.empty()) {
    const std::size_t inner = x.size() / x.dim(0);
    intensity = Tensor<float>(stack.spatial, std::vector<float>(x.data(), x.data() + inner));
  } else {
    intensity = io::load_tensor<float>(ipath);
  }
  const auto hs = latent::token_histogram(r.tokens, intensity, get<std::size_t>(cfg, "bins"));
  std::ostringstream csv;
  csv.precision(17);
  csv << "rank_by_mean,token,population,mean";
  for (std::size_t b = 0; b + 1 < hs.edges.size(); ++b) csv << ",bin_" << b;
  csv << "\n";
  for (std::size_t t = 0; t < hs.tokens.size(); ++t) {
    const auto& h = hs.tokens[t];
    csv << t << ',' << h.token << ',' << h.population << ',' << h.mean;
    for (auto c : h.counts) csv << ',' << c;
    csv << "\n";
  }
  json tj = latent::to_json(r.tokens);
  tj["d_total"] = stack.rows();
  tj["singular_values"] = std::vector<double>(r.svd.S.data(), r.svd.S.data() + r.svd.S.size());
  tj["bin_edges"] = hs.edges;
  write_snapshot(out, cfg);
  io::save_tensor(out / "tokens.bnt", latent::label_tensor(r.tokens));
  io::write_json(out / "tokens.json", tj);
  io::write_text(out / "histograms.csv", csv.str());
  log << "tokenize: " << stack.rows() << " latent rows, rank " << opt.svd.rank << ", k " << opt.kmeans.k << "\n";
}

inline std::vector<std::vector<std::string>> read_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    rows.push_back(f);
  }
  return rows;
}

inline void cmd_report(const json& cfg, std::ostream& log) {
  const fs::path out = prepare_out(cfg, "report.json");
  json report = json::object();
  const auto size_path = get<std::string>(cfg, "size_sweep");
  const auto hyper_path = get<std::string>(cfg, "hyper_sweep");
  if (size_path.empty() && hyper_path.empty()) throw ValueError("report: set size_sweep and/or hyper_sweep");
  write_snapshot(out, cfg);
  if (!size_path.empty()) {
    const auto rows = read_csv(io::read_text(size_path));
    if (rows.empty() || rows[0] != std::vector<std::string>{"size", "repeat", "members", "cc", "width_ratio", "coverage"})
      throw FormatError("report: '" + size_path + "' is not a size-sweep CSV");
    std::vector<ensemble::SizeSweepRow> parsed;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      ensemble::SizeSweepRow r;
      try {
        r.size = std::stoi(rows[i].at(0));
        r.repeat = std::stoi(rows[i].at(1));
        r.cc = std::stod(rows[i].at(3));
        r.width_ratio = std::stod(rows[i].at(4));
        r.coverage = std::stod(rows[i].at(5));
      } catch (const std::exception&) {
        throw FormatError("report: malformed size-sweep row " + std::to_string(i));
      }
      parsed.push_back(r);
    }
    std::ostringstream csv;
    csv.precision(17);
    csv << "size";
    for (double q : ensemble::summary_levels()) csv << ",cc_q" << static_cast<int>(std::lround(q * 100));
    csv << ",median_width_ratio,median_coverage\n";
    json sj = json::array();
    std::vector<double> xs, ys;
    for (const auto& s : ensemble::summarize(parsed)) {
      csv << s.size;
      for (double v : s.cc_quantiles) csv << ',' << v;
      csv << ',' << s.median_width_ratio << ',' << s.median_coverage << '\n';
      sj.push_back({{"size", s.size}, {"median_cc", s.median_cc}, {"median_width_ratio", s.median_width_ratio},
                    {"median_coverage", s.median_coverage}});
    }
    for (const auto& r : parsed) {
      xs.push_back(r.size);
      ys.push_back(r.cc);
    }
    report["size_sweep"] = sj;
    if (xs.size() >= 3) {
      const auto t = ensemble::mann_kendall(xs, ys);
      report["size_trend"] = {{"s", t.s}, {"z", t.z}, {"p_increasing", t.p_increasing}};
    }
    io::write_text(out / "size_summary.csv", csv.str());
  }
  if (!hyper_path.empty()) {
    auto rows = ensemble::parse_sweep_csv(io::read_text(hyper_path));
    if (rows.empty()) throw ValueError("report: '" + hyper_path + "' has no rows");
    std::map<std::tuple<double, double, int>, std::vector<double>> cells;
    for (const auto& r : rows) cells[{r.alpha, r.gamma, r.depth}].push_back(r.cc);
    std::ostringstream csv;
    csv.precision(17);
    csv << "alpha,gamma,depth,count,median_cc\n";
    for (const auto& [k, v] : cells)
      csv << std::get<0>(k) << ',' << std::get<1>(k) << ',' << std::get<2>(k) << ',' << v.size() << ','
          << conformal::empirical_quantile(v, 0.5) << '\n';
    io::write_text(out / "hyper_summary.csv", csv.str());
    std::vector<long long> params;
    for (const auto& r : rows) params.push_back(r.params);
    std::vector<long long> sorted = params;
    std::sort(sorted.begin(), sorted.end());
    const long long t1 = sorted[(sorted.size() - 1) / 3];
    std::map<std::string, std::pair<int, int>> comp;
    for (const auto& r : rows) {
      auto& c = comp[r.bin];
      ++c.first;
      if (r.params <= t1) ++c.second;
    }
    json bj = json::object();
    for (const auto& [b, c] : comp) bj[b] = {{"count", c.first}, {"lowest_param_tertile", c.second}};
    report["bins"] = bj;
  }
  io::write_json(out / "report.json", report);
  log << report.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline void report_error(std::ostream& err, const char* cls, const char* kind, const std::string& msg) {
  err << "qens:error:" << cls << ":" << kind << ": " << msg << "\n";
}

/// Runs one command line; returns the process exit code. Errors go to `err`
/// as "qens:error:<validation|runtime>:<kind>: <message>".
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Quantile ensembles of sparse mixed-scale networks"};
  app.require_subcommand(1);
  struct Opts {
    std::string config;
    std::vector<std::string> set;
    std::string out;
    bool overwrite = false;
  };
  std::map<std::string, Opts> opts;
  const std::vector<std::pair<std::string, std::string>> cmds{
      {"synth", "generate the synthetic train/test/calibration benchmark"},
      {"netgen", "sample network specs and report their statistics"},
      {"train", "train (or resume) an ensemble"},
      {"calibrate", "compute per-channel conformal corrections"},
      {"infer", "tiled ensemble inference with calibrated intervals"},
      {"sweep", "ensemble-size or hyperparameter sweep"},
      {"tokenize", "latent SVD + k-means token map"},
      {"report", "summarize sweep CSVs"}};
  for (const auto& [name, help] : cmds) {
    auto* sub = app.add_subcommand(name, help);
    auto& o = opts[name];
    sub->add_option("-c,--config", o.config, "JSON config file (e.g. a resolved_config.json snapshot)");
    sub->add_option("-s,--set", o.set, "override, key.path=value (repeatable)");
    sub->add_option("-o,--out", o.out, "output directory (same as --set out=...)");
    sub->add_flag("--overwrite", o.overwrite, "replace existing outputs");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    report_error(err, "validation", "usage", e.what());
    return kValidation;
  }
  std::string name;
  for (const auto* s : app.get_subcommands()) name = s->get_name();
  const Opts& o = opts[name];
  try {
    std::vector<std::string> overrides = o.set;
    if (!o.out.empty()) overrides.push_back("out=" + json(o.out).dump());
    if (o.overwrite) overrides.push_back("overwrite=true");
    const json cfg = resolve_config(name, o.config, overrides);
    if (name == "synth") cmd_synth(cfg, out);
    else if (name == "netgen") cmd_netgen(cfg, out);
    else if (name == "train") cmd_train(cfg, out);
    else if (name == "calibrate") cmd_calibrate(cfg, out);
    else if (name == "infer") cmd_infer(cfg, out);
    else if (name == "sweep") cmd_sweep(cfg, out);
    else if (name == "tokenize") cmd_tokenize(cfg, out);
    else if (name == "report") cmd_report(cfg, out);
    return kOk;
  } catch (const Error& e) {
    report_error(err, e.is_validation() ? "validation" : "runtime", e.kind(), e.what());
    return e.is_validation() ? kValidation : kRuntime;
  } catch (const json::exception& e) {
    report_error(err, "validation", "config", e.what());
    return kValidation;
  } catch (const std::exception& e) {
    report_error(err, "runtime", "internal", e.what());
    return kRuntime;
  }
}

}  // namespace qens::cli
