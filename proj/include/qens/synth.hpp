#pragma once

// Synthetic benchmark: band-limited random Fourier surfaces, a logistic warp
// and heteroskedastic, signal-dependent noise.

#include <cmath>
#include <complex>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <fftw3.h>
#include <nlohmann/json.hpp>

#include "qens/error.hpp"
#include "qens/rng.hpp"
#include "qens/smsnet.hpp"
#include "qens/tensor.hpp"

namespace qens::synth {

struct SynthConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  int order = 4;
  double tau = 0.0;
  double kappa = 2.0;
  double sigma = 1.0;
  std::uint64_t seed = 0;
  int n_train = 8;
  int n_test = 8;
  int n_calibration = 8;

  void validate() const {
    if (order < 0) throw ValueError("synth: order must be >= 0");
    if (sigma < 0) throw ValueError("synth: sigma must be >= 0");
    if (height < 2 || width < 2) throw ValueError("synth: image must be at least 2x2");
    if (2 * static_cast<std::size_t>(order) >= std::min(height, width))
      throw ValueError("synth: order " + std::to_string(order) + " too large for a " + std::to_string(height) + "x" +
                       std::to_string(width) + " grid");
    if (n_train < 0 || n_test < 0 || n_calibration < 0) throw ValueError("synth: image counts must be >= 0");
  }
};

struct SurfaceDiagnostics {
  double max_imag = 0.0;  // largest |imaginary part| after the inverse FFT
  double raw_mean = 0.0;
  double raw_var = 0.0;   // variance before normalization
};

/// Zero-mean, unit-variance random surface [H, W]. Coefficients inside the
/// disc k^2 + l^2 <= order^2 are drawn as N(0,1) + i N(0,1) for one member
/// of each (k,l)/(-k,-l) pair and mirrored as the conjugate; self-conjugate
/// frequencies are forced real. A constant surface (order 0) has no
/// variance to normalize and is returned as zeros.
inline TensorD random_surface(const SynthConfig& cfg, std::uint64_t seed, SurfaceDiagnostics* diag = nullptr) {
  cfg.validate();
  const std::size_t H = cfg.height, W = cfg.width;
  const auto h = static_cast<long>(H), w = static_cast<long>(W);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::complex<double>> spec(H * W, 0.0);
  auto idx = [&](long k, long l) {
    const long r = ((k % h) + h) % h;
    const long c = ((l % w) + w) % w;
    return static_cast<std::size_t>(r) * W + static_cast<std::size_t>(c);
  };
  const long ord = cfg.order;
  for (long k = -ord; k <= ord; ++k) {
    for (long l = -ord; l <= ord; ++l) {
      if (k * k + l * l > ord * ord) continue;
      // Representative of the pair: k > 0, or k == 0 and l >= 0.
      if (k < 0 || (k == 0 && l < 0)) continue;
      const double re = nd(rng);
      const double im = nd(rng);
      if (k == 0 && l == 0) {
        spec[idx(0, 0)] = {re, 0.0};
        continue;
      }
      spec[idx(k, l)] = {re, im};
      spec[idx(-k, -l)] = {re, -im};
    }
  }
  std::vector<std::complex<double>> out(H * W);
  fftw_plan plan = fftw_plan_dft_2d(static_cast<int>(H), static_cast<int>(W), reinterpret_cast<fftw_complex*>(spec.data()),
                                    reinterpret_cast<fftw_complex*>(out.data()), FFTW_BACKWARD, FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);

  TensorD s({H, W});
  double max_imag = 0.0, mean = 0.0;
  for (std::size_t i = 0; i < H * W; ++i) {
    s[i] = out[i].real();
    max_imag = std::max(max_imag, std::abs(out[i].imag()));
    mean += s[i];
  }
  mean /= static_cast<double>(H * W);
  double var = 0.0;
  for (std::size_t i = 0; i < H * W; ++i) var += (s[i] - mean) * (s[i] - mean);
  var /= static_cast<double>(H * W);
  if (diag) *diag = {max_imag, mean, var};
  // Variance at rounding level means only the DC term survived.
  if (var <= 1e-20 * (1.0 + mean * mean)) var = 0.0;
  const double scale = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
  for (std::size_t i = 0; i < H * W; ++i) s[i] = (s[i] - mean) * scale;
  if (var > 0.0) {
    // One refinement pass removes the rounding left by the first pass.
    double m2 = 0.0, v2 = 0.0;
    for (std::size_t i = 0; i < H * W; ++i) m2 += s[i];
    m2 /= static_cast<double>(H * W);
    for (std::size_t i = 0; i < H * W; ++i) v2 += (s[i] - m2) * (s[i] - m2);
    v2 /= static_cast<double>(H * W);
    const double sc2 = 1.0 / std::sqrt(v2);
    for (std::size_t i = 0; i < H * W; ++i) s[i] = (s[i] - m2) * sc2;
  }
  return s;
}

/// Logistic modifier 1 / (1 + exp(-kappa (x - tau))).
inline double modifier(double x, double tau, double kappa) {
  const double z = kappa * (x - tau);
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline TensorD modifier(const TensorD& x, double tau, double kappa) {
  TensorD out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = modifier(x[i], tau, kappa);
  return out;
}

struct Corrupted {
  TensorD warped;    // S~ = S * M(S)
  TensorD observed;  // O = S~ + e1 + |S~| sqrt(e2^2) M(S~)
};

/// Noise for one pixel of warped value `s` given draws e1, e2 ~ N(0, sigma^2).
inline double observe(double s, double e1, double e2, double tau, double kappa) {
  return s + e1 + std::abs(s) * std::sqrt(e2 * e2) * modifier(s, tau, kappa);
}

inline Corrupted corrupt(const TensorD& surface, const SynthConfig& cfg, std::uint64_t noise_seed) {
  Corrupted c{TensorD(surface.shape()), TensorD(surface.shape())};
  Rng rng = make_rng(noise_seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t i = 0; i < surface.size(); ++i) {
    const double s = surface[i] * modifier(surface[i], cfg.tau, cfg.kappa);
    c.warped[i] = s;
    const double e1 = cfg.sigma * nd(rng);
    const double e2 = cfg.sigma * nd(rng);
    c.observed[i] = observe(s, e1, e2, cfg.tau, cfg.kappa);
  }
  return c;
}

struct Dataset {
  std::vector<ImagePair<double>> train, test, calibration;
  std::vector<std::uint64_t> train_seeds, test_seeds, calibration_seeds;
};

/// Seed of image `i` in split `role` ("train", "test", "calibration").
inline std::uint64_t image_seed(std::uint64_t master, const std::string& role, int i) {
  return substream(master, role, static_cast<std::uint64_t>(i));
}

/// One (observed, warped) pair, each shaped [1, H, W].
inline ImagePair<double> make_pair(const SynthConfig& cfg, std::uint64_t img_seed) {
  TensorD s = random_surface(cfg, substream(img_seed, "surface"));
  Corrupted c = corrupt(s, cfg, substream(img_seed, "noise"));
  const Shape shp{1, cfg.height, cfg.width};
  return {c.observed.reshaped(shp), c.warped.reshaped(shp)};
}

inline Dataset make_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Dataset d;
  auto fill = [&](const std::string& role, int n, std::vector<ImagePair<double>>& out, std::vector<std::uint64_t>& seeds) {
    for (int i = 0; i < n; ++i) {
      seeds.push_back(image_seed(cfg.seed, role, i));
      out.push_back(make_pair(cfg, seeds.back()));
    }
  };
  fill("train", cfg.n_train, d.train, d.train_seeds);
  fill("test", cfg.n_test, d.test, d.test_seeds);
  fill("calibration", cfg.n_calibration, d.calibration, d.calibration_seeds);
  return d;
}

template <typename T>
std::vector<ImagePair<T>> cast_pairs(const std::vector<ImagePair<double>>& src) {
  std::vector<ImagePair<T>> out;
  for (const auto& p : src) out.push_back({p.noisy.template cast<T>(), p.target.template cast<T>()});
  return out;
}

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"height", c.height}, {"width", c.width}, {"order", c.order}, {"tau", c.tau}, {"kappa", c.kappa},
          {"sigma", c.sigma}, {"seed", c.seed}, {"n_train", c.n_train}, {"n_test", c.n_test},
          {"n_calibration", c.n_calibration}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.order = j.value("order", c.order);
  c.tau = j.value("tau", c.tau);
  c.kappa = j.value("kappa", c.kappa);
  c.sigma = j.value("sigma", c.sigma);
  c.seed = j.value("seed", c.seed);
  c.n_train = j.value("n_train", c.n_train);
  c.n_test = j.value("n_test", c.n_test);
  c.n_calibration = j.value("n_calibration", c.n_calibration);
  return c;
}

}  // namespace qens::synth
