#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "qens/synth.hpp"

using namespace qens;
using namespace qens::synth;

namespace {

double corr(const TensorD& a, const TensorD& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(a.size());
  mb /= double(b.size());
  double s = 0, x = 0, y = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s += (a[i] - ma) * (b[i] - mb);
    x += (a[i] - ma) * (a[i] - ma);
    y += (b[i] - mb) * (b[i] - mb);
  }
  return s / std::sqrt(x * y);
}

double variance(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= double(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / double(v.size() - 1);
}

// Inverse DFT by direct summation, for comparison with the FFT path.
TensorD direct_surface_check(const SynthConfig& cfg, std::uint64_t seed) {
  const std::size_t H = cfg.height, W = cfg.width;
  Rng rng = make_rng(seed);
  std::normal_distribution<double> nd;
  const long ord = cfg.order;
  struct C {
    long k, l;
    double re, im;
  };
  std::vector<C> coeffs;
  for (long k = -ord; k <= ord; ++k)
    for (long l = -ord; l <= ord; ++l) {
      if (k * k + l * l > ord * ord || k < 0 || (k == 0 && l < 0)) continue;
      const double re = nd(rng), im = nd(rng);
      coeffs.push_back({k, l, re, (k == 0 && l == 0) ? 0.0 : im});
    }
  TensorD s({H, W});
  const double tp = 2 * M_PI;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double v = 0;
      for (const auto& c : coeffs) {
        const double ph = tp * (double(c.k) * double(y) / double(H) + double(c.l) * double(x) / double(W));
        if (c.k == 0 && c.l == 0) v += c.re;
        else v += 2 * (c.re * std::cos(ph) - c.im * std::sin(ph));
      }
      s[y * W + x] = v;
    }
  double m = 0, var = 0;
  for (double v : s.values()) m += v;
  m /= double(s.size());
  for (double v : s.values()) var += (v - m) * (v - m);
  var /= double(s.size());
  for (auto& v : s.values()) v = (v - m) / std::sqrt(var);
  return s;
}

}  // namespace

TEST(Synth, SurfaceIsRealAndNormalized) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    SynthConfig cfg;
    cfg.order = int(seed % 6) + 1;
    cfg.height = 32 + 2 * (seed % 3);
    cfg.width = 48 + seed % 2;
    SurfaceDiagnostics d;
    const TensorD s = random_surface(cfg, seed, &d);
    EXPECT_LT(d.max_imag, 1e-10);
    double m = 0, v = 0;
    for (double x : s.values()) m += x;
    m /= double(s.size());
    for (double x : s.values()) v += (x - m) * (x - m);
    v /= double(s.size());
    EXPECT_LT(std::abs(m), 1e-9);
    EXPECT_LT(std::abs(v - 1.0), 1e-9);
  }
}

TEST(Synth, SurfaceMatchesDirectFourierSum) {
  SynthConfig cfg;
  cfg.height = 24;
  cfg.width = 20;
  cfg.order = 3;
  const TensorD a = random_surface(cfg, 7);
  const TensorD b = direct_surface_check(cfg, 7);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(Synth, OrderZeroIsConstant) {
  SynthConfig cfg;
  cfg.order = 0;
  SurfaceDiagnostics d;
  const TensorD s = random_surface(cfg, 3, &d);
  EXPECT_LT(d.raw_var, 1e-20);
  for (double v : s.values()) EXPECT_EQ(v, 0.0);
  cfg.order = 32;
  EXPECT_THROW(random_surface(cfg, 1), ValueError);
  cfg.order = -1;
  EXPECT_THROW(random_surface(cfg, 1), ValueError);
}

TEST(Synth, ModifierExamples) {
  EXPECT_DOUBLE_EQ(modifier(0.3, 0.3, 2.0), 0.5);
  EXPECT_NEAR(modifier(1.0, 0.0, 2.0), 0.8807970779778823, 1e-15);
  EXPECT_NEAR(modifier(-800.0, 0.0, 2.0), 0.0, 1e-300);
  EXPECT_EQ(modifier(800.0, 0.0, 2.0), 1.0);
  std::mt19937_64 rng(1);
  std::vector<double> xs(1000);
  for (auto& x : xs) x = std::uniform_real_distribution<double>(-10, 10)(rng);
  std::sort(xs.begin(), xs.end());
  for (double kappa : {0.1, 2.0, 30.0})
    for (std::size_t i = 1; i < xs.size(); ++i) EXPECT_LE(modifier(xs[i - 1], 0.5, kappa), modifier(xs[i], 0.5, kappa));
}

TEST(Synth, ZeroSigmaIsNoiseless) {
  SynthConfig cfg;
  cfg.sigma = 0.0;
  const TensorD s = random_surface(cfg, 2);
  const auto c = corrupt(s, cfg, 5);
  EXPECT_EQ(c.observed, c.warped);
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(c.warped[i], s[i] * modifier(s[i], cfg.tau, cfg.kappa));
}

TEST(Synth, ZeroSignalLeavesAdditiveNoise) {
  SynthConfig cfg;
  const auto c = corrupt(TensorD({4, 4}, 0.0), cfg, 9);
  Rng rng = make_rng(9);
  std::normal_distribution<double> nd;
  for (std::size_t i = 0; i < 16; ++i) {
    const double e1 = nd(rng);
    nd(rng);
    EXPECT_EQ(c.observed[i], e1);
  }
}

TEST(Synth, NoiseVarianceMatchesMonteCarlo) {
  const double sigma = 1.0, tau = 0.0, kappa = 2.0;
  for (double s : {-1.0, 0.0, 1.0}) {
    std::mt19937_64 a(11), b(12);
    std::normal_distribution<double> n(0.0, sigma);
    std::vector<double> lib(1000000), ref(1000000);
    for (auto& v : lib) {
      const double e1 = n(a), e2 = n(a);
      v = observe(s, e1, e2, tau, kappa);
    }
    for (auto& v : ref) {
      const double e1 = n(b), e2 = n(b);
      v = s + e1 + std::fabs(s) * std::fabs(e2) / (1.0 + std::exp(-kappa * (s - tau)));
    }
    const double vl = variance(lib), vr = variance(ref);
    EXPECT_NEAR(vl / vr, 1.0, 0.02) << "s = " << s;
    const double m = 1.0 / (1.0 + std::exp(-kappa * (s - tau)));
    const double closed = sigma * sigma + s * s * m * m * sigma * sigma * (1.0 - 2.0 / M_PI);
    EXPECT_NEAR(vl / closed, 1.0, 0.02) << "s = " << s;
  }
}

TEST(Synth, CorruptUsesFormulaPerPixel) {
  SynthConfig cfg;
  cfg.sigma = 0.7;
  const TensorD s = random_surface(cfg, 4);
  const auto c = corrupt(s, cfg, 8);
  Rng rng = make_rng(8);
  std::normal_distribution<double> nd;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double e1 = 0.7 * nd(rng), e2 = 0.7 * nd(rng);
    const double w = s[i] / (1.0 + std::exp(-2.0 * s[i]));
    EXPECT_NEAR(c.warped[i], w, 1e-14);
    EXPECT_NEAR(c.observed[i], w + e1 + std::fabs(w) * std::fabs(e2) / (1.0 + std::exp(-2.0 * w)), 1e-12);
  }
}

TEST(Synth, Heteroskedastic) {
  SynthConfig cfg;
  cfg.height = cfg.width = 256;
  cfg.order = 12;
  const auto c = corrupt(random_surface(cfg, 21), cfg, 22);
  std::vector<double> low, high;
  for (std::size_t i = 0; i < c.warped.size(); ++i) {
    const double r = c.observed[i] - c.warped[i];
    if (std::abs(c.warped[i]) < 0.1) low.push_back(r);
    if (c.warped[i] > 1.5) high.push_back(r);
  }
  ASSERT_GT(low.size(), 1000u);
  ASSERT_GT(high.size(), 1000u);
  EXPECT_GT(variance(high), 1.5 * variance(low));
}

TEST(Synth, DatasetDefaults) {
  SynthConfig cfg;
  const auto d = make_dataset(cfg);
  ASSERT_EQ(d.train.size(), 8u);
  ASSERT_EQ(d.test.size(), 8u);
  ASSERT_EQ(d.calibration.size(), 8u);
  EXPECT_EQ(d.train[0].noisy.shape(), (Shape{1, 64, 64}));
  EXPECT_EQ(d.train[0].target.shape(), (Shape{1, 64, 64}));
  const auto again = make_dataset(cfg);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(again.test[i].noisy, d.test[i].noisy);
    EXPECT_EQ(again.calibration[i].target, d.calibration[i].target);
  }
  const TensorD s = random_surface(cfg, substream(d.train_seeds[3], "surface"));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(d.train[3].target[i], s[i] * modifier(s[i], 0.0, 2.0));
}

TEST(Synth, SplitsAreIndependent) {
  SynthConfig cfg;
  const auto d = make_dataset(cfg);
  const std::vector<const std::vector<ImagePair<double>>*> splits{&d.train, &d.test, &d.calibration};
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b)
      for (const auto& p : *splits[a])
        for (const auto& q : *splits[b]) {
          EXPECT_LT(std::abs(corr(p.noisy, q.noisy)), 0.5);
          EXPECT_LT(std::abs(corr(p.target, q.target)), 0.5);
        }
  std::set<std::uint64_t> seeds(d.train_seeds.begin(), d.train_seeds.end());
  seeds.insert(d.test_seeds.begin(), d.test_seeds.end());
  seeds.insert(d.calibration_seeds.begin(), d.calibration_seeds.end());
  EXPECT_EQ(seeds.size(), 24u);
}

TEST(Synth, ConfigJsonRoundTrip) {
  SynthConfig cfg;
  cfg.order = 3;
  cfg.sigma = 0.25;
  cfg.seed = 123456789012345ULL;
  cfg.n_test = 2;
  const auto back = synth_config_from_json(nlohmann::json::parse(to_json(cfg).dump()));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_EQ(back.seed, cfg.seed);
}
