#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "qens/smsnet.hpp"
#include "testing.hpp"

using namespace qens;

namespace {

NetworkSpec small_spec(int depth, std::uint64_t seed, int in_ch = 1, int latent = 4, int hidden = 3, int sr = 2) {
  GraphHyperparams h;
  h.depth = depth;
  h.seed = seed;
  h.in_channels = in_ch;
  h.latent_dim = latent;
  h.hidden_channels = hidden;
  h.spatial_rank = sr;
  return sample_graph(h);
}

double pearson(const TensorD& a, const TensorD& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(a.size());
  mb /= double(b.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(SmsNet, EncodeShape) {
  ModelOptions<double> opt;
  opt.out_channels = 3;
  Model<double> m(small_spec(6, 1, 3, 8), opt, 2);
  std::mt19937_64 rng(1);
  const TensorD x = qtest::random_tensor({3, 64, 64}, rng);
  const TensorD z = m.encode(x);
  EXPECT_EQ(z.shape(), (Shape{8, 64, 64}));
  EXPECT_TRUE(z.all_finite());
  EXPECT_EQ(m.encode(x), z);
  const auto q = m.predict_quantiles(x);
  EXPECT_EQ(q.median.shape(), (Shape{3, 64, 64}));
  EXPECT_THROW(m.encode(qtest::random_tensor({2, 64, 64}, rng)), ShapeError);
}

TEST(SmsNet, ThreeDimensionalEncode) {
  ModelOptions<double> opt;
  Model<double> m(small_spec(4, 3, 1, 4, 2, 3), opt, 5);
  std::mt19937_64 rng(2);
  const TensorD z = m.encode(qtest::random_tensor({2, 1, 8, 8, 8}, rng));
  EXPECT_EQ(z.shape(), (Shape{2, 4, 8, 8, 8}));
}

TEST(SmsNet, ParameterCountMatchesGraphStats) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    ModelOptions<double> opt;
    opt.out_channels = 2;
    opt.head_width = 5;
    const auto spec = small_spec(8, s, 2, 6);
    Model<double> m(spec, opt, s);
    EXPECT_EQ(m.parameter_count(), graph_stats(spec, 2, 6, 5).parameter_count);
  }
}

TEST(SmsNet, CacheHighWaterMarkMatchesLivenessOracle) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto spec = small_spec(10, s, 1, 4, 2);
    Model<double> m(spec, ModelOptions<double>{}, s);
    std::mt19937_64 rng(s);
    CacheStats st;
    m.encode(qtest::random_tensor({1, 12, 12}, rng), &st);
    auto ch = node_channels(spec, 1);
    ch[std::size_t(spec.output_node())] = 4;
    std::vector<int> pos(std::size_t(spec.node_count())), last(std::size_t(spec.node_count()), -1);
    for (std::size_t i = 0; i < spec.topo_order.size(); ++i) pos[std::size_t(spec.topo_order[i])] = int(i);
    for (const auto& e : spec.edges) last[std::size_t(e.src)] = std::max(last[std::size_t(e.src)], pos[std::size_t(e.dst)]);
    long long peak = 0, all = 0;
    for (int v = 0; v < spec.node_count(); ++v) all += ch[std::size_t(v)];
    for (int i = 0; i < spec.node_count(); ++i) {
      long long live = 0;
      for (int u = 0; u < spec.node_count(); ++u)
        if (pos[std::size_t(u)] <= i && (last[std::size_t(u)] >= i || u == spec.output_node())) live += ch[std::size_t(u)];
      peak = std::max(peak, live);
    }
    EXPECT_EQ(st.peak_live_channels, peak);
    EXPECT_EQ(st.keep_all_channels, all);
    EXPECT_LE(st.peak_live_channels, st.keep_all_channels);
  }
}

TEST(SmsNet, InferenceMatchesTape) {
  ModelOptions<double> opt;
  opt.out_channels = 2;
  Model<double> m(small_spec(7, 9, 2), opt, 4);
  std::mt19937_64 rng(3);
  const TensorD x = qtest::random_tensor({2, 2, 10, 10}, rng);
  Tape<double> tape;
  const auto lat = m.encode(tape, tape.constant(x));
  const TensorD z = m.encode(x);
  for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(z[i], lat.value()[i], 1e-12);
  const auto f = m.predict_from_latent(z);
  const auto med = m.task_output(tape, lat, Task::median);
  const auto lo = m.task_output(tape, lat, Task::lower);
  const auto hi = m.task_output(tape, lat, Task::upper);
  for (std::size_t i = 0; i < f.median.size(); ++i) {
    EXPECT_NEAR(f.median[i], med.value()[i], 1e-12);
    EXPECT_NEAR(f.lower[i], lo.value()[i], 1e-12);
    EXPECT_NEAR(f.upper[i], hi.value()[i], 1e-12);
  }
}

TEST(SmsNet, NonCrossingRandomized) {
  std::mt19937_64 rng(5);
  long violations = 0, checked = 0;
  for (std::uint64_t s = 0; s < 40; ++s) {
    ModelOptions<double> opt;
    opt.out_channels = 2;
    if (s % 2) {
      opt.clamp.lo = {-0.2, 0.0};
      opt.clamp.hi = {0.3, 0.1};
    }
    Model<double> m(small_spec(5, s), opt, s);
    for (auto* p : m.all_params())
      for (auto& v : p->value.values()) v = std::normal_distribution<double>(0.0, 3.0)(rng);
    const auto f = m.predict_quantiles(qtest::random_tensor({1, 16, 16}, rng, -5, 5));
    for (std::size_t i = 0; i < f.median.size(); ++i) {
      violations += !(f.lower[i] <= f.median[i] && f.median[i] <= f.upper[i]);
      if (s % 2) {
        const std::size_t c = i / 256;
        violations += f.lower[i] < opt.clamp.lo[c] || f.upper[i] > opt.clamp.hi[c];
      }
      ++checked;
    }
  }
  EXPECT_EQ(violations, 0);
  EXPECT_EQ(checked, 40 * 512);
}

TEST(SmsNet, ZeroOffsetGivesLog2HalfWidth) {
  Model<double> m(small_spec(3, 2), ModelOptions<double>{}, 3);
  for (Task t : {Task::lower, Task::upper}) {
    auto& h = m.head(t);
    h.w3.value.fill(0.0);
    h.b3.value.fill(0.0);
  }
  std::mt19937_64 rng(4);
  const auto f = m.predict_quantiles(qtest::random_tensor({1, 6, 6}, rng));
  for (std::size_t i = 0; i < f.median.size(); ++i) {
    EXPECT_NEAR(f.median[i] - f.lower[i], std::log(2.0), 1e-15);
    EXPECT_NEAR(f.upper[i] - f.median[i], std::log(2.0), 1e-15);
  }
}

TEST(SmsNet, ClampSaturates) {
  ModelOptions<double> opt;
  opt.clamp.lo = {0.0};
  opt.clamp.hi = {1.0};
  Model<double> m(small_spec(3, 2), opt, 3);
  auto& h = m.head(Task::median);
  h.w3.value.fill(0.0);
  h.b3.value.fill(5.0);
  std::mt19937_64 rng(4);
  const auto f = m.predict_quantiles(qtest::random_tensor({1, 6, 6}, rng));
  for (std::size_t i = 0; i < f.median.size(); ++i) {
    EXPECT_EQ(f.median[i], 1.0);
    EXPECT_EQ(f.lower[i], 1.0);
    EXPECT_EQ(f.upper[i], 1.0);
  }
}

TEST(SmsNet, GradientFlowPerTask) {
  std::mt19937_64 rng(6);
  ModelOptions<double> opt;
  Model<double> m(small_spec(6, 4), opt, 8);
  const TensorD x = qtest::random_tensor({1, 1, 8, 8}, rng);
  const TensorD y = qtest::random_tensor({1, 1, 8, 8}, rng);
  for (Task t : {Task::median, Task::lower, Task::upper}) {
    m.zero_grad();
    Tape<double> tape;
    auto lat = m.encode(tape, tape.constant(x));
    auto loss = ops::pinball_loss(m.task_output(tape, lat, t), y, task_quantile(t, 0.05, 0.95));
    tape.backward(loss);
    double enc = 0.0;
    for (auto* p : m.encoder_params())
      for (double g : p->grad.values()) enc += std::abs(g);
    EXPECT_GT(enc, 0.0);
    for (Task o : {Task::median, Task::lower, Task::upper}) {
      double s = 0.0;
      for (auto* p : m.head(o).params())
        for (double g : p->grad.values()) s += std::abs(g);
      if (o == t) {
        EXPECT_GT(s, 0.0);
      } else {
        EXPECT_EQ(s, 0.0) << task_name(t) << " leaks into " << task_name(o);
      }
    }
  }
}

TEST(SmsNet, ModelGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  ModelOptions<double> opt;
  Model<double> m(small_spec(4, 6, 1, 3, 2), opt, 9);
  const TensorD x = qtest::random_tensor({1, 1, 6, 6}, rng);
  const TensorD y = qtest::random_tensor({1, 1, 6, 6}, rng);
  std::vector<Parameter<double>*> ps = m.all_params();
  for (auto* p : ps) p->zero_grad();
  {
    Tape<double> tape;
    auto lat = m.encode(tape, tape.constant(x));
    tape.backward(ops::weighted_sum(m.head_forward(tape, lat, Task::median), y));
  }
  double num = 0, den = 0;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    auto* p = ps[k];
    for (std::size_t i = 0; i < p->value.size(); i += 3) {
      const double keep = p->value[i];
      auto eval = [&]() {
        Tape<double> t;
        auto lat = m.encode(t, t.constant(x));
        return ops::weighted_sum(m.head_forward(t, lat, Task::median), y).value()[0];
      };
      p->value[i] = keep + 1e-6;
      const double up = eval();
      p->value[i] = keep - 1e-6;
      const double dn = eval();
      p->value[i] = keep;
      const double fd = (up - dn) / 2e-6;
      num += (fd - p->grad[i]) * (fd - p->grad[i]);
      den += fd * fd;
    }
  }
  EXPECT_LT(std::sqrt(num / std::max(den, 1e-12)), 1e-6);
}

TEST(SmsNet, ReceptiveFieldBound) {
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto spec = small_spec(3, s, 1, 3, 2);
    Model<double> m(spec, ModelOptions<double>{}, s);
    const int r = receptive_radius(spec);
    const int n = 2 * r + 9;
    std::mt19937_64 rng(s);
    TensorD x = qtest::random_tensor({1, std::size_t(n), std::size_t(n)}, rng);
    const TensorD base = m.encode(x);
    const int c = n / 2;
    TensorD far = x;
    far.at(0, std::size_t(c), std::size_t(c + r + 1)) += 10.0;
    const TensorD zf = m.encode(far);
    for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(zf.at(ch, std::size_t(c), std::size_t(c)), base.at(ch, std::size_t(c), std::size_t(c)));
    for (std::size_t i = 0; i < zf.size(); ++i) {
      const long yy = long(i % std::size_t(n * n)) / n, xx = long(i % std::size_t(n * n)) % n;
      if (std::max(std::labs(yy - c), std::labs(xx - (c + r + 1))) > r) {
        EXPECT_EQ(zf[i], base[i]);
      }
    }
  }
}

TEST(SmsNet, FrozenTaskLeavesOtherHeadsUntouched) {
  std::mt19937_64 rng(8);
  Model<double> m(small_spec(5, 1), ModelOptions<double>{}, 2);
  const Model<double> before = m;
  std::vector<ImagePair<double>> data;
  for (int i = 0; i < 3; ++i) data.push_back({qtest::random_tensor({1, 8, 8}, rng), qtest::random_tensor({1, 8, 8}, rng)});
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.fixed_task = Task::median;
  train(m, data, cfg);
  for (Task t : {Task::lower, Task::upper}) {
    const auto a = m.head(t).params();
    const auto b = before.head(t).params();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value);
  }
  EXPECT_NE(m.head(Task::median).w3.value, before.head(Task::median).w3.value);
}

TEST(SmsNet, TrainingIsDeterministic) {
  std::mt19937_64 rng(9);
  std::vector<ImagePair<double>> data;
  for (int i = 0; i < 4; ++i) data.push_back({qtest::random_tensor({1, 8, 8}, rng), qtest::random_tensor({1, 8, 8}, rng)});
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 2;
  cfg.task_switch_seed = 77;
  Model<double> a(small_spec(5, 1), ModelOptions<double>{}, 2), b = a;
  const auto ha = train(a, data, cfg);
  const auto hb = train(b, data, cfg);
  ASSERT_EQ(ha.size(), 8u);
  for (std::size_t i = 0; i < ha.size(); ++i) {
    EXPECT_EQ(ha[i].loss, hb[i].loss);
    EXPECT_EQ(ha[i].task, hb[i].task);
  }
  int seen[3] = {0, 0, 0};
  cfg.epochs = 60;
  for (const auto& r : train(a, data, cfg)) ++seen[int(r.task)];
  for (int k : seen) EXPECT_GT(k, 20);
}

TEST(SmsNet, IdentityTaskConverges) {
  std::mt19937_64 rng(10);
  std::vector<ImagePair<double>> data;
  for (int i = 0; i < 4; ++i) {
    TensorD x = qtest::random_tensor({1, 12, 12}, rng);
    data.push_back({x, x});
  }
  GraphHyperparams h;
  h.depth = 5;
  h.seed = 3;
  h.hidden_channels = 3;
  Model<double> m(sample_graph(h), ModelOptions<double>{}, 1);
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.learning_rate = 1e-2;
  cfg.fixed_task = Task::median;
  train(m, data, cfg);
  TensorD pred({4, 12, 12}), truth({4, 12, 12});
  for (std::size_t i = 0; i < 4; ++i) {
    const auto f = m.predict_quantiles(data[i].noisy);
    std::copy(f.median.data(), f.median.data() + 144, pred.data() + i * 144);
    std::copy(data[i].target.data(), data[i].target.data() + 144, truth.data() + i * 144);
  }
  EXPECT_GT(pearson(pred, truth), 0.99);
}

TEST(SmsNet, NonFiniteLossReportsContext) {
  std::vector<ImagePair<double>> data{{TensorD({1, 4, 4}, 1.0), TensorD({1, 4, 4}, std::nan(""))}};
  Model<double> m(small_spec(3, 1), ModelOptions<double>{}, 2);
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(m, data, cfg);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
  }
}

TEST(SmsNet, ModelFileRoundTrip) {
  ModelOptions<double> opt;
  opt.out_channels = 2;
  opt.head_width = 7;
  opt.clamp.lo = {0.0, -1.0};
  opt.clamp.hi = {1.0, 1.0};
  for (int latent : {3, 8}) {
    Model<double> m(small_spec(6, 11, 2, latent), opt, 12);
    std::stringstream ss;
    write_model(ss, m);
    const std::string bytes = ss.str();
    std::stringstream in(bytes);
    const auto back = read_model<double>(in);
    EXPECT_EQ(to_json(back.spec()).dump(), to_json(m.spec()).dump());
    EXPECT_EQ(back.latent_dim(), latent);
    const auto a = m.all_params();
    const auto b = back.all_params();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value);
    std::mt19937_64 rng(1);
    const TensorD x = qtest::random_tensor({2, 9, 9}, rng);
    EXPECT_EQ(back.predict_quantiles(x).upper, m.predict_quantiles(x).upper);
    std::stringstream cut(bytes.substr(0, bytes.size() - 10));
    EXPECT_THROW(read_model<double>(cut), FormatError);
    std::string bad = bytes;
    bad[7] = '2';
    std::stringstream magic(bad);
    EXPECT_THROW(read_model<double>(magic), FormatError);
  }
}

TEST(SmsNet, FloatModelFollowsDouble) {
  ModelOptions<float> of;
  ModelOptions<double> od;
  const auto spec = small_spec(5, 2);
  Model<float> mf(spec, of, 3);
  Model<double> md(spec, od, 3);
  std::mt19937_64 rng(2);
  const TensorD x = qtest::random_tensor({1, 10, 10}, rng);
  const auto zf = mf.encode(x.cast<float>());
  const auto zd = md.encode(x);
  for (std::size_t i = 0; i < zd.size(); ++i) EXPECT_NEAR(zf[i], zd[i], 1e-4 * (1 + std::abs(zd[i])));
}
