#include <gtest/gtest.h>

#include <random>
#include <set>

#include "qens/tiling.hpp"
#include "testing.hpp"

using namespace qens;
using namespace qens::tiling;

namespace {

// Every admissible origin by brute force: start at 0, step by the stride
// while a full patch fits, then add the flush boundary origin.
std::vector<std::size_t> brute_origins(std::size_t n, std::size_t p, std::size_t ov) {
  std::set<std::size_t> o;
  for (std::size_t x = 0; x <= n - p; ++x)
    if (x % (p - ov) == 0) o.insert(x);
  o.insert(n - p);
  return {o.begin(), o.end()};
}

TensorD ramp(const Shape& s, std::mt19937_64& rng) { return qtest::random_tensor(s, rng, -3, 3); }

}  // namespace

TEST(Tiling, SinglePatchIsIdentity) {
  std::mt19937_64 rng(1);
  const TensorD img = ramp({3, 64, 64}, rng);
  const auto p = extract_patches(img, {64, 64}, {0, 0});
  EXPECT_EQ(p.grid.count(), 1u);
  EXPECT_EQ(p.stack.shape(), (Shape{1, 3, 64, 64}));
  EXPECT_EQ(stitch(p.stack, p.grid), img);
}

TEST(Tiling, NinePatchesAt128) {
  const auto g = make_grid({128, 128}, {64, 64}, {32, 32});
  ASSERT_EQ(g.count(), 9u);
  std::vector<std::vector<std::size_t>> want;
  for (std::size_t y : {0, 32, 64})
    for (std::size_t x : {0, 32, 64}) want.push_back({y, x});
  EXPECT_EQ(g.origins, want);
  EXPECT_EQ(g.stride, (std::vector<std::size_t>{32, 32}));
}

TEST(Tiling, BoundaryOriginClamped) {
  EXPECT_EQ(axis_origins(100, 64, 32), (std::vector<std::size_t>{0, 32, 36}));
  const auto g = make_grid({100, 100}, {64, 64}, {32, 32});
  EXPECT_EQ(g.count(), 9u);
  EXPECT_EQ(g.origins.back(), (std::vector<std::size_t>{36, 36}));
}

TEST(Tiling, OriginsMatchBruteForceOracle) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rank = 2 + std::size_t(trial % 2);
    Shape src;
    std::vector<std::size_t> patch, ov;
    for (std::size_t a = 0; a < rank; ++a) {
      const std::size_t n = std::uniform_int_distribution<std::size_t>(rank == 2 ? 8 : 4, rank == 2 ? 90 : 20)(rng);
      const std::size_t p = std::uniform_int_distribution<std::size_t>(1, n)(rng);
      src.push_back(n);
      patch.push_back(p);
      ov.push_back(std::uniform_int_distribution<std::size_t>(0, p - 1)(rng));
    }
    const auto g = make_grid(src, patch, ov);
    std::size_t expected = 1;
    for (std::size_t a = 0; a < rank; ++a) {
      const auto o = brute_origins(src[a], patch[a], ov[a]);
      EXPECT_EQ(axis_origins(src[a], patch[a], patch[a] - ov[a]), o);
      expected *= o.size();
    }
    EXPECT_EQ(g.count(), expected);
    EXPECT_TRUE(std::is_sorted(g.origins.begin(), g.origins.end()));
    std::vector<int> covered(shape_numel(src), 0);
    for (const auto& o : g.origins) {
      tiling::detail::for_each_patch_element(g, o, [&](std::size_t so, std::size_t, const auto&, std::size_t) { ++covered[so]; });
    }
    for (int c : covered) EXPECT_GE(c, 1);
    std::mt19937_64 r2{static_cast<std::uint64_t>(trial)};
    const TensorD img = ramp(src, r2);
    const auto p = extract_patches(img, patch, ov);
    const TensorD back = stitch(p.stack, p.grid);
    for (std::size_t i = 0; i < img.size(); ++i) ASSERT_NEAR(back[i], img[i], 1e-6);
  }
}

TEST(Tiling, PatchContentsMatchSource) {
  std::mt19937_64 rng(2);
  const TensorD img = ramp({2, 20, 30}, rng);
  const auto p = extract_patches(img, {8, 12}, {3, 5});
  for (std::size_t k = 0; k < p.grid.count(); ++k) {
    const auto& o = p.grid.origins[k];
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 12; ++x)
          EXPECT_EQ(p.stack[((k * 2 + c) * 8 + y) * 12 + x], img[(c * 20 + o[0] + y) * 30 + o[1] + x]);
  }
}

TEST(Tiling, ConstantPatchesStitchExactly) {
  const auto g = make_grid({1, 100, 77}, {64, 40}, {32, 13});
  TensorD stack({g.count(), 1, 64, 40}, 2.75);
  const TensorD out = stitch(stack, g);
  for (double v : out.values()) EXPECT_EQ(v, 2.75);
}

TEST(Tiling, RoundTrip2DAnd3DFloat) {
  std::mt19937_64 rng(3);
  {
    TensorF img = ramp({3, 128, 128}, rng).cast<float>();
    const auto p = extract_patches(img, {64, 64}, {32, 32});
    EXPECT_EQ(p.grid.count(), 9u);
    const TensorF back = stitch(p.stack, p.grid);
    for (std::size_t i = 0; i < img.size(); ++i) ASSERT_NEAR(back[i], img[i], 1e-6);
  }
  {
    TensorF vol = ramp({1, 96, 64, 80}, rng).cast<float>();
    const auto p = extract_patches(vol, {64, 64, 64}, {32, 32, 32});
    EXPECT_EQ(p.grid.count(), 2u * 1u * 2u);
    const TensorF back = stitch(p.stack, p.grid);
    for (std::size_t i = 0; i < vol.size(); ++i) ASSERT_NEAR(back[i], vol[i], 1e-6);
  }
}

TEST(Tiling, StitchTakesLeadingAxesFromStack) {
  const auto g = make_grid({1, 20, 20}, {10, 10}, {4, 4});
  TensorD stack({g.count(), 3, 10, 10});
  for (std::size_t k = 0; k < g.count(); ++k)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 100; ++i) stack[(k * 3 + c) * 100 + i] = double(c);
  const TensorD out = stitch(stack, g);
  EXPECT_EQ(out.shape(), (Shape{3, 20, 20}));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_DOUBLE_EQ(out[i], double(i / 400));
}

TEST(Tiling, Errors) {
  EXPECT_THROW(make_grid({64, 64}, {64, 64}, {64, 0}), ValueError);
  EXPECT_THROW(make_grid({64, 64}, {65, 64}, {0, 0}), ValueError);
  EXPECT_THROW(make_grid({64, 64}, {32}, {0, 0}), ValueError);
  const auto g = make_grid({16, 16}, {8, 8}, {4, 4});
  EXPECT_THROW(stitch(TensorD({g.count() - 1, 8, 8}), g), ShapeError);
  EXPECT_THROW(stitch(TensorD({g.count(), 8, 7}), g), ShapeError);
}

TEST(Tiling, GridJsonRoundTrip) {
  const auto g = make_grid({2, 50, 70}, {32, 32}, {8, 16});
  const auto back = grid_from_json(nlohmann::json::parse(to_json(g).dump()));
  EXPECT_EQ(back.source, g.source);
  EXPECT_EQ(back.patch, g.patch);
  EXPECT_EQ(back.stride, g.stride);
  EXPECT_EQ(back.origins, g.origins);
  auto bad = to_json(g);
  bad["origins"][0][0] = 40;
  EXPECT_THROW(grid_from_json(bad), FormatError);
  EXPECT_THROW(grid_from_json(nlohmann::json::object()), FormatError);
}

TEST(Split, RowCountsAndFractions) {
  std::mt19937_64 rng(4);
  const TensorD img = ramp({753, 10}, rng);
  const auto s = spatial_split(img, ranges_from_sizes(420, 128, 205), 0);
  EXPECT_EQ(s.train.shape(), (Shape{420, 10}));
  EXPECT_EQ(s.test.shape(), (Shape{128, 10}));
  EXPECT_EQ(s.calibration.shape(), (Shape{205, 10}));
  EXPECT_EQ(s.test[0], img[420 * 10]);
  EXPECT_EQ(s.calibration[205 * 10 - 1], img.values().back());
  const auto f = ranges_from_fractions(99, 1.0 / 3, 1.0 / 3, 1.0 / 3);
  EXPECT_EQ(f.train.size(), 33u);
  EXPECT_EQ(f.test.size(), 33u);
  EXPECT_EQ(f.calibration.size(), 33u);
  EXPECT_THROW(ranges_from_fractions(99, 0.5, 0.5, 0.5), ValueError);
}

TEST(Split, PartitionAndNoLeakage) {
  const std::size_t H = 753, W = 40;
  TensorD idx({1, H, W});
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = double(i);
  const auto s = spatial_split(idx, ranges_from_sizes(420, 128, 205), 1);
  std::set<long> train, test, cal;
  for (double v : s.train.values()) train.insert(long(v));
  for (double v : s.test.values()) test.insert(long(v));
  for (double v : s.calibration.values()) cal.insert(long(v));
  EXPECT_EQ(train.size() + test.size() + cal.size(), H * W);
  std::set<long> all(train);
  all.insert(test.begin(), test.end());
  all.insert(cal.begin(), cal.end());
  EXPECT_EQ(all.size(), H * W);
  const auto p = extract_patches(s.train, {128, 40}, {64, 0});
  for (double v : p.stack.values()) EXPECT_EQ(cal.count(long(v)), 0u);
  for (double v : p.stack.values()) EXPECT_EQ(test.count(long(v)), 0u);
}

TEST(Split, ArbitraryAxisAndErrors) {
  std::mt19937_64 rng(5);
  const TensorD img = ramp({4, 9, 12}, rng);
  const auto s = spatial_split(img, ranges_from_sizes(6, 3, 3), 2);
  EXPECT_EQ(s.train.shape(), (Shape{4, 9, 6}));
  EXPECT_EQ(s.calibration[0], img[9]);
  SplitRanges bad{{0, 5}, {4, 8}, {8, 9}};
  EXPECT_THROW(spatial_split(img, bad, 1), ValueError);
  EXPECT_THROW(spatial_split(img, ranges_from_sizes(5, 3, 3), 1), ValueError);
  EXPECT_THROW(spatial_split(img, ranges_from_sizes(1, 1, 1), 3), ValueError);
}
