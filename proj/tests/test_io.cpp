#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "qens/io.hpp"
#include "testing.hpp"

using namespace qens;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("qens_io_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Io, OverridesCreateAndReplace) {
  nlohmann::json cfg = {{"train", {{"epochs", 50}}}, {"name", "a"}};
  io::apply_override(cfg, "train.epochs=7");
  io::apply_override(cfg, "train.lr=1e-3");
  io::apply_override(cfg, "graph.degree_clamp=[3,8]");
  io::apply_override(cfg, "name=plain text");
  io::apply_override(cfg, "flag=true");
  EXPECT_EQ(cfg["train"]["epochs"], 7);
  EXPECT_DOUBLE_EQ(cfg["train"]["lr"].get<double>(), 1e-3);
  EXPECT_EQ(cfg["graph"]["degree_clamp"], nlohmann::json::array({3, 8}));
  EXPECT_EQ(cfg["name"], "plain text");
  EXPECT_EQ(cfg["flag"], true);
}

TEST(Io, OverrideErrors) {
  nlohmann::json cfg = {{"a", 1}};
  EXPECT_THROW(io::apply_override(cfg, "novalue"), ValueError);
  EXPECT_THROW(io::apply_override(cfg, "=3"), ValueError);
  EXPECT_THROW(io::apply_override(cfg, "a..b=3"), ValueError);
  EXPECT_THROW(io::apply_override(cfg, "a.b=3"), ValueError);
  EXPECT_EQ(cfg, (nlohmann::json{{"a", 1}}));
}

TEST(Io, LoadConfigAppliesOverridesInOrder) {
  const auto d = scratch("cfg");
  io::write_json(d / "c.json", {{"seed", 1}, {"synth", {{"order", 4}}}});
  const auto cfg = io::load_config((d / "c.json").string(), {"seed=2", "seed=3", "synth.sigma=0.5"});
  EXPECT_EQ(cfg["seed"], 3);
  EXPECT_EQ(cfg["synth"]["order"], 4);
  EXPECT_EQ(cfg["synth"]["sigma"], 0.5);
  EXPECT_EQ(io::load_config("", {"x=1"}), (nlohmann::json{{"x", 1}}));
  std::ofstream(d / "bad.json") << "{not json";
  EXPECT_THROW(io::load_config((d / "bad.json").string(), {}), FormatError);
  std::ofstream(d / "arr.json") << "[1,2]";
  EXPECT_THROW(io::load_config((d / "arr.json").string(), {}), FormatError);
  EXPECT_THROW(io::load_config((d / "missing.json").string(), {}), IoError);
  fs::remove_all(d);
}

TEST(Io, AtomicWriteLeavesNoPartialFile) {
  const auto d = scratch("atomic");
  const fs::path p = d / "sub" / "out.txt";
  io::write_text(p, "first");
  EXPECT_EQ(io::read_text(p), "first");
  EXPECT_THROW(io::atomic_write(p, [](std::ostream& os) {
                 os << "partial";
                 throw IoError("writer failed");
               }),
               IoError);
  EXPECT_EQ(io::read_text(p), "first");
  EXPECT_FALSE(fs::exists(d / "sub" / "out.txt.tmp"));
  io::write_text(p, "second");
  EXPECT_EQ(io::read_text(p), "second");
  EXPECT_FALSE(fs::exists(d / "sub" / "out.txt.tmp"));
  fs::remove_all(d);
}

TEST(Io, TensorFilesRoundTrip) {
  const auto d = scratch("tensor");
  std::mt19937_64 rng(1);
  const TensorD t = qtest::random_tensor({2, 3, 5}, rng);
  io::save_tensor(d / "t.bin", t);
  EXPECT_EQ(io::load_tensor<double>(d / "t.bin"), t);
  const TensorF f = t.cast<float>();
  io::save_tensor(d / "f.bin", f);
  EXPECT_EQ(io::load_tensor<float>(d / "f.bin"), f);
  std::ofstream(d / "junk.bin") << "garbage bytes";
  EXPECT_THROW(io::load_tensor<double>(d / "junk.bin"), FormatError);
  EXPECT_THROW(io::load_tensor<double>(d / "none.bin"), IoError);
  fs::remove_all(d);
}
