#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"

namespace mvadapt {
namespace {

namespace fs = std::filesystem;

const fs::path kFixtures = MVADAPT_FIXTURES;

struct Result {
  int code;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "mvadapt");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  ::testing::internal::CaptureStderr();
  ::testing::internal::CaptureStdout();
  const int code = cli::cli_dispatch(static_cast<int>(argv.size()), argv.data());
  ::testing::internal::GetCapturedStdout();
  return {code, ::testing::internal::GetCapturedStderr()};
}

fs::path tmp(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("mvadapt_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path small_config() {
  const auto p = fs::temp_directory_path() / "mvadapt_cli_small.json";
  std::ofstream(p) << R"({"train_scenes": 1, "test_scenes": 1, "scenes": {"image_size": 32, "n_cameras": 5},
                          "backbone": {"image_size": 32, "embed_dim": 16, "n_blocks": 1, "n_heads": 2}})";
  return p;
}

// Last JSON line on stderr.
nlohmann::json error_json(const std::string& err) {
  const auto pos = err.rfind("{\"error\"");
  EXPECT_NE(pos, std::string::npos) << err;
  return nlohmann::json::parse(err.substr(pos));
}

TEST(Cli, HelpExitsZero) {
  EXPECT_EQ(run({"--help"}).code, cli::kOk);
  EXPECT_EQ(run({"train", "--help"}).code, cli::kOk);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, cli::kUsage);
  EXPECT_EQ(run({"no-such-command"}).code, cli::kUsage);
  EXPECT_EQ(run({"gen-scenes"}).code, cli::kUsage);  // --out is required
  const auto r = run({"gen-scenes", "--out", tmp("usage").string(), "--bogus"});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_EQ(error_json(r.err).at("error"), "usage");
}

TEST(Cli, ConfigErrorsExitThreeAndNameTheField) {
  auto r = run({"gen-scenes", "--out", tmp("cfg1").string(), "--set", "train.lr=-1"});
  EXPECT_EQ(r.code, cli::kConfig);
  EXPECT_EQ(error_json(r.err).at("field"), "train.lr");

  r = run({"gen-scenes", "--out", tmp("cfg2").string(), "--set", "scenes.fov_deg=\"wide\""});
  EXPECT_EQ(r.code, cli::kConfig);
  EXPECT_EQ(error_json(r.err).at("field"), "scenes.fov_deg");

  r = run({"gen-scenes", "--out", tmp("cfg3").string(), "--set", "nonsense=1"});
  EXPECT_EQ(r.code, cli::kConfig);
  EXPECT_EQ(error_json(r.err).at("field"), "nonsense");

  r = run({"gen-scenes", "--out", tmp("cfg4").string(), "--set", "backbone.image_size=48"});
  EXPECT_EQ(r.code, cli::kConfig);

  r = run({"gen-scenes", "--out", tmp("cfg5").string(), "--set", "train.seed=3"});
  EXPECT_EQ(r.code, cli::kConfig);
  EXPECT_EQ(error_json(r.err).at("field"), "train.seed");

  const auto bad = fs::temp_directory_path() / "mvadapt_cli_bad.json";
  std::ofstream(bad) << "{ not json";
  r = run({"gen-scenes", "--out", tmp("cfg6").string(), "--config", bad.string()});
  EXPECT_EQ(r.code, cli::kConfig);
}

TEST(Cli, GenScenesIsDeterministic) {
  const auto cfg = small_config().string();
  const auto a = tmp("gen_a"), b = tmp("gen_b");
  ASSERT_EQ(run({"gen-scenes", "-c", cfg, "-o", a.string(), "--seed", "7"}).code, cli::kOk);
  ASSERT_EQ(run({"gen-scenes", "-c", cfg, "-o", b.string(), "--seed", "7"}).code, cli::kOk);
  for (const char* f : {"train/scene_000/scene.json", "train/scene_000/view_00.bin", "test/scene_001/view_04.bin"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  const auto manifest = nlohmann::json::parse(slurp(a / "run.json"));
  EXPECT_EQ(manifest.at("command"), "gen-scenes");
  EXPECT_EQ(manifest.at("seed"), 7);
  EXPECT_EQ(manifest.at("config_hash"), nlohmann::json::parse(slurp(b / "run.json")).at("config_hash"));
  const auto img = read_image(a / "train/scene_000/view_00.bin");
  EXPECT_EQ(img.width, 32);
}

TEST(Cli, IngestColmapWritesCorrespondences) {
  const auto out = tmp("ingest");
  ASSERT_EQ(run({"ingest-colmap", "--model", (kFixtures / "colmap_small").string(), "-o", out.string()}).code, cli::kOk);
  const auto summary = nlohmann::json::parse(slurp(out / "summary.json"));
  EXPECT_EQ(summary.at("images"), 3);
  EXPECT_EQ(summary.at("points3d"), 2);
  EXPECT_TRUE(fs::exists(out / "correspondences.csv"));
}

TEST(Cli, MalformedColmapNamesFileAndLine) {
  const auto r = run({"ingest-colmap", "--model", (kFixtures / "colmap_bad_track").string(), "-o", tmp("bad").string()});
  EXPECT_EQ(r.code, cli::kConfig);
  EXPECT_EQ(error_json(r.err).at("field"), "points3D.txt:4");
}

TEST(Cli, OverridesParseJsonOrString) {
  nlohmann::json j = nlohmann::json::object();
  cli::apply_override(j, "train.epochs=3");
  cli::apply_override(j, "train.objective=naive");
  cli::apply_override(j, "noise_levels=[0,0.5]");
  EXPECT_EQ(j["train"]["epochs"], 3);
  EXPECT_EQ(j["train"]["objective"], "naive");
  EXPECT_EQ(j["noise_levels"].size(), 2u);
  EXPECT_THROW(cli::apply_override(j, "novalue"), ConfigError);
  EXPECT_THROW(cli::apply_override(j, "a..b=1"), ConfigError);
}

}  // namespace
}  // namespace mvadapt
