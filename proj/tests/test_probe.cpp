#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mvadapt/probe.hpp"

namespace mvadapt {
namespace {

Vec3 random_unit(Rng& rng) { return Vec3(gaussian(rng), gaussian(rng), gaussian(rng)).normalized(); }

TEST(ProbeOutput, SigmaIsPositiveEvenForHugeNegativeLogits) {
  const auto raw = Tensor<double>::from({3, 4}, {1, 0, 0, -1e4, 0, 1, 0, 0, 0, 0, 1, 50});
  const auto out = split_probe_output(raw);
  for (double s : out.sigma.data()) EXPECT_GE(s, kSigmaFloor * (1 - 1e-6));
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_NEAR(std::hypot(out.normals.at(i, 0), out.normals.at(i, 1), out.normals.at(i, 2)), 1, 1e-12);
}

// Rotate each truth normal by a known angle; RMSE and recalls must follow the angles.
TEST(ProbeMetrics, MatchesAngleOracleOnManySamples) {
  Rng rng(1);
  const std::size_t n = 100000;
  NormalField pred, truth;
  double sq = 0;
  std::size_t r11 = 0, r22 = 0, r30 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 t = random_unit(rng);
    const Vec3 axis = t.cross(random_unit(rng)).normalized();
    const double deg = uniform(rng, 0, 45);
    pred.normals.push_back(Eigen::AngleAxisd(deg * std::numbers::pi / 180, axis) * t * uniform(rng, 0.5, 2));
    truth.normals.push_back(t);
    sq += deg * deg;
    r11 += deg < 11.25, r22 += deg < 22.5, r30 += deg < 30;
  }
  const auto m = probe_metrics(pred, truth);
  EXPECT_EQ(m.count, n);
  EXPECT_NEAR(m.rmse, std::sqrt(sq / n), 1e-5);
  EXPECT_NEAR(m.recall_11, static_cast<double>(r11) / n, 1e-4);
  EXPECT_NEAR(m.recall_22, static_cast<double>(r22) / n, 1e-4);
  EXPECT_NEAR(m.recall_30, static_cast<double>(r30) / n, 1e-4);
  EXPECT_LE(m.recall_11, m.recall_22);
  EXPECT_LE(m.recall_22, m.recall_30);
}

TEST(ProbeMetrics, FrameMismatchIsRejected) {
  NormalField a{1, {Vec3::UnitZ()}}, b{2, {Vec3::UnitZ()}};
  EXPECT_THROW(probe_metrics(a, b), ConfigError);
}

TEST(NormalTargets, ExpressedInReferenceFrame) {
  Scene s;
  s.surfaces.push_back(Plane{Vec3::Zero(), Vec3::UnitZ(), Vec3::UnitX(), 50, 50});
  const auto top = look_at(Vec3(0, 0, 3), Vec3::Zero(), Vec3::UnitY(), 40, 16, 16);
  const auto side = look_at(Vec3(3, 0, 3), Vec3::Zero(), Vec3::UnitZ(), 40, 16, 16);
  const std::vector<CameraView> cams{side, top};
  const auto t = normal_targets(s, std::span<const CameraView>(cams), 2);
  ASSERT_EQ(t.normals.size(), 8u);
  const Vec3 expected = side.R.transpose() * Vec3::UnitZ();
  for (std::size_t i = 0; i < 8; ++i) {
    ASSERT_TRUE(t.valid[i]);
    EXPECT_NEAR((t.normals[i] - expected).norm(), 0, 1e-12);
  }
  EXPECT_EQ(t.frame, frame_id(side));
  EXPECT_NE(t.frame, frame_id(top));
}

TEST(ProbeLoss, GradientMatchesCentralDifferences) {
  Rng rng(2);
  std::vector<double> v(5 * 4);
  for (auto& x : v) x = uniform(rng, -1, 1);
  auto raw = Tensor<double>::from({5, 4}, v, true);
  NormalTargets gt;
  for (int i = 0; i < 5; ++i) {
    gt.normals.push_back(random_unit(rng));
    gt.valid.push_back(i != 2);
  }
  for (bool l2 : {false, true})
    EXPECT_LT(grad_check<double>([&] { return probe_loss(split_probe_output(raw), gt, l2); }, {raw}, 1e-5), 1e-4);
}

TEST(ProbeLoss, InvalidTokensAreIgnored) {
  const auto raw = Tensor<double>::from({2, 4}, {0, 0, 1, 0, 1, 0, 0, 0});
  NormalTargets gt{{Vec3::UnitZ(), Vec3::UnitZ()}, {true, false}, 0};
  EXPECT_NEAR(probe_loss(split_probe_output(raw), gt, true).item(), 0, 1e-12);
  gt.valid = {false, false};
  EXPECT_THROW(probe_loss(split_probe_output(raw), gt, true), ConfigError);
}

TEST(Probe, ShortTrainingLeavesSourceFrozen) {
  BackboneConfig bc;
  bc.image_size = 32;
  bc.embed_dim = 16;
  bc.n_blocks = 1;
  bc.n_heads = 2;
  SceneConfig sc;
  sc.image_size = 32;
  sc.n_cameras = 6;
  const auto scenes = make_scenes(3, 0, 1, sc);
  const auto model = make_base_model(init_backbone<float>(1, bc));
  ProbeConfig pc;
  pc.depth = 1;
  pc.heads = 2;
  pc.epochs = 1;
  pc.sets_per_scene_per_epoch = 3;
  pc.set_size = 2;
  const FeatureSource src{&model};
  const auto r = train_probe(src, scenes, pc);
  ASSERT_EQ(r.losses.size(), 3u);
  for (double l : r.losses) EXPECT_TRUE(std::isfinite(l));
  SamplerConfig smp;
  smp.set_size = 2;
  smp.correspondences = 1;
  const auto sets = make_eval_sets(scenes, 1, smp, 1);
  const auto m = evaluate_probe(r.probe, src, scenes, sets);
  EXPECT_GT(m.count, 0u);
  EXPECT_TRUE(std::isfinite(m.rmse));
}

TEST(ProbeConfig, Validation) {
  nlohmann::json j = ProbeConfig{};
  j["depth"] = 0;
  try {
    j.get<ProbeConfig>().validate();
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "depth");
  }
}

}  // namespace
}  // namespace mvadapt
