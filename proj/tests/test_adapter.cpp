#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mvadapt/adapter.hpp"
#include "mvadapt/dataset.hpp"

namespace mvadapt {
namespace {

BackboneConfig small() {
  BackboneConfig c;
  c.image_size = 32;
  c.embed_dim = 16;
  c.n_blocks = 2;
  c.n_heads = 2;
  return c;
}

const SceneData& scene() {
  static const SceneData d = [] {
    SceneConfig sc;
    sc.image_size = 32;
    sc.n_cameras = 6;
    return prepare_scene(generate_scene(11, sc));
  }();
  return d;
}

// Adapters with random output projections so they actually mix views.
MVModel<float> active_model(bool use_plucker = true) {
  const auto base = init_backbone<float>(1, small());
  MVConfig cfg;
  cfg.adapter_heads = 2;
  cfg.use_plucker = use_plucker;
  auto m = make_mv_model(base, cfg, 5);
  Rng rng(6);
  for (auto& a : m.adapters)
    for (auto& v : a.out.weight.mutable_data()) v = static_cast<float>(gaussian(rng, 0.3));
  return m;
}

std::vector<Image> images(std::initializer_list<std::size_t> views) {
  std::vector<Image> out;
  for (auto v : views) out.push_back(scene().images[v]);
  return out;
}

std::vector<CameraView> cameras(std::initializer_list<std::size_t> views) {
  std::vector<CameraView> out;
  for (auto v : views) out.push_back(scene().scene.cameras[v]);
  return out;
}

float max_diff(const Tensor<float>& a, const Tensor<float>& b) {
  float d = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

TEST(Adapter, ZeroInitReproducesBackbone) {
  const auto base = init_backbone<float>(1, small());
  MVConfig cfg;
  cfg.adapter_heads = 2;
  const auto m = make_mv_model(base, cfg, 3);
  for (std::size_t M : {1u, 2u, 4u}) {
    std::vector<Image> imgs(scene().images.begin(), scene().images.begin() + static_cast<std::ptrdiff_t>(M));
    std::vector<CameraView> cams(scene().scene.cameras.begin(), scene().scene.cameras.begin() + static_cast<std::ptrdiff_t>(M));
    const auto out = mv_forward(m, std::span<const Image>(imgs), std::span<const CameraView>(cams));
    for (std::size_t i = 0; i < M; ++i) EXPECT_EQ(max_diff(out.features[i].tokens, backbone_forward(base, imgs[i]).features.tokens), 0.0f);
  }
}

TEST(Adapter, OnlyAdaptersLoraAndRaysTrain) {
  const auto m = active_model();
  for (const auto& p : m.base.parameters()) EXPECT_FALSE(p.tensor.requires_grad()) << p.name;
  for (const auto& p : m.trainable()) EXPECT_TRUE(p.tensor.requires_grad()) << p.name;
  EXPECT_EQ(count_parameters(m.all_parameters()), count_parameters(m.base.parameters()) + count_parameters(m.trainable()));
}

// Swapping two non-reference views swaps their outputs.
TEST(Adapter, EquivariantToNonReferencePermutation) {
  const auto m = active_model();
  const auto a = mv_forward(m, std::span<const Image>(images({0, 1, 2})), std::span<const CameraView>(cameras({0, 1, 2})));
  const auto b = mv_forward(m, std::span<const Image>(images({0, 2, 1})), std::span<const CameraView>(cameras({0, 2, 1})));
  EXPECT_LT(max_diff(a.features[0].tokens, b.features[0].tokens), 1e-5f);
  EXPECT_LT(max_diff(a.features[1].tokens, b.features[2].tokens), 1e-5f);
  EXPECT_LT(max_diff(a.features[2].tokens, b.features[1].tokens), 1e-5f);
}

TEST(Adapter, OtherViewsInfluenceFeatures) {
  const auto m = active_model();
  const auto a = mv_forward(m, std::span<const Image>(images({0, 1})), std::span<const CameraView>(cameras({0, 1})));
  const auto b = mv_forward(m, std::span<const Image>(images({0, 3})), std::span<const CameraView>(cameras({0, 3})));
  EXPECT_GT(max_diff(a.features[0].tokens, b.features[0].tokens), 1e-4f);

  const auto base = make_base_model(m.base);
  const auto c = mv_forward(base, std::span<const Image>(images({0, 1})));
  const auto d = mv_forward(base, std::span<const Image>(images({0, 3})));
  EXPECT_EQ(max_diff(c.features[0].tokens, d.features[0].tokens), 0.0f);
}

TEST(Adapter, GradientCrossesViews) {
  const auto m = active_model();
  const auto out = mv_forward(m, std::span<const Image>(images({0, 1})), std::span<const CameraView>(cameras({0, 1})));
  backward(sum_all(square(out.features[1].tokens)));
  double g = 0;
  for (float v : m.plucker.proj.weight.grad()) g += std::abs(v);
  EXPECT_GT(g, 0.0);
  double q = 0;
  for (float v : m.adapters[0].q.weight.grad()) q += std::abs(v);
  EXPECT_GT(q, 0.0);
}

TEST(Adapter, RigidSceneMotionLeavesOutputsUnchanged) {
  const auto m = active_model();
  const auto cams = cameras({0, 1, 2});
  const Mat3 R = Eigen::AngleAxisd(0.7, Vec3(1, 2, -1).normalized()).toRotationMatrix();
  const auto moved = transform_cameras(cams, R, Vec3(3, -2, 5));
  const auto imgs = images({0, 1, 2});
  const auto a = mv_forward(m, std::span<const Image>(imgs), std::span<const CameraView>(cams));
  const auto b = mv_forward(m, std::span<const Image>(imgs), std::span<const CameraView>(moved));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(max_diff(a.features[i].tokens, b.features[i].tokens), 1e-4f);
}

TEST(Adapter, RaysChangeOutputsUnlessDisabled) {
  const auto with = active_model(true);
  const auto imgs = images({0, 1});
  const auto cams = cameras({0, 1});
  const auto a = mv_forward(with, std::span<const Image>(imgs), std::span<const CameraView>(cams));
  const auto b = mv_forward(with, std::span<const Image>(imgs));
  EXPECT_GT(max_diff(a.features[1].tokens, b.features[1].tokens), 1e-5f);

  const auto without = active_model(false);
  const auto c = mv_forward(without, std::span<const Image>(imgs), std::span<const CameraView>(cams));
  const auto d = mv_forward(without, std::span<const Image>(imgs));
  EXPECT_EQ(max_diff(c.features[1].tokens, d.features[1].tokens), 0.0f);
}

TEST(Adapter, AttentionSpansAllViews) {
  const auto m = active_model();
  const auto out = mv_forward(m, std::span<const Image>(images({0, 1, 2})), std::span<const CameraView>(cameras({0, 1, 2})), true);
  ASSERT_EQ(out.attention.size(), 2u * 2u);  // blocks x heads
  EXPECT_EQ(out.attention[0].dim(out.attention[0].rank() - 1), 3u * 16u);
}

TEST(Adapter, InputValidation) {
  const auto m = active_model();
  const auto imgs = images({0, 1});
  const auto cams = cameras({0});
  EXPECT_THROW(mv_forward(m, std::span<const Image>(imgs), std::span<const CameraView>(cams)), ConfigError);
  EXPECT_THROW(mv_forward(m, std::span<const Image>()), ConfigError);
  MVConfig bad;
  bad.backbone = small();
  bad.adapter_heads = 5;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(FlopCount, AttentionTermGrowsLinearlyWithViews) {
  MVConfig c;
  const auto f2 = count_flops(c, 2, 64), f4 = count_flops(c, 4, 64), f8 = count_flops(c, 8, 64);
  EXPECT_DOUBLE_EQ(f4.adapter_attention_per_view, 2 * f2.adapter_attention_per_view);
  EXPECT_DOUBLE_EQ(f8.adapter_attention_per_view, 4 * f2.adapter_attention_per_view);
  EXPECT_DOUBLE_EQ(f2.backbone_per_view, f8.backbone_per_view);
  EXPECT_LT(f2.total / 2, f8.total / 8);
  MVConfig plain;
  plain.use_lora = plain.use_adapters = false;
  const auto p = count_flops(plain, 4, 64);
  EXPECT_DOUBLE_EQ(p.total, 4 * p.backbone_per_view);
}

TEST(MVConfig, JsonRoundTrip) {
  MVConfig c;
  c.lora_rank = 8;
  c.plucker_moment = true;
  nlohmann::json j = c;
  const auto back = j.get<MVConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  j["adapter_depth"] = 1;
  EXPECT_THROW(j.get<MVConfig>(), ConfigError);
}

}  // namespace
}  // namespace mvadapt
