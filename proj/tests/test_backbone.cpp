#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mvadapt/backbone.hpp"
#include "mvadapt/scene.hpp"

namespace mvadapt {
namespace {

BackboneConfig small() {
  BackboneConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 16;
  c.n_blocks = 2;
  c.n_heads = 2;
  return c;
}

Image noise_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  Image img{size, size, std::vector<float>(static_cast<std::size_t>(size) * size * 3)};
  for (auto& v : img.data) v = static_cast<float>(uniform(rng, 0, 1));
  return img;
}

// 64x64 input, 8x8 patches, C = 32, MLP ratio 4, two blocks, counted term by term.
TEST(Backbone, ParameterCountByHand) {
  BackboneConfig c;
  c.embed_dim = 32;
  c.n_blocks = 2;
  const std::size_t patch_embed = 192 * 32 + 32;
  const std::size_t pos = 64 * 32;
  const std::size_t norms = 2 * (32 + 32);
  const std::size_t attn = 4 * (32 * 32 + 32);
  const std::size_t mlp = (32 * 128 + 128) + (128 * 32 + 32);
  const std::size_t final_norm = 64;
  const std::size_t expected = patch_embed + pos + 2 * (norms + attn + mlp) + final_norm;
  EXPECT_EQ(expected, 33696u);
  EXPECT_EQ(c.parameter_count(), expected);
  EXPECT_EQ(count_parameters(init_backbone<float>(1, c).parameters()), expected);
}

TEST(Backbone, SameSeedSameWeights) {
  const auto a = init_backbone<float>(3, small()), b = init_backbone<float>(3, small()), c = init_backbone<float>(4, small());
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].name, pb[i].name);
    EXPECT_TRUE(std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin()));
    differs = differs || !std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pc[i].tensor.data().begin());
  }
  EXPECT_TRUE(differs);
}

TEST(Backbone, ForwardShapesAndFinite) {
  const auto b = init_backbone<float>(1, small());
  const auto out = backbone_forward(b, noise_image(32, 2));
  ASSERT_EQ(out.blocks.size(), 2u);
  EXPECT_EQ(out.features.rows, 4u);
  EXPECT_EQ(out.features.cols, 4u);
  EXPECT_EQ(out.features.tokens.shape(), (Shape{16, 16}));
  for (float v : out.features.tokens.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Backbone, IndivisibleResolutionIsConfigError) {
  auto c = small();
  c.image_size = 30;
  try {
    init_backbone<float>(1, c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "image_size");
  }
}

TEST(Backbone, WrongImageSizeIsShapeError) {
  const auto b = init_backbone<float>(1, small());
  EXPECT_THROW(backbone_forward(b, noise_image(64, 1)), ShapeError);
}

TEST(Backbone, PatchifyCentersPixels) {
  Image img{16, 16, std::vector<float>(16 * 16 * 3, 0.5f)};
  img.data[((1 * 16) + 9) * 3 + 2] = 1.0f;  // y = 1, x = 9, blue
  const auto p = patchify<double>(img, 8);
  EXPECT_EQ(p.shape(), (Shape{4, 192}));
  double total = 0;
  for (double v : p.data()) total += std::abs(v);
  EXPECT_DOUBLE_EQ(total, 0.5);
  EXPECT_DOUBLE_EQ(p.at(1, (1 * 8 + 1) * 3 + 2), 0.5);
}

TEST(Lora, ZeroInitLeavesOutputsUnchanged) {
  const auto base = init_backbone<float>(1, small());
  const auto lora = apply_lora(base, 4, 4.0, parse_lora_targets("QKVO"), 9);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto img = noise_image(32, s);
    const auto a = backbone_forward(base, img).features.tokens, b = backbone_forward(lora, img).features.tokens;
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  }
}

TEST(Lora, ParameterCountAndTargets) {
  const auto base = init_backbone<float>(1, small());
  EXPECT_EQ(count_parameters(apply_lora(base, 4, 4.0, parse_lora_targets("QKVO"), 1).lora_parameters()),
            2u * 4u * 4u * (16u + 16u));
  EXPECT_EQ(count_parameters(apply_lora(base, 2, 4.0, parse_lora_targets("qv"), 1).lora_parameters()),
            2u * 2u * 2u * (16u + 16u));
  EXPECT_THROW(parse_lora_targets("QX"), ConfigError);
  EXPECT_THROW(apply_lora(base, 0, 4.0, 15u, 1), ConfigError);
}

// With B = 0 the gradient reaches B but not A; base weights stay frozen.
TEST(Lora, GradientFlowsOnlyIntoFactors) {
  auto base = init_backbone<float>(1, small());
  base.set_trainable(false);
  const auto lora = apply_lora(base, 4, 4.0, parse_lora_targets("QKVO"), 2);
  backward(sum_all(square(backbone_forward(lora, noise_image(32, 3)).features.tokens)));
  for (const auto& p : base.parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
  double gb = 0, ga = 0;
  for (const auto& p : lora.lora_parameters()) {
    double n = 0;
    for (float g : p.tensor.grad()) n += std::abs(g);
    (p.name.ends_with("lora_b") ? gb : ga) += n;
  }
  EXPECT_GT(gb, 0.0);
  EXPECT_EQ(ga, 0.0);
}

TEST(BackboneConfig, JsonRejectsUnknownKeys) {
  nlohmann::json j = small();
  EXPECT_EQ(j.get<BackboneConfig>(), small());
  j["depth"] = 3;
  EXPECT_THROW(j.get<BackboneConfig>(), ConfigError);
}

}  // namespace
}  // namespace mvadapt
