#pragma once

// Small patch-token vision transformer standing in for a frozen foundation
// model, with optional low-rank adapters on its attention projections.

#include <cstdint>
#include <string>
#include <vector>

#include "mvadapt/config.hpp"
#include "mvadapt/layers.hpp"
#include "mvadapt/scene.hpp"
#include "mvadapt/tensor.hpp"
#include "json.hpp"

namespace mvadapt {

struct BackboneConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t n_blocks = 4;
  std::size_t n_heads = 4;
  std::size_t mlp_ratio = 4;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size", "resolution " + std::to_string(image_size) + " not divisible by patch size " +
                                          std::to_string(patch_size));
    if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0)
      throw ConfigError("n_heads", "embed_dim must be a positive multiple of n_heads");
    if (n_blocks == 0) throw ConfigError("n_blocks", "must be >= 1");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio", "must be >= 1");
  }

  // Closed-form trainable parameter count of the plain backbone.
  std::size_t parameter_count() const {
    const std::size_t C = embed_dim, H = embed_dim * mlp_ratio;
    const std::size_t per_block = 4 * C + 4 * (C * C + C) + (C * H + H) + (H * C + C);
    return patch_dim() * C + C + tokens() * C + n_blocks * per_block + 2 * C;
  }

  bool operator==(const BackboneConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
       {"n_blocks", c.n_blocks},     {"n_heads", c.n_heads},       {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  check_keys(j, {"image_size", "patch_size", "embed_dim", "n_blocks", "n_heads", "mlp_ratio"});
  read_field(j, "image_size", c.image_size);
  read_field(j, "patch_size", c.patch_size);
  read_field(j, "embed_dim", c.embed_dim);
  read_field(j, "n_blocks", c.n_blocks);
  read_field(j, "n_heads", c.n_heads);
  read_field(j, "mlp_ratio", c.mlp_ratio);
}

// Token grid of one view at one layer: tokens is [rows * cols, C], row-major.
template <class T>
struct FeatureMap {
  std::size_t rows = 0, cols = 0;
  Tensor<T> tokens;

  std::size_t channels() const { return tokens.dim(1); }
  std::size_t size() const { return rows * cols; }
};

// [tokens, patch*patch*3] with pixel values centered at zero.
template <class T>
Tensor<T> patchify(const Image& img, std::size_t patch) {
  if (patch == 0 || img.width % static_cast<int>(patch) != 0 || img.height % static_cast<int>(patch) != 0)
    throw ShapeError("patchify", "image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                     " not divisible by patch size " + std::to_string(patch));
  const std::size_t gw = static_cast<std::size_t>(img.width) / patch, gh = static_cast<std::size_t>(img.height) / patch;
  const std::size_t pd = patch * patch * 3;
  std::vector<T> out(gw * gh * pd);
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t c = 0; c < gw; ++c) {
      T* dst = out.data() + (r * gw + c) * pd;
      for (std::size_t py = 0; py < patch; ++py)
        for (std::size_t px = 0; px < patch; ++px)
          for (int ch = 0; ch < 3; ++ch)
            *dst++ = static_cast<T>(img.at(static_cast<int>(r * patch + py), static_cast<int>(c * patch + px), ch)) - T(0.5);
    }
  return Tensor<T>::from({gw * gh, pd}, std::move(out));
}

enum class LoraTarget : unsigned { Q = 1, K = 2, V = 4, O = 8 };

// Parses a subset of "QKVO".
inline unsigned parse_lora_targets(const std::string& s) {
  unsigned m = 0;
  for (char c : s) {
    switch (c) {
      case 'Q': case 'q': m |= static_cast<unsigned>(LoraTarget::Q); break;
      case 'K': case 'k': m |= static_cast<unsigned>(LoraTarget::K); break;
      case 'V': case 'v': m |= static_cast<unsigned>(LoraTarget::V); break;
      case 'O': case 'o': m |= static_cast<unsigned>(LoraTarget::O); break;
      default: throw ConfigError("lora_targets", std::string("unknown projection '") + c + "'");
    }
  }
  return m;
}

template <class T>
struct Backbone {
  BackboneConfig config;
  Linear<T> patch_embed;
  Tensor<T> pos_embed;  // [tokens, C]
  std::vector<TransformerLayer<T>> blocks;
  LayerNormAffine<T> final_norm;

  // Frozen base parameters (LoRA factors excluded).
  ParamList<T> parameters() const {
    ParamList<T> out;
    patch_embed.collect("patch_embed", out);
    out.push_back({"pos_embed", pos_embed});
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect("blocks." + std::to_string(l), out, true, false);
    final_norm.collect("final_norm", out);
    return out;
  }

  ParamList<T> lora_parameters() const {
    ParamList<T> out;
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].collect("blocks." + std::to_string(l), out, false, true);
    return out;
  }

  void set_trainable(bool on) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(on);
  }

  // Patch + position embedding of one image: [tokens, C].
  Tensor<T> embed(const Image& img) const {
    if (static_cast<std::size_t>(img.width) != config.image_size || static_cast<std::size_t>(img.height) != config.image_size)
      throw ShapeError("backbone_forward", "expected " + std::to_string(config.image_size) + "x" +
                                               std::to_string(config.image_size) + " image, got " +
                                               std::to_string(img.width) + "x" + std::to_string(img.height));
    return add(patch_embed(patchify<T>(img, config.patch_size)), pos_embed);
  }
};

template <class T>
Backbone<T> init_backbone(std::uint64_t seed, const BackboneConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(seed, "backbone"));
  Backbone<T> b;
  b.config = cfg;
  const std::size_t C = cfg.embed_dim;
  b.patch_embed = Linear<T>::init(cfg.patch_dim(), C, rng);
  b.pos_embed = random_tensor<T>({cfg.tokens(), C}, 0.02, rng);
  for (std::size_t l = 0; l < cfg.n_blocks; ++l)
    b.blocks.push_back(TransformerLayer<T>::init(C, cfg.n_heads, cfg.mlp_ratio, rng));
  b.final_norm = LayerNormAffine<T>::init(C);
  return b;
}

// Copy sharing the (frozen) base weights, with fresh low-rank factors on the
// selected attention projections. B starts at zero, so outputs are unchanged.
template <class T>
Backbone<T> apply_lora(const Backbone<T>& base, std::size_t rank, double alpha, unsigned targets, std::uint64_t seed) {
  if (rank < 1) throw ConfigError("lora_rank", "must be >= 1");
  if (rank > base.config.embed_dim) throw ConfigError("lora_rank", "must not exceed embed_dim");
  Backbone<T> out = base;
  Rng rng(derive_seed(seed, "lora"));
  auto attach = [&](Linear<T>& lin, LoraTarget which) {
    if (!(targets & static_cast<unsigned>(which))) return;
    const std::size_t in = lin.in_features(), o = lin.out_features();
    lin.lora_a = random_tensor<T>({rank, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng, false);
    lin.lora_b = Tensor<T>::zeros({o, rank});
    lin.lora_a.set_requires_grad(true);
    lin.lora_b.set_requires_grad(true);
    lin.lora_scale = static_cast<T>(alpha / static_cast<double>(rank));
  };
  for (auto& blk : out.blocks) {
    attach(blk.q, LoraTarget::Q);
    attach(blk.k, LoraTarget::K);
    attach(blk.v, LoraTarget::V);
    attach(blk.o, LoraTarget::O);
  }
  return out;
}

template <class T>
struct BackboneOutput {
  std::vector<FeatureMap<T>> blocks;  // residual stream after each block
  FeatureMap<T> features;             // final-normed output
};

template <class T>
BackboneOutput<T> backbone_forward(const Backbone<T>& b, const Image& img) {
  const std::size_t g = b.config.grid();
  BackboneOutput<T> out;
  auto x = b.embed(img);
  for (const auto& blk : b.blocks) {
    x = blk(x);
    out.blocks.push_back({g, g, x});
  }
  out.features = {g, g, b.final_norm(x)};
  return out;
}

}  // namespace mvadapt
