#pragma once

// Multi-view model: the frozen backbone runs per view; after every block an
// adapter attends jointly over the tokens of all views, conditioned on
// per-token ray embeddings relative to view 0. Adapter output projections
// start at zero, so an untrained model reproduces the backbone exactly.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mvadapt/backbone.hpp"
#include "mvadapt/camera.hpp"
#include "mvadapt/layers.hpp"
#include "json.hpp"

namespace mvadapt {

struct MVConfig {
  BackboneConfig backbone;
  bool use_lora = true;
  std::size_t lora_rank = 4;
  double lora_alpha = 4.0;
  std::string lora_targets = "QKVO";
  bool use_adapters = true;
  std::size_t adapter_width = 0;  // 0: embed_dim
  std::size_t adapter_heads = 4;
  std::size_t adapter_mlp_ratio = 2;
  bool use_plucker = true;
  bool plucker_moment = false;
  std::size_t plucker_channels = 0;  // 0: embed_dim / 4

  std::size_t width() const { return adapter_width ? adapter_width : backbone.embed_dim; }
  std::size_t pose_channels() const { return plucker_channels ? plucker_channels : std::max<std::size_t>(1, backbone.embed_dim / 4); }

  void validate() const {
    backbone.validate();
    if (use_lora) {
      if (lora_rank < 1) throw ConfigError("lora_rank", "must be >= 1");
      if (lora_rank > backbone.embed_dim) throw ConfigError("lora_rank", "must not exceed embed_dim");
      parse_lora_targets(lora_targets);
    }
    if (use_adapters && (adapter_heads == 0 || width() % adapter_heads != 0))
      throw ConfigError("adapter_heads", "adapter width must be a multiple of adapter_heads");
  }
};

inline void to_json(nlohmann::json& j, const MVConfig& c) {
  j = {{"backbone", c.backbone},           {"use_lora", c.use_lora},
       {"lora_rank", c.lora_rank},         {"lora_alpha", c.lora_alpha},
       {"lora_targets", c.lora_targets},   {"use_adapters", c.use_adapters},
       {"adapter_width", c.adapter_width}, {"adapter_heads", c.adapter_heads},
       {"adapter_mlp_ratio", c.adapter_mlp_ratio}, {"use_plucker", c.use_plucker},
       {"plucker_moment", c.plucker_moment}, {"plucker_channels", c.plucker_channels}};
}

inline void from_json(const nlohmann::json& j, MVConfig& c) {
  check_keys(j, {"backbone", "use_lora", "lora_rank", "lora_alpha", "lora_targets", "use_adapters", "adapter_width",
                 "adapter_heads", "adapter_mlp_ratio", "use_plucker", "plucker_moment", "plucker_channels"});
  read_section(j, "backbone", c.backbone);
  read_field(j, "use_lora", c.use_lora);
  read_field(j, "lora_rank", c.lora_rank);
  read_field(j, "lora_alpha", c.lora_alpha);
  read_field(j, "lora_targets", c.lora_targets);
  read_field(j, "use_adapters", c.use_adapters);
  read_field(j, "adapter_width", c.adapter_width);
  read_field(j, "adapter_heads", c.adapter_heads);
  read_field(j, "adapter_mlp_ratio", c.adapter_mlp_ratio);
  read_field(j, "use_plucker", c.use_plucker);
  read_field(j, "plucker_moment", c.plucker_moment);
  read_field(j, "plucker_channels", c.plucker_channels);
}

template <class T>
struct AdapterBlock {
  LayerNormAffine<T> ln_in;   // over the C feature channels
  Linear<T> q, k, v, o;       // (C + C_p) -> W, W -> W
  LayerNormAffine<T> ln_mlp;
  Mlp<T> mlp;
  Linear<T> out;              // W -> C, zero-initialized
  std::size_t heads = 4;

  static AdapterBlock init(std::size_t channels, std::size_t pose_channels, std::size_t width, std::size_t heads,
                           std::size_t mlp_ratio, Rng& rng) {
    AdapterBlock a;
    const std::size_t in = channels + pose_channels;
    a.ln_in = LayerNormAffine<T>::init(channels);
    a.q = Linear<T>::init(in, width, rng);
    a.k = Linear<T>::init(in, width, rng);
    a.v = Linear<T>::init(in, width, rng);
    a.o = Linear<T>::init(width, width, rng);
    a.ln_mlp = LayerNormAffine<T>::init(width);
    a.mlp = Mlp<T>::init(width, width * mlp_ratio, rng);
    a.out = Linear<T>::zero(width, channels);
    a.heads = heads;
    return a;
  }

  // tokens: [M*T, C] over all views; pose: [M*T, C_p]. Returns [M*T, C].
  Tensor<T> operator()(const Tensor<T>& tokens, const Tensor<T>& pose, std::vector<Tensor<T>>* weights = nullptr) const {
    if (tokens.rank() != 2 || pose.rank() != 2 || tokens.dim(0) != pose.dim(0))
      throw ShapeError("adapter_block", tokens.shape(), pose.shape());
    const auto h = concat<T>({ln_in(tokens), pose}, 1);
    const auto a = o(multi_head_attention(q(h), k(h), v(h), heads, weights));
    const auto m = add(a, mlp(ln_mlp(a)));
    return add(tokens, out(m));
  }

  void collect(const std::string& prefix, ParamList<T>& dst) const {
    ln_in.collect(prefix + ".ln_in", dst);
    q.collect(prefix + ".attn.q", dst);
    k.collect(prefix + ".attn.k", dst);
    v.collect(prefix + ".attn.v", dst);
    o.collect(prefix + ".attn.o", dst);
    ln_mlp.collect(prefix + ".ln_mlp", dst);
    mlp.collect(prefix + ".mlp", dst);
    out.collect(prefix + ".out", dst);
  }
};

// Linear embedding of per-token 6-channel rays, plus the learned constant
// token used when no cameras are supplied.
template <class T>
struct PluckerEmbed {
  Linear<T> proj;       // 6 -> C_p
  Tensor<T> null_token;  // [C_p]

  static PluckerEmbed init(std::size_t pose_channels, Rng& rng) {
    return {Linear<T>::init(6, pose_channels, rng, 0.2), random_tensor<T>({pose_channels}, 0.2, rng)};
  }
  void collect(const std::string& prefix, ParamList<T>& dst) const {
    proj.collect(prefix + ".proj", dst);
    dst.push_back({prefix + ".null_token", null_token});
  }
};

template <class T>
struct MVModel {
  MVConfig config;
  Backbone<T> base;     // frozen
  Backbone<T> adapted;  // shares base weights, carries LoRA factors when enabled
  std::vector<AdapterBlock<T>> adapters;
  PluckerEmbed<T> plucker;

  // Parameters receiving gradients: LoRA factors, adapters, ray embedding.
  ParamList<T> trainable() const {
    ParamList<T> out;
    for (auto& p : adapted.lora_parameters()) out.push_back({"lora." + p.name, p.tensor});
    if (config.use_adapters) {
      for (std::size_t l = 0; l < adapters.size(); ++l) adapters[l].collect("adapter." + std::to_string(l), out);
      plucker.collect("plucker", out);
    }
    return out;
  }

  ParamList<T> all_parameters() const {
    ParamList<T> out;
    for (auto& p : base.parameters()) out.push_back({"backbone." + p.name, p.tensor});
    for (auto& p : trainable()) out.push_back(p);
    return out;
  }
};

template <class T>
MVModel<T> make_mv_model(const Backbone<T>& base, const MVConfig& cfg, std::uint64_t seed) {
  MVConfig c = cfg;
  c.backbone = base.config;
  c.validate();
  MVModel<T> m;
  m.config = c;
  m.base = base;
  m.base.set_trainable(false);
  m.adapted = c.use_lora ? apply_lora(m.base, c.lora_rank, c.lora_alpha, parse_lora_targets(c.lora_targets), seed) : m.base;
  if (c.use_adapters) {
    Rng rng(derive_seed(seed, "adapters"));
    for (std::size_t l = 0; l < c.backbone.n_blocks; ++l)
      m.adapters.push_back(AdapterBlock<T>::init(c.backbone.embed_dim, c.pose_channels(), c.width(), c.adapter_heads,
                                                 c.adapter_mlp_ratio, rng));
    Rng prng(derive_seed(seed, "plucker"));
    m.plucker = PluckerEmbed<T>::init(c.pose_channels(), prng);
    for (auto& p : m.trainable()) p.tensor.set_requires_grad(true);
  }
  return m;
}

// The plain model: no LoRA, no adapters.
template <class T>
MVModel<T> make_base_model(const Backbone<T>& base) {
  MVConfig c;
  c.use_lora = false;
  c.use_adapters = false;
  return make_mv_model(base, c, 0);
}

// Raymaps of every view stacked to [M * tokens, 6].
template <class T>
Tensor<T> raymap_tokens(std::span<const CameraView> cameras, std::size_t grid, bool moment_form) {
  std::vector<T> v;
  v.reserve(cameras.size() * grid * grid * 6);
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    const auto map = plucker_raymap(cameras, i, grid, grid, moment_form);
    for (double x : map.data) v.push_back(static_cast<T>(x));
  }
  return Tensor<T>::from({cameras.size() * grid * grid, 6}, std::move(v));
}

template <class T>
struct MVOutput {
  std::vector<FeatureMap<T>> features;  // final features per view
  std::vector<Tensor<T>> attention;     // adapter attention weights when requested
};

// Per-view backbone blocks interleaved with joint adapters over all views.
// Without cameras (or with ray conditioning disabled) the learned null pose
// token stands in for the raymap embedding.
template <class T>
MVOutput<T> mv_forward(const MVModel<T>& model, std::span<const Image> images,
                       std::optional<std::span<const CameraView>> cameras = std::nullopt, bool keep_attention = false) {
  if (images.empty()) throw ConfigError("images", "need at least one view");
  for (const auto& img : images)
    if (img.width != images[0].width || img.height != images[0].height)
      throw ShapeError("mv_forward", "mixed image resolutions");
  if (cameras && cameras->size() != images.size()) throw ConfigError("cameras", "one camera per image required");

  const auto& bb = model.adapted;
  const std::size_t M = images.size(), g = bb.config.grid(), T_ = g * g;
  std::vector<Tensor<T>> z;
  z.reserve(M);
  for (const auto& img : images) z.push_back(bb.embed(img));

  MVOutput<T> out;
  Tensor<T> pose;
  for (std::size_t l = 0; l < bb.blocks.size(); ++l) {
    for (auto& x : z) x = bb.blocks[l](x);
    if (!model.config.use_adapters) continue;
    if (l == 0) {
      if (cameras && model.config.use_plucker)
        pose = model.plucker.proj(raymap_tokens<T>(*cameras, g, model.config.plucker_moment));
      else
        pose = repeat_rows(model.plucker.null_token, M * T_);
    }
    auto joint = model.adapters[l](M == 1 ? z[0] : concat(z, 0), pose, keep_attention ? &out.attention : nullptr);
    for (std::size_t i = 0; i < M; ++i) z[i] = M == 1 ? joint : slice(joint, 0, i * T_, (i + 1) * T_);
  }
  out.features.reserve(M);
  for (auto& x : z) out.features.push_back({g, g, bb.final_norm(x)});
  return out;
}

// Closed-form multiply-add counts (x2 for flops) of one mv_forward call.
struct FlopCount {
  double backbone_per_view = 0;
  double adapter_proj_per_view = 0;
  double adapter_attention_per_view = 0;  // grows linearly with M
  double total = 0;
};

inline FlopCount count_flops(const MVConfig& cfg, std::size_t M, std::size_t image_size) {
  BackboneConfig b = cfg.backbone;
  b.image_size = image_size;
  const double T = static_cast<double>(b.tokens()), C = static_cast<double>(b.embed_dim);
  const double H = C * static_cast<double>(b.mlp_ratio), P = static_cast<double>(b.patch_dim());
  const double L = static_cast<double>(b.n_blocks);
  FlopCount f;
  const double block = T * (4 * C * C + 2 * C * H) + 2 * T * T * C;
  f.backbone_per_view = 2 * (T * P * C + L * block);
  if (cfg.use_lora) f.backbone_per_view += 2 * L * 4 * T * 2 * C * static_cast<double>(cfg.lora_rank);
  if (cfg.use_adapters) {
    const double W = static_cast<double>(cfg.width()), Cp = static_cast<double>(cfg.pose_channels());
    const double Hw = W * static_cast<double>(cfg.adapter_mlp_ratio);
    f.adapter_proj_per_view = 2 * L * T * (3 * (C + Cp) * W + W * W + 2 * W * Hw + W * C);
    f.adapter_attention_per_view = 2 * L * 2 * T * (static_cast<double>(M) * T) * W;
  }
  f.total = static_cast<double>(M) * (f.backbone_per_view + f.adapter_proj_per_view + f.adapter_attention_per_view);
  return f;
}

}  // namespace mvadapt
