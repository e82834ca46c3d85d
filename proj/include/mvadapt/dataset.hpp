#pragma once

// Rendered scene collections and deterministic view-set sampling.

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "mvadapt/backbone.hpp"
#include "mvadapt/rng.hpp"
#include "mvadapt/scene.hpp"

namespace mvadapt {

// Scene plus its rendered views and a co-visibility table.
struct SceneData {
  Scene scene;
  std::vector<Image> images;
  std::vector<double> overlap;  // [n * n]: share of view i's token rays whose hit is visible in view j

  std::size_t n_views() const { return images.size(); }
  double pair_overlap(std::size_t i, std::size_t j) const {
    const std::size_t n = n_views();
    return std::min(overlap[i * n + j], overlap[j * n + i]);
  }
};

inline constexpr std::size_t kOverlapGrid = 8;

inline SceneData prepare_scene(Scene scene) {
  SceneData d;
  const std::size_t n = scene.cameras.size();
  d.images.reserve(n);
  for (const auto& cam : scene.cameras) d.images.push_back(render_view(scene, cam));
  std::vector<std::vector<Vec3>> hits(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r = 0; r < kOverlapGrid; ++r)
      for (std::size_t c = 0; c < kOverlapGrid; ++c) {
        const Vec2 uv = token_center(r, c, kOverlapGrid, kOverlapGrid);
        if (auto h = cast_ray(scene, pixel_ray(scene.cameras[i], uv.x(), uv.y()))) hits[i].push_back(h->point);
      }
  d.overlap.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t seen = 0;
      for (const auto& p : hits[i]) seen += i == j || visible_from(scene, scene.cameras[j], p);
      d.overlap[i * n + j] = static_cast<double>(seen) / static_cast<double>(kOverlapGrid * kOverlapGrid);
    }
  d.scene = std::move(scene);
  return d;
}

// Scenes `first .. first + count - 1` of the family rooted at `seed`.
inline std::vector<SceneData> make_scenes(std::uint64_t seed, std::size_t first, std::size_t count,
                                          const SceneConfig& cfg = {}) {
  std::vector<SceneData> out;
  out.reserve(count);
  for (std::size_t i = first; i < first + count; ++i) out.push_back(prepare_scene(generate_scene(derive_seed(seed, "scene", i), cfg)));
  return out;
}

// Frozen-backbone features per (scene, view), computed on first use.
class BaseFeatureCache {
 public:
  BaseFeatureCache(const Backbone<float>& base, const std::vector<SceneData>& scenes) : base_(&base), scenes_(&scenes) {}

  const FeatureMap<float>& get(std::size_t scene, std::size_t view) {
    auto it = cache_.find({scene, view});
    if (it == cache_.end()) {
      NoGradGuard ng;
      it = cache_.emplace(std::pair{scene, view}, backbone_forward(*base_, scenes_->at(scene).images.at(view)).features).first;
    }
    return it->second;
  }

 private:
  const Backbone<float>* base_;
  const std::vector<SceneData>* scenes_;
  std::map<std::pair<std::size_t, std::size_t>, FeatureMap<float>> cache_;
};

// One training or evaluation set of M views. Correspondence view indices are
// positions within `views`.
struct Batch {
  std::size_t scene = 0;
  std::vector<std::size_t> views;
  std::vector<Image> images;
  std::vector<CameraView> cameras;
  std::vector<Correspondence> correspondences;
  std::vector<FeatureMap<float>> base_features;
  std::size_t resamples = 0;
};

struct SamplerConfig {
  std::size_t set_size = 4;
  std::size_t correspondences = 32;
  double min_pair_overlap = 1.0 / 6.0;
  std::size_t max_attempts = 64;
};

namespace detail {

// Greedy random view set whose every pair meets the overlap threshold.
inline bool pick_views(const SceneData& d, std::size_t M, double min_overlap, Rng& rng, std::vector<std::size_t>& out) {
  const std::size_t n = d.n_views();
  if (M > n) return false;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  out.assign(1, order[0]);
  for (std::size_t k = 1; k < n && out.size() < M; ++k) {
    const std::size_t c = order[k];
    if (std::all_of(out.begin(), out.end(), [&](std::size_t v) { return d.pair_overlap(v, c) >= min_overlap; }))
      out.push_back(c);
  }
  return out.size() == M;
}

}  // namespace detail

// K correspondences split evenly over the unordered pairs of `views`, sampled
// with `seed`. Throws InsufficientOverlap when a pair runs dry.
inline std::vector<Correspondence> set_correspondences(const SceneData& d, const std::vector<std::size_t>& views,
                                                       std::size_t K, std::uint64_t seed) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t a = 0; a < views.size(); ++a)
    for (std::size_t b = a + 1; b < views.size(); ++b) pairs.emplace_back(a, b);
  std::vector<Correspondence> out;
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const std::size_t k = K / pairs.size() + (p < K % pairs.size());
    if (k == 0) continue;
    const auto [a, b] = pairs[p];
    for (auto c : sample_correspondences(d.scene, views[a], views[b], k, derive_seed(seed, "pair", p))) {
      c.view_i = a;
      c.view_j = b;
      out.push_back(c);
    }
  }
  return out;
}

// Deterministic in (seed, step). The base-feature cache, when given, fills
// `base_features` for the regularizer. `only_scene` pins the scene choice.
inline Batch sample_batch(const std::vector<SceneData>& scenes, const SamplerConfig& cfg, std::uint64_t seed,
                          std::uint64_t step, BaseFeatureCache* base = nullptr,
                          std::optional<std::size_t> only_scene = std::nullopt) {
  if (scenes.empty()) throw ConfigError("scenes", "no scenes to sample from");
  if (cfg.set_size < 1) throw ConfigError("set_size", "must be >= 1");
  if (cfg.correspondences < 1) throw ConfigError("correspondences", "must be >= 1");
  if (only_scene && *only_scene >= scenes.size()) throw ConfigError("scene", "index out of range");
  if (std::none_of(scenes.begin(), scenes.end(), [&](const SceneData& d) { return d.n_views() >= cfg.set_size; }))
    throw ConfigError("set_size", "no scene has " + std::to_string(cfg.set_size) + " cameras");
  const std::uint64_t key = derive_seed(seed, "batch", step);
  for (std::size_t attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    Rng rng(derive_seed(key, "attempt", attempt));
    Batch b;
    b.scene = only_scene ? *only_scene : uniform_index(rng, scenes.size());
    const auto& d = scenes[b.scene];
    if (!detail::pick_views(d, cfg.set_size, cfg.min_pair_overlap, rng, b.views)) continue;
    if (cfg.set_size > 1) {
      try {
        b.correspondences = set_correspondences(d, b.views, cfg.correspondences, derive_seed(key, "corr", attempt));
      } catch (const InsufficientOverlap& e) {
        std::cerr << "warning: step " << step << ": " << e.what() << "; resampling\n";
        continue;
      }
    }
    for (auto v : b.views) {
      b.images.push_back(d.images[v]);
      b.cameras.push_back(d.scene.cameras[v]);
      if (base) b.base_features.push_back(base->get(b.scene, v));
    }
    b.resamples = attempt;
    return b;
  }
  throw InsufficientOverlap(0, cfg.correspondences);
}

}  // namespace mvadapt
