#pragma once

// Evaluation protocols over fixed view sets. Predictions use the hard
// argmax of the cosine-similarity map; ties go to the lowest token index.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mvadapt/adapter.hpp"
#include "mvadapt/dataset.hpp"
#include "mvadapt/objective.hpp"

namespace mvadapt {

struct DirectedError {
  std::size_t view_i = 0, view_j = 0;  // query view, target view
  double error = 0;
};

struct LocationErrors {
  std::vector<DirectedError> items;
  double mean = 0;
};

template <class T>
LocationErrors location_error(std::span<const FeatureMap<T>> features, std::span<const Correspondence> corrs) {
  if (corrs.empty()) throw ConfigError("correspondences", "empty correspondence set");
  NoGradGuard ng;
  LocationErrors out;
  double sum = 0;
  for (const auto& [pair, b] : detail::directed_batches(corrs, features.size())) {
    const auto& dst = features[pair.second];
    const auto S = similarity_maps(sample_features(features[pair.first], std::span<const Vec2>(b.query)), dst);
    const std::size_t n = dst.size();
    for (std::size_t k = 0; k < b.query.size(); ++k) {
      const auto row = S.data().subspan(k * n, n);
      const std::size_t best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      const Vec2 pred = token_center(best / dst.cols, best % dst.cols, dst.rows, dst.cols);
      const double e = (pred - b.target[k]).norm();
      out.items.push_back({pair.first, pair.second, e});
      sum += e;
    }
  }
  out.mean = sum / static_cast<double>(out.items.size());
  return out;
}

struct BaseSimilarity {
  double mean = 0;
  std::size_t tokens = 0;
  std::size_t excluded = 0;  // zero-norm tokens
};

template <class T>
BaseSimilarity base_similarity(std::span<const FeatureMap<T>> adapted, std::span<const FeatureMap<T>> base) {
  if (adapted.size() != base.size()) throw ConfigError("features", "adapted/base view count mismatch");
  BaseSimilarity r;
  double sum = 0;
  for (std::size_t v = 0; v < adapted.size(); ++v) {
    const auto& a = adapted[v].tokens;
    const auto& b = base[v].tokens;
    if (a.shape() != b.shape()) throw ShapeError("base_similarity", a.shape(), b.shape());
    const std::size_t C = a.dim(1);
    for (std::size_t t = 0; t < a.dim(0); ++t) {
      double dot = 0, na = 0, nb = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const double x = a.at(t, c), y = b.at(t, c);
        dot += x * y;
        na += x * x;
        nb += y * y;
      }
      if (na == 0 || nb == 0) {
        ++r.excluded;
        continue;
      }
      sum += dot / std::sqrt(na * nb);
      ++r.tokens;
    }
  }
  if (r.excluded) std::cerr << "warning: base_similarity excluded " << r.excluded << " zero-norm tokens\n";
  r.mean = r.tokens ? sum / static_cast<double>(r.tokens) : 0.0;
  return r;
}

// Features of one view set under no-grad evaluation.
inline std::vector<FeatureMap<float>> extract_features(const MVModel<float>& model, const Batch& set,
                                                       const std::vector<CameraView>* cameras = nullptr) {
  NoGradGuard ng;
  const auto& cams = cameras ? *cameras : set.cameras;
  return mv_forward(model, std::span<const Image>(set.images), std::span<const CameraView>(cams)).features;
}

inline std::vector<FeatureMap<float>> extract_base_features(const Backbone<float>& base, const Batch& set) {
  NoGradGuard ng;
  std::vector<FeatureMap<float>> out;
  for (const auto& img : set.images) out.push_back(backbone_forward(base, img).features);
  return out;
}

// Mean over channels of the per-channel standard deviation across all tokens of all views.
template <class T>
double mean_channel_std(std::span<const FeatureMap<T>> features) {
  if (features.empty()) return 0;
  const std::size_t C = features[0].channels();
  std::vector<double> s(C, 0), s2(C, 0);
  std::size_t n = 0;
  for (const auto& f : features)
    for (std::size_t t = 0; t < f.size(); ++t, ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const double x = f.tokens.at(t, c);
        s[c] += x;
        s2[c] += x * x;
      }
  double acc = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double m = s[c] / static_cast<double>(n);
    acc += std::sqrt(std::max(0.0, s2[c] / static_cast<double>(n) - m * m));
  }
  return acc / static_cast<double>(C);
}

// ---------------------------------------------------------------------------
// Held-out evaluation

// Fixed evaluation sets: `per_scene` sets from every scene.
inline std::vector<Batch> make_eval_sets(const std::vector<SceneData>& scenes, std::size_t per_scene,
                                         const SamplerConfig& cfg, std::uint64_t seed) {
  std::vector<Batch> out;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (std::size_t k = 0; k < per_scene; ++k)
      out.push_back(sample_batch(scenes, cfg, derive_seed(seed, "eval-set", s), k, nullptr, s));
  return out;
}

struct PairRecord {
  std::size_t scene = 0, view_i = 0, view_j = 0;  // scene camera ids, query -> target
  double angle = 0;
  double error = 0;  // mean over the pair's correspondences
  std::size_t count = 0;
};

struct AngleBin {
  double lo = 0, hi = 0;
  std::size_t count = 0;
  std::optional<double> mean;  // absent when the bin is empty
};

struct EvalReport {
  double location_error = 0;
  double base_similarity = 0;
  std::size_t correspondences = 0;
  std::vector<PairRecord> pairs;
  std::vector<AngleBin> bins;
};

// 10 degree bins over [0, 120) and one closing bin [120, 180].
inline std::vector<double> default_angle_edges() {
  std::vector<double> e;
  for (int a = 0; a <= 120; a += 10) e.push_back(a);
  e.push_back(180);
  return e;
}

inline std::vector<AngleBin> angle_bins(const std::vector<PairRecord>& pairs, const std::vector<double>& edges) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end()) || edges.front() > 0 || edges.back() < 180)
    throw ConfigError("angle_bins", "edges must be ascending and cover [0, 180]");
  std::vector<AngleBin> bins(edges.size() - 1);
  std::vector<double> sums(bins.size(), 0);
  for (std::size_t b = 0; b < bins.size(); ++b) bins[b].lo = edges[b], bins[b].hi = edges[b + 1];
  for (const auto& p : pairs) {
    auto it = std::upper_bound(edges.begin(), edges.end(), p.angle);
    std::size_t b = static_cast<std::size_t>(it - edges.begin());
    b = std::clamp<std::size_t>(b, 1, bins.size()) - 1;
    ++bins[b].count;
    sums[b] += p.error;
  }
  for (std::size_t b = 0; b < bins.size(); ++b)
    if (bins[b].count) bins[b].mean = sums[b] / static_cast<double>(bins[b].count);
  return bins;
}

// Least-squares slope of bin mean error against bin center, over non-empty
// bins lying within [0, max_angle]. NaN with fewer than two bins.
inline double angle_slope(const std::vector<AngleBin>& bins, double max_angle = 90.0) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& b : bins)
    if (b.mean && b.hi <= max_angle) pts.emplace_back(0.5 * (b.lo + b.hi), *b.mean);
  if (pts.size() < 2) return std::nan("");
  double mx = 0, my = 0;
  for (auto [x, y] : pts) mx += x, my += y;
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double sxy = 0, sxx = 0;
  for (auto [x, y] : pts) sxy += (x - mx) * (y - my), sxx += (x - mx) * (x - mx);
  return sxy / sxx;
}

inline EvalReport evaluate(const MVModel<float>& model, const Backbone<float>& base, const std::vector<Batch>& sets,
                           const std::vector<double>& edges = default_angle_edges()) {
  EvalReport r;
  double err_sum = 0, sim_sum = 0;
  std::size_t sim_n = 0;
  for (const auto& set : sets) {
    const auto f = extract_features(model, set);
    const auto bf = extract_base_features(base, set);
    const auto le = location_error(std::span<const FeatureMap<float>>(f), std::span<const Correspondence>(set.correspondences));
    std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> acc;
    for (const auto& d : le.items) {
      auto& a = acc[{d.view_i, d.view_j}];
      a.first += d.error;
      ++a.second;
      err_sum += d.error;
      ++r.correspondences;
    }
    for (const auto& [vp, a] : acc)
      r.pairs.push_back({set.scene, set.views[vp.first], set.views[vp.second],
                         viewpoint_angle(set.cameras[vp.first], set.cameras[vp.second]), a.first / static_cast<double>(a.second),
                         a.second});
    const auto bs = base_similarity(std::span<const FeatureMap<float>>(f), std::span<const FeatureMap<float>>(bf));
    sim_sum += bs.mean * static_cast<double>(bs.tokens);
    sim_n += bs.tokens;
  }
  r.location_error = r.correspondences ? err_sum / static_cast<double>(r.correspondences) : 0.0;
  r.base_similarity = sim_n ? sim_sum / static_cast<double>(sim_n) : 0.0;
  r.bins = angle_bins(r.pairs, edges);
  return r;
}

// ---------------------------------------------------------------------------
// Runtime scaling

struct RuntimeRow {
  std::size_t views = 0;
  double seconds_per_view = 0;
};

struct RuntimeReport {
  std::vector<RuntimeRow> rows;
  double slope = 0, intercept = 0, r2 = 0;
  double single_view = 0;    // mv_forward with M = 1
  double backbone_only = 0;  // plain backbone, one image
};

namespace detail {

template <class F>
double median_seconds(F&& f, std::size_t repeats, std::size_t warmups) {
  for (std::size_t i = 0; i < warmups; ++i) f();
  std::vector<double> t;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::nth_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(t.size() / 2), t.end());
  return t[t.size() / 2];
}

}  // namespace detail

inline RuntimeReport runtime_scaling(const MVModel<float>& model, const SceneData& scene,
                                     const std::vector<std::size_t>& view_counts, std::size_t repeats = 5,
                                     std::size_t warmups = 2) {
  if (repeats < 1) throw ConfigError("repeats", "must be >= 1");
  NoGradGuard ng;
  auto views = [&](std::size_t M) {
    std::pair<std::vector<Image>, std::vector<CameraView>> v;
    for (std::size_t i = 0; i < M; ++i) {
      v.first.push_back(scene.images[i % scene.n_views()]);
      v.second.push_back(scene.scene.cameras[i % scene.n_views()]);
    }
    return v;
  };
  auto time_mv = [&](std::size_t M) {
    const auto [imgs, cams] = views(M);
    return detail::median_seconds(
               [&] { mv_forward(model, std::span<const Image>(imgs), std::span<const CameraView>(cams)); }, repeats,
               warmups) /
           static_cast<double>(M);
  };
  RuntimeReport r;
  for (auto M : view_counts) r.rows.push_back({M, time_mv(M)});
  r.single_view = time_mv(1);
  r.backbone_only = detail::median_seconds([&] { backbone_forward(model.adapted, scene.images[0]); }, repeats, warmups);
  if (r.rows.size() >= 2) {
    double mx = 0, my = 0;
    for (const auto& row : r.rows) mx += static_cast<double>(row.views), my += row.seconds_per_view;
    const double n = static_cast<double>(r.rows.size());
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (const auto& row : r.rows) {
      const double dx = static_cast<double>(row.views) - mx, dy = row.seconds_per_view - my;
      sxy += dx * dy, sxx += dx * dx, syy += dy * dy;
    }
    r.slope = sxy / sxx;
    r.intercept = my - r.slope * mx;
    r.r2 = syy > 0 ? sxy * sxy / (sxx * syy) : 1.0;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Context ablations

enum class ContextStrategy { Random, Meaningful };

struct ViewCountRow {
  std::size_t views = 0;
  double error = 0;
};

namespace detail {

// The scene camera with the largest overlap with `a`.
inline std::size_t best_partner(const SceneData& d, std::size_t a) {
  std::size_t best = a == 0 ? 1 : 0;
  for (std::size_t j = 0; j < d.n_views(); ++j)
    if (j != a && d.pair_overlap(a, j) > d.pair_overlap(a, best)) best = j;
  return best;
}

// Location error on correspondences between set positions 0 and 1.
inline double pair_error(const MVModel<float>& model, const SceneData& d, const std::vector<std::size_t>& views,
                         const std::vector<Correspondence>& corrs) {
  Batch b;
  for (auto v : views) {
    b.images.push_back(d.images[v]);
    b.cameras.push_back(d.scene.cameras[v]);
  }
  const auto f = extract_features(model, b);
  return location_error(std::span<const FeatureMap<float>>(f), std::span<const Correspondence>(corrs)).mean;
}

inline std::vector<Correspondence> pair_correspondences(const SceneData& d, std::size_t a, std::size_t b, std::size_t k,
                                                        std::uint64_t seed) {
  auto c = sample_correspondences(d.scene, a, b, k, seed);
  for (auto& x : c) x.view_i = 0, x.view_j = 1;
  return c;
}

}  // namespace detail

// Fixed query pair per scene (camera 0 and its best-overlapping partner),
// context views appended by strategy; meaningful = nearest camera centers to
// the first query view.
inline std::vector<ViewCountRow> view_count_ablation(const MVModel<float>& model, const std::vector<SceneData>& scenes,
                                                     ContextStrategy strategy, std::size_t max_views, std::size_t k,
                                                     std::uint64_t seed) {
  if (max_views < 2) throw ConfigError("max_views", "must be >= 2");
  std::vector<ViewCountRow> rows;
  for (std::size_t n = 2; n <= max_views; ++n) rows.push_back({n, 0});
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& d = scenes[s];
    if (max_views > d.n_views()) throw ConfigError("max_views", "exceeds cameras in scene " + std::to_string(s));
    const std::size_t a = 0, b = detail::best_partner(d, a);
    const auto corrs = detail::pair_correspondences(d, a, b, k, derive_seed(seed, "view-count-corr", s));
    std::vector<std::size_t> ctx;
    for (std::size_t j = 0; j < d.n_views(); ++j)
      if (j != a && j != b) ctx.push_back(j);
    if (strategy == ContextStrategy::Meaningful) {
      const Vec3 ca = d.scene.cameras[a].center();
      std::stable_sort(ctx.begin(), ctx.end(), [&](std::size_t x, std::size_t y) {
        return (d.scene.cameras[x].center() - ca).norm() < (d.scene.cameras[y].center() - ca).norm();
      });
    } else {
      Rng rng(derive_seed(seed, "view-count-order", s));
      std::shuffle(ctx.begin(), ctx.end(), rng);
    }
    std::vector<std::size_t> views{a, b};
    for (std::size_t n = 2; n <= max_views; ++n) {
      if (n > 2) views.push_back(ctx[n - 3]);
      rows[n - 2].error += detail::pair_error(model, d, views, corrs);
    }
  }
  for (auto& r : rows) r.error /= static_cast<double>(scenes.size());
  return rows;
}

struct ContextPairStats {
  std::size_t scene = 0, view_a = 0, view_b = 0;
  double mean = 0, std = 0;
};

struct ContextConsistency {
  std::vector<ContextPairStats> pairs;
  double mean_error = 0;
  double mean_std = 0;
  double ratio() const { return mean_error > 0 ? mean_std / mean_error : 0.0; }
};

// Each fixed pair is evaluated with `n_swaps` random pairs of context views
// (sets of four). Pairs cycle through the scenes.
inline ContextConsistency context_consistency(const MVModel<float>& model, const std::vector<SceneData>& scenes,
                                              std::size_t n_pairs, std::size_t n_swaps, std::size_t k,
                                              std::uint64_t seed, double min_overlap = 1.0 / 6.0) {
  if (n_swaps < 1) throw ConfigError("n_swaps", "must be >= 1");
  ContextConsistency out;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    const std::size_t s = p % scenes.size();
    const auto& d = scenes[s];
    if (d.n_views() < 4) throw ConfigError("scenes", "context swaps need at least 4 cameras");
    Rng rng(derive_seed(seed, "context-pair", p));
    std::size_t a = uniform_index(rng, d.n_views()), b = a;
    for (std::size_t tries = 0; tries < 256 && (b == a || d.pair_overlap(a, b) < min_overlap); ++tries)
      b = uniform_index(rng, d.n_views());
    if (b == a) b = detail::best_partner(d, a);
    const auto corrs = detail::pair_correspondences(d, a, b, k, derive_seed(seed, "context-corr", p));
    std::vector<std::size_t> rest;
    for (std::size_t j = 0; j < d.n_views(); ++j)
      if (j != a && j != b) rest.push_back(j);
    std::vector<double> errs;
    for (std::size_t w = 0; w < n_swaps; ++w) {
      std::shuffle(rest.begin(), rest.end(), rng);
      errs.push_back(detail::pair_error(model, d, {a, b, rest[0], rest[1]}, corrs));
    }
    ContextPairStats st{s, a, b, 0, 0};
    for (double e : errs) st.mean += e;
    st.mean /= static_cast<double>(errs.size());
    if (errs.size() > 1) {
      // shifted by the first sample so identical errors give exactly zero
      double s1 = 0, s2 = 0;
      for (double e : errs) {
        s1 += e - errs[0];
        s2 += (e - errs[0]) * (e - errs[0]);
      }
      const double n = static_cast<double>(errs.size());
      st.std = std::sqrt(std::max(0.0, s2 / n - (s1 / n) * (s1 / n)));
    }
    out.pairs.push_back(st);
    out.mean_error += st.mean;
    out.mean_std += st.std;
  }
  if (n_pairs) {
    out.mean_error /= static_cast<double>(n_pairs);
    out.mean_std /= static_cast<double>(n_pairs);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature consistency vs overlap

struct ViewOverlap {
  std::size_t set = 0, position = 0;
  std::size_t overlap = 0;  // token rays co-visible with the other views of the set
  double similarity = 0;
};

struct OverlapBin {
  std::size_t lo = 0, hi = 0;  // [lo, hi)
  std::size_t count = 0;
  std::optional<double> mean_similarity;
};

struct OverlapHistogram {
  std::vector<ViewOverlap> views;
  std::vector<OverlapBin> bins;
  double spearman = 0;  // between overlap and 1 - similarity
};

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += rx[i], my += ry[i];
  mx /= n, my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i)
    sxy += (rx[i] - mx) * (ry[i] - my), sxx += (rx[i] - mx) * (rx[i] - mx), syy += (ry[i] - my) * (ry[i] - my);
  return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

// Overlap count of a view = sum over the other set views of its token rays
// visible in them. `edges` are ascending count boundaries; the last bin is open.
inline OverlapHistogram overlap_similarity_histogram(const MVModel<float>& model, const Backbone<float>& base,
                                                     const std::vector<SceneData>& scenes, const std::vector<Batch>& sets,
                                                     const std::vector<std::size_t>& edges) {
  if (edges.empty() || edges.front() != 0 || !std::is_sorted(edges.begin(), edges.end()))
    throw ConfigError("overlap_bins", "edges must be ascending and start at 0");
  OverlapHistogram h;
  for (std::size_t si = 0; si < sets.size(); ++si) {
    const auto& set = sets[si];
    const auto& d = scenes.at(set.scene);
    const auto f = extract_features(model, set);
    const auto bf = extract_base_features(base, set);
    for (std::size_t p = 0; p < set.views.size(); ++p) {
      double ov = 0;
      for (std::size_t q = 0; q < set.views.size(); ++q)
        if (q != p) ov += d.overlap[set.views[p] * d.n_views() + set.views[q]];
      const auto sim = base_similarity(std::span<const FeatureMap<float>>(&f[p], 1), std::span<const FeatureMap<float>>(&bf[p], 1));
      h.views.push_back({si, p, static_cast<std::size_t>(std::lround(ov * kOverlapGrid * kOverlapGrid)), sim.mean});
    }
  }
  for (std::size_t b = 0; b < edges.size(); ++b)
    h.bins.push_back({edges[b], b + 1 < edges.size() ? edges[b + 1] : std::numeric_limits<std::size_t>::max(), 0, {}});
  std::vector<double> sums(h.bins.size(), 0), ox, oy;
  for (const auto& v : h.views) {
    const std::size_t b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), v.overlap) - edges.begin()) - 1;
    ++h.bins[b].count;
    sums[b] += v.similarity;
    ox.push_back(static_cast<double>(v.overlap));
    oy.push_back(1.0 - v.similarity);
  }
  for (std::size_t b = 0; b < h.bins.size(); ++b)
    if (h.bins[b].count) h.bins[b].mean_similarity = sums[b] / static_cast<double>(h.bins[b].count);
  h.spearman = ox.size() > 1 ? spearman(ox, oy) : 0.0;
  return h;
}

// ---------------------------------------------------------------------------
// Camera noise

struct NoiseRow {
  double sigma = 0;
  double error = 0;
};

// The same noise draw per set is scaled across levels.
inline std::vector<NoiseRow> noise_robustness(const MVModel<float>& model, const std::vector<Batch>& sets,
                                              const std::vector<double>& levels, std::uint64_t seed) {
  if (levels.empty() || levels.front() != 0 || !std::is_sorted(levels.begin(), levels.end()))
    throw ConfigError("noise_levels", "must be ascending and start at 0");
  std::vector<NoiseRow> rows;
  for (double sigma : levels) {
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < sets.size(); ++i) {
      const auto cams = perturb_cameras(sets[i].cameras, sigma, derive_seed(seed, "noise", i));
      const auto f = extract_features(model, sets[i], &cams);
      const auto le = location_error(std::span<const FeatureMap<float>>(f), std::span<const Correspondence>(sets[i].correspondences));
      sum += le.mean * static_cast<double>(le.items.size());
      n += le.items.size();
    }
    rows.push_back({sigma, n ? sum / static_cast<double>(n) : 0.0});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Shared PCA

struct PcaResult {
  Eigen::VectorXd mean;
  Eigen::MatrixXd axes;  // [k, C], unit rows
  std::vector<double> eigenvalues;
  double total_variance = 0;
  std::vector<Eigen::MatrixXd> projections;  // per set: [tokens, k]

  double explained_fraction() const {
    double s = 0;
    for (double e : eigenvalues) s += e;
    return total_variance > 0 ? s / total_variance : 0.0;
  }
};

inline constexpr double kPowerTolerance = 1e-8;

// Principal axes of the union of all sets by power iteration with deflation;
// each axis is signed so its largest-magnitude component is positive.
template <class T>
PcaResult pca_project(const std::vector<std::vector<FeatureMap<T>>>& sets, std::size_t dims = 3) {
  std::vector<const FeatureMap<T>*> maps;
  for (const auto& s : sets)
    for (const auto& f : s) maps.push_back(&f);
  if (maps.empty()) throw ConfigError("pca", "no features");
  const std::size_t C = maps[0]->channels();
  std::size_t N = 0;
  for (auto* f : maps) {
    if (f->channels() != C) throw ShapeError("pca_project", maps[0]->tokens.shape(), f->tokens.shape());
    N += f->size();
  }
  Eigen::MatrixXd X(N, C);
  std::size_t row = 0;
  for (auto* f : maps)
    for (std::size_t t = 0; t < f->size(); ++t, ++row)
      for (std::size_t c = 0; c < C; ++c) X(row, c) = f->tokens.at(t, c);
  PcaResult r;
  r.mean = X.colwise().mean().transpose();
  X.rowwise() -= r.mean.transpose();
  Eigen::MatrixXd cov = X.transpose() * X / static_cast<double>(N);
  r.total_variance = cov.trace();
  std::vector<Eigen::VectorXd> axes;
  for (std::size_t k = 0; k < std::min(dims, C); ++k) {
    Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(static_cast<Eigen::Index>(C), 1.0, 2.0).normalized();
    double lambda = 0;
    for (int it = 0; it < 100000; ++it) {
      Eigen::VectorXd w = cov * v;
      const double n = w.norm();
      if (n == 0) break;
      w /= n;
      const double delta = std::min((w - v).norm(), (w + v).norm());
      v = w;
      lambda = n;
      if (delta < kPowerTolerance) break;
    }
    lambda = v.dot(cov * v);
    if (!(lambda > 1e-12 * std::max(r.total_variance, 1e-300))) {
      std::cerr << "warning: pca_project: covariance rank " << k << " < " << dims << "; returning " << k << " axes\n";
      break;
    }
    Eigen::Index imax;
    v.cwiseAbs().maxCoeff(&imax);
    if (v(imax) < 0) v = -v;
    axes.push_back(v);
    r.eigenvalues.push_back(lambda);
    cov -= lambda * v * v.transpose();
  }
  r.axes.resize(static_cast<Eigen::Index>(axes.size()), static_cast<Eigen::Index>(C));
  for (std::size_t k = 0; k < axes.size(); ++k) r.axes.row(static_cast<Eigen::Index>(k)) = axes[k].transpose();
  for (const auto& s : sets) {
    std::size_t n = 0;
    for (const auto& f : s) n += f.size();
    Eigen::MatrixXd Y(n, C);
    std::size_t i = 0;
    for (const auto& f : s)
      for (std::size_t t = 0; t < f.size(); ++t, ++i)
        for (std::size_t c = 0; c < C; ++c) Y(i, c) = f.tokens.at(t, c) - r.mean(c);
    r.projections.push_back(Y * r.axes.transpose());
  }
  return r;
}

}  // namespace mvadapt
