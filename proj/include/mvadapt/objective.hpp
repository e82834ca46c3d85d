#pragma once

// Training objectives over per-view feature maps.
//
// Query features at continuous positions are bilinear blends of the four
// nearest token features; predicted locations are soft-argmax expectations
// over token centers. All positions are normalized image coordinates.

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "mvadapt/backbone.hpp"
#include "mvadapt/camera.hpp"
#include "mvadapt/scene.hpp"
#include "mvadapt/tensor.hpp"

namespace mvadapt {

struct LossWeights {
  double tau = 0.05;
  double lambda_reg = 1.0;

  void validate() const {
    if (!(tau > 0)) throw ConfigError("tau", "must be > 0");
    if (!(lambda_reg >= 0)) throw ConfigError("lambda_reg", "must be >= 0");
  }
};

// Normalized token-center coordinates, [rows * cols, 2] as (u, v).
template <class T>
Tensor<T> token_centers(std::size_t rows, std::size_t cols) {
  std::vector<T> v;
  v.reserve(rows * cols * 2);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const Vec2 uv = token_center(r, c, rows, cols);
      v.push_back(static_cast<T>(uv.x()));
      v.push_back(static_cast<T>(uv.y()));
    }
  return Tensor<T>::from({rows * cols, 2}, std::move(v));
}

// Row k holds the bilinear weights of points[k] over the token grid, so
// matmul(weights, tokens) samples the feature map at those positions.
template <class T>
Tensor<T> bilinear_weights(std::span<const Vec2> points, std::size_t rows, std::size_t cols) {
  std::vector<T> w(points.size() * rows * cols, T(0));
  auto axis = [](double x, std::size_t n, std::size_t& i0, double& f) {
    double g = std::clamp(x * static_cast<double>(n) - 0.5, 0.0, static_cast<double>(n - 1));
    i0 = n > 1 ? std::min<std::size_t>(static_cast<std::size_t>(g), n - 2) : 0;
    f = n > 1 ? g - static_cast<double>(i0) : 0.0;
  };
  for (std::size_t k = 0; k < points.size(); ++k) {
    std::size_t c0, r0;
    double fc, fr;
    axis(points[k].x(), cols, c0, fc);
    axis(points[k].y(), rows, r0, fr);
    T* row = w.data() + k * rows * cols;
    row[r0 * cols + c0] += static_cast<T>((1 - fr) * (1 - fc));
    if (cols > 1) row[r0 * cols + c0 + 1] += static_cast<T>((1 - fr) * fc);
    if (rows > 1) row[(r0 + 1) * cols + c0] += static_cast<T>(fr * (1 - fc));
    if (rows > 1 && cols > 1) row[(r0 + 1) * cols + c0 + 1] += static_cast<T>(fr * fc);
  }
  return Tensor<T>::from({points.size(), rows * cols}, std::move(w));
}

// Features of `map` at continuous positions: [K, C].
template <class T>
Tensor<T> sample_features(const FeatureMap<T>& map, std::span<const Vec2> points) {
  return matmul(bilinear_weights<T>(points, map.rows, map.cols), map.tokens);
}

// Cosine similarity of each query row against every token: [K, rows * cols].
// Throws NumericalError on a zero-norm feature.
template <class T>
Tensor<T> similarity_maps(const Tensor<T>& queries, const FeatureMap<T>& target) {
  if (queries.rank() != 2 || queries.dim(1) != target.channels())
    throw ShapeError("similarity_map", queries.shape(), target.tokens.shape());
  return matmul(normalize(queries, 1), normalize(target.tokens, 1), false, true);
}

// Single query vector [C] against one target map; result [rows * cols].
template <class T>
Tensor<T> similarity_map(const Tensor<T>& query, const FeatureMap<T>& target) {
  if (query.numel() != target.channels()) throw ShapeError("similarity_map", query.shape(), target.tokens.shape());
  return reshape(similarity_maps(reshape(query, {1, query.numel()}), target), {target.size()});
}

template <class T>
struct SoftArgmax {
  Tensor<T> location;     // [K, 2]
  Tensor<T> probability;  // [K, rows * cols]
};

// p = softmax(S / tau) over tokens, location = sum_u p(u) * u.
template <class T>
SoftArgmax<T> soft_argmax(const Tensor<T>& similarity, std::size_t rows, std::size_t cols, T tau) {
  if (!(tau > T(0))) throw ConfigError("tau", "must be > 0");
  const auto S = similarity.rank() == 1 ? reshape(similarity, {1, similarity.numel()}) : similarity;
  if (S.dim(1) != rows * cols) throw ShapeError("soft_argmax", S.shape(), Shape{rows, cols});
  auto p = softmax(S, 1, tau);
  return {matmul(p, token_centers<T>(rows, cols)), p};
}

namespace detail {

// Correspondences grouped by ordered view pair, both directions.
struct DirectedBatch {
  std::vector<Vec2> query, target;
};

inline std::map<std::pair<std::size_t, std::size_t>, DirectedBatch> directed_batches(
    std::span<const Correspondence> corrs, std::size_t n_views) {
  std::map<std::pair<std::size_t, std::size_t>, DirectedBatch> out;
  for (const auto& c : corrs) {
    if (c.view_i >= n_views || c.view_j >= n_views)
      throw ConfigError("correspondences", "view index " + std::to_string(std::max(c.view_i, c.view_j)) +
                                               " out of range for " + std::to_string(n_views) + " views");
    auto& f = out[{c.view_i, c.view_j}];
    f.query.push_back(c.x_i);
    f.target.push_back(c.x_j);
    auto& b = out[{c.view_j, c.view_i}];
    b.query.push_back(c.x_j);
    b.target.push_back(c.x_i);
  }
  return out;
}

template <class T>
Tensor<T> points_tensor(std::span<const Vec2> pts) {
  std::vector<T> v;
  v.reserve(pts.size() * 2);
  for (const auto& p : pts) {
    v.push_back(static_cast<T>(p.x()));
    v.push_back(static_cast<T>(p.y()));
  }
  return Tensor<T>::from({pts.size(), 2}, std::move(v));
}

}  // namespace detail

// Mean Euclidean distance between soft-argmax predictions and ground truth,
// over every correspondence in both directions.
template <class T>
Tensor<T> corr_loss(std::span<const FeatureMap<T>> features, std::span<const Correspondence> corrs, T tau) {
  if (corrs.empty()) throw ConfigError("correspondences", "empty correspondence set");
  const auto batches = detail::directed_batches(corrs, features.size());
  std::vector<Tensor<T>> normalized(features.size());
  std::vector<Tensor<T>> dists;
  for (const auto& [pair, b] : batches) {
    const auto& src = features[pair.first];
    const auto& dst = features[pair.second];
    auto& nd = normalized[pair.second];
    if (!nd.defined()) nd = normalize(dst.tokens, 1);
    const auto q = normalize(sample_features(src, std::span<const Vec2>(b.query)), 1);
    const auto p = softmax(matmul(q, nd, false, true), 1, tau);
    const auto pred = matmul(p, token_centers<T>(dst.rows, dst.cols));
    dists.push_back(l2norm(sub(pred, detail::points_tensor<T>(b.target)), 1));
  }
  return mean_all(dists.size() == 1 ? dists[0] : concat(dists, 0));
}

// Mean L2 distance between features at corresponding points. Minimized by
// any constant feature map.
template <class T>
Tensor<T> naive_loss(std::span<const FeatureMap<T>> features, std::span<const Correspondence> corrs) {
  if (corrs.empty()) throw ConfigError("correspondences", "empty correspondence set");
  std::map<std::pair<std::size_t, std::size_t>, detail::DirectedBatch> pairs;
  for (const auto& c : corrs) {
    if (c.view_i >= features.size() || c.view_j >= features.size())
      throw ConfigError("correspondences", "view index out of range");
    auto& b = pairs[{c.view_i, c.view_j}];
    b.query.push_back(c.x_i);
    b.target.push_back(c.x_j);
  }
  std::vector<Tensor<T>> dists;
  for (const auto& [pair, b] : pairs) {
    const auto fi = sample_features(features[pair.first], std::span<const Vec2>(b.query));
    const auto fj = sample_features(features[pair.second], std::span<const Vec2>(b.target));
    dists.push_back(l2norm(sub(fi, fj), 1));
  }
  return mean_all(dists.size() == 1 ? dists[0] : concat(dists, 0));
}

template <class T>
struct RegLoss {
  Tensor<T> norm;   // mean of 1 - min(|F| / |F~|, 10)
  Tensor<T> angle;  // mean of 1 - cos(F, F~)
  Tensor<T> total;
};

inline constexpr double kNormRatioClamp = 10.0;

// F = base feature, F~ = adapted feature, averaged over all tokens of all views.
template <class T>
RegLoss<T> reg_loss(std::span<const FeatureMap<T>> adapted, std::span<const FeatureMap<T>> base) {
  if (adapted.size() != base.size() || adapted.empty()) throw ConfigError("features", "adapted/base view count mismatch");
  std::vector<Tensor<T>> ratios, coss;
  for (std::size_t i = 0; i < adapted.size(); ++i) {
    if (adapted[i].tokens.shape() != base[i].tokens.shape())
      throw ShapeError("reg_loss", adapted[i].tokens.shape(), base[i].tokens.shape());
    const auto na = l2norm(adapted[i].tokens, 1);
    for (T v : na.data())
      if (!(v > T(0))) throw NumericalError("reg_loss: zero-norm adapted feature");
    const auto nb = l2norm(base[i].tokens, 1);
    ratios.push_back(clamp_max(div(nb, na), static_cast<T>(kNormRatioClamp)));
    coss.push_back(cosine_similarity(adapted[i].tokens, base[i].tokens, 1));
  }
  auto cat = [](std::vector<Tensor<T>>& v) { return v.size() == 1 ? v[0] : concat(v, 0); };
  RegLoss<T> r;
  r.norm = add_scalar(neg(mean_all(cat(ratios))), T(1));
  r.angle = add_scalar(neg(mean_all(cat(coss))), T(1));
  r.total = add(r.norm, r.angle);
  return r;
}

template <class T>
struct LossBreakdown {
  Tensor<T> corr, norm, angle, total;
};

// corr + lambda_reg * (norm + angle).
template <class T>
LossBreakdown<T> total_loss(std::span<const FeatureMap<T>> features, std::span<const FeatureMap<T>> base_features,
                            std::span<const Correspondence> corrs, const LossWeights& w) {
  w.validate();
  LossBreakdown<T> out;
  out.corr = corr_loss(features, corrs, static_cast<T>(w.tau));
  if (w.lambda_reg == 0 && base_features.empty()) {
    out.norm = out.angle = Tensor<T>::scalar(T(0));
    out.total = out.corr;
    return out;
  }
  const auto reg = reg_loss(features, base_features);
  out.norm = reg.norm;
  out.angle = reg.angle;
  out.total = w.lambda_reg == 0 ? out.corr : add(out.corr, scale(reg.total, static_cast<T>(w.lambda_reg)));
  return out;
}

}  // namespace mvadapt
