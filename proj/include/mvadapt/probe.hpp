#pragma once

// Surface-normal probe on frozen multi-view features: a small self-attention
// head over the tokens of all views predicts (x, y, z, sigma) per token, with
// normals expressed in the camera frame of view 0.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <vector>

#include "mvadapt/adapter.hpp"
#include "mvadapt/dataset.hpp"
#include "mvadapt/evaluator.hpp"
#include "mvadapt/serialize.hpp"
#include "mvadapt/trainer.hpp"
#include "json.hpp"

namespace mvadapt {

struct ProbeConfig {
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t epochs = 20;
  std::size_t sets_per_scene_per_epoch = 10;
  std::size_t set_size = 4;
  double lr = 5e-5;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  bool l2_loss = false;  // plain squared error instead of the uncertainty-weighted form
  std::uint64_t seed = 0;

  void validate() const {
    if (depth < 1) throw ConfigError("depth", "must be >= 1");
    if (set_size < 1) throw ConfigError("set_size", "must be >= 1");
    if (!(lr > 0)) throw ConfigError("lr", "must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"depth", c.depth},   {"heads", c.heads},         {"mlp_ratio", c.mlp_ratio},
       {"epochs", c.epochs}, {"sets_per_scene_per_epoch", c.sets_per_scene_per_epoch},
       {"set_size", c.set_size}, {"lr", c.lr},           {"weight_decay", c.weight_decay},
       {"grad_clip", c.grad_clip}, {"l2_loss", c.l2_loss}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
  check_keys(j, {"depth", "heads", "mlp_ratio", "epochs", "sets_per_scene_per_epoch", "set_size", "lr", "weight_decay",
                 "grad_clip", "l2_loss", "seed"});
  read_field(j, "depth", c.depth);
  read_field(j, "heads", c.heads);
  read_field(j, "mlp_ratio", c.mlp_ratio);
  read_field(j, "epochs", c.epochs);
  read_field(j, "sets_per_scene_per_epoch", c.sets_per_scene_per_epoch);
  read_field(j, "set_size", c.set_size);
  read_field(j, "lr", c.lr);
  read_field(j, "weight_decay", c.weight_decay);
  read_field(j, "grad_clip", c.grad_clip);
  read_field(j, "l2_loss", c.l2_loss);
  read_field(j, "seed", c.seed);
}

inline constexpr float kSigmaFloor = 1e-4f;

template <class T>
struct NormalProbe {
  Tensor<T> view_embed;  // [2, C]: row 0 marks the reference view, row 1 the others
  std::vector<TransformerLayer<T>> layers;
  LayerNormAffine<T> norm;
  Linear<T> head;  // C -> 4

  static NormalProbe init(std::size_t channels, const ProbeConfig& cfg) {
    Rng rng(derive_seed(cfg.seed, "probe"));
    NormalProbe p;
    p.view_embed = random_tensor<T>({2, channels}, 0.02, rng);
    for (std::size_t l = 0; l < cfg.depth; ++l) p.layers.push_back(TransformerLayer<T>::init(channels, cfg.heads, cfg.mlp_ratio, rng));
    p.norm = LayerNormAffine<T>::init(channels);
    p.head = Linear<T>::init(channels, 4, rng);
    for (auto& x : p.parameters()) x.tensor.set_requires_grad(true);
    return p;
  }

  ParamList<T> parameters() const {
    ParamList<T> out{{"probe.view_embed", view_embed}};
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].collect("probe.layers." + std::to_string(l), out);
    norm.collect("probe.norm", out);
    head.collect("probe.head", out);
    return out;
  }

  // features: per-view maps, view 0 first. Returns [M*T, 4] raw outputs.
  Tensor<T> operator()(std::span<const FeatureMap<T>> features) const {
    const std::size_t C = view_embed.dim(1);
    const auto ref = reshape(slice(view_embed, 0, 0, 1), {C});
    const auto other = reshape(slice(view_embed, 0, 1, 2), {C});
    std::vector<Tensor<T>> parts;
    for (std::size_t v = 0; v < features.size(); ++v) parts.push_back(add_rowwise(features[v].tokens, v == 0 ? ref : other));
    auto x = parts.size() == 1 ? parts[0] : concat(parts, 0);
    for (const auto& l : layers) x = l(x);
    return head(norm(x));
  }
};

struct NormalTargets {
  std::vector<Vec3> normals;  // [M*T], view-0 camera frame
  std::vector<bool> valid;    // false where the token ray misses every surface
  std::uint64_t frame = 0;
};

// Identifier of the reference frame a normal field is expressed in.
inline std::uint64_t frame_id(const CameraView& reference) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  auto mix = [&](double d) {
    const auto* b = reinterpret_cast<const unsigned char*>(&d);
    for (std::size_t i = 0; i < sizeof d; ++i) h = (h ^ b[i]) * 0x100000001B3ull;
  };
  for (int i = 0; i < 9; ++i) mix(reference.R(i / 3, i % 3));
  for (int i = 0; i < 3; ++i) mix(reference.t(i));
  return h;
}

// Analytic normals at the token centers of every view, rotated into view 0's camera frame.
inline NormalTargets normal_targets(const Scene& scene, std::span<const CameraView> cameras, std::size_t grid) {
  NormalTargets t;
  t.frame = frame_id(cameras[0]);
  const Mat3 R0t = cameras[0].R.transpose();
  for (const auto& cam : cameras)
    for (std::size_t r = 0; r < grid; ++r)
      for (std::size_t c = 0; c < grid; ++c) {
        const Vec2 uv = token_center(r, c, grid, grid);
        const auto hit = cast_ray(scene, pixel_ray(cam, uv.x(), uv.y()));
        t.valid.push_back(hit.has_value());
        t.normals.push_back(hit ? Vec3(R0t * analytic_normal(scene, hit->point)) : Vec3::Zero());
      }
  return t;
}

template <class T>
struct ProbeOutput {
  Tensor<T> normals;  // [N, 3], unit rows
  Tensor<T> sigma;    // [N], softplus + floor
};

template <class T>
ProbeOutput<T> split_probe_output(const Tensor<T>& raw) {
  const std::size_t n = raw.dim(0);
  return {normalize(slice(raw, 1, 0, 3), 1), add_scalar(softplus(reshape(slice(raw, 1, 3, 4), {n})), T(kSigmaFloor))};
}

// Mean over valid tokens of |n_hat - n| / sigma + log sigma (or |n_hat - n|^2).
template <class T>
Tensor<T> probe_loss(const ProbeOutput<T>& out, const NormalTargets& gt, bool l2) {
  const std::size_t n = gt.normals.size();
  if (out.normals.dim(0) != n) throw ShapeError("probe_loss", out.normals.shape(), Shape{n, 3});
  std::vector<T> g(n * 3), w(n, T(0));
  std::size_t valid = 0;
  for (std::size_t i = 0; i < n; ++i) valid += gt.valid[i];
  if (valid == 0) throw ConfigError("normals", "no valid target tokens");
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) g[i * 3 + k] = static_cast<T>(gt.normals[i][k]);
    if (gt.valid[i]) w[i] = T(1) / static_cast<T>(valid);
  }
  const auto target = Tensor<T>::from({n, 3}, std::move(g));
  const auto weights = Tensor<T>::from({n}, std::move(w));
  const auto diff = sub(out.normals, target);
  const auto per = l2 ? sum(square(diff), 1) : add(div(l2norm(diff, 1), out.sigma), log(out.sigma));
  return sum_all(mul(per, weights));
}

struct ProbeMetrics {
  double recall_11 = 0, recall_22 = 0, recall_30 = 0;  // fraction under 11.25, 22.5, 30 degrees
  double rmse = 0;                                     // degrees
  std::size_t count = 0;
};

struct NormalField {
  std::uint64_t frame = 0;
  std::vector<Vec3> normals;
};

class ProbeMetricAccumulator {
 public:
  void add(const Vec3& pred, const Vec3& truth) {
    const double c = std::clamp(pred.normalized().dot(truth.normalized()), -1.0, 1.0);
    const double deg = std::acos(c) * 180.0 / std::numbers::pi;
    sq_ += deg * deg;
    r11_ += deg < 11.25;
    r22_ += deg < 22.5;
    r30_ += deg < 30.0;
    ++n_;
  }
  ProbeMetrics result() const {
    if (n_ == 0) return {};
    const double n = static_cast<double>(n_);
    return {static_cast<double>(r11_) / n, static_cast<double>(r22_) / n, static_cast<double>(r30_) / n, std::sqrt(sq_ / n), n_};
  }

 private:
  double sq_ = 0;
  std::size_t r11_ = 0, r22_ = 0, r30_ = 0, n_ = 0;
};

inline ProbeMetrics probe_metrics(const NormalField& pred, const NormalField& truth) {
  if (pred.frame != truth.frame) throw ConfigError("normals", "prediction and ground truth are in different reference frames");
  if (pred.normals.size() != truth.normals.size()) throw ShapeError("probe_metrics", Shape{pred.normals.size()}, Shape{truth.normals.size()});
  ProbeMetricAccumulator acc;
  for (std::size_t i = 0; i < pred.normals.size(); ++i) acc.add(pred.normals[i], truth.normals[i]);
  return acc.result();
}

// Frozen feature source: the plain base backbone or a multi-view model.
struct FeatureSource {
  const MVModel<float>* model = nullptr;

  std::vector<FeatureMap<float>> operator()(const Batch& set) const { return extract_features(*model, set); }
};

struct ProbeTrainResult {
  NormalProbe<float> probe;
  std::vector<double> losses;
};

inline ProbeTrainResult train_probe(const FeatureSource& source, const std::vector<SceneData>& scenes, const ProbeConfig& cfg,
                                    bool verbose = false) {
  cfg.validate();
  const auto& mc = source.model->config.backbone;
  const auto frozen = parameter_digest(source.model->all_parameters());
  ProbeTrainResult r{NormalProbe<float>::init(mc.embed_dim, cfg), {}};
  AdamW<float> opt(r.probe.parameters(), 0.9, 0.999, 1e-8, cfg.weight_decay);
  const std::size_t per_epoch = std::max<std::size_t>(1, cfg.sets_per_scene_per_epoch * scenes.size());
  const std::size_t total = per_epoch * cfg.epochs;
  const SamplerConfig sampler{cfg.set_size, std::max<std::size_t>(1, cfg.set_size * (cfg.set_size - 1) / 2), 1.0 / 6.0, 64};
  for (std::size_t step = 0; step < total; ++step) {
    const auto set = sample_batch(scenes, sampler, derive_seed(cfg.seed, "probe-batch"), step);
    const auto feats = source(set);
    const auto gt = normal_targets(scenes[set.scene].scene, std::span<const CameraView>(set.cameras), mc.grid());
    const auto loss = probe_loss(split_probe_output(r.probe(std::span<const FeatureMap<float>>(feats))), gt, cfg.l2_loss);
    if (!std::isfinite(loss.item())) throw NumericalError("non-finite probe loss at step " + std::to_string(step));
    backward(loss);
    opt.step(linear_lr(cfg.lr, step, total), cfg.grad_clip);
    r.losses.push_back(loss.item());
    if (verbose && step % 200 == 0) std::cerr << "probe step " << step << ": loss " << loss.item() << '\n';
  }
  if (parameter_digest(source.model->all_parameters()) != frozen) throw NumericalError("feature source weights changed during probe training");
  return r;
}

struct ProbePrediction {
  NormalField predicted, truth;
  std::vector<float> sigma;
};

inline ProbePrediction predict_normals(const NormalProbe<float>& probe, const FeatureSource& source, const SceneData& scene,
                                       const Batch& set) {
  NoGradGuard ng;
  const auto feats = source(set);
  const auto out = split_probe_output(probe(std::span<const FeatureMap<float>>(feats)));
  const auto gt = normal_targets(scene.scene, std::span<const CameraView>(set.cameras), source.model->config.backbone.grid());
  ProbePrediction p;
  p.predicted.frame = p.truth.frame = gt.frame;
  for (std::size_t i = 0; i < gt.normals.size(); ++i) {
    if (!gt.valid[i]) continue;
    p.predicted.normals.emplace_back(out.normals.at(i, 0), out.normals.at(i, 1), out.normals.at(i, 2));
    p.truth.normals.push_back(gt.normals[i]);
    p.sigma.push_back(out.sigma[i]);
  }
  return p;
}

inline ProbeMetrics evaluate_probe(const NormalProbe<float>& probe, const FeatureSource& source,
                                   const std::vector<SceneData>& scenes, const std::vector<Batch>& sets) {
  ProbeMetricAccumulator acc;
  for (const auto& set : sets) {
    const auto p = predict_normals(probe, source, scenes.at(set.scene), set);
    for (std::size_t i = 0; i < p.predicted.normals.size(); ++i) acc.add(p.predicted.normals[i], p.truth.normals[i]);
  }
  return acc.result();
}

}  // namespace mvadapt
