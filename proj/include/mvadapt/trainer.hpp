#pragma once

// Optimization of the trainable groups of an MVModel (and the base warm-up)
// with AdamW, linear learning-rate decay and global-norm clipping.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mvadapt/adapter.hpp"
#include "mvadapt/config.hpp"
#include "mvadapt/dataset.hpp"
#include "mvadapt/evaluator.hpp"
#include "mvadapt/objective.hpp"
#include "mvadapt/serialize.hpp"
#include "json.hpp"

namespace mvadapt {

enum class Objective { Total, Naive };

struct TrainConfig {
  MVConfig model;
  std::size_t epochs = 20;
  std::size_t sets_per_scene_per_epoch = 50;
  std::size_t set_size = 4;
  std::size_t correspondences = 32;
  std::size_t sets_per_step = 1;  // gradient accumulation
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double grad_clip = 1.0;  // 0 disables
  LossWeights loss;
  Objective objective = Objective::Total;
  double min_pair_overlap = 1.0 / 6.0;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    loss.validate();
    if (set_size < 1) throw ConfigError("set_size", "must be >= 1");
    if (correspondences < 1) throw ConfigError("correspondences", "must be >= 1");
    if (sets_per_step < 1) throw ConfigError("sets_per_step", "must be >= 1");
    if (!(lr > 0)) throw ConfigError("lr", "must be > 0");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay", "must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1", "must be in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2", "must be in [0, 1)");
    if (!(grad_clip >= 0)) throw ConfigError("grad_clip", "must be >= 0");
  }

  SamplerConfig sampler() const { return {set_size, correspondences, min_pair_overlap, 64}; }
  std::size_t steps_per_epoch(std::size_t n_scenes) const {
    return std::max<std::size_t>(1, sets_per_scene_per_epoch * n_scenes / sets_per_step);
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(Objective, {{Objective::Total, "total"}, {Objective::Naive, "naive"}})

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", c.model},
       {"epochs", c.epochs},
       {"sets_per_scene_per_epoch", c.sets_per_scene_per_epoch},
       {"set_size", c.set_size},
       {"correspondences", c.correspondences},
       {"sets_per_step", c.sets_per_step},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"grad_clip", c.grad_clip},
       {"tau", c.loss.tau},
       {"lambda_reg", c.loss.lambda_reg},
       {"objective", c.objective},
       {"min_pair_overlap", c.min_pair_overlap},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  check_keys(j, {"model", "epochs", "sets_per_scene_per_epoch", "set_size", "correspondences", "sets_per_step", "lr",
                 "weight_decay", "beta1", "beta2", "adam_eps", "grad_clip", "tau", "lambda_reg", "objective",
                 "min_pair_overlap", "seed"});
  read_section(j, "model", c.model);
  read_field(j, "epochs", c.epochs);
  read_field(j, "sets_per_scene_per_epoch", c.sets_per_scene_per_epoch);
  read_field(j, "set_size", c.set_size);
  read_field(j, "correspondences", c.correspondences);
  read_field(j, "sets_per_step", c.sets_per_step);
  read_field(j, "lr", c.lr);
  read_field(j, "weight_decay", c.weight_decay);
  read_field(j, "beta1", c.beta1);
  read_field(j, "beta2", c.beta2);
  read_field(j, "adam_eps", c.adam_eps);
  read_field(j, "grad_clip", c.grad_clip);
  read_field(j, "tau", c.loss.tau);
  read_field(j, "lambda_reg", c.loss.lambda_reg);
  std::string objective = c.objective == Objective::Naive ? "naive" : "total";
  read_field(j, "objective", objective);
  if (objective != "total" && objective != "naive")
    throw ConfigError("objective", "expected \"total\" or \"naive\", got \"" + objective + "\"");
  c.objective = objective == "naive" ? Objective::Naive : Objective::Total;
  read_field(j, "min_pair_overlap", c.min_pair_overlap);
  read_field(j, "seed", c.seed);
}

// Decoupled weight decay Adam over a fixed parameter list.
template <class T>
class AdamW {
 public:
  AdamW(ParamList<T> params, double beta1, double beta2, double eps, double weight_decay)
      : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), 0.0);
      v_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  const ParamList<T>& params() const { return params_; }
  std::size_t steps() const { return t_; }

  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_)
      for (T g : p.tensor.grad()) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  void zero_grad() {
    for (auto& p : params_) Tensor<T>(p.tensor).zero_grad();
  }

  // Applies one update with gradients scaled by `grad_scale`, clipped to
  // global norm `clip` (0: off). Returns the pre-clip norm.
  double step(double lr, double clip = 0, double grad_scale = 1) {
    const double norm = grad_norm() * grad_scale;
    if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm at optimizer step " + std::to_string(t_ + 1));
    const double k = grad_scale * (clip > 0 && norm > clip ? clip / norm : 1.0);
    ++t_;
    const double c1 = 1 - std::pow(b1_, static_cast<double>(t_)), c2 = 1 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T> p = params_[i].tensor;
      const auto g = p.grad();
      auto w = p.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = k * static_cast<double>(g[j]);
        m[j] = b1_ * m[j] + (1 - b1_) * gj;
        v[j] = b2_ * v[j] + (1 - b2_) * gj * gj;
        double x = static_cast<double>(w[j]) * (1 - lr * wd_);
        x -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        w[j] = static_cast<T>(x);
      }
    }
    zero_grad();
    return norm;
  }

 private:
  ParamList<T> params_;
  std::vector<std::vector<double>> m_, v_;
  double b1_, b2_, eps_, wd_;
  std::size_t t_ = 0;
};

// Linear decay from lr to zero over `total` steps; `step` counts from 0.
inline double linear_lr(double lr, std::size_t step, std::size_t total) {
  return total ? lr * (1.0 - static_cast<double>(step) / static_cast<double>(total)) : lr;
}

struct LossRow {
  std::size_t step = 0;
  double corr = 0, norm = 0, angle = 0, total = 0;
  double tau = 0, lambda_reg = 0;
};

struct EpochSnapshot {
  std::size_t epoch = 0;
  double location_error = 0;
  double base_similarity = 0;
};

struct TrainLog {
  std::vector<LossRow> steps;
  std::vector<EpochSnapshot> epochs;

  void write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    out << "step,L_corr,L_norm,L_angle,L_total,tau,lambda_reg\n";
    out.precision(9);
    for (const auto& r : steps)
      out << r.step << ',' << r.corr << ',' << r.norm << ',' << r.angle << ',' << r.total << ',' << r.tau << ','
          << r.lambda_reg << '\n';
  }

  void write_epochs_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    out << "epoch,location_error,base_similarity\n";
    out.precision(9);
    for (const auto& e : epochs) out << e.epoch << ',' << e.location_error << ',' << e.base_similarity << '\n';
  }
};

struct TrainHooks {
  // Called after every epoch (and once before training with epoch 0);
  // the returned snapshot is appended to the log.
  std::function<std::optional<EpochSnapshot>(std::size_t epoch)> on_epoch;
  std::function<void(std::size_t step, const LossRow&)> on_step;
};

namespace detail {

template <class T>
bool finite(const Tensor<T>& t) {
  for (T v : t.data())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

// Shared loop: `loss_of(batch)` builds the graph of one set.
template <class LossFn>
TrainLog optimize(const ParamList<float>& params, const std::vector<SceneData>& scenes, const TrainConfig& cfg,
                  BaseFeatureCache* base_cache, LossFn&& loss_of, const TrainHooks& hooks) {
  TrainLog log;
  if (hooks.on_epoch)
    if (auto s = hooks.on_epoch(0)) log.epochs.push_back(*s);
  if (cfg.epochs == 0) return log;
  if (params.empty()) throw ConfigError("model", "no trainable parameters");
  AdamW<float> opt(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  const std::size_t per_epoch = cfg.steps_per_epoch(scenes.size());
  const std::size_t total = per_epoch * cfg.epochs;
  const auto sampler = cfg.sampler();
  std::size_t set_index = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t s = 0; s < per_epoch; ++s) {
      const std::size_t step = (epoch - 1) * per_epoch + s;
      LossRow row{step, 0, 0, 0, 0, cfg.loss.tau, cfg.loss.lambda_reg};
      for (std::size_t a = 0; a < cfg.sets_per_step; ++a, ++set_index) {
        const Batch batch = sample_batch(scenes, sampler, cfg.seed, set_index, base_cache);
        const LossBreakdown<float> l = loss_of(batch);
        if (!finite(l.total)) throw NumericalError("non-finite loss at step " + std::to_string(step));
        backward(l.total);
        row.corr += l.corr.item();
        row.norm += l.norm.item();
        row.angle += l.angle.item();
        row.total += l.total.item();
      }
      const double inv = 1.0 / static_cast<double>(cfg.sets_per_step);
      row.corr *= inv, row.norm *= inv, row.angle *= inv, row.total *= inv;
      opt.step(linear_lr(cfg.lr, step, total), cfg.grad_clip, inv);
      log.steps.push_back(row);
      if (hooks.on_step) hooks.on_step(step, row);
    }
    if (hooks.on_epoch)
      if (auto snap = hooks.on_epoch(epoch)) log.epochs.push_back(*snap);
  }
  return log;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json model_manifest_config(const MVModel<float>& m, std::uint64_t seed) {
  return {{"kind", "mv"}, {"model", m.config}, {"seed", seed}};
}

// Writes to `<dir>.tmp` then renames, so an interrupted write keeps the previous checkpoint.
template <class T>
void save_checkpoint_atomic(const std::filesystem::path& dir, const ParamList<T>& params, const nlohmann::json& config) {
  auto tmp = dir;
  tmp += ".tmp";
  std::filesystem::remove_all(tmp);
  save_parameters(tmp, params, config);
  std::filesystem::remove_all(dir);
  std::filesystem::rename(tmp, dir);
}

inline void save_mv_checkpoint(const std::filesystem::path& dir, const MVModel<float>& m, std::uint64_t seed) {
  save_checkpoint_atomic(dir, m.all_parameters(), model_manifest_config(m, seed));
}

inline void save_backbone_checkpoint(const std::filesystem::path& dir, const Backbone<float>& b, std::uint64_t seed) {
  ParamList<float> ps;
  for (auto& p : b.parameters()) ps.push_back({"backbone." + p.name, p.tensor});
  save_checkpoint_atomic(dir, ps, {{"kind", "backbone"}, {"backbone", b.config}, {"seed", seed}});
}

inline Backbone<float> load_backbone_checkpoint(const std::filesystem::path& dir) {
  const auto man = read_manifest(dir);
  const auto& cfg = man.at("config");
  if (!cfg.contains("backbone") && !cfg.contains("model"))
    throw ParseError((dir / kManifestFile).string(), 0, "no backbone config in checkpoint");
  const auto bc = cfg.contains("backbone") ? cfg.at("backbone").get<BackboneConfig>()
                                           : cfg.at("model").get<MVConfig>().backbone;
  auto b = init_backbone<float>(0, bc);
  ParamList<float> ps;
  for (auto& p : b.parameters()) ps.push_back({"backbone." + p.name, p.tensor});
  load_parameters(dir, ps);
  b.set_trainable(false);
  return b;
}

inline MVModel<float> load_mv_checkpoint(const std::filesystem::path& dir) {
  const auto man = read_manifest(dir);
  const auto& cfg = man.at("config");
  if (cfg.value("kind", "") != "mv") throw ParseError((dir / kManifestFile).string(), 0, "not a multi-view checkpoint");
  const auto mc = cfg.at("model").get<MVConfig>();
  auto m = make_mv_model(init_backbone<float>(0, mc.backbone), mc, cfg.value("seed", std::uint64_t{0}));
  load_parameters(dir, m.all_parameters());
  return m;
}

// ---------------------------------------------------------------------------
// Entry points

struct TrainOptions {
  std::filesystem::path checkpoint_dir;           // empty: no checkpoints
  const std::vector<Batch>* eval_sets = nullptr;  // per-epoch snapshots when set
  bool verbose = false;
};

inline LossBreakdown<float> mv_batch_loss(const MVModel<float>& model, const Batch& b, const TrainConfig& cfg) {
  const auto out = mv_forward(model, std::span<const Image>(b.images), std::span<const CameraView>(b.cameras));
  const std::span<const FeatureMap<float>> f(out.features);
  if (cfg.objective == Objective::Naive) {
    auto l = naive_loss(f, std::span<const Correspondence>(b.correspondences));
    return {l, Tensor<float>::scalar(0), Tensor<float>::scalar(0), l};
  }
  return total_loss(f, std::span<const FeatureMap<float>>(b.base_features), std::span<const Correspondence>(b.correspondences),
                    cfg.loss);
}

// Trains the LoRA/adapter/ray-embedding groups of `model` in place. The base
// weights are verified bit-identical afterwards.
inline TrainLog train(MVModel<float>& model, const std::vector<SceneData>& scenes, const TrainConfig& cfg,
                      const TrainOptions& opt = {}) {
  cfg.validate();
  const auto frozen = parameter_digest(model.base.parameters());
  BaseFeatureCache cache(model.base, scenes);
  const bool need_base = cfg.objective == Objective::Total && cfg.loss.lambda_reg > 0;
  TrainHooks hooks;
  hooks.on_epoch = [&](std::size_t epoch) -> std::optional<EpochSnapshot> {
    if (!opt.checkpoint_dir.empty() && epoch > 0) save_mv_checkpoint(opt.checkpoint_dir, model, cfg.seed);
    if (!opt.eval_sets) return std::nullopt;
    const auto r = evaluate(model, model.base, *opt.eval_sets);
    if (opt.verbose)
      std::cerr << "epoch " << epoch << ": location_error " << r.location_error << " base_similarity " << r.base_similarity << '\n';
    return EpochSnapshot{epoch, r.location_error, r.base_similarity};
  };
  if (opt.verbose)
    hooks.on_step = [&](std::size_t step, const LossRow& r) {
      if (step % 100 == 0) std::cerr << "step " << step << ": L_total " << r.total << " L_corr " << r.corr << '\n';
    };
  auto log = detail::optimize(model.trainable(), scenes, cfg, need_base ? &cache : nullptr,
                              [&](const Batch& b) { return mv_batch_loss(model, b, cfg); }, hooks);
  if (cfg.epochs == 0 && !opt.checkpoint_dir.empty()) save_mv_checkpoint(opt.checkpoint_dir, model, cfg.seed);
  if (parameter_digest(model.base.parameters()) != frozen) throw NumericalError("frozen backbone weights changed during training");
  return log;
}

struct WarmupResult {
  Backbone<float> base;
  TrainLog log;
};

// Trains every weight of a freshly initialized plain backbone with the
// correspondence loss (or the naive loss), then freezes it.
inline WarmupResult warmup_base(const BackboneConfig& bcfg, const std::vector<SceneData>& scenes, const TrainConfig& cfg,
                                const TrainOptions& opt = {}) {
  cfg.loss.validate();
  WarmupResult r{init_backbone<float>(derive_seed(cfg.seed, "warmup-init"), bcfg), {}};
  r.base.set_trainable(true);
  TrainHooks hooks;
  hooks.on_epoch = [&](std::size_t epoch) -> std::optional<EpochSnapshot> {
    if (!opt.eval_sets) return std::nullopt;
    const auto m = make_base_model(r.base);  // shares and freezes the weights
    const auto e = evaluate(m, r.base, *opt.eval_sets);
    r.base.set_trainable(true);
    if (opt.verbose) std::cerr << "warmup epoch " << epoch << ": location_error " << e.location_error << '\n';
    return EpochSnapshot{epoch, e.location_error, e.base_similarity};
  };
  if (opt.verbose)
    hooks.on_step = [&](std::size_t step, const LossRow& row) {
      if (step % 100 == 0) std::cerr << "warmup step " << step << ": L_corr " << row.corr << '\n';
    };
  r.log = detail::optimize(
      r.base.parameters(), scenes, cfg, nullptr,
      [&](const Batch& b) {
        std::vector<FeatureMap<float>> f;
        for (const auto& img : b.images) f.push_back(backbone_forward(r.base, img).features);
        const std::span<const FeatureMap<float>> fs(f);
        const std::span<const Correspondence> cs(b.correspondences);
        auto l = cfg.objective == Objective::Naive ? naive_loss(fs, cs) : corr_loss(fs, cs, static_cast<float>(cfg.loss.tau));
        return LossBreakdown<float>{l, Tensor<float>::scalar(0), Tensor<float>::scalar(0), l};
      },
      hooks);
  r.base.set_trainable(false);
  if (!opt.checkpoint_dir.empty()) save_backbone_checkpoint(opt.checkpoint_dir, r.base, cfg.seed);
  return r;
}

}  // namespace mvadapt
