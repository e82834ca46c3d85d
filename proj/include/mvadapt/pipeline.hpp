#pragma once

// One experiment configuration shared by the command-line tool and the
// acceptance tests. Every random stream is a named sub-seed of `seed`.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mvadapt/config.hpp"
#include "mvadapt/dataset.hpp"
#include "mvadapt/evaluator.hpp"
#include "mvadapt/probe.hpp"
#include "mvadapt/trainer.hpp"
#include "json.hpp"

namespace mvadapt {

struct RunConfig {
  std::uint64_t seed = 0;
  SceneConfig scenes;
  std::size_t train_scenes = 16;
  std::size_t test_scenes = 4;
  std::size_t eval_sets_per_scene = 5;
  BackboneConfig backbone;
  TrainConfig warmup = default_warmup();
  TrainConfig train;
  ProbeConfig probe;
  std::vector<double> noise_levels{0.0, 0.01, 0.03, 0.1};
  std::vector<double> lambda_values{0.0, 0.1, 1.0, 10.0};
  std::vector<std::size_t> runtime_views{2, 4, 8, 16};
  std::size_t context_pairs = 8;
  std::size_t context_swaps = 20;
  std::size_t probe_eval_sets_per_scene = 5;
  std::size_t collapse_epochs = 2;  // naive vs correspondence objective at equal budget

  static TrainConfig default_warmup() {
    TrainConfig w;
    w.epochs = 1;
    w.loss.lambda_reg = 0;
    return w;
  }

  std::uint64_t scene_seed() const { return derive_seed(seed, "scenes"); }
  std::uint64_t eval_seed() const { return derive_seed(seed, "eval"); }
  std::uint64_t model_seed() const { return derive_seed(seed, "model-init"); }
  std::uint64_t noise_seed() const { return derive_seed(seed, "noise"); }
  std::uint64_t ablation_seed() const { return derive_seed(seed, "ablation"); }

  // Section configs with their seeds and shared fields filled in.
  TrainConfig warmup_config() const {
    TrainConfig w = warmup;
    w.model.backbone = backbone;
    w.seed = derive_seed(seed, "warmup");
    return w;
  }
  TrainConfig train_config() const {
    TrainConfig t = train;
    t.model.backbone = backbone;
    t.seed = derive_seed(seed, "train");
    return t;
  }
  ProbeConfig probe_config() const {
    ProbeConfig p = probe;
    p.seed = derive_seed(seed, "probe");
    return p;
  }
  SamplerConfig eval_sampler() const { return train.sampler(); }

  void scenes_valid() const {
    if (scenes.n_cameras < train.set_size) throw ConfigError("n_cameras", "fewer cameras than train.set_size");
  }

  void validate() const {
    if (train_scenes < 1) throw ConfigError("train_scenes", "must be >= 1");
    if (test_scenes < 1) throw ConfigError("test_scenes", "must be >= 1");
    if (eval_sets_per_scene < 1) throw ConfigError("eval_sets_per_scene", "must be >= 1");
    if (backbone.image_size != static_cast<std::size_t>(scenes.image_size))
      throw ConfigError("backbone.image_size", "must equal scenes.image_size");
    in_section("scenes", [&] { scenes_valid(); });
    in_section("warmup", [&] { warmup.validate(); });
    in_section("train", [&] { train.validate(); });
    in_section("probe", [&] { probe.validate(); });
    if (noise_levels.empty() || noise_levels.front() != 0 || !std::is_sorted(noise_levels.begin(), noise_levels.end()))
      throw ConfigError("noise_levels", "must be ascending and start at 0");
    if (lambda_values.empty()) throw ConfigError("lambda_values", "must not be empty");
    for (double l : lambda_values)
      if (!(l >= 0)) throw ConfigError("lambda_values", "must be >= 0");
    for (auto m : runtime_views)
      if (m < 1) throw ConfigError("runtime_views", "must be >= 1");
    if (context_swaps < 1) throw ConfigError("context_swaps", "must be >= 1");
    if (collapse_epochs < 1) throw ConfigError("collapse_epochs", "must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  auto strip_seed = [](const auto& section) {
    nlohmann::json s = section;
    s.erase("seed");
    return s;
  };
  nlohmann::json warm = strip_seed(c.warmup), train = strip_seed(c.train);
  warm.erase("model");
  train["model"].erase("backbone");
  j = {{"seed", c.seed},
       {"scenes", c.scenes},
       {"train_scenes", c.train_scenes},
       {"test_scenes", c.test_scenes},
       {"eval_sets_per_scene", c.eval_sets_per_scene},
       {"backbone", c.backbone},
       {"warmup", warm},
       {"train", train},
       {"probe", strip_seed(c.probe)},
       {"noise_levels", c.noise_levels},
       {"lambda_values", c.lambda_values},
       {"runtime_views", c.runtime_views},
       {"context_pairs", c.context_pairs},
       {"context_swaps", c.context_swaps},
       {"probe_eval_sets_per_scene", c.probe_eval_sets_per_scene},
       {"collapse_epochs", c.collapse_epochs}};
}

namespace detail {

inline void reject_key(const nlohmann::json& j, const char* section, const char* key, const char* why) {
  if (j.contains(section) && j.at(section).is_object() && j.at(section).contains(key))
    throw ConfigError(std::string(section) + "." + key, why);
}

template <class V>
void read_list(const nlohmann::json& j, const char* key, std::vector<V>& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  if (!it->is_array()) throw ConfigError(key, std::string("expected an array, got ") + it->type_name());
  std::vector<V> v;
  for (const auto& e : *it) {
    V x{};
    read_field(nlohmann::json{{key, e}}, key, x);
    v.push_back(x);
  }
  out = std::move(v);
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  check_keys(j, {"seed", "scenes", "train_scenes", "test_scenes", "eval_sets_per_scene", "backbone", "warmup", "train",
                 "probe", "noise_levels", "lambda_values", "runtime_views", "context_pairs", "context_swaps",
                 "probe_eval_sets_per_scene", "collapse_epochs"});
  for (const char* s : {"warmup", "train", "probe"})
    detail::reject_key(j, s, "seed", "sub-seeds derive from the top-level seed");
  detail::reject_key(j, "warmup", "model", "the warm-up trains the plain backbone");
  if (j.contains("train") && j.at("train").is_object() && j.at("train").contains("model"))
    detail::reject_key(j.at("train"), "model", "backbone", "set the top-level backbone section instead");
  read_field(j, "seed", c.seed);
  read_section(j, "scenes", c.scenes);
  read_field(j, "train_scenes", c.train_scenes);
  read_field(j, "test_scenes", c.test_scenes);
  read_field(j, "eval_sets_per_scene", c.eval_sets_per_scene);
  read_section(j, "backbone", c.backbone);
  read_section(j, "warmup", c.warmup);
  read_section(j, "train", c.train);
  read_section(j, "probe", c.probe);
  detail::read_list(j, "noise_levels", c.noise_levels);
  detail::read_list(j, "lambda_values", c.lambda_values);
  detail::read_list(j, "runtime_views", c.runtime_views);
  read_field(j, "context_pairs", c.context_pairs);
  read_field(j, "context_swaps", c.context_swaps);
  read_field(j, "probe_eval_sets_per_scene", c.probe_eval_sets_per_scene);
  read_field(j, "collapse_epochs", c.collapse_epochs);
  c.validate();
}

// Training scenes are family members 0 .. n-1, test scenes the next block.
inline std::vector<SceneData> training_scenes(const RunConfig& c) {
  return make_scenes(c.scene_seed(), 0, c.train_scenes, c.scenes);
}

inline std::vector<SceneData> test_scenes(const RunConfig& c) {
  return make_scenes(c.scene_seed(), c.train_scenes, c.test_scenes, c.scenes);
}

inline std::vector<Batch> evaluation_sets(const RunConfig& c, const std::vector<SceneData>& test) {
  return make_eval_sets(test, c.eval_sets_per_scene, c.eval_sampler(), c.eval_seed());
}

inline WarmupResult run_warmup(const RunConfig& c, const std::vector<SceneData>& train, const TrainOptions& opt = {}) {
  return warmup_base(c.backbone, train, c.warmup_config(), opt);
}

struct TrainRun {
  MVModel<float> model;
  TrainLog log;
};

inline TrainRun run_training(const RunConfig& c, const Backbone<float>& base, const std::vector<SceneData>& train,
                             const TrainOptions& opt = {}) {
  const auto tc = c.train_config();
  TrainRun r{make_mv_model(base, tc.model, c.model_seed()), {}};
  r.log = mvadapt::train(r.model, train, tc, opt);
  return r;
}

struct ProbeComparison {
  ProbeMetrics base, mv;
};

// Probes trained on frozen Base and frozen multi-view features of the
// training scenes, scored on held-out sets of the test scenes.
inline ProbeComparison run_probe_comparison(const RunConfig& c, const MVModel<float>& model, const Backbone<float>& base,
                                            const std::vector<SceneData>& train, const std::vector<SceneData>& test,
                                            bool verbose = false) {
  const auto pc = c.probe_config();
  const SamplerConfig sampler{pc.set_size, std::max<std::size_t>(1, pc.set_size * (pc.set_size - 1) / 2),
                              c.train.min_pair_overlap, 64};
  const auto sets = make_eval_sets(test, c.probe_eval_sets_per_scene, sampler, derive_seed(c.seed, "probe-eval"));
  const auto bm = make_base_model(base);
  auto score = [&](const MVModel<float>& m) {
    const FeatureSource src{&m};
    const auto p = train_probe(src, train, pc, verbose);
    return evaluate_probe(p.probe, src, test, sets);
  };
  return {score(bm), score(model)};
}

}  // namespace mvadapt
