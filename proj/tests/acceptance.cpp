// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; criteria that reuse a training run share it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mvadapt/colmap.hpp"
#include "mvadapt/pipeline.hpp"

using namespace mvadapt;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

struct Verdict {
  bool pass = false;
  std::string detail;
  std::optional<double> seconds;  // overrides the measured time
};

Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng));
  return q.normalized().toRotationMatrix();
}

// Shared data and training runs, built on first use.
class Experiment {
 public:
  explicit Experiment(RunConfig rc) : rc_(std::move(rc)) {}

  const RunConfig& config() const { return rc_; }

  const std::vector<SceneData>& train() {
    if (train_.empty()) train_ = training_scenes(rc_);
    return train_;
  }
  const std::vector<SceneData>& test() {
    if (test_.empty()) test_ = test_scenes(rc_);
    return test_;
  }
  const std::vector<Batch>& sets() {
    if (sets_.empty()) sets_ = evaluation_sets(rc_, test());
    return sets_;
  }

  const Backbone<float>& base() {
    if (!base_) {
      const auto t0 = Clock::now();
      base_ = run_warmup(rc_, train()).base;
      warmup_seconds_ = since(t0);
    }
    return *base_;
  }
  double warmup_seconds() const { return warmup_seconds_; }
  double training_seconds() const { return training_seconds_; }
  const EvalReport& base_report() {
    if (!base_report_) base_report_ = evaluate(make_base_model(base()), base(), sets());
    return *base_report_;
  }

  struct Run {
    MVModel<float> model;
    EvalReport report;
    double seconds = 0;
  };

  // Trained variants keyed by name; `edit` adjusts a copy of the config.
  const Run& run(const std::string& name, const std::function<void(RunConfig&)>& edit = {}) {
    auto it = runs_.find(name);
    if (it != runs_.end()) return it->second;
    RunConfig c = rc_;
    if (edit) edit(c);
    const auto t0 = Clock::now();
    auto t = run_training(c, base(), train());
    auto report = evaluate(t.model, base(), sets());
    const double secs = since(t0);
    training_seconds_ += secs;
    std::cerr << "  [" << name << "] location_error " << report.location_error << " base_similarity "
              << report.base_similarity << " (" << fmt(secs, 3) << " s)\n";
    return runs_.emplace(name, Run{std::move(t.model), std::move(report), secs}).first->second;
  }

  const Run& full() { return run("full"); }
  const Run& lambda(double l) {
    if (l == rc_.train.loss.lambda_reg) return full();
    return run("lambda=" + fmt(l), [l](RunConfig& c) { c.train.loss.lambda_reg = l; });
  }

 private:
  RunConfig rc_;
  std::vector<SceneData> train_, test_;
  std::vector<Batch> sets_;
  std::optional<Backbone<float>> base_;
  std::optional<EvalReport> base_report_;
  std::map<std::string, Run> runs_;
  double warmup_seconds_ = 0, training_seconds_ = 0;
};

Image random_image(std::size_t size, Rng& rng) {
  Image img;
  img.width = img.height = static_cast<int>(size);
  img.data.resize(size * size * 3);
  for (auto& v : img.data) v = static_cast<float>(uniform(rng, 0, 1));
  return img;
}

CameraView random_orbit_camera(Rng& rng, int size) {
  const double az = uniform(rng, 0, 2 * std::numbers::pi), el = uniform(rng, 0.3, 1.0), r = uniform(rng, 3, 6);
  const Vec3 eye(r * std::cos(el) * std::cos(az), r * std::cos(el) * std::sin(az), r * std::sin(el));
  return look_at(eye, Vec3(uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), 0), Vec3::UnitZ(), 60, size, size);
}

Verdict zero_init_identity(Experiment& ex) {
  const auto& rc = ex.config();
  const auto base = init_backbone<float>(derive_seed(rc.seed, "accept-identity"), rc.backbone);
  const auto model = make_mv_model(base, rc.train.model, derive_seed(rc.seed, "accept-identity-mv"));
  Rng rng(derive_seed(rc.seed, "accept-identity-inputs"));
  double worst = 0;
  std::size_t n = 0;
  NoGradGuard ng;
  for (std::size_t M : {1, 2, 4})
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Image> imgs;
      std::vector<CameraView> cams;
      for (std::size_t i = 0; i < M; ++i) {
        imgs.push_back(random_image(rc.backbone.image_size, rng));
        cams.push_back(random_orbit_camera(rng, static_cast<int>(rc.backbone.image_size)));
      }
      const auto out = mv_forward(model, std::span<const Image>(imgs), std::span<const CameraView>(cams));
      for (std::size_t i = 0; i < M; ++i) {
        const auto ref = backbone_forward(base, imgs[i]).features;
        for (std::size_t k = 0; k < ref.tokens.numel(); ++k)
          worst = std::max(worst, std::abs(static_cast<double>(out.features[i].tokens[k] - ref.tokens[k])));
      }
      ++n;
    }
  return {worst == 0, "max_abs_diff=" + fmt(worst) + " over " + std::to_string(n) + " inputs"};
}

Verdict gradient_fidelity(Experiment& ex) {
  const auto& rc = ex.config();
  BackboneConfig bc;
  bc.image_size = 32;
  bc.patch_size = 8;
  bc.embed_dim = 8;
  bc.n_blocks = 2;
  bc.n_heads = 2;
  bc.mlp_ratio = 2;
  MVConfig mc;
  mc.backbone = bc;
  mc.lora_rank = 1;
  mc.adapter_width = 4;
  mc.adapter_heads = 2;
  mc.adapter_mlp_ratio = 1;
  mc.plucker_channels = 2;
  const auto base = init_backbone<double>(derive_seed(rc.seed, "accept-grad"), bc);
  auto model = make_mv_model(base, mc, derive_seed(rc.seed, "accept-grad-mv"));
  // Move off the zero initialization so every trainable tensor carries gradient.
  Rng rng(derive_seed(rc.seed, "accept-grad-perturb"));
  for (auto& a : model.adapters)
    for (auto& w : a.out.weight.mutable_data()) w = 0.3 * gaussian(rng);
  for (auto& blk : model.adapted.blocks)
    for (auto* lin : {&blk.q, &blk.k, &blk.v, &blk.o})
      if (lin->has_lora())
        for (auto& w : lin->lora_b.mutable_data()) w = 0.3 * gaussian(rng);

  SceneConfig sc = rc.scenes;
  sc.image_size = 32;
  sc.n_cameras = 4;
  const auto data = prepare_scene(generate_scene(derive_seed(rc.seed, "accept-grad-scene"), sc));
  std::size_t partner = 1;
  for (std::size_t j = 2; j < data.n_views(); ++j)
    if (data.pair_overlap(0, j) > data.pair_overlap(0, partner)) partner = j;
  auto corrs = sample_correspondences(data.scene, 0, partner, 4, derive_seed(rc.seed, "accept-grad-corr"));
  for (auto& c : corrs) c.view_i = 0, c.view_j = 1;
  const std::vector<Image> imgs{data.images[0], data.images[partner]};
  const std::vector<CameraView> cams{data.scene.cameras[0], data.scene.cameras[partner]};
  std::vector<FeatureMap<double>> base_feats;
  for (const auto& img : imgs) base_feats.push_back(backbone_forward(base, img).features);

  std::vector<Tensor<double>> params;
  std::size_t count = 0;
  for (auto& p : model.trainable()) {
    params.push_back(p.tensor);
    count += p.tensor.numel();
  }
  const LossWeights w = rc.train.loss;
  const double err = grad_check<double>(
      [&] {
        const auto out = mv_forward(model, std::span<const Image>(imgs), std::span<const CameraView>(cams));
        return total_loss(std::span<const FeatureMap<double>>(out.features), std::span<const FeatureMap<double>>(base_feats),
                          std::span<const Correspondence>(corrs), w)
            .total;
      },
      params, 1e-5);
  return {err < 1e-4 && count <= 1000,
          "max_rel_error=" + fmt(err) + " (< 1e-4) trainable_parameters=" + std::to_string(count) + " (<= 1000)"};
}

Verdict raymap_invariance(Experiment& ex) {
  const auto& rc = ex.config();
  const auto& cams = ex.test().front().scene.cameras;
  const std::size_t g = rc.backbone.grid();
  Rng rng(derive_seed(rc.seed, "accept-rigid"));
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Mat3 Rg = random_rotation(rng);
    const Vec3 tg(uniform(rng, -10, 10), uniform(rng, -10, 10), uniform(rng, -10, 10));
    const auto moved = transform_cameras(cams, Rg, tg);
    for (bool moment : {false, true})
      for (std::size_t v = 0; v < cams.size(); ++v) {
        const auto a = plucker_raymap(cams, v, g, g, moment), b = plucker_raymap(moved, v, g, g, moment);
        for (std::size_t i = 0; i < a.data.size(); ++i) worst = std::max(worst, std::abs(a.data[i] - b.data[i]));
      }
  }
  return {worst < 1e-5, "max_abs_change=" + fmt(worst) + " (< 1e-5) over 100 transforms"};
}

double feature_std(const MVModel<float>& m, const std::vector<Batch>& sets) {
  std::vector<FeatureMap<float>> all;
  for (const auto& s : sets)
    for (auto& f : extract_features(m, s)) all.push_back(std::move(f));
  return mean_channel_std(std::span<const FeatureMap<float>>(all));
}

Verdict collapse(Experiment& ex) {
  const double initial = feature_std(make_base_model(ex.base()), ex.sets());
  auto budget = [&](RunConfig& c) {
    c.train.epochs = c.collapse_epochs;
    c.train.loss.lambda_reg = 0;
  };
  const auto& naive = ex.run("collapse-naive", [&](RunConfig& c) {
    budget(c);
    c.train.objective = Objective::Naive;
  });
  const auto& corr = ex.run("collapse-corr", budget);
  const double rn = feature_std(naive.model, ex.sets()) / initial, rc = feature_std(corr.model, ex.sets()) / initial;
  return {rn < 0.1 && rc > 0.5, "naive_std_ratio=" + fmt(rn) + " (< 0.1) corr_std_ratio=" + fmt(rc) + " (> 0.5)"};
}

Verdict table_trend(Experiment& ex) {
  const double base = ex.base_report().location_error;
  const auto& r = ex.full().report;
  const double ratio = r.location_error / base;
  return {ratio <= 0.5 && r.base_similarity >= 0.85,
          "mv_error=" + fmt(r.location_error) + " base_error=" + fmt(base) + " ratio=" + fmt(ratio) +
              " (<= 0.5) base_similarity=" + fmt(r.base_similarity) + " (>= 0.85)",
          ex.warmup_seconds() + ex.full().seconds};
}

Verdict ablation_order(Experiment& ex) {
  const double base = ex.base_report().location_error;
  const auto& lora = ex.run("lora-only", [](RunConfig& c) { c.train.model.use_adapters = false; }).report;
  const auto& adapter = ex.run("adapter-no-rays", [](RunConfig& c) { c.train.model.use_plucker = false; }).report;
  const auto& full = ex.full().report;
  const auto& noreg = ex.lambda(0).report;
  const double secs = ex.run("lora-only").seconds + ex.run("adapter-no-rays").seconds + ex.full().seconds + ex.lambda(0).seconds;
  const bool order = base > lora.location_error && lora.location_error > adapter.location_error &&
                     adapter.location_error >= full.location_error;
  const bool reg = noreg.base_similarity < 0.5 && noreg.location_error <= full.location_error;
  return {order && reg, "errors base=" + fmt(base) + " lora=" + fmt(lora.location_error) + " +adapter=" +
                            fmt(adapter.location_error) + " +rays=" + fmt(full.location_error) +
                            "; no_reg error=" + fmt(noreg.location_error) + " similarity=" + fmt(noreg.base_similarity) +
                            " (< 0.5)",
          secs};
}

Verdict angle_robustness(Experiment& ex) {
  const double sb = angle_slope(ex.base_report().bins), sm = angle_slope(ex.full().report.bins);
  std::string bins;
  const auto& bb = ex.base_report().bins;
  const auto& mb = ex.full().report.bins;
  for (std::size_t i = 0; i < bb.size() && bb[i].hi <= 90; ++i)
    if (bb[i].mean && mb[i].mean)
      bins += " " + fmt(bb[i].lo, 2) + "-" + fmt(bb[i].hi, 2) + ":" + fmt(*bb[i].mean, 3) + "/" + fmt(*mb[i].mean, 3);
  return {sm <= 0.5 * sb, "mv_slope=" + fmt(sm) + " base_slope=" + fmt(sb) + " ratio=" + fmt(sm / sb) +
                              " (<= 0.5) bins base/mv:" + bins};
}

Verdict runtime_linearity(Experiment& ex) {
  const auto r = runtime_scaling(ex.full().model, ex.test().front(), ex.config().runtime_views, 7, 2);
  bool increasing = true;
  std::string rows;
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    if (i > 0 && !(r.rows[i].seconds_per_view > r.rows[i - 1].seconds_per_view)) increasing = false;
    rows += " M" + std::to_string(r.rows[i].views) + "=" + fmt(r.rows[i].seconds_per_view * 1e3, 3) + "ms";
  }
  return {increasing && r.r2 >= 0.95, "r2=" + fmt(r.r2) + " (>= 0.95) increasing=" + (increasing ? "yes" : "no") + rows};
}

Verdict context_swaps(Experiment& ex) {
  const auto& rc = ex.config();
  const auto seed = derive_seed(rc.seed, "context");
  const auto k = rc.train.correspondences;
  const auto mv = context_consistency(ex.full().model, ex.test(), rc.context_pairs, rc.context_swaps, k, seed);
  const auto base = context_consistency(make_base_model(ex.base()), ex.test(), rc.context_pairs, rc.context_swaps, k, seed);
  return {mv.ratio() <= 0.10 && base.mean_std == 0,
          "mv_std/mean=" + fmt(mv.ratio()) + " (<= 0.10) base_std=" + fmt(base.mean_std) + " (== 0)"};
}

Verdict noise(Experiment& ex) {
  const auto& rc = ex.config();
  const auto rows = noise_robustness(ex.full().model, ex.sets(), rc.noise_levels, rc.noise_seed());
  bool ok = true;
  std::string detail;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0 && rows[i].error < 0.95 * rows[i - 1].error) ok = false;
    detail += (i ? " " : "") + std::string("sigma=") + fmt(rows[i].sigma) + ":" + fmt(rows[i].error);
  }
  return {ok, detail + " (each step non-decreasing within 5%)"};
}

bool recalls_monotone(const ProbeMetrics& m) { return m.recall_11 <= m.recall_22 && m.recall_22 <= m.recall_30; }

Verdict probe(Experiment& ex) {
  const auto r = run_probe_comparison(ex.config(), ex.full().model, ex.base(), ex.train(), ex.test());
  const bool better = r.mv.rmse <= 0.9 * r.base.rmse;
  const bool mono = recalls_monotone(r.base) && recalls_monotone(r.mv);
  auto recalls = [](const ProbeMetrics& m) { return fmt(m.recall_11, 3) + "/" + fmt(m.recall_22, 3) + "/" + fmt(m.recall_30, 3); };
  return {better && mono, "rmse mv=" + fmt(r.mv.rmse) + " base=" + fmt(r.base.rmse) + " ratio=" + fmt(r.mv.rmse / r.base.rmse) +
                              " (<= 0.9) recalls mv=" + recalls(r.mv) + " base=" + recalls(r.base)};
}

Verdict colmap_parser(Experiment& ex) {
  const fs::path fixtures = MVADAPT_FIXTURES;
  const auto scratch = fs::temp_directory_path() / "mvadapt_acceptance_colmap";
  fs::remove_all(scratch);
  fs::create_directories(scratch);

  // Field-by-field round trip of the fixture.
  const auto a = colmap::parse_sparse_model(fixtures / "colmap_small");
  colmap::write_sparse_model(a, scratch / "rt");
  const auto b = colmap::parse_sparse_model(scratch / "rt");
  bool lossless = a.cameras.size() == b.cameras.size() && a.images.size() == b.images.size() &&
                  a.points3d.size() == b.points3d.size();
  for (const auto& [id, c] : a.cameras) lossless &= b.cameras.count(id) && c.model == b.cameras.at(id).model &&
                                                    c.intrinsics == b.cameras.at(id).intrinsics;
  for (const auto& [id, img] : a.images) {
    if (!b.images.count(id)) {
      lossless = false;
      continue;
    }
    const auto& o = b.images.at(id);
    lossless &= img.camera_id == o.camera_id && img.name == o.name && (img.R - o.R).cwiseAbs().maxCoeff() < 1e-12 &&
                (img.t - o.t).cwiseAbs().maxCoeff() < 1e-12 && img.points2d.size() == o.points2d.size();
    for (std::size_t k = 0; lossless && k < img.points2d.size(); ++k)
      lossless &= img.points2d[k].xy == o.points2d[k].xy && img.points2d[k].point3d_id == o.points2d[k].point3d_id;
  }
  for (const auto& [id, p] : a.points3d) {
    if (!b.points3d.count(id)) {
      lossless = false;
      continue;
    }
    const auto& q = b.points3d.at(id);
    lossless &= p.xyz == q.xyz && p.rgb == q.rgb && p.error == q.error && p.track == q.track;
  }

  // Correspondences from a written model against direct projection.
  const auto& scene = ex.test().front().scene;
  colmap::write_sparse_model(colmap::sparse_model_from_scene(scene, 300, derive_seed(ex.config().seed, "accept-colmap")),
                             scratch / "scene");
  const auto m = colmap::parse_sparse_model(scratch / "scene");
  auto proj = [](const CameraView& c, const Vec3& X) {
    const Vec3 p = c.R.transpose() * (X - c.t);
    return Vec2((c.fx * p.x() / p.z() + c.cx) / c.width, (c.fy * p.y() / p.z() + c.cy) / c.height);
  };
  double worst = 0;
  std::size_t n = 0;
  for (std::uint32_t i = 1; i <= scene.cameras.size(); ++i)
    for (std::uint32_t j = i + 1; j <= scene.cameras.size(); ++j)
      for (const auto& c : colmap::correspondences_from_model(m, i, j)) {
        worst = std::max({worst, (proj(scene.cameras[i - 1], c.point) - c.x_i).norm(),
                          (proj(scene.cameras[j - 1], c.point) - c.x_j).norm()});
        ++n;
      }

  // A malformed track line must be reported by file and line.
  bool named = false;
  try {
    colmap::parse_sparse_model(fixtures / "colmap_bad_track");
  } catch (const ParseError& e) {
    named = e.file() == "points3D.txt" && e.line() == 4 && std::string(e.what()).find("points3D.txt:4") != std::string::npos;
  }
  fs::remove_all(scratch);
  return {lossless && n > 0 && worst < 1e-6 && named,
          std::string("round_trip=") + (lossless ? "lossless" : "lossy") + " correspondences=" + std::to_string(n) +
              " max_reprojection=" + fmt(worst) + " (< 1e-6) malformed_line_named=" + (named ? "yes" : "no")};
}

Verdict lambda_tradeoff(Experiment& ex) {
  auto values = ex.config().lambda_values;
  std::sort(values.begin(), values.end());
  std::vector<const EvalReport*> r;
  for (double l : values) r.push_back(&ex.lambda(l).report);
  bool sim_mono = true;
  std::string detail;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (i > 0 && r[i]->base_similarity < r[i - 1]->base_similarity) sim_mono = false;
    detail += (i ? " " : "") + std::string("lambda=") + fmt(values[i]) + ":error=" + fmt(r[i]->location_error) +
              ",similarity=" + fmt(r[i]->base_similarity);
  }
  const bool err_end = r.front()->location_error <= r.back()->location_error;
  return {sim_mono && err_end, detail};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;  // 0: no limit of its own
  bool owns_training;     // training started here counts toward the budget
  Verdict (*check)(Experiment&);
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "zero-init identity", 10, false, zero_init_identity},
      {2, "gradient fidelity", 60, false, gradient_fidelity},
      {3, "raymap rigid invariance", 5, false, raymap_invariance},
      {4, "collapse dichotomy", 600, true, collapse},
      {5, "location error trend", 1800, true, table_trend},
      {6, "ablation ordering", 5400, true, ablation_order},
      {7, "angle robustness", 0, false, angle_robustness},
      {8, "runtime linearity", 300, false, runtime_linearity},
      {9, "context consistency", 600, false, context_swaps},
      {10, "noise robustness", 600, false, noise},
      {11, "probe improvement", 1200, false, probe},
      {12, "colmap parser", 5, false, colmap_parser},
      {13, "lambda tradeoff", 0, true, lambda_tradeoff},
  };
  // usage: acceptance [--report FILE] [criterion ids...]
  std::set<int> wanted;
  std::ofstream report;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--report" && i + 1 < argc)
      report.open(argv[++i]);
    else
      wanted.insert(std::atoi(argv[i]));
  }
  auto emit = [&](const std::string& line) {
    std::cout << line << std::endl;
    if (report.is_open()) report << line << std::endl;
  };

  RunConfig rc;
  rc.validate();
  Experiment ex(rc);
  int passed = 0, ran = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = Clock::now();
    const double w0 = ex.warmup_seconds(), r0 = ex.training_seconds();
    Verdict v;
    try {
      v = c.check(ex);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what(), std::nullopt};
    }
    // The warm-up and runs reused from other criteria are not charged here.
    double secs = since(t0) - (ex.warmup_seconds() - w0);
    if (!c.owns_training) secs -= ex.training_seconds() - r0;
    if (v.seconds) secs = *v.seconds;
    const bool in_time = c.budget_seconds == 0 || secs < c.budget_seconds;
    const bool ok = v.pass && in_time;
    std::string budget = c.budget_seconds > 0 ? " / " + fmt(c.budget_seconds, 6) + " s" : " s";
    char head[64];
    std::snprintf(head, sizeof head, "criterion %2d %-24s %s  ", c.id, c.name, ok ? "PASS" : "FAIL");
    emit(head + v.detail + " [" + fmt(secs, 3) + budget + "]");
    passed += ok;
    ++ran;
  }
  emit(std::to_string(passed) + " of " + std::to_string(ran) + " criteria passed");
  return 0;
}
