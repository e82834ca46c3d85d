#pragma once

// Subcommand dispatcher of the mvadapt tool. Kept in a header so the test
// suite can drive it in-process.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mvadapt/colmap.hpp"
#include "mvadapt/pipeline.hpp"
#include "png_export.hpp"

#ifndef MVADAPT_GIT_DESCRIBE
#define MVADAPT_GIT_DESCRIBE "unknown"
#endif

namespace mvadapt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3, kNumerical = 4 };

inline constexpr const char* kRunManifest = "run.json";

// ---------------------------------------------------------------------------
// Config assembly: file, then --set overrides, then dedicated flags.

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::size_t threads = 1;
  bool verbose = false;
};

inline json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;
  }
}

// `a.b.c=value`; the value is JSON when it parses, else a string.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
  std::string ptr;
  std::istringstream keys(assignment.substr(0, eq));
  for (std::string k; std::getline(keys, k, '.');) {
    if (k.empty()) throw ConfigError(assignment.substr(0, eq), "empty key in override path");
    ptr += "/" + k;
  }
  j[json::json_pointer(ptr)] = parse_override_value(assignment.substr(eq + 1));
}

inline json load_config_json(const Common& c) {
  json j = json::object();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw ConfigError("config", "cannot open " + c.config);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config", std::string("invalid JSON in ") + c.config + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config", "top level must be an object");
  }
  for (const auto& s : c.sets) apply_override(j, s);
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

inline RunConfig load_run_config(const Common& c, const std::vector<std::string>& extra = {}) {
  json j = load_config_json(c);
  for (const auto& s : extra) apply_override(j, s);
  return j.get<RunConfig>();
}

// ---------------------------------------------------------------------------
// Run manifest

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline std::string config_hash(const json& config) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 0x100000001B3ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

struct RunManifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  fs::path out;
  std::string started_at;

  void write() const {
    const json m{{"command", command},
                 {"config_hash", config_hash(config)},
                 {"seed", seed},
                 {"git_describe", MVADAPT_GIT_DESCRIBE},
                 {"output_directory", fs::absolute(out).lexically_normal().string()},
                 {"started_at", started_at},
                 {"finished_at", utc_now()},
                 {"config", config}};
    std::ofstream(out / kRunManifest) << m.dump(2) << '\n';
  }
};

inline RunManifest begin_run(const std::string& command, const fs::path& out, const json& config, std::uint64_t seed) {
  if (out.empty()) throw ConfigError("out", "an output directory is required");
  fs::create_directories(out);
  return {command, config, seed, out, utc_now()};
}

// ---------------------------------------------------------------------------
// Output helpers

class Csv {
 public:
  Csv(const fs::path& path, const std::string& header) : out_(path) {
    if (!out_) throw Error("cannot write " + path.string());
    out_.precision(9);
    out_ << header << '\n';
  }
  template <class... A>
  void row(const A&... a) {
    std::size_t i = 0;
    ((out_ << (i++ ? "," : "") << a), ...);
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

inline std::string opt_str(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(9);
  os << *v;
  return os.str();
}

inline void write_json(const fs::path& path, const json& j) { std::ofstream(path) << j.dump(2) << '\n'; }

inline void write_eval_outputs(const std::string& label, const EvalReport& r, Csv& pairs, Csv& bins) {
  for (const auto& p : r.pairs) pairs.row(label, p.scene, p.view_i, p.view_j, p.angle, p.error, p.count);
  for (const auto& b : r.bins) bins.row(label, b.lo, b.hi, b.count, opt_str(b.mean));
}

inline json report_json(const EvalReport& r) {
  const double slope = angle_slope(r.bins);
  return {{"location_error", r.location_error},
          {"base_similarity", r.base_similarity},
          {"correspondences", r.correspondences},
          {"angle_slope_0_90", std::isfinite(slope) ? json(slope) : json(nullptr)}};
}

// ---------------------------------------------------------------------------
// Shared steps

struct Loaded {
  MVModel<float> model;
  Backbone<float> base;
};

inline Loaded load_checkpoint(const std::string& dir) {
  if (dir.empty()) throw ConfigError("checkpoint", "a multi-view checkpoint directory is required");
  auto m = load_mv_checkpoint(dir);
  auto base = m.base;
  return {std::move(m), std::move(base)};
}

inline Backbone<float> obtain_base(const RunConfig& rc, const std::string& base_dir, const std::vector<SceneData>& train,
                                   const fs::path& out, bool verbose) {
  if (!base_dir.empty()) {
    auto b = load_backbone_checkpoint(base_dir);
    if (!(b.config == rc.backbone)) throw ConfigError("backbone", "checkpoint architecture differs from the config");
    return b;
  }
  TrainOptions o;
  o.checkpoint_dir = out / "base";
  o.verbose = verbose;
  return run_warmup(rc, train, o).base;
}

inline std::vector<double> parse_number_list(const std::string& s, const char* field) {
  std::vector<double> v;
  std::istringstream is(s);
  for (std::string tok; std::getline(is, tok, ',');) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError(field, "not a number: '" + tok + "'");
    }
  }
  if (v.empty()) throw ConfigError(field, "empty list");
  return v;
}

// ---------------------------------------------------------------------------
// Subcommands

inline void cmd_gen_scenes(const Common& c, bool png, std::size_t colmap_points) {
  const auto rc = load_run_config(c);
  const json cj = rc;
  auto run = begin_run("gen-scenes", c.out, cj, rc.seed);
  auto dump = [&](const std::vector<SceneData>& scenes, const std::string& split, std::size_t first) {
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      std::ostringstream name;
      name << "scene_" << std::setw(3) << std::setfill('0') << first + i;
      const fs::path dir = run.out / split / name.str();
      fs::create_directories(dir);
      write_json(dir / "scene.json", scene_to_json(scenes[i].scene));
      for (std::size_t v = 0; v < scenes[i].images.size(); ++v) {
        std::ostringstream vn;
        vn << "view_" << std::setw(2) << std::setfill('0') << v << ".bin";
        write_image(scenes[i].images[v], dir / vn.str());
        if (png) write_png(scenes[i].images[v], (dir / vn.str()).replace_extension(".png"));
      }
      if (colmap_points)
        colmap::write_sparse_model(
            colmap::sparse_model_from_scene(scenes[i].scene, colmap_points, derive_seed(rc.seed, "colmap", first + i)),
            dir / "colmap");
    }
  };
  dump(training_scenes(rc), "train", 0);
  dump(test_scenes(rc), "test", rc.train_scenes);
  run.write();
}

inline void cmd_warmup(const Common& c) {
  const auto rc = load_run_config(c);
  auto run = begin_run("warmup-base", c.out, json(rc), rc.seed);
  const auto train = training_scenes(rc);
  const auto test = test_scenes(rc);
  const auto sets = evaluation_sets(rc, test);
  TrainOptions o;
  o.checkpoint_dir = run.out / "base";
  o.eval_sets = &sets;
  o.verbose = c.verbose;
  const auto w = run_warmup(rc, train, o);
  w.log.write_csv(run.out / "warmup_loss.csv");
  w.log.write_epochs_csv(run.out / "warmup_epochs.csv");
  run.write();
}

inline void cmd_train(const Common& c, const std::string& base_dir, const std::vector<std::string>& extra) {
  const auto rc = load_run_config(c, extra);
  auto run = begin_run("train", c.out, json(rc), rc.seed);
  const auto train = training_scenes(rc);
  const auto test = test_scenes(rc);
  const auto sets = evaluation_sets(rc, test);
  const auto base = obtain_base(rc, base_dir, train, run.out, c.verbose);
  TrainOptions o;
  o.checkpoint_dir = run.out / "checkpoint";
  o.eval_sets = &sets;
  o.verbose = c.verbose;
  const auto r = run_training(rc, base, train, o);
  r.log.write_csv(run.out / "loss.csv");
  r.log.write_epochs_csv(run.out / "epochs.csv");
  run.write();
}

inline void cmd_eval(const Common& c, const std::string& ckpt) {
  const auto rc = load_run_config(c);
  auto run = begin_run("eval", c.out, json(rc), rc.seed);
  const auto [model, base] = load_checkpoint(ckpt);
  const auto test = test_scenes(rc);
  const auto sets = evaluation_sets(rc, test);
  const auto rm = evaluate(model, base, sets);
  const auto rb = evaluate(make_base_model(base), base, sets);
  Csv pairs(run.out / "pairs.csv", "model,scene,view_i,view_j,angle_deg,error,count");
  Csv bins(run.out / "angle_bins.csv", "model,lo_deg,hi_deg,count,mean_error");
  write_eval_outputs("base", rb, pairs, bins);
  write_eval_outputs("mv", rm, pairs, bins);
  write_json(run.out / "eval.json", {{"mv", report_json(rm)}, {"base", report_json(rb)},
                                     {"error_ratio", rb.location_error > 0 ? rm.location_error / rb.location_error : 0.0}});
  std::cout << "location_error mv " << rm.location_error << " base " << rb.location_error << " base_similarity "
            << rm.base_similarity << '\n';
  run.write();
}

inline void cmd_ablate_views(const Common& c, const std::string& ckpt, std::size_t max_views) {
  const auto rc = load_run_config(c);
  auto run = begin_run("ablate views", c.out, json(rc), rc.seed);
  const auto [model, base] = load_checkpoint(ckpt);
  const auto test = test_scenes(rc);
  Csv csv(run.out / "views.csv", "strategy,views,error");
  for (auto [name, s] : {std::pair{"meaningful", ContextStrategy::Meaningful}, std::pair{"random", ContextStrategy::Random}})
    for (const auto& row : view_count_ablation(model, test, s, max_views, rc.train.correspondences, rc.ablation_seed()))
      csv.row(name, row.views, row.error);
  run.write();
}

inline void cmd_ablate_context(const Common& c, const std::string& ckpt) {
  const auto rc = load_run_config(c);
  auto run = begin_run("ablate context", c.out, json(rc), rc.seed);
  const auto [model, base] = load_checkpoint(ckpt);
  const auto test = test_scenes(rc);
  Csv csv(run.out / "context.csv", "model,scene,view_a,view_b,mean_error,std_error");
  json summary;
  for (auto [name, m] : {std::pair<const char*, const MVModel<float>*>{"mv", &model}, {"base", nullptr}}) {
    const auto bm = make_base_model(base);
    const auto r = context_consistency(m ? *m : bm, test, rc.context_pairs, rc.context_swaps, rc.train.correspondences,
                                       rc.ablation_seed(), rc.train.min_pair_overlap);
    for (const auto& p : r.pairs) csv.row(name, p.scene, p.view_a, p.view_b, p.mean, p.std);
    summary[name] = {{"mean_error", r.mean_error}, {"mean_std", r.mean_std}, {"std_over_mean", r.ratio()}};
  }
  write_json(run.out / "context.json", summary);
  run.write();
}

inline void cmd_ablate_noise(const Common& c, const std::string& ckpt, const std::string& levels) {
  auto rc = load_run_config(c);
  if (!levels.empty()) rc.noise_levels = parse_number_list(levels, "levels");
  rc.validate();
  auto run = begin_run("ablate noise", c.out, json(rc), rc.seed);
  const auto [model, base] = load_checkpoint(ckpt);
  const auto sets = evaluation_sets(rc, test_scenes(rc));
  Csv csv(run.out / "noise.csv", "sigma,error");
  for (const auto& r : noise_robustness(model, sets, rc.noise_levels, rc.noise_seed())) csv.row(r.sigma, r.error);
  run.write();
}

inline void cmd_ablate_lambda(const Common& c, const std::string& base_dir, const std::string& values) {
  auto rc = load_run_config(c);
  if (!values.empty()) rc.lambda_values = parse_number_list(values, "values");
  rc.validate();
  auto run = begin_run("ablate lambda", c.out, json(rc), rc.seed);
  const auto train = training_scenes(rc);
  const auto sets = evaluation_sets(rc, test_scenes(rc));
  const auto base = obtain_base(rc, base_dir, train, run.out, c.verbose);
  Csv csv(run.out / "lambda.csv", "lambda_reg,location_error,base_similarity");
  for (double lam : rc.lambda_values) {
    RunConfig r = rc;
    r.train.loss.lambda_reg = lam;
    TrainOptions o;
    o.verbose = c.verbose;
    const auto t = run_training(r, base, train, o);
    const auto e = evaluate(t.model, base, sets);
    csv.row(lam, e.location_error, e.base_similarity);
  }
  run.write();
}

inline void cmd_ablate_runtime(const Common& c, const std::string& ckpt, std::size_t repeats) {
  const auto rc = load_run_config(c);
  auto run = begin_run("ablate runtime", c.out, json(rc), rc.seed);
  std::optional<Loaded> l;
  if (!ckpt.empty()) l = load_checkpoint(ckpt);
  else {
    const auto base = init_backbone<float>(rc.model_seed(), rc.backbone);
    l = Loaded{make_mv_model(base, rc.train_config().model, rc.model_seed()), base};
  }
  SceneConfig sc = rc.scenes;
  std::size_t most = 1;
  for (auto v : rc.runtime_views) most = std::max(most, v);
  sc.n_cameras = std::max(sc.n_cameras, most);
  const auto scene = make_scenes(rc.scene_seed(), 0, 1, sc).front();
  const auto r = runtime_scaling(l->model, scene, rc.runtime_views, repeats);
  Csv csv(run.out / "runtime.csv", "views,seconds_per_view");
  for (const auto& row : r.rows) csv.row(row.views, row.seconds_per_view);
  write_json(run.out / "runtime.json", {{"slope", r.slope},
                                        {"intercept", r.intercept},
                                        {"r2", r.r2},
                                        {"single_view_seconds", r.single_view},
                                        {"backbone_only_seconds", r.backbone_only}});
  run.write();
}

inline void cmd_ablate_overlap(const Common& c, const std::string& ckpt, const std::string& edges_text) {
  const auto rc = load_run_config(c);
  auto run = begin_run("ablate overlap", c.out, json(rc), rc.seed);
  const auto [model, base] = load_checkpoint(ckpt);
  const auto test = test_scenes(rc);
  const auto sets = evaluation_sets(rc, test);
  std::vector<std::size_t> edges;
  for (double e : parse_number_list(edges_text, "edges")) {
    if (e < 0 || e != std::floor(e)) throw ConfigError("edges", "must be non-negative integers");
    edges.push_back(static_cast<std::size_t>(e));
  }
  const auto h = overlap_similarity_histogram(model, base, test, sets, edges);
  Csv views(run.out / "overlap_views.csv", "set,position,overlap_tokens,base_similarity");
  for (const auto& v : h.views) views.row(v.set, v.position, v.overlap, v.similarity);
  Csv bins(run.out / "overlap_bins.csv", "lo,hi,count,mean_base_similarity");
  for (const auto& b : h.bins)
    bins.row(b.lo, b.hi == std::numeric_limits<std::size_t>::max() ? std::string("inf") : std::to_string(b.hi), b.count,
             opt_str(b.mean_similarity));
  write_json(run.out / "overlap.json", {{"spearman_overlap_vs_dissimilarity", h.spearman}});
  run.write();
}

inline void cmd_ingest_colmap(const Common& c, const std::string& model_dir, std::size_t min_track) {
  const json cj{{"model", model_dir}, {"min_track", min_track}};
  auto run = begin_run("ingest-colmap", c.out, cj, c.seed.value_or(0));
  const auto m = colmap::parse_sparse_model(model_dir);
  Csv csv(run.out / "correspondences.csv", "image_a,image_b,x_a,y_a,x_b,y_b,X,Y,Z");
  std::size_t total = 0, pairs = 0;
  for (auto ia = m.images.begin(); ia != m.images.end(); ++ia)
    for (auto ib = std::next(ia); ib != m.images.end(); ++ib) {
      const auto cs = colmap::correspondences_from_model(m, ia->first, ib->first, min_track);
      pairs += !cs.empty();
      total += cs.size();
      for (const auto& x : cs)
        csv.row(ia->first, ib->first, x.x_i.x(), x.x_i.y(), x.x_j.x(), x.x_j.y(), x.point.x(), x.point.y(), x.point.z());
    }
  write_json(run.out / "summary.json", {{"cameras", m.cameras.size()},
                                        {"images", m.images.size()},
                                        {"points3d", m.points3d.size()},
                                        {"image_pairs", pairs},
                                        {"correspondences", total}});
  run.write();
}

inline void cmd_probe(const Common& c, const std::string& ckpt) {
  const auto rc = load_run_config(c);
  auto run = begin_run("probe-normals", c.out, json(rc), rc.seed);
  const auto [model, base] = load_checkpoint(ckpt);
  const auto r = run_probe_comparison(rc, model, base, training_scenes(rc), test_scenes(rc), c.verbose);
  Csv csv(run.out / "probe.csv", "features,rmse_deg,recall_11_25,recall_22_5,recall_30,count");
  for (const auto& [name, m] : {std::pair{"base", r.base}, std::pair{"mv", r.mv}})
    csv.row(name, m.rmse, m.recall_11, m.recall_22, m.recall_30, m.count);
  run.write();
}

inline void cmd_pca(const Common& c, const std::string& ckpt, std::size_t n_sets) {
  const auto rc = load_run_config(c);
  auto run = begin_run("pca-export", c.out, json(rc), rc.seed);
  const auto [model, base] = load_checkpoint(ckpt);
  auto sets = evaluation_sets(rc, test_scenes(rc));
  if (n_sets < sets.size()) sets.resize(n_sets);
  const std::size_t g = rc.backbone.grid();
  Csv csv(run.out / "pca.csv", "model,set,view,row,col,pc1,pc2,pc3");
  json summary;
  for (auto [name, mv] : {std::pair{"base", false}, std::pair{"mv", true}}) {
    std::vector<std::vector<FeatureMap<float>>> feats;
    for (const auto& s : sets) feats.push_back(mv ? extract_features(model, s) : extract_base_features(base, s));
    for (std::size_t si = 0; si < feats.size(); ++si) {
      // Shared axes over the views of one set, as in side-by-side visualizations.
      const auto p = pca_project(std::vector<std::vector<FeatureMap<float>>>{feats[si]}, 3);
      const auto& Y = p.projections.front();
      for (std::size_t v = 0; v < feats[si].size(); ++v)
        for (std::size_t t = 0; t < g * g; ++t) {
          const auto i = static_cast<Eigen::Index>(v * g * g + t);
          csv.row(name, si, v, t / g, t % g, Y.cols() > 0 ? Y(i, 0) : 0.0, Y.cols() > 1 ? Y(i, 1) : 0.0,
                  Y.cols() > 2 ? Y(i, 2) : 0.0);
        }
      summary[name].push_back(p.explained_fraction());
    }
  }
  write_json(run.out / "pca.json", {{"explained_fraction", summary}});
  run.write();
}

// ---------------------------------------------------------------------------
// Dispatch

inline void add_common(CLI::App* app, Common& c, bool needs_config = true) {
  if (needs_config) {
    app->add_option("--config,-c", c.config, "JSON run configuration (defaults apply to absent fields)")->check(CLI::ExistingFile);
    app->add_option("--set", c.sets, "Override a config field, e.g. --set train.epochs=2 (repeatable)");
  }
  app->add_option("--out,-o", c.out, "Output directory")->required();
  app->add_option("--seed", c.seed, "Top-level seed (overrides the config)");
  app->add_option("--threads", c.threads, "Worker cap; computation is single-threaded")->check(CLI::PositiveNumber);
  app->add_flag("--verbose,-v", c.verbose, "Progress on stderr");
}

inline void print_error(const char* kind, int code, const std::string& message, const std::string& field = {}) {
  json e{{"error", kind}, {"exit_code", code}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  std::cerr << e.dump() << '\n';
}

inline int cli_dispatch(int argc, const char* const* argv) {
  CLI::App app{"Multi-view feature adaptation: scenes, training, evaluation and ablations", "mvadapt"};
  app.require_subcommand(1);
  Common c;
  std::string base_dir, ckpt, model_dir, values, levels, edges = "0,32,64,96,128,160,192";
  std::size_t max_views = 8, repeats = 5, min_track = 2, n_sets = 1, colmap_points = 0;
  std::optional<std::size_t> epochs;
  std::optional<double> lambda, tau, lr;
  std::optional<std::string> objective;
  bool png = false;

  auto* gen = app.add_subcommand("gen-scenes", "Render the training and test scenes of a config");
  add_common(gen, c);
  gen->add_option("--colmap-points", colmap_points, "Also export each scene as a COLMAP text model with N points");
  gen->add_flag("--png", png, "Also write 8-bit PNG copies of the views");

  auto* warm = app.add_subcommand("warmup-base", "Warm up and freeze the plain backbone used as Base");
  add_common(warm, c);

  auto* train = app.add_subcommand("train", "Train LoRA, adapters and ray embedding on top of a frozen Base");
  add_common(train, c);
  train->add_option("--base", base_dir, "Base checkpoint from warmup-base (warmed up inline when absent)")->check(CLI::ExistingDirectory);
  train->add_option("--epochs", epochs, "Override train.epochs");
  train->add_option("--lambda", lambda, "Override train.lambda_reg");
  train->add_option("--tau", tau, "Override train.tau");
  train->add_option("--lr", lr, "Override train.lr");
  train->add_option("--objective", objective, "Override train.objective")->check(CLI::IsMember({"total", "naive"}));

  auto* ev = app.add_subcommand("eval", "Location error, base similarity and error-vs-angle of a checkpoint");
  add_common(ev, c);
  ev->add_option("--checkpoint", ckpt, "Multi-view checkpoint directory")->required()->check(CLI::ExistingDirectory);

  auto* ab = app.add_subcommand("ablate", "Ablation studies");
  ab->require_subcommand(1);
  auto* ab_views = ab->add_subcommand("views", "Error of a fixed pair as context views are added");
  add_common(ab_views, c);
  ab_views->add_option("--checkpoint", ckpt, "Multi-view checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ab_views->add_option("--max-views", max_views, "Largest set size")->check(CLI::Range(2, 64));
  auto* ab_ctx = ab->add_subcommand("context", "Error spread of fixed pairs across random context swaps");
  add_common(ab_ctx, c);
  ab_ctx->add_option("--checkpoint", ckpt, "Multi-view checkpoint directory")->required()->check(CLI::ExistingDirectory);
  auto* ab_noise = ab->add_subcommand("noise", "Error under Gaussian camera pose noise");
  add_common(ab_noise, c);
  ab_noise->add_option("--checkpoint", ckpt, "Multi-view checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ab_noise->add_option("--levels", levels, "Comma-separated noise levels starting at 0 (default from config)");
  auto* ab_lambda = ab->add_subcommand("lambda", "Train one model per regularization weight");
  add_common(ab_lambda, c);
  ab_lambda->add_option("--base", base_dir, "Base checkpoint (warmed up inline when absent)")->check(CLI::ExistingDirectory);
  ab_lambda->add_option("--values", values, "Comma-separated lambda_reg values (default from config)");
  auto* ab_rt = ab->add_subcommand("runtime", "Per-view forward time against the number of views");
  add_common(ab_rt, c);
  ab_rt->add_option("--checkpoint", ckpt, "Multi-view checkpoint (freshly initialized model when absent)")->check(CLI::ExistingDirectory);
  ab_rt->add_option("--repeats", repeats, "Timed repeats per view count (median reported)")->check(CLI::Range(1, 1000));
  auto* ab_ov = ab->add_subcommand("overlap", "Base similarity against co-visible token count");
  add_common(ab_ov, c);
  ab_ov->add_option("--checkpoint", ckpt, "Multi-view checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ab_ov->add_option("--edges", edges, "Comma-separated overlap bin edges in tokens, starting at 0");

  auto* ing = app.add_subcommand("ingest-colmap", "Projected correspondences from a COLMAP text model");
  add_common(ing, c, false);
  ing->add_option("--model", model_dir, "Directory with cameras.txt, images.txt, points3D.txt")->required()->check(CLI::ExistingDirectory);
  ing->add_option("--min-track", min_track, "Minimum distinct images per 3D point")->check(CLI::Range(2, 1 << 20));

  auto* probe = app.add_subcommand("probe-normals", "Train normal probes on frozen Base and multi-view features");
  add_common(probe, c);
  probe->add_option("--checkpoint", ckpt, "Multi-view checkpoint directory")->required()->check(CLI::ExistingDirectory);

  auto* pca = app.add_subcommand("pca-export", "Shared-PCA projections of Base and multi-view features");
  add_common(pca, c);
  pca->add_option("--checkpoint", ckpt, "Multi-view checkpoint directory")->required()->check(CLI::ExistingDirectory);
  pca->add_option("--sets", n_sets, "Number of evaluation sets to export")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help();
    print_error("usage", kUsage, e.what());
    return kUsage;
  }

  try {
    if (gen->parsed()) cmd_gen_scenes(c, png, colmap_points);
    else if (warm->parsed()) cmd_warmup(c);
    else if (train->parsed()) {
      std::vector<std::string> extra;
      if (epochs) extra.push_back("train.epochs=" + std::to_string(*epochs));
      if (lambda) extra.push_back("train.lambda_reg=" + json(*lambda).dump());
      if (tau) extra.push_back("train.tau=" + json(*tau).dump());
      if (lr) extra.push_back("train.lr=" + json(*lr).dump());
      if (objective) extra.push_back("train.objective=" + json(*objective).dump());
      cmd_train(c, base_dir, extra);
    } else if (ev->parsed()) cmd_eval(c, ckpt);
    else if (ab_views->parsed()) cmd_ablate_views(c, ckpt, max_views);
    else if (ab_ctx->parsed()) cmd_ablate_context(c, ckpt);
    else if (ab_noise->parsed()) cmd_ablate_noise(c, ckpt, levels);
    else if (ab_lambda->parsed()) cmd_ablate_lambda(c, base_dir, values);
    else if (ab_rt->parsed()) cmd_ablate_runtime(c, ckpt, repeats);
    else if (ab_ov->parsed()) cmd_ablate_overlap(c, ckpt, edges);
    else if (ing->parsed()) cmd_ingest_colmap(c, model_dir, min_track);
    else if (probe->parsed()) cmd_probe(c, ckpt);
    else if (pca->parsed()) cmd_pca(c, ckpt, n_sets);
  } catch (const ConfigError& e) {
    print_error("config", kConfig, e.what(), e.field());
    return kConfig;
  } catch (const ParseError& e) {
    print_error("parse", kConfig, e.what(), e.file() + (e.line() ? ":" + std::to_string(e.line()) : std::string()));
    return kConfig;
  } catch (const NumericalError& e) {
    print_error("numerical", kNumerical, e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    print_error("failure", kFailure, e.what());
    return kFailure;
  }
  return kOk;
}

}  // namespace mvadapt::cli
