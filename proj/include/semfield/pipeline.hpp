#pragma once

// End-to-end recipe: gen-scene -> extract-features -> pseudo-label ->
// train stage 1 -> train stage 2 -> evaluate. Each step is also callable on
// its own (the CLI subcommands use them). run_pipeline records a manifest
// of content hashes and skips steps whose inputs and outputs are unchanged.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "semfield/common.hpp"
#include "semfield/evaluator.hpp"
#include "semfield/foundation_features.hpp"
#include "semfield/neural_field.hpp"
#include "semfield/pseudo_labeler.hpp"
#include "semfield/sam_encoder.hpp"
#include "semfield/scene_io.hpp"
#include "semfield/semantic_fusion.hpp"
#include "semfield/synthetic_scenes.hpp"
#include "semfield/trainer.hpp"

namespace semfield {

namespace fs = std::filesystem;
using Real = float;  // training precision

// ------------------------------------------------------------------ config

struct PipelineConfig {
  fs::path output = "runs/toy";
  std::uint64_t seed = 0;
  std::optional<ToySceneSpec> toy_scene;  // generated into <output>/scene
  fs::path scene;                         // existing scene directory otherwise
  BackendOptions backend;
  DistanceMetric metric = DistanceMetric::kEuclidean;
  FieldConfig field;
  FusionConfig fusion;
  TrainConfig stage1;
  TrainConfig stage2 = [] {
    TrainConfig c;
    c.stage = 2;
    return c;
  }();
  int render_samples = 64;

  fs::path scene_dir() const { return toy_scene ? output / "scene" : scene; }

  // Seeds of the individual steps, derived from `seed` (and from each
  // stage's own rng_seed, so both can be varied).
  std::uint64_t field_seed() const { return mix_seed(seed, 1); }
  std::uint64_t fusion_seed() const { return mix_seed(seed, 2); }
  std::uint64_t stage1_seed() const { return mix_seed(mix_seed(seed, 3), stage1.rng_seed); }
  std::uint64_t stage2_seed() const { return mix_seed(mix_seed(seed, 4), stage2.rng_seed); }

  TrainConfig seeded_stage1() const {
    TrainConfig c = stage1;
    c.rng_seed = stage1_seed();
    return c;
  }
  TrainConfig seeded_stage2() const {
    TrainConfig c = stage2;
    c.rng_seed = stage2_seed();
    return c;
  }

  void validate() const {
    if (!toy_scene && scene.empty()) throw Error("pipeline config: give either toy_scene or scene");
    if (!toy_scene && !fs::is_directory(scene)) throw Error("pipeline config: scene directory does not exist: " + scene.string());
    if (backend.name == "sam" && !fs::exists(backend.sam_weights))
      throw Error("pipeline config: SAM weights not found at '" + backend.sam_weights + "' (use backend stub instead)");
    if (render_samples < 1) throw Error("pipeline config: render_samples must be positive");
    field.validate();
    stage1.validate();
    stage2.validate();
  }
};

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j = {{"output", c.output.string()},
                      {"seed", c.seed},
                      {"features", to_json(c.backend)},
                      {"pseudo_label", {{"metric", to_string(c.metric)}}},
                      {"field", to_json(c.field)},
                      {"fusion", to_json(c.fusion)},
                      {"stage1", to_json(c.stage1)},
                      {"stage2", to_json(c.stage2)},
                      {"render_samples", c.render_samples}};
  if (c.toy_scene) j["toy_scene"] = to_json(*c.toy_scene);
  if (!c.scene.empty()) j["scene"] = c.scene.string();
  return j;
}

// Relative paths (output, scene, toy_scene_file, sam_weights) resolve
// against `base_dir`, normally the directory of the config file.
inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base_dir.empty() ? fs::path(p) : base_dir / p; };
  PipelineConfig c;
  if (j.contains("output")) c.output = resolve(j.at("output").get<std::string>());
  c.seed = j.value("seed", c.seed);
  if (j.contains("toy_scene")) c.toy_scene = toy_spec_from_json(j.at("toy_scene"));
  if (j.contains("toy_scene_file")) c.toy_scene = toy_spec_from_json(read_json_file(resolve(j.at("toy_scene_file").get<std::string>())));
  if (j.contains("scene")) c.scene = resolve(j.at("scene").get<std::string>());
  if (j.contains("features")) {
    c.backend = backend_options_from_json(j.at("features"));
    if (!c.backend.sam_weights.empty()) c.backend.sam_weights = resolve(c.backend.sam_weights).string();
  }
  if (j.contains("pseudo_label")) c.metric = parse_metric(j.at("pseudo_label").value("metric", "euclidean"));
  if (j.contains("field")) c.field = field_config_from_json(j.at("field"));
  if (j.contains("fusion")) c.fusion = fusion_config_from_json(j.at("fusion"));
  c.stage1 = train_config_from_json(j.value("stage1", nlohmann::json::object()), 1);
  c.stage2 = train_config_from_json(j.value("stage2", nlohmann::json::object()), 2);
  c.stage1.stage = 1;
  c.stage2.stage = 2;
  c.render_samples = j.value("render_samples", c.render_samples);
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  return pipeline_config_from_json(read_json_file(path), path.parent_path());
}

// Last non-empty component of a scene path ("runs/toy/scene/" -> "scene").
inline std::string scene_name(const fs::path& dir) {
  const fs::path p = dir.lexically_normal();
  return p.filename().empty() ? p.parent_path().filename().string() : p.filename().string();
}

// ------------------------------------------------------------------ hashing

// Hash over the relative paths and contents of every regular file below
// `path` (or of the file itself).
inline std::string hash_path(const fs::path& path) {
  if (fs::is_regular_file(path)) return sha256_file(path.string());
  if (!fs::is_directory(path)) throw Error("cannot hash missing path " + path.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Sha256 h;
  for (const auto& f : files) h.update(fs::relative(f, path).generic_string()).update(sha256_file(f.string()));
  return h.hex();
}

// ------------------------------------------------------------------- steps

inline Scene gen_scene_step(const ToySceneSpec& spec, const fs::path& dir) {
  Scene scene = generate_toy_scene(spec);
  if (fs::exists(dir)) fs::remove_all(dir);
  save_scene(scene, dir);
  spdlog::info("gen-scene: {} views, {} classes -> {}", scene.views.size(), scene.class_count, dir.string());
  return scene;
}

inline fs::path feature_file(const fs::path& dir, const std::string& view_name) { return dir / (view_name + ".feat"); }

// Extracts one feature map per view into `out_dir`, going through the
// feature cache (SEMFIELD_FEATURE_CACHE, else `default_cache`).
inline std::vector<FeatureMap> extract_features_step(const Scene& scene, const BackendOptions& options,
                                                     const fs::path& out_dir, const fs::path& default_cache) {
  const auto backend = make_backend(options);
  const FeatureCache cache(feature_cache_dir(default_cache));
  fs::create_directories(out_dir);
  std::vector<FeatureMap> maps;
  for (const View& v : scene.views) {
    maps.push_back(extract_features(v.image, *backend, &cache));
    save_feature_map(feature_file(out_dir, v.name).string(), maps.back());
  }
  spdlog::info("extract-features: backend {} ({}-d), {} views -> {}", backend->id(), backend->feature_dim(),
               maps.size(), out_dir.string());
  return maps;
}

inline std::vector<FeatureMap> load_features(const Scene& scene, const fs::path& dir) {
  std::vector<FeatureMap> maps;
  for (const View& v : scene.views) {
    const fs::path path = feature_file(dir, v.name);
    if (!fs::exists(path)) throw Error("missing feature map for view " + v.name + ": " + path.string());
    maps.push_back(load_feature_map(path.string()));
    if (maps.back().source_w != v.image.width || maps.back().source_h != v.image.height)
      throw Error("feature map for view " + v.name + " was extracted from a different image size");
  }
  return maps;
}

inline std::vector<const FeatureMap*> pointers(const std::vector<FeatureMap>& maps) {
  std::vector<const FeatureMap*> out;
  for (const auto& m : maps) out.push_back(&m);
  return out;
}

// Centroids from the train-labeled views, pseudo-labels for every test view.
inline std::map<int, PseudoLabelMap> pseudo_label_step(const Scene& scene, const std::vector<FeatureMap>& features,
                                                       DistanceMetric metric, const fs::path& out_dir) {
  std::vector<LabeledFeatureView> labeled;
  for (int v : scene.views_in({SplitTag::kTrainLabeled})) {
    const View& view = scene.views[static_cast<std::size_t>(v)];
    if (!view.labels) throw Error("pseudo-label: train-labeled view " + view.name + " has no label map");
    labeled.push_back({&features.at(static_cast<std::size_t>(v)), &*view.labels});
  }
  if (labeled.empty()) throw Error("pseudo-label: scene has no train-labeled view");
  const ClassCentroids centroids = compute_centroids(labeled, scene.class_count, metric);
  for (int c : centroids.invalid_classes())
    spdlog::warn("pseudo-label: class {} has no labeled pixel and is excluded from assignment", c);
  if (fs::exists(out_dir)) fs::remove_all(out_dir);
  save_centroids(out_dir, centroids);
  std::map<int, PseudoLabelMap> out;
  for (int v : scene.views_in({SplitTag::kTest})) {
    PseudoLabelMap map = assign_pseudo_labels(features.at(static_cast<std::size_t>(v)), centroids, v);
    save_pseudo_labels(out_dir, scene.views[static_cast<std::size_t>(v)].name, map);
    out.emplace(v, std::move(map));
  }
  spdlog::info("pseudo-label: {} labeled views, {} test views -> {}", labeled.size(), out.size(), out_dir.string());
  return out;
}

inline std::map<int, PseudoLabelMap> load_pseudo_dir(const Scene& scene, const fs::path& dir) {
  std::map<int, PseudoLabelMap> out;
  for (int v : scene.views_in({SplitTag::kTest}))
    out.emplace(v, load_pseudo_labels(dir, scene.views[static_cast<std::size_t>(v)].name, v));
  return out;
}

inline TrainIo make_io(const fs::path& dir, const std::optional<fs::path>& resume) {
  fs::create_directories(dir);
  TrainIo io;
  io.checkpoint = dir / "model.ckpt";
  io.log = dir / "loss.csv";
  io.resume = resume;
  io.on_record = [](const LossRecord& r) {
    if (r.loss_rgb > 0.0)
      spdlog::info("iter {:>6}  loss_rgb {:.5f}  psnr {:.2f}  lr {:.2e}  {:.1f}s", r.iteration, r.loss_rgb, r.psnr,
                   r.learning_rate, r.wall_seconds);
    else
      spdlog::info("iter {:>6}  ce_train {:.5f}  ce_pseudo {:.5f}  lr {:.2e}  {:.1f}s", r.iteration, r.loss_sem_train,
                   r.loss_sem_pseudo, r.learning_rate, r.wall_seconds);
  };
  return io;
}

inline fs::path train_stage1_step(const Scene& scene, const FieldConfig& field, const TrainConfig& config,
                                  std::uint64_t init_seed, const fs::path& out_dir,
                                  const std::optional<fs::path>& resume = std::nullopt) {
  Model<Real> model = make_field_model<Real>(field, init_seed);
  const TrainIo io = make_io(out_dir, resume);
  const TrainSummary s = train_stage1(scene, model, config, io);
  spdlog::info("train stage 1: iterations {}..{} -> {}", s.first_iteration, s.last_iteration, io.checkpoint.string());
  return io.checkpoint;
}

inline fs::path train_stage2_step(const Scene& scene, const fs::path& stage1_checkpoint,
                                  const std::vector<FeatureMap>& features,
                                  const std::map<int, PseudoLabelMap>& pseudo, FusionConfig fusion,
                                  const TrainConfig& config, std::uint64_t init_seed, const fs::path& out_dir,
                                  const std::optional<fs::path>& resume = std::nullopt) {
  LoadedModel<Real> loaded = load_model<Real>(stage1_checkpoint.string());
  if (loaded.stage != 1) throw Error("train stage 2: " + stage1_checkpoint.string() + " is not a stage-1 checkpoint");
  Model<Real> model = std::move(loaded.model);
  if (features.empty()) throw Error("train stage 2: no foundation features");
  fusion.semantic_dim = scene.class_count;
  fusion.prior_dim = features.front().dim;
  attach_fusion_head(model, fusion, init_seed);
  Stage2Data data;
  data.features = pointers(features);
  for (const auto& [v, m] : pseudo) data.pseudo_labels[v] = &m;
  const TrainIo io = make_io(out_dir, resume);
  const TrainSummary s = train_stage2(scene, model, data, config, io);
  if (s.clamped > 0) spdlog::warn("train stage 2: {} target probabilities clamped at 1e-12", s.clamped);
  spdlog::info("train stage 2: iterations {}..{} -> {}", s.first_iteration, s.last_iteration, io.checkpoint.string());
  return io.checkpoint;
}

inline std::vector<int> evaluation_views(const Scene& scene) {
  std::vector<int> views = scene.views_in({SplitTag::kTest});
  if (views.empty()) views = scene.views_in({SplitTag::kTrainUnlabeled});
  if (views.empty()) throw Error("evaluate: scene has no test view");
  return views;
}

// Renders every evaluation view, scores it and writes scores.csv,
// scores.txt, pred/NNN.png (label indices) and pred_color/NNN.png.
inline SceneScore evaluate_step(const Scene& scene, const std::string& scene_name, const fs::path& checkpoint,
                                const std::vector<FeatureMap>& features, int samples, const fs::path& out_dir) {
  const LoadedModel<Real> loaded = load_model<Real>(checkpoint.string());
  if (!loaded.model.fusion) throw Error("evaluate: " + checkpoint.string() + " has no semantic head (stage 2 required)");
  const auto views = evaluation_views(scene);
  const auto fp = pointers(features);
  std::vector<LabelMap> predictions;
  fs::create_directories(out_dir / "pred");
  fs::create_directories(out_dir / "pred_color");
  for (int v : views) {
    RenderedView r = render_view(loaded.model, scene, v, samples, fp);
    const std::string& name = scene.views[static_cast<std::size_t>(v)].name;
    write_png((out_dir / "pred" / (name + ".png")).string(), r.labels);
    write_png((out_dir / "pred_color" / (name + ".png")).string(), colorize_labels(r.labels));
    predictions.push_back(std::move(r.labels));
  }
  SceneScore score = score_scene(scene_name, scene, views, predictions);
  std::ofstream(out_dir / "scores.csv") << scores_csv({score});
  std::ofstream(out_dir / "scores.txt") << scores_table(score);
  spdlog::info("evaluate: scene mIoU {:.4f} over {} views -> {}", score.result.miou, views.size(), out_dir.string());
  return score;
}

inline RenderedView render_step(const Scene& scene, int view_id, const fs::path& checkpoint,
                                const std::vector<FeatureMap>& features, int samples, const fs::path& out_dir) {
  if (view_id < 0 || view_id >= static_cast<int>(scene.views.size()))
    throw Error("render: view id " + std::to_string(view_id) + " out of range");
  const LoadedModel<Real> loaded = load_model<Real>(checkpoint.string());
  RenderedView r = render_view(loaded.model, scene, view_id, samples, pointers(features));
  fs::create_directories(out_dir);
  const std::string& name = scene.views[static_cast<std::size_t>(view_id)].name;
  write_png((out_dir / (name + "_rgb.png")).string(), r.image);
  if (loaded.model.fusion) write_png((out_dir / (name + "_labels.png")).string(), r.labels);
  spdlog::info("render: view {} -> {}", name, out_dir.string());
  return r;
}

// ---------------------------------------------------------------- manifest

struct StepRecord {
  std::string input_hash;
  std::map<std::string, std::string> outputs;  // path relative to output dir -> hash
};

class Manifest {
 public:
  explicit Manifest(fs::path root) : root_(std::move(root)), path_(root_ / "manifest.json") {
    if (!fs::exists(path_)) return;
    const auto j = read_json_file(path_);
    for (const auto& [name, s] : j.at("steps").items())
      steps_[name] = {s.at("input_hash").get<std::string>(), s.at("outputs").get<std::map<std::string, std::string>>()};
  }

  // True when the recorded step has this input hash and all its outputs
  // still hash to the recorded values.
  bool current(const std::string& step, const std::string& input_hash) const {
    auto it = steps_.find(step);
    if (it == steps_.end() || it->second.input_hash != input_hash) return false;
    for (const auto& [rel, hash] : it->second.outputs)
      if (!fs::exists(root_ / rel) || hash_path(root_ / rel) != hash) return false;
    return true;
  }

  void record(const std::string& step, const std::string& input_hash, const std::vector<fs::path>& outputs) {
    StepRecord r{input_hash, {}};
    for (const auto& p : outputs) r.outputs[fs::relative(p, root_).generic_string()] = hash_path(p);
    steps_[step] = std::move(r);
    save();
  }

  // Combined hash of a step's outputs, used as input to later steps.
  std::string output_hash(const std::string& step) const {
    Sha256 h;
    for (const auto& [rel, hash] : steps_.at(step).outputs) h.update(rel).update(hash);
    return h.hex();
  }

  const std::map<std::string, StepRecord>& steps() const { return steps_; }

 private:
  void save() const {
    nlohmann::json j = {{"version", 1}, {"steps", nlohmann::json::object()}};
    for (const auto& [name, r] : steps_) j["steps"][name] = {{"input_hash", r.input_hash}, {"outputs", r.outputs}};
    write_json_file(path_, j);
  }

  fs::path root_;
  fs::path path_;
  std::map<std::string, StepRecord> steps_;
};

struct PipelineReport {
  std::vector<std::pair<std::string, bool>> steps;  // (name, executed)
  double miou = 0.0;
  fs::path scores_csv;

  bool executed(const std::string& name) const {
    for (const auto& [n, ran] : steps)
      if (n == name) return ran;
    return false;
  }
};

inline std::string hash_json(const nlohmann::json& j) { return sha256_hex(j.dump()); }

inline PipelineReport run_pipeline(const PipelineConfig& config) {
  config.validate();
  fs::create_directories(config.output);
  Manifest manifest(config.output);
  PipelineReport report;
  auto step = [&](const std::string& name, const std::string& input_hash, const std::vector<fs::path>& outputs,
                  const std::function<void()>& body) {
    if (manifest.current(name, input_hash)) {
      spdlog::info("[{}] up to date, skipped", name);
      report.steps.emplace_back(name, false);
      return;
    }
    spdlog::info("[{}] running", name);
    body();
    manifest.record(name, input_hash, outputs);
    report.steps.emplace_back(name, true);
  };

  const fs::path scene_dir = config.scene_dir();
  const fs::path features_dir = config.output / "features";
  const fs::path pseudo_dir = config.output / "pseudo";
  const fs::path stage1_dir = config.output / "stage1";
  const fs::path stage2_dir = config.output / "stage2";
  const fs::path eval_dir = config.output / "eval";

  std::string scene_hash;
  if (config.toy_scene) {
    step("gen-scene", hash_json(to_json(*config.toy_scene)), {scene_dir},
         [&] { gen_scene_step(*config.toy_scene, scene_dir); });
    scene_hash = manifest.output_hash("gen-scene");
  } else {
    scene_hash = hash_path(scene_dir);
  }
  const Scene scene = load_scene(scene_dir);

  step("extract-features", hash_json({{"backend", to_json(config.backend)}, {"scene", scene_hash}}), {features_dir},
       [&] { extract_features_step(scene, config.backend, features_dir, config.output / "cache"); });
  const std::string features_hash = manifest.output_hash("extract-features");
  std::optional<std::vector<FeatureMap>> features;
  auto get_features = [&]() -> const std::vector<FeatureMap>& {
    if (!features) features = load_features(scene, features_dir);
    return *features;
  };

  step("pseudo-label",
       hash_json({{"metric", to_string(config.metric)}, {"scene", scene_hash}, {"features", features_hash}}),
       {pseudo_dir}, [&] { pseudo_label_step(scene, get_features(), config.metric, pseudo_dir); });
  const std::string pseudo_hash = manifest.output_hash("pseudo-label");

  const TrainConfig stage1 = config.seeded_stage1();
  step("train-stage1",
       hash_json({{"field", to_json(config.field)}, {"train", to_json(stage1)}, {"init", config.field_seed()},
                  {"scene", scene_hash}}),
       {stage1_dir / "model.ckpt"},
       [&] { train_stage1_step(scene, config.field, stage1, config.field_seed(), stage1_dir); });
  const std::string stage1_hash = manifest.output_hash("train-stage1");

  const TrainConfig stage2 = config.seeded_stage2();
  step("train-stage2",
       hash_json({{"fusion", to_json(config.fusion)},
                  {"train", to_json(stage2)},
                  {"init", config.fusion_seed()},
                  {"stage1", stage1_hash},
                  {"pseudo", pseudo_hash},
                  {"features", features_hash},
                  {"scene", scene_hash}}),
       {stage2_dir / "model.ckpt"}, [&] {
         const auto pseudo = load_pseudo_dir(scene, pseudo_dir);
         train_stage2_step(scene, stage1_dir / "model.ckpt", get_features(), pseudo, config.fusion, stage2,
                           config.fusion_seed(), stage2_dir);
       });
  const std::string stage2_hash = manifest.output_hash("train-stage2");

  step("evaluate",
       hash_json({{"samples", config.render_samples},
                  {"stage2", stage2_hash},
                  {"features", features_hash},
                  {"scene", scene_hash}}),
       {eval_dir}, [&] {
         evaluate_step(scene, scene_name(scene_dir), stage2_dir / "model.ckpt", get_features(),
                       config.render_samples, eval_dir);
       });
  report.scores_csv = eval_dir / "scores.csv";
  {
    std::ifstream in(report.scores_csv);
    std::string line;
    while (std::getline(in, line))
      if (line.find(",all,") != std::string::npos) report.miou = std::stod(line.substr(line.find(",all,-,") + 7));
  }
  return report;
}

}  // namespace semfield
