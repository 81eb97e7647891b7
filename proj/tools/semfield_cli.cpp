// semfield: command-line entry point for the two-stage semantic field
// pipeline. Every subcommand reads the same pipeline config (--config) and
// writes below --output unless given explicit paths.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "semfield/pipeline.hpp"

namespace {

using namespace semfield;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::string log_level = "info";
};

PipelineConfig resolve_config(const GlobalOptions& g) {
  PipelineConfig c;
  if (!g.config.empty()) {
    if (!fs::exists(g.config)) throw Error("config file not found: " + g.config);
    c = load_pipeline_config(g.config);
  }
  if (g.seed) c.seed = *g.seed;
  if (!g.output.empty()) c.output = g.output;
  return c;
}

fs::path or_default(const std::string& value, const fs::path& fallback) {
  return value.empty() ? fallback : fs::path(value);
}

Scene load_scene_checked(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("scene directory not found: " + dir.string());
  return load_scene(dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semfield: multi-view semantic segmentation with an implicit neural field and foundation-model priors"};
  app.footer(
      "Environment:\n"
      "  SEMFIELD_FEATURE_CACHE  directory for cached foundation features (default: <output>/cache)");
  app.set_help_flag();
  app.set_help_all_flag("-h,--help", "Print this help message (all subcommands) and exit");
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  app.add_option("--config", g.config, "Pipeline config file (JSON)");
  app.add_option("--seed", g.seed, "Global seed; overrides the config");
  app.add_option("--output", g.output, "Output directory; overrides the config");
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));

  // gen-scene
  auto* gen = app.add_subcommand("gen-scene", "Generate a toy scene directory from a scene spec");
  std::string gen_spec, gen_out;
  gen->add_option("--spec", gen_spec, "Toy scene spec file (JSON); default: the config's toy_scene");
  gen->add_option("--out", gen_out, "Scene directory to write; default: <output>/scene");

  // extract-features
  auto* ext = app.add_subcommand("extract-features", "Extract foundation features for every view of a scene");
  std::string ext_backend, ext_scene, ext_weights, ext_out;
  std::optional<int> ext_patch, ext_stride;
  ext->add_option("--backend", ext_backend, "Feature backend")->check(CLI::IsMember({"stub", "sam"}));
  ext->add_option("--scene", ext_scene, "Scene directory")->required();
  ext->add_option("--weights", ext_weights, "Converted SAM encoder checkpoint (backend sam)");
  ext->add_option("--patch", ext_patch, "Stub backend window size in pixels");
  ext->add_option("--stride", ext_stride, "Stub backend grid stride in pixels");
  ext->add_option("--out", ext_out, "Feature directory; default: <output>/features");

  // pseudo-label
  auto* pl = app.add_subcommand("pseudo-label", "Assign nearest-centroid pseudo-labels to the test views");
  std::string pl_scene, pl_features, pl_metric, pl_out;
  pl->add_option("--scene", pl_scene, "Scene directory")->required();
  pl->add_option("--features", pl_features, "Feature directory; default: <output>/features");
  pl->add_option("--metric", pl_metric, "Feature distance")->check(CLI::IsMember({"euclidean", "cosine"}));
  pl->add_option("--out", pl_out, "Pseudo-label directory; default: <output>/pseudo");

  // train
  auto* tr = app.add_subcommand("train", "Train stage 1 (density + colour) or stage 2 (semantic fusion head)");
  int tr_stage = 1;
  std::string tr_scene, tr_resume, tr_init, tr_features, tr_pseudo, tr_out;
  tr->add_option("--stage", tr_stage, "Training stage")->required()->check(CLI::IsMember({1, 2}));
  tr->add_option("--scene", tr_scene, "Scene directory")->required();
  tr->add_option("--resume", tr_resume, "Checkpoint of this stage to resume from");
  tr->add_option("--init", tr_init, "Stage-1 checkpoint for stage 2; default: <output>/stage1/model.ckpt");
  tr->add_option("--features", tr_features, "Feature directory for stage 2; default: <output>/features");
  tr->add_option("--pseudo", tr_pseudo, "Pseudo-label directory for stage 2; default: <output>/pseudo");
  tr->add_option("--out", tr_out, "Run directory; default: <output>/stage<N>");

  // render
  auto* rd = app.add_subcommand("render", "Render one view to an RGB PNG and a label-map PNG");
  std::string rd_ckpt, rd_scene, rd_features, rd_out;
  int rd_view = 0;
  std::optional<int> rd_samples;
  rd->add_option("--checkpoint", rd_ckpt, "Model checkpoint")->required();
  rd->add_option("--scene", rd_scene, "Scene directory")->required();
  rd->add_option("--view", rd_view, "View id")->required();
  rd->add_option("--features", rd_features, "Feature directory; default: <output>/features");
  rd->add_option("--samples", rd_samples, "Samples per ray; default: the config's render_samples");
  rd->add_option("--out", rd_out, "Output directory; default: <output>/render");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a stage-2 checkpoint on the test views (mIoU)");
  std::string ev_ckpt, ev_scene, ev_features, ev_out;
  std::optional<int> ev_samples;
  ev->add_option("--checkpoint", ev_ckpt, "Stage-2 checkpoint")->required();
  ev->add_option("--scene", ev_scene, "Scene directory")->required();
  ev->add_option("--features", ev_features, "Feature directory; default: <output>/features");
  ev->add_option("--samples", ev_samples, "Samples per ray; default: the config's render_samples");
  ev->add_option("--out", ev_out, "Output directory; default: <output>/eval");

  // run
  auto* run = app.add_subcommand("run", "Run the whole pipeline, skipping steps that are up to date");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  try {
    PipelineConfig config = resolve_config(g);
    const fs::path out = config.output;

    if (*gen) {
      const ToySceneSpec spec = !gen_spec.empty()         ? toy_spec_from_json(read_json_file(gen_spec))
                                : config.toy_scene ? *config.toy_scene
                                                   : sphere_on_plane_spec();
      gen_scene_step(spec, or_default(gen_out, out / "scene"));
    } else if (*ext) {
      BackendOptions opts = config.backend;
      if (!ext_backend.empty()) opts.name = ext_backend;
      if (!ext_weights.empty()) opts.sam_weights = ext_weights;
      if (ext_patch) opts.stub_patch = *ext_patch;
      if (ext_stride) opts.stub_stride = *ext_stride;
      const Scene scene = load_scene_checked(ext_scene);
      extract_features_step(scene, opts, or_default(ext_out, out / "features"), out / "cache");
    } else if (*pl) {
      const Scene scene = load_scene_checked(pl_scene);
      const auto features = load_features(scene, or_default(pl_features, out / "features"));
      const DistanceMetric metric = pl_metric.empty() ? config.metric : parse_metric(pl_metric);
      pseudo_label_step(scene, features, metric, or_default(pl_out, out / "pseudo"));
    } else if (*tr) {
      const Scene scene = load_scene_checked(tr_scene);
      const fs::path dir = or_default(tr_out, out / ("stage" + std::to_string(tr_stage)));
      std::optional<fs::path> resume;
      if (!tr_resume.empty()) resume = tr_resume;
      if (tr_stage == 1) {
        train_stage1_step(scene, config.field, config.seeded_stage1(), config.field_seed(), dir, resume);
      } else {
        const auto features = load_features(scene, or_default(tr_features, out / "features"));
        const auto pseudo = load_pseudo_dir(scene, or_default(tr_pseudo, out / "pseudo"));
        train_stage2_step(scene, or_default(tr_init, out / "stage1" / "model.ckpt"), features, pseudo, config.fusion,
                          config.seeded_stage2(), config.fusion_seed(), dir, resume);
      }
    } else if (*rd) {
      const Scene scene = load_scene_checked(rd_scene);
      const fs::path fdir = or_default(rd_features, out / "features");
      const auto features = fs::exists(fdir) ? load_features(scene, fdir) : std::vector<FeatureMap>{};
      render_step(scene, rd_view, rd_ckpt, features, rd_samples.value_or(config.render_samples),
                  or_default(rd_out, out / "render"));
    } else if (*ev) {
      const Scene scene = load_scene_checked(ev_scene);
      const auto features = load_features(scene, or_default(ev_features, out / "features"));
      const SceneScore score =
          evaluate_step(scene, scene_name(ev_scene), ev_ckpt, features,
                        ev_samples.value_or(config.render_samples), or_default(ev_out, out / "eval"));
      std::cout << scores_table(score);
    } else if (*run) {
      const PipelineReport report = run_pipeline(config);
      for (const auto& [name, ran] : report.steps) std::cout << name << ": " << (ran ? "ran" : "skipped") << "\n";
      std::cout << "test mIoU " << format_score(report.miou) << " (" << report.scores_csv.string() << ")\n";
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
