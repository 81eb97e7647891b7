#pragma once

// Two-stage optimisation.
//
// Stage 1 fits density and colour to ray batches drawn from every view
// (mean squared colour error). Stage 2 freezes the whole field and trains
// the fusion head with a weighted cross-entropy: rays from train-labeled
// views use their ground-truth labels with weight lambda_train, rays from
// test views use pseudo-labels with weight lambda_pseudo. Ignore-labelled
// rays get weight zero. Losses are normalised by the number of rays that
// carry a label, so the learning rate does not depend on the batch size.
//
// Every random draw of iteration k is seeded from (rng_seed, k), which makes
// a resumed run identical to an uninterrupted one.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfield/autograd.hpp"
#include "semfield/checkpoint.hpp"
#include "semfield/common.hpp"
#include "semfield/foundation_features.hpp"
#include "semfield/neural_field.hpp"
#include "semfield/nn.hpp"
#include "semfield/pseudo_labeler.hpp"
#include "semfield/scene_io.hpp"
#include "semfield/semantic_fusion.hpp"
#include "semfield/volume_renderer.hpp"

namespace semfield {

struct TrainConfig {
  int stage = 1;
  int ray_batch_size = 1024;
  int samples_per_ray = 64;
  double learning_rate = 5e-4;
  double final_learning_rate = 5e-5;
  long decay_steps = 0;  // 0: decay over `iterations`
  long iterations = 20000;
  double lambda_train = 1.0;
  double lambda_pseudo = 0.001;
  double pseudo_mix_fraction = 0.5;
  std::uint64_t rng_seed = 0;
  long checkpoint_interval = 0;  // 0: only at the end
  long log_interval = 10;
  bool stratified = true;

  void validate() const {
    if (stage != 1 && stage != 2) throw Error("train config: stage must be 1 or 2");
    if (ray_batch_size < 1 || samples_per_ray < 1) throw Error("train config: batch size and samples must be positive");
    if (iterations < 0 || decay_steps < 0 || checkpoint_interval < 0 || log_interval < 1)
      throw Error("train config: iteration counts must be non-negative");
    if (!(learning_rate > 0.0) || !(final_learning_rate > 0.0)) throw Error("train config: learning rates must be positive");
    if (!(lambda_train >= 0.0) || !(lambda_pseudo >= 0.0)) throw Error("train config: lambda values must be non-negative");
    if (!(pseudo_mix_fraction >= 0.0 && pseudo_mix_fraction <= 1.0))
      throw Error("train config: pseudo_mix_fraction must lie in [0, 1]");
  }

  nn::ExponentialDecay schedule() const {
    return {learning_rate, final_learning_rate, decay_steps > 0 ? decay_steps : std::max(1L, iterations)};
  }

  bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"stage", c.stage},
          {"ray_batch_size", c.ray_batch_size},
          {"samples_per_ray", c.samples_per_ray},
          {"learning_rate", c.learning_rate},
          {"final_learning_rate", c.final_learning_rate},
          {"decay_steps", c.decay_steps},
          {"iterations", c.iterations},
          {"lambda_train", c.lambda_train},
          {"lambda_pseudo", c.lambda_pseudo},
          {"pseudo_mix_fraction", c.pseudo_mix_fraction},
          {"rng_seed", c.rng_seed},
          {"checkpoint_interval", c.checkpoint_interval},
          {"log_interval", c.log_interval},
          {"stratified", c.stratified}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, int default_stage = 1) {
  TrainConfig c;
  c.stage = j.value("stage", default_stage);
  c.ray_batch_size = j.value("ray_batch_size", c.ray_batch_size);
  c.samples_per_ray = j.value("samples_per_ray", c.samples_per_ray);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.final_learning_rate = j.value("final_learning_rate", c.final_learning_rate);
  c.decay_steps = j.value("decay_steps", c.decay_steps);
  c.iterations = j.value("iterations", c.iterations);
  c.lambda_train = j.value("lambda_train", c.lambda_train);
  c.lambda_pseudo = j.value("lambda_pseudo", c.lambda_pseudo);
  c.pseudo_mix_fraction = j.value("pseudo_mix_fraction", c.pseudo_mix_fraction);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.log_interval = j.value("log_interval", c.log_interval);
  c.stratified = j.value("stratified", c.stratified);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- losses

// Mean over rays of the squared L2 colour error.
inline double loss_rgb(const ag::Matrix<double>& rendered, const ag::Matrix<double>& ground_truth) {
  if (rendered.rows() != ground_truth.rows() || rendered.cols() != ground_truth.cols())
    throw Error("loss_rgb: rendered and ground-truth shapes differ");
  if (rendered.rows() == 0) return 0.0;
  return (rendered - ground_truth).rowwise().squaredNorm().sum() / static_cast<double>(rendered.rows());
}

enum class Reduction { kMean, kSum };

struct SemanticLoss {
  double value = 0.0;
  std::size_t clamped = 0;  // rays whose target probability hit the floor
};

inline constexpr double kProbabilityFloor = 1e-12;

// -sum_r lambda_r log p_r[target_r], divided by the number of rays with a
// label under kMean. Rays labelled kIgnoreLabel are skipped.
inline SemanticLoss loss_semantic(const ag::Matrix<double>& probabilities, const std::vector<int>& targets,
                                  const std::vector<double>& lambdas, Reduction reduction = Reduction::kMean) {
  const auto rows = static_cast<std::size_t>(probabilities.rows());
  if (targets.size() != rows || lambdas.size() != rows) throw Error("loss_semantic: batch sizes differ");
  SemanticLoss out;
  std::size_t labelled = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == kIgnoreLabel) continue;
    if (targets[r] < 0 || targets[r] >= probabilities.cols()) throw Error("loss_semantic: target out of range");
    if (lambdas[r] < 0.0) throw Error("loss_semantic: negative weight");
    ++labelled;
    double p = probabilities(static_cast<Eigen::Index>(r), targets[r]);
    if (!(p > kProbabilityFloor)) {
      p = kProbabilityFloor;
      ++out.clamped;
    }
    out.value -= lambdas[r] * std::log(p);
  }
  if (reduction == Reduction::kMean && labelled > 0) out.value /= static_cast<double>(labelled);
  return out;
}

inline double psnr_from_mse(double mse_per_channel) {
  return mse_per_channel > 0.0 ? -10.0 * std::log10(mse_per_channel) : std::numeric_limits<double>::infinity();
}

// ------------------------------------------------------------ bookkeeping

struct LossRecord {
  long iteration = 0;
  double loss_rgb = 0.0;
  double loss_sem_train = 0.0;
  double loss_sem_pseudo = 0.0;
  double psnr = 0.0;
  double learning_rate = 0.0;
  double wall_seconds = 0.0;
};

// Append-only CSV. Opening an existing log keeps its rows, so a resumed
// run continues the iteration numbering in the same file.
class LossLog {
 public:
  LossLog() = default;
  explicit LossLog(const std::filesystem::path& path) : path_(path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    out_.open(path, std::ios::app);
    if (!out_) throw Error("cannot open loss log " + path.string());
    if (fresh) out_ << "iteration,loss_rgb,loss_sem_train,loss_sem_pseudo,psnr,learning_rate,wall_seconds\n";
  }

  void append(const LossRecord& r) {
    if (r.iteration <= last_) throw Error("loss log: iterations must increase");
    last_ = r.iteration;
    if (!out_.is_open()) return;
    out_ << r.iteration << "," << r.loss_rgb << "," << r.loss_sem_train << "," << r.loss_sem_pseudo << ","
         << r.psnr << "," << r.learning_rate << "," << r.wall_seconds << "\n";
    out_.flush();
  }

  void set_last(long iteration) { last_ = iteration; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  long last_ = -1;
};

// --------------------------------------------------------------- batches

template <class T>
struct SampleBatch {
  ag::Matrix<T> points;      // (B*n) x 3
  ag::Matrix<T> directions;  // (B*n) x 3
  ag::Matrix<T> deltas;      // (B*n) x 1
  ag::Matrix<T> depth01;     // (B*n) x 1, depth normalised to [near, far] -> [0, 1]
  Eigen::Index rays = 0;
  Eigen::Index samples = 0;
};

template <class T>
SampleBatch<T> build_sample_batch(std::span<const Ray> rays, int samples, bool stratified, std::uint64_t seed) {
  SampleBatch<T> b;
  b.rays = static_cast<Eigen::Index>(rays.size());
  b.samples = samples;
  const Eigen::Index rows = b.rays * samples;
  b.points.resize(rows, 3);
  b.directions.resize(rows, 3);
  b.deltas.resize(rows, 1);
  b.depth01.resize(rows, 1);
  Rng rng(seed);
  for (Eigen::Index r = 0; r < b.rays; ++r) {
    const Ray& ray = rays[static_cast<std::size_t>(r)];
    const RaySamples s = sample_along_ray(ray, samples, stratified, stratified ? &rng : nullptr);
    for (int i = 0; i < samples; ++i) {
      const Eigen::Index row = r * samples + i;
      const double t = s.depths[static_cast<std::size_t>(i)];
      const Vec3 p = ray.origin + t * ray.direction;
      for (int c = 0; c < 3; ++c) {
        b.points(row, c) = static_cast<T>(p[c]);
        b.directions(row, c) = static_cast<T>(ray.direction[c]);
      }
      b.deltas(row, 0) = static_cast<T>(s.deltas[static_cast<std::size_t>(i)]);
      b.depth01(row, 0) = static_cast<T>((t - ray.near) / (ray.far - ray.near));
    }
  }
  return b;
}

// Foundation feature at each ray's pixel, one row per ray.
template <class T>
ag::Matrix<T> ray_priors(std::span<const Ray> rays, const std::vector<const FeatureMap*>& features, int dim) {
  ag::Matrix<T> out(static_cast<Eigen::Index>(rays.size()), dim);
  std::vector<float> f(static_cast<std::size_t>(dim));
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const int v = rays[r].view_id;
    if (v < 0 || static_cast<std::size_t>(v) >= features.size() || features[static_cast<std::size_t>(v)] == nullptr)
      throw Error("missing foundation features for view " + std::to_string(v));
    lookup_into(*features[static_cast<std::size_t>(v)], rays[r].x, rays[r].y, f);
    for (int d = 0; d < dim; ++d) out(static_cast<Eigen::Index>(r), d) = static_cast<T>(f[static_cast<std::size_t>(d)]);
  }
  return out;
}

// ----------------------------------------------------------------- model

template <class T>
struct Model {
  FieldConfig field;
  std::optional<FusionConfig> fusion;
  nn::ParameterSet<T> params;
};

inline const std::string kOptimizerPrefix = "optim.";

template <class T>
Model<T> make_field_model(const FieldConfig& field, std::uint64_t seed) {
  Model<T> m;
  m.field = field;
  init_field_params(m.params, field, seed);
  return m;
}

struct RenderResult {
  ag::Matrix<double> colour;  // B x 3
  ag::Matrix<double> logits;  // B x L (empty without a fusion head)
  ag::Matrix<double> accumulated_opacity;  // B x 1
};

// Deterministic (bin-centre) rendering of arbitrary rays, processed in
// chunks. `features` is indexed by view id and only needed with a fusion
// head.
template <class T>
RenderResult render_rays(const Model<T>& model, std::span<const Ray> rays, int samples,
                         const std::vector<const FeatureMap*>& features = {}, std::size_t chunk = 512) {
  RenderResult out;
  const auto total = static_cast<Eigen::Index>(rays.size());
  out.colour.resize(total, 3);
  out.accumulated_opacity.resize(total, 1);
  if (model.fusion) out.logits.resize(total, model.fusion->semantic_dim);
  for (std::size_t start = 0; start < rays.size(); start += chunk) {
    const auto part = rays.subspan(start, std::min(chunk, rays.size() - start));
    const SampleBatch<T> b = build_sample_batch<T>(part, samples, false, 0);
    ag::Tape<T> tape;
    nn::Binding<T> bind(tape, model.params, false);
    const FieldVars<T> f = field_forward(bind, model.field, b.points, b.directions);
    const ag::Matrix<T> w = batch_weights<T>(f.sigma.value(), b.deltas, b.samples);
    const auto row0 = static_cast<Eigen::Index>(start);
    for (Eigen::Index r = 0; r < b.rays; ++r) {
      ag::RowVector<double> c = ag::RowVector<double>::Zero(3);
      double acc = 0.0;
      for (Eigen::Index i = 0; i < b.samples; ++i) {
        const double wi = w(r * b.samples + i, 0);
        c += wi * f.colour.value().row(r * b.samples + i).template cast<double>();
        acc += wi;
      }
      out.colour.row(row0 + r) = c;
      out.accumulated_opacity(row0 + r, 0) = acc;
    }
    if (model.fusion) {
      const ag::Var<T> prior = tape.constant(ray_priors<T>(part, features, model.fusion->prior_dim));
      const SemanticVars<T> s = fusion_forward(bind, *model.fusion, f.base, b.depth01, prior, b.samples);
      const ag::Var<T> logits = composite(f.sigma, s.s2, b.deltas, b.samples);
      out.logits.middleRows(row0, b.rays) = logits.value().template cast<double>();
    }
  }
  return out;
}

inline std::vector<int> argmax_rows(const ag::Matrix<double>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    logits.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

struct RenderedView {
  Image image;
  LabelMap labels;
};

template <class T>
RenderedView render_view(const Model<T>& model, const Scene& scene, int view_id, int samples,
                         const std::vector<const FeatureMap*>& features = {}) {
  const std::vector<Ray> rays = view_rays(scene, view_id);
  const RenderResult r = render_rays(model, std::span<const Ray>(rays), samples, features);
  const CameraModel& cam = scene.views.at(static_cast<std::size_t>(view_id)).camera;
  RenderedView out{Image(cam.width, cam.height), LabelMap(cam.width, cam.height)};
  const std::vector<int> labels = model.fusion ? argmax_rows(r.logits) : std::vector<int>{};
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const int x = rays[i].pixel_x(), y = rays[i].pixel_y();
    for (int c = 0; c < 3; ++c)
      out.image.at(x, y, c) = static_cast<float>(std::clamp(r.colour(static_cast<Eigen::Index>(i), c), 0.0, 1.0));
    if (model.fusion) out.labels.at(x, y) = static_cast<std::uint8_t>(labels[i]);
  }
  return out;
}

// ------------------------------------------------------------ checkpoints

template <class T>
void save_model(const std::string& path, const Model<T>& model, int stage, long iteration,
                const nn::Adam<T>* optimizer = nullptr, const nlohmann::json& extra = {}) {
  Checkpoint<T> ckpt;
  ckpt.header = {{"stage", stage}, {"iteration", iteration}, {"field", to_json(model.field)}};
  if (model.fusion) ckpt.header["fusion"] = to_json(*model.fusion);
  if (!extra.is_null()) ckpt.header["extra"] = extra;
  ckpt.params = model.params;
  if (optimizer) {
    ckpt.header["optimizer_steps"] = optimizer->steps();
    for (const auto& [name, m] : optimizer->moments()) {
      ckpt.params.add(kOptimizerPrefix + "m." + name, m.first, false);
      ckpt.params.add(kOptimizerPrefix + "v." + name, m.second, false);
    }
  }
  save_checkpoint(path, ckpt);
}

template <class T>
struct LoadedModel {
  Model<T> model;
  int stage = 1;
  long iteration = 0;
  nn::Adam<T> optimizer;
  nlohmann::json header;
};

template <class T>
LoadedModel<T> load_model(const std::string& path) {
  Checkpoint<T> ckpt = load_checkpoint<T>(path);
  LoadedModel<T> out;
  out.header = ckpt.header;
  out.stage = ckpt.header.value("stage", 1);
  out.iteration = ckpt.header.value("iteration", 0L);
  out.model.field = field_config_from_json(ckpt.header.at("field"));
  if (ckpt.header.contains("fusion")) out.model.fusion = fusion_config_from_json(ckpt.header.at("fusion"));
  out.optimizer.set_steps(ckpt.header.value("optimizer_steps", 0L));
  for (const auto& [name, p] : ckpt.params) {
    if (name.rfind(kOptimizerPrefix + "m.", 0) == 0) {
      out.optimizer.moments()[name.substr(kOptimizerPrefix.size() + 2)].first = p.value;
    } else if (name.rfind(kOptimizerPrefix + "v.", 0) == 0) {
      out.optimizer.moments()[name.substr(kOptimizerPrefix.size() + 2)].second = p.value;
    } else {
      out.model.params.add(name, p.value, p.trainable);
    }
  }
  return out;
}

// -------------------------------------------------------------- training

struct TrainIo {
  std::filesystem::path checkpoint;  // final (and periodic) checkpoint
  std::filesystem::path log;         // loss CSV; empty for none
  std::optional<std::filesystem::path> resume;
  std::function<void(const LossRecord&)> on_record;
};

struct TrainSummary {
  long first_iteration = 0;
  long last_iteration = 0;
  std::vector<LossRecord> records;
  std::size_t clamped = 0;
};

namespace detail {

inline void dump_batch(const std::filesystem::path& checkpoint, long iteration, std::span<const Ray> rays,
                       const std::string& what) {
  nlohmann::json j = {{"iteration", iteration}, {"reason", what}, {"rays", nlohmann::json::array()}};
  for (const Ray& r : rays)
    j["rays"].push_back({{"view", r.view_id},
                         {"x", r.x},
                         {"y", r.y},
                         {"origin", {r.origin.x(), r.origin.y(), r.origin.z()}},
                         {"direction", {r.direction.x(), r.direction.y(), r.direction.z()}}});
  const auto dir = checkpoint.has_parent_path() ? checkpoint.parent_path() : std::filesystem::path(".");
  std::filesystem::create_directories(dir);
  const auto path = dir / ("nonfinite_batch_" + std::to_string(iteration) + ".json");
  std::ofstream(path) << j.dump(2) << "\n";
  throw Error(what + " at iteration " + std::to_string(iteration) + "; batch dumped to " + path.string());
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

template <class T>
TrainSummary train_stage1(const Scene& scene, Model<T>& model, const TrainConfig& config, const TrainIo& io) {
  config.validate();
  if (scene.views.size() < 2) throw Error("train_stage1: need at least two views");
  const std::set<SplitTag> all = {SplitTag::kTrainLabeled, SplitTag::kTrainUnlabeled, SplitTag::kTest};
  nn::Adam<T> adam;
  long start = 0;
  if (io.resume) {
    LoadedModel<T> loaded = load_model<T>(io.resume->string());
    if (!(loaded.model.field == model.field)) throw Error("resume: checkpoint field configuration differs");
    model = std::move(loaded.model);
    adam = std::move(loaded.optimizer);
    start = loaded.iteration;
  }
  if (!io.resume && !io.log.empty()) std::filesystem::remove(io.log);
  LossLog log = io.log.empty() ? LossLog() : LossLog(io.log);
  log.set_last(start);
  const auto schedule = config.schedule();
  const auto t0 = std::chrono::steady_clock::now();
  TrainSummary summary;
  summary.first_iteration = start;
  for (long it = start; it < config.iterations; ++it) {
    const std::vector<Ray> rays = sample_ray_batch(scene, static_cast<std::size_t>(config.ray_batch_size), all,
                                                   mix_seed(config.rng_seed, 2 * static_cast<std::uint64_t>(it)));
    const SampleBatch<T> b = build_sample_batch<T>(rays, config.samples_per_ray, config.stratified,
                                                   mix_seed(config.rng_seed, 2 * static_cast<std::uint64_t>(it) + 1));
    ag::Matrix<T> target(b.rays, 3);
    for (Eigen::Index r = 0; r < b.rays; ++r) {
      const Ray& ray = rays[static_cast<std::size_t>(r)];
      const Image& img = scene.views[static_cast<std::size_t>(ray.view_id)].image;
      for (int c = 0; c < 3; ++c) target(r, c) = static_cast<T>(img.at(ray.pixel_x(), ray.pixel_y(), c));
    }
    ag::Tape<T> tape;
    nn::Binding<T> bind(tape, model.params);
    const FieldVars<T> f = field_forward(bind, model.field, b.points, b.directions);
    const ag::Var<T> colour = composite(f.sigma, f.colour, b.deltas, b.samples);
    const ag::Var<T> loss = ag::mean_squared_row_error(colour, target);
    const double value = static_cast<double>(loss.value()(0, 0));
    if (!std::isfinite(value)) detail::dump_batch(io.checkpoint, it + 1, rays, "non-finite stage-1 loss");
    tape.backward(loss);
    const double lr = schedule.at(it);
    adam.step(model.params, bind.gradients(), lr);
    const long done = it + 1;
    if (done % config.log_interval == 0 || done == config.iterations) {
      LossRecord rec{done, value, 0.0, 0.0, psnr_from_mse(value / 3.0), lr, detail::seconds_since(t0)};
      log.append(rec);
      summary.records.push_back(rec);
      if (io.on_record) io.on_record(rec);
    }
    if (config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done < config.iterations)
      save_model(io.checkpoint.string(), model, 1, done, &adam);
  }
  summary.last_iteration = std::max(start, config.iterations);
  save_model(io.checkpoint.string(), model, 1, summary.last_iteration, &adam);
  return summary;
}

struct Stage2Data {
  std::vector<const FeatureMap*> features;              // by view id
  std::map<int, const PseudoLabelMap*> pseudo_labels;  // by test view id
};

template <class T>
struct Stage2Batch {
  std::vector<Ray> rays;
  std::vector<int> targets;
  std::vector<T> lambdas;
  std::vector<bool> pseudo;
  std::vector<bool> valid;  // false for ignore-labelled rays
  std::size_t labelled = 0;
};

// Ground-truth rays from train-labeled views followed by pseudo-label rays
// from test views.
template <class T>
Stage2Batch<T> stage2_batch(const Scene& scene, const Stage2Data& data, const TrainConfig& config, long iteration) {
  Stage2Batch<T> b;
  const auto total = static_cast<std::size_t>(config.ray_batch_size);
  const bool has_test = !scene.views_in({SplitTag::kTest}).empty();
  const std::size_t pseudo =
      has_test ? static_cast<std::size_t>(std::llround(config.pseudo_mix_fraction * static_cast<double>(total))) : 0;
  const std::size_t gt = total - pseudo;
  const auto it = static_cast<std::uint64_t>(iteration);
  if (gt > 0) {
    auto rays = sample_ray_batch(scene, gt, {SplitTag::kTrainLabeled}, mix_seed(config.rng_seed, 3 * it));
    for (const Ray& r : rays) {
      const View& v = scene.views[static_cast<std::size_t>(r.view_id)];
      if (!v.labels) throw Error("stage 2: train-labeled view " + v.name + " has no label map");
      b.targets.push_back(v.labels->at(r.pixel_x(), r.pixel_y()));
      b.lambdas.push_back(static_cast<T>(config.lambda_train));
      b.pseudo.push_back(false);
      b.rays.push_back(r);
    }
  }
  if (pseudo > 0) {
    auto rays = sample_ray_batch(scene, pseudo, {SplitTag::kTest}, mix_seed(config.rng_seed, 3 * it + 1));
    for (const Ray& r : rays) {
      auto found = data.pseudo_labels.find(r.view_id);
      if (found == data.pseudo_labels.end() || found->second == nullptr)
        throw Error("stage 2: missing pseudo-label map for test view " +
                    scene.views[static_cast<std::size_t>(r.view_id)].name);
      b.targets.push_back(found->second->labels.at(r.pixel_x(), r.pixel_y()));
      b.lambdas.push_back(static_cast<T>(config.lambda_pseudo));
      b.pseudo.push_back(true);
      b.rays.push_back(r);
    }
  }
  for (std::size_t r = 0; r < b.targets.size(); ++r) {
    const bool valid = b.targets[r] != kIgnoreLabel;
    b.valid.push_back(valid);
    if (valid) {
      ++b.labelled;
    } else {
      b.lambdas[r] = T(0);
      b.targets[r] = 0;
    }
  }
  return b;
}

// Prepares a stage-1 model for stage 2: drops any previous head, freezes
// the field and attaches a freshly initialised fusion head.
template <class T>
void attach_fusion_head(Model<T>& model, const FusionConfig& fusion, std::uint64_t seed) {
  model.params.erase_prefix(kFusionPrefix);
  freeze_density(model.params);
  freeze_colour(model.params);
  FusionConfig f = fusion;
  f.base_dim = model.field.base_feature_dim;
  init_fusion_params(model.params, f, seed);
  if (!f.use_prior) zero_cross_attention_output(model.params, f);
  model.fusion = f;
}

struct Stage2Step {
  double loss = 0.0;
  double loss_train = 0.0;
  double loss_pseudo = 0.0;
  std::size_t clamped = 0;
};

// One forward/backward pass over a stage-2 batch. Returns the loss pieces
// and leaves gradients in `bind`.
template <class T>
Stage2Step stage2_forward_backward(const Model<T>& model, nn::Binding<T>& bind, const Stage2Batch<T>& batch,
                                   const Stage2Data& data, const TrainConfig& config, std::uint64_t sample_seed) {
  const SampleBatch<T> b = build_sample_batch<T>(batch.rays, config.samples_per_ray, config.stratified, sample_seed);
  ag::Tape<T>& tape = bind.tape();
  const FieldVars<T> f = field_forward(bind, model.field, b.points, b.directions);
  const ag::Var<T> prior = tape.constant(ray_priors<T>(batch.rays, data.features, model.fusion->prior_dim));
  const SemanticVars<T> s = fusion_forward(bind, *model.fusion, f.base, b.depth01, prior, b.samples);
  const ag::Var<T> logits = composite(f.sigma, s.s2, b.deltas, b.samples);
  Stage2Step out;
  if (batch.labelled == 0) return out;
  const ag::Var<T> loss = ag::weighted_softmax_cross_entropy(logits, batch.targets, batch.lambdas,
                                                             static_cast<T>(batch.labelled), T(kProbabilityFloor));
  out.loss = static_cast<double>(loss.value()(0, 0));
  // Unweighted per-source cross-entropy for the log.
  std::size_t n_train = 0, n_pseudo = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto i = static_cast<std::size_t>(r);
    if (!batch.valid[i]) continue;
    const ag::RowVector<double> p = softmax<double>(logits.value().row(r).template cast<double>());
    double prob = p(batch.targets[i]);
    if (!(prob > kProbabilityFloor)) {
      prob = kProbabilityFloor;
      ++out.clamped;
    }
    (batch.pseudo[i] ? out.loss_pseudo : out.loss_train) -= std::log(prob);
    ++(batch.pseudo[i] ? n_pseudo : n_train);
  }
  if (n_train) out.loss_train /= static_cast<double>(n_train);
  if (n_pseudo) out.loss_pseudo /= static_cast<double>(n_pseudo);
  if (std::isfinite(out.loss)) tape.backward(loss);
  return out;
}

template <class T>
TrainSummary train_stage2(const Scene& scene, Model<T>& model, const Stage2Data& data, const TrainConfig& config,
                          const TrainIo& io) {
  config.validate();
  scene.validate(/*require_labeled=*/true);
  if (!model.fusion) throw Error("train_stage2: model has no fusion head (attach one to a stage-1 model first)");
  for (int v : scene.views_in({SplitTag::kTest}))
    if (config.pseudo_mix_fraction > 0.0 && !data.pseudo_labels.count(v))
      throw Error("train_stage2: missing pseudo-label map for test view " + scene.views[static_cast<std::size_t>(v)].name);
  nn::Adam<T> adam;
  long start = 0;
  if (io.resume) {
    LoadedModel<T> loaded = load_model<T>(io.resume->string());
    if (loaded.stage != 2 || !loaded.model.fusion) throw Error("resume: not a stage-2 checkpoint");
    model = std::move(loaded.model);
    adam = std::move(loaded.optimizer);
    start = loaded.iteration;
  }
  if (!io.resume && !io.log.empty()) std::filesystem::remove(io.log);
  LossLog log = io.log.empty() ? LossLog() : LossLog(io.log);
  log.set_last(start);
  const auto schedule = config.schedule();
  const auto t0 = std::chrono::steady_clock::now();
  TrainSummary summary;
  summary.first_iteration = start;
  for (long it = start; it < config.iterations; ++it) {
    const Stage2Batch<T> batch = stage2_batch<T>(scene, data, config, it);
    ag::Tape<T> tape;
    nn::Binding<T> bind(tape, model.params);
    const Stage2Step step =
        stage2_forward_backward(model, bind, batch, data, config, mix_seed(config.rng_seed, 3 * static_cast<std::uint64_t>(it) + 2));
    if (!std::isfinite(step.loss)) detail::dump_batch(io.checkpoint, it + 1, batch.rays, "non-finite stage-2 loss");
    summary.clamped += step.clamped;
    const double lr = schedule.at(it);
    adam.step(model.params, bind.gradients(), lr);
    const long done = it + 1;
    if (done % config.log_interval == 0 || done == config.iterations) {
      LossRecord rec{done, 0.0, step.loss_train, step.loss_pseudo, 0.0, lr, detail::seconds_since(t0)};
      log.append(rec);
      summary.records.push_back(rec);
      if (io.on_record) io.on_record(rec);
    }
    if (config.checkpoint_interval > 0 && done % config.checkpoint_interval == 0 && done < config.iterations)
      save_model(io.checkpoint.string(), model, 2, done, &adam);
  }
  summary.last_iteration = std::max(start, config.iterations);
  save_model(io.checkpoint.string(), model, 2, summary.last_iteration, &adam);
  return summary;
}

}  // namespace semfield
