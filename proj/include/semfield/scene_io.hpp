#pragma once

// Posed multi-view scenes with sparse label maps: on-disk format, camera
// rays and random ray batches.
//
// Camera convention: right-handed camera frame, x to the right, y up, the
// camera looks down -z. Image coordinates are continuous with the origin at
// the top-left corner of the top-left pixel, so the centre of pixel (i, j)
// sits at (i + 0.5, j + 0.5).

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfield/common.hpp"
#include "semfield/image.hpp"

namespace semfield {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct CameraModel {
  int width = 0;
  int height = 0;
  double focal = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  Mat4 pose = Mat4::Identity();  // camera-to-world, rigid

  Vec3 centre() const { return pose.block<3, 1>(0, 3); }
  Mat3 rotation() const { return pose.block<3, 3>(0, 0); }

  void validate() const {
    if (width <= 0 || height <= 0) throw Error("camera: image size must be positive");
    if (!(focal > 0.0)) throw Error("camera: focal length must be positive");
    if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height))
      throw Error("camera: principal point outside the image");
    const Mat3 r = rotation();
    if ((r.transpose() * r - Mat3::Identity()).norm() >= 1e-5) throw Error("camera: pose rotation is not orthonormal");
    if (pose.row(3) != Eigen::RowVector4d(0, 0, 0, 1)) throw Error("camera: pose bottom row must be (0, 0, 0, 1)");
  }

  // World-space unit direction through continuous pixel (x, y).
  Vec3 direction(double x, double y) const {
    const Vec3 local((x - cx) / focal, -(y - cy) / focal, -1.0);
    return (rotation() * local).normalized();
  }

  // Projects a world point; returns (x, y, depth along -z). Depth <= 0 means
  // the point is behind the camera.
  Vec3 project(const Vec3& world) const {
    const Vec3 local = rotation().transpose() * (world - centre());
    const double depth = -local.z();
    return {cx + focal * local.x() / depth, cy - focal * local.y() / depth, depth};
  }

  bool operator==(const CameraModel&) const = default;
};

enum class SplitTag { kTrainLabeled, kTrainUnlabeled, kTest };

inline std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kTrainLabeled:
      return "train-labeled";
    case SplitTag::kTrainUnlabeled:
      return "train-unlabeled";
    case SplitTag::kTest:
      return "test";
  }
  return "?";
}

inline SplitTag parse_split_tag(const std::string& text) {
  if (text == "train-labeled") return SplitTag::kTrainLabeled;
  if (text == "train-unlabeled") return SplitTag::kTrainUnlabeled;
  if (text == "test") return SplitTag::kTest;
  throw Error("unknown split tag '" + text + "'");
}

inline bool is_training(SplitTag tag) { return tag != SplitTag::kTest; }

struct View {
  std::string name;  // file stem, e.g. "007"
  Image image;
  CameraModel camera;
  std::optional<LabelMap> labels;        // sparse training supervision
  std::optional<LabelMap> ground_truth;  // dense evaluation labels, never used for training
  SplitTag split = SplitTag::kTest;
};

struct Scene {
  std::vector<View> views;
  int class_count = 0;
  std::vector<std::string> class_names;
  double near = 0.0;
  double far = 1.0;

  std::vector<int> views_in(const std::set<SplitTag>& pool) const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(views.size()); ++i)
      if (pool.count(views[static_cast<std::size_t>(i)].split)) out.push_back(i);
    return out;
  }

  int labeled_view_count() const { return static_cast<int>(views_in({SplitTag::kTrainLabeled}).size()); }

  void validate(bool require_labeled = false) const {
    if (class_count <= 0 || class_count >= kIgnoreLabel) throw Error("scene: class count must be in [1, 255)");
    if (!(near >= 0.0 && near < far)) throw Error("scene: require 0 <= near < far");
    for (const View& v : views) {
      v.camera.validate();
      if (v.image.width != v.camera.width || v.image.height != v.camera.height)
        throw Error("scene: image size of view " + v.name + " does not match its camera");
      for (const auto* map : {&v.labels, &v.ground_truth}) {
        if (!map->has_value()) continue;
        const LabelMap& labels = **map;
        if (labels.width != v.image.width || labels.height != v.image.height)
          throw Error("scene: label map size mismatch for view " + v.name);
        for (std::uint8_t l : labels.data)
          if (l != kIgnoreLabel && l >= class_count)
            throw Error("scene: label out of range (" + std::to_string(l) + ") in view " + v.name);
      }
    }
    if (require_labeled && labeled_view_count() == 0) throw Error("scene: no train-labeled view");
  }
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3(0, 0, -1);
  double near = 0.0;
  double far = 1.0;
  double x = 0.0;  // continuous pixel coordinates
  double y = 0.0;
  int view_id = -1;

  int pixel_x() const { return static_cast<int>(std::floor(x)); }
  int pixel_y() const { return static_cast<int>(std::floor(y)); }
};

inline json camera_to_json(const CameraModel& cam) {
  std::vector<double> m(16);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m[static_cast<std::size_t>(r * 4 + c)] = cam.pose(r, c);
  return json{{"width", cam.width},
              {"height", cam.height},
              {"focal", cam.focal},
              {"principal_point", {cam.cx, cam.cy}},
              {"camera_to_world", m}};
}

inline CameraModel camera_from_json(const json& j) {
  CameraModel cam;
  cam.width = j.at("width").get<int>();
  cam.height = j.at("height").get<int>();
  cam.focal = j.at("focal").get<double>();
  cam.cx = j.at("principal_point").at(0).get<double>();
  cam.cy = j.at("principal_point").at(1).get<double>();
  const auto m = j.at("camera_to_world").get<std::vector<double>>();
  if (m.size() != 16) throw Error("camera_to_world must hold 16 row-major values");
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) cam.pose(r, c) = m[static_cast<std::size_t>(r * 4 + c)];
  return cam;
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// Layout:
//   images/NNN.png        8-bit RGB
//   labels/NNN.png        8-bit class indices, 255 = ignore (labeled views only)
//   ground_truth/NNN.png  optional dense evaluation labels
//   poses.json            per-view intrinsics + row-major 4x4 camera-to-world
//   split.json            view name -> split tag
//   meta.json             class count, class names, near, far
inline void save_scene(const Scene& scene, const fs::path& dir) {
  scene.validate();
  fs::create_directories(dir / "images");
  json poses = json::object();
  json split = json::object();
  bool any_labels = false;
  bool any_truth = false;
  for (const View& v : scene.views) {
    write_png((dir / "images" / (v.name + ".png")).string(), v.image);
    poses[v.name] = camera_to_json(v.camera);
    split[v.name] = to_string(v.split);
    if (v.labels) {
      if (!any_labels) fs::create_directories(dir / "labels");
      any_labels = true;
      write_png((dir / "labels" / (v.name + ".png")).string(), *v.labels);
    }
    if (v.ground_truth) {
      if (!any_truth) fs::create_directories(dir / "ground_truth");
      any_truth = true;
      write_png((dir / "ground_truth" / (v.name + ".png")).string(), *v.ground_truth);
    }
  }
  write_json_file(dir / "poses.json", json{{"version", 1}, {"views", poses}});
  write_json_file(dir / "split.json", split);
  write_json_file(dir / "meta.json", json{{"class_count", scene.class_count},
                                          {"class_names", scene.class_names},
                                          {"near", scene.near},
                                          {"far", scene.far}});
}

inline Scene load_scene(const fs::path& dir) {
  if (!fs::is_directory(dir / "images")) throw Error("scene: missing images/ directory in " + dir.string());
  Scene scene;
  const json meta = read_json_file(dir / "meta.json");
  scene.class_count = meta.at("class_count").get<int>();
  scene.class_names = meta.value("class_names", std::vector<std::string>{});
  scene.near = meta.at("near").get<double>();
  scene.far = meta.at("far").get<double>();
  const json poses = read_json_file(dir / "poses.json").at("views");
  const json split = read_json_file(dir / "split.json");

  std::vector<fs::path> image_files;
  for (const auto& entry : fs::directory_iterator(dir / "images"))
    if (entry.path().extension() == ".png") image_files.push_back(entry.path());
  std::sort(image_files.begin(), image_files.end());

  for (const fs::path& file : image_files) {
    View v;
    v.name = file.stem().string();
    if (!poses.contains(v.name)) throw Error("scene: missing pose for view '" + v.name + "' (" + file.string() + ")");
    if (!split.contains(v.name)) throw Error("scene: missing split entry for view '" + v.name + "'");
    v.camera = camera_from_json(poses.at(v.name));
    v.split = parse_split_tag(split.at(v.name).get<std::string>());
    v.image = read_image_png(file.string());
    const fs::path label_file = dir / "labels" / (v.name + ".png");
    if (fs::exists(label_file)) v.labels = read_label_png(label_file.string());
    const fs::path truth_file = dir / "ground_truth" / (v.name + ".png");
    if (fs::exists(truth_file)) v.ground_truth = read_label_png(truth_file.string());
    scene.views.push_back(std::move(v));
  }
  scene.validate();
  return scene;
}

inline std::vector<Ray> generate_rays(const CameraModel& camera, std::span<const std::array<double, 2>> pixels,
                                      double near, double far, int view_id = -1) {
  if (!(near >= 0.0 && near < far)) throw Error("generate_rays: require 0 <= near < far");
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  const Vec3 origin = camera.centre();
  for (const auto& [x, y] : pixels) {
    if (!(x >= 0.0 && x <= camera.width && y >= 0.0 && y <= camera.height))
      throw Error("generate_rays: pixel (" + std::to_string(x) + ", " + std::to_string(y) + ") out of bounds");
    rays.push_back(Ray{origin, camera.direction(x, y), near, far, x, y, view_id});
  }
  return rays;
}

// Rays through the centre of every pixel of one view, row-major.
inline std::vector<Ray> view_rays(const Scene& scene, int view_id) {
  const CameraModel& cam = scene.views.at(static_cast<std::size_t>(view_id)).camera;
  std::vector<std::array<double, 2>> pixels;
  pixels.reserve(static_cast<std::size_t>(cam.width) * cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) pixels.push_back({x + 0.5, y + 0.5});
  return generate_rays(cam, pixels, scene.near, scene.far, view_id);
}

// Uniform (view, pixel) draws from the views whose split is in `pool`.
inline std::vector<Ray> sample_ray_batch(const Scene& scene, std::size_t count, const std::set<SplitTag>& pool,
                                         std::uint64_t rng_seed) {
  const std::vector<int> candidates = scene.views_in(pool);
  if (candidates.empty()) throw Error("sample_ray_batch: the requested split pool contains no views");
  Rng rng(rng_seed);
  std::vector<Ray> rays;
  rays.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int view_id = candidates[rng.below(candidates.size())];
    const CameraModel& cam = scene.views[static_cast<std::size_t>(view_id)].camera;
    const double x = static_cast<double>(rng.below(static_cast<std::uint64_t>(cam.width))) + 0.5;
    const double y = static_cast<double>(rng.below(static_cast<std::uint64_t>(cam.height))) + 0.5;
    rays.push_back(Ray{cam.centre(), cam.direction(x, y), scene.near, scene.far, x, y, view_id});
  }
  return rays;
}

}  // namespace semfield
