#pragma once

// Procedural toy scenes: flat-albedo spheres and boxes on a ground slab,
// viewed from a ring of cameras. Images and dense label maps are produced by
// exact ray casting through pixel centres.

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfield/common.hpp"
#include "semfield/image.hpp"
#include "semfield/scene_io.hpp"

namespace semfield {

enum class Shape { kSphere, kBox, kPlane };

inline std::string to_string(Shape s) {
  switch (s) {
    case Shape::kSphere:
      return "sphere";
    case Shape::kBox:
      return "box";
    case Shape::kPlane:
      return "plane";
  }
  return "?";
}

inline Shape parse_shape(const std::string& s) {
  if (s == "sphere") return Shape::kSphere;
  if (s == "box") return Shape::kBox;
  if (s == "plane") return Shape::kPlane;
  throw Error("unknown primitive shape '" + s + "'");
}

// sphere: size.x is the radius
// box:    size holds the half extents
// plane:  a slab whose top face lies at position.y; size = (half_x, thickness, half_z)
struct Primitive {
  Shape shape = Shape::kSphere;
  Vec3 position = Vec3::Zero();
  Vec3 size = Vec3::Ones();
  std::array<double, 3> albedo{0.5, 0.5, 0.5};
  int class_index = 0;

  Vec3 box_min() const {
    if (shape == Shape::kPlane) return {position.x() - size.x(), position.y() - size.y(), position.z() - size.z()};
    return position - size;
  }
  Vec3 box_max() const {
    if (shape == Shape::kPlane) return {position.x() + size.x(), position.y(), position.z() + size.z()};
    return position + size;
  }

  // Closed-set membership: surface points count as inside.
  bool contains(const Vec3& p) const {
    if (shape == Shape::kSphere) return (p - position).squaredNorm() <= size.x() * size.x();
    const Vec3 lo = box_min();
    const Vec3 hi = box_max();
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }

  // Smallest ray parameter t >= t_min at which the ray enters (or is inside)
  // the primitive.
  std::optional<double> intersect(const Vec3& origin, const Vec3& dir, double t_min) const {
    if (shape == Shape::kSphere) {
      const Vec3 oc = origin - position;
      const double b = oc.dot(dir);
      const double c = oc.squaredNorm() - size.x() * size.x();
      const double disc = b * b - c;
      if (disc < 0.0) return std::nullopt;
      const double root = std::sqrt(disc);
      const double t0 = -b - root;
      const double t1 = -b + root;
      if (t0 >= t_min) return t0;
      if (t1 >= t_min) return t_min;  // origin already inside
      return std::nullopt;
    }
    const Vec3 lo = box_min();
    const Vec3 hi = box_max();
    double t_enter = -std::numeric_limits<double>::infinity();
    double t_exit = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (std::abs(dir[a]) < 1e-15) {
        if (origin[a] < lo[a] || origin[a] > hi[a]) return std::nullopt;
        continue;
      }
      double t0 = (lo[a] - origin[a]) / dir[a];
      double t1 = (hi[a] - origin[a]) / dir[a];
      if (t0 > t1) std::swap(t0, t1);
      t_enter = std::max(t_enter, t0);
      t_exit = std::min(t_exit, t1);
    }
    if (t_enter > t_exit || t_exit < t_min) return std::nullopt;
    return std::max(t_enter, t_min);
  }

  double bounding_radius() const { return shape == Shape::kSphere ? size.x() : (box_max() - box_min()).norm() / 2; }
  Vec3 bounding_centre() const { return shape == Shape::kSphere ? position : (box_max() + box_min()) / 2; }
};

struct CameraRing {
  double radius = 4.0;
  double height = 2.0;
  int count = 16;
  Vec3 look_at = Vec3::Zero();
  double start_angle_degrees = 0.0;
  double jitter_degrees = 0.0;  // uniform angular jitter, drawn from the spec seed
};

struct ToySceneSpec {
  std::vector<Primitive> primitives;
  CameraRing ring;
  int width = 64;
  int height = 64;
  double fov_degrees = 50.0;  // horizontal
  double near = 0.5;
  double far = 8.0;
  std::vector<std::string> class_names;
  std::vector<int> labeled_views;     // explicit train-labeled views; chosen by seed when empty
  double labeled_fraction = 0.02;     // used when labeled_views is empty; at least one view
  std::vector<int> unlabeled_views;   // train-unlabeled; every other view is a test view
  std::uint64_t rng_seed = 0;

  int class_count() const {
    int top = -1;
    for (const auto& p : primitives) top = std::max(top, p.class_index);
    return top + 1;
  }

  double focal() const { return 0.5 * width / std::tan(0.5 * fov_degrees * M_PI / 180.0); }

  void validate() const {
    if (primitives.empty()) throw Error("toy scene: primitive list is empty");
    if (width <= 0 || height <= 0) throw Error("toy scene: image size must be positive");
    if (ring.count <= 0) throw Error("toy scene: camera ring needs at least one camera");
    if (!(near >= 0.0 && near < far)) throw Error("toy scene: require 0 <= near < far");
    std::vector<bool> seen(static_cast<std::size_t>(class_count()), false);
    for (const auto& p : primitives) {
      if (p.class_index < 0) throw Error("toy scene: negative class index");
      seen[static_cast<std::size_t>(p.class_index)] = true;
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
      throw Error("toy scene: class indices must be contiguous from 0");
    for (int v : labeled_views)
      if (v < 0 || v >= ring.count) throw Error("toy scene: labeled view index out of range");
    for (int v : unlabeled_views)
      if (v < 0 || v >= ring.count) throw Error("toy scene: unlabeled view index out of range");
  }
};

inline Mat4 look_at_pose(const Vec3& eye, const Vec3& target, const Vec3& up = Vec3::UnitY()) {
  const Vec3 forward = (target - eye).normalized();
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 true_up = right.cross(forward);
  Mat4 pose = Mat4::Identity();
  pose.block<3, 1>(0, 0) = right;
  pose.block<3, 1>(0, 1) = true_up;
  pose.block<3, 1>(0, 2) = -forward;
  pose.block<3, 1>(0, 3) = eye;
  return pose;
}

inline std::vector<CameraModel> ring_cameras(const ToySceneSpec& spec) {
  Rng rng(mix_seed(spec.rng_seed, 0xCA3E4A));
  std::vector<CameraModel> cams;
  for (int k = 0; k < spec.ring.count; ++k) {
    double angle = spec.ring.start_angle_degrees + 360.0 * k / spec.ring.count;
    if (spec.ring.jitter_degrees > 0.0) angle += rng.uniform(-spec.ring.jitter_degrees, spec.ring.jitter_degrees);
    const double rad = angle * M_PI / 180.0;
    const Vec3 eye(spec.ring.look_at.x() + spec.ring.radius * std::cos(rad), spec.ring.height,
                   spec.ring.look_at.z() + spec.ring.radius * std::sin(rad));
    CameraModel cam;
    cam.width = spec.width;
    cam.height = spec.height;
    cam.focal = spec.focal();
    cam.cx = 0.5 * spec.width;
    cam.cy = 0.5 * spec.height;
    cam.pose = look_at_pose(eye, spec.ring.look_at);
    cams.push_back(cam);
  }
  return cams;
}

struct Hit {
  double t = 0.0;
  int primitive = -1;
};

// Nearest primitive hit within [t_min, t_max]; ties go to the earlier primitive.
inline std::optional<Hit> cast_ray(const ToySceneSpec& spec, const Vec3& origin, const Vec3& dir, double t_min,
                                   double t_max) {
  std::optional<Hit> best;
  for (int i = 0; i < static_cast<int>(spec.primitives.size()); ++i) {
    const auto t = spec.primitives[static_cast<std::size_t>(i)].intersect(origin, dir, t_min);
    if (t && *t <= t_max && (!best || *t < best->t)) best = Hit{*t, i};
  }
  return best;
}

inline bool ground_truth_density(const ToySceneSpec& spec, const Vec3& point) {
  return std::any_of(spec.primitives.begin(), spec.primitives.end(),
                     [&](const Primitive& p) { return p.contains(point); });
}

// Renders one camera: flat albedo colour and the class of the first hit.
// Rays that hit nothing are black and carry the ignore label.
inline std::pair<Image, LabelMap> render_toy_view(const ToySceneSpec& spec, const CameraModel& cam) {
  Image image(cam.width, cam.height);
  LabelMap labels(cam.width, cam.height, kIgnoreLabel);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const Vec3 dir = cam.direction(x + 0.5, y + 0.5);
      const auto hit = cast_ray(spec, cam.centre(), dir, spec.near, spec.far);
      if (!hit) continue;
      const Primitive& p = spec.primitives[static_cast<std::size_t>(hit->primitive)];
      for (int c = 0; c < 3; ++c)
        image.at(x, y, c) = dequantize_channel(quantize_channel(static_cast<float>(p.albedo[static_cast<std::size_t>(c)])));
      labels.at(x, y) = static_cast<std::uint8_t>(p.class_index);
    }
  }
  return {std::move(image), std::move(labels)};
}

inline std::vector<int> choose_labeled_views(const ToySceneSpec& spec) {
  if (!spec.labeled_views.empty()) return spec.labeled_views;
  const int count = std::max(1, static_cast<int>(std::lround(spec.labeled_fraction * spec.ring.count)));
  std::vector<int> order(static_cast<std::size_t>(spec.ring.count));
  for (int i = 0; i < spec.ring.count; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(mix_seed(spec.rng_seed, 0x1AB31));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  order.resize(static_cast<std::size_t>(std::min(count, spec.ring.count)));
  std::sort(order.begin(), order.end());
  return order;
}

inline Scene generate_toy_scene(const ToySceneSpec& spec) {
  spec.validate();
  Scene scene;
  scene.class_count = spec.class_count();
  scene.class_names = spec.class_names;
  if (scene.class_names.size() != static_cast<std::size_t>(scene.class_count)) {
    scene.class_names.clear();
    for (int c = 0; c < scene.class_count; ++c) scene.class_names.push_back("class" + std::to_string(c));
  }
  scene.near = spec.near;
  scene.far = spec.far;
  const auto cams = ring_cameras(spec);
  const auto labeled = choose_labeled_views(spec);
  for (int k = 0; k < static_cast<int>(cams.size()); ++k) {
    View v;
    v.name = view_stem(k);
    v.camera = cams[static_cast<std::size_t>(k)];
    auto [image, labels] = render_toy_view(spec, v.camera);
    v.image = std::move(image);
    v.ground_truth = labels;
    if (std::find(labeled.begin(), labeled.end(), k) != labeled.end()) {
      v.split = SplitTag::kTrainLabeled;
      v.labels = std::move(labels);
    } else if (std::find(spec.unlabeled_views.begin(), spec.unlabeled_views.end(), k) != spec.unlabeled_views.end()) {
      v.split = SplitTag::kTrainUnlabeled;
    } else {
      v.split = SplitTag::kTest;
    }
    scene.views.push_back(std::move(v));
  }
  scene.validate();
  return scene;
}

inline nlohmann::json to_json(const ToySceneSpec& spec) {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : spec.primitives) {
    prims.push_back({{"shape", to_string(p.shape)},
                     {"position", {p.position.x(), p.position.y(), p.position.z()}},
                     {"size", {p.size.x(), p.size.y(), p.size.z()}},
                     {"albedo", p.albedo},
                     {"class", p.class_index}});
  }
  return {{"primitives", prims},
          {"camera_ring",
           {{"radius", spec.ring.radius},
            {"height", spec.ring.height},
            {"count", spec.ring.count},
            {"look_at", {spec.ring.look_at.x(), spec.ring.look_at.y(), spec.ring.look_at.z()}},
            {"start_angle_degrees", spec.ring.start_angle_degrees},
            {"jitter_degrees", spec.ring.jitter_degrees}}},
          {"width", spec.width},
          {"height", spec.height},
          {"fov_degrees", spec.fov_degrees},
          {"near", spec.near},
          {"far", spec.far},
          {"class_names", spec.class_names},
          {"labeled_views", spec.labeled_views},
          {"labeled_fraction", spec.labeled_fraction},
          {"unlabeled_views", spec.unlabeled_views},
          {"rng_seed", spec.rng_seed}};
}

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  if (j.is_number()) return Vec3::Constant(j.get<double>());
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

inline ToySceneSpec toy_spec_from_json(const nlohmann::json& j) {
  ToySceneSpec spec;
  for (const auto& p : j.at("primitives")) {
    Primitive prim;
    prim.shape = parse_shape(p.at("shape").get<std::string>());
    prim.position = vec3_from_json(p.at("position"));
    prim.size = vec3_from_json(p.at("size"));
    prim.albedo = p.at("albedo").get<std::array<double, 3>>();
    prim.class_index = p.at("class").get<int>();
    spec.primitives.push_back(prim);
  }
  const auto& ring = j.at("camera_ring");
  spec.ring.radius = ring.at("radius").get<double>();
  spec.ring.height = ring.at("height").get<double>();
  spec.ring.count = ring.at("count").get<int>();
  spec.ring.look_at = vec3_from_json(ring.value("look_at", nlohmann::json::array({0.0, 0.0, 0.0})));
  spec.ring.start_angle_degrees = ring.value("start_angle_degrees", 0.0);
  spec.ring.jitter_degrees = ring.value("jitter_degrees", 0.0);
  spec.width = j.value("width", spec.width);
  spec.height = j.value("height", spec.height);
  spec.fov_degrees = j.value("fov_degrees", spec.fov_degrees);
  spec.near = j.value("near", spec.near);
  spec.far = j.value("far", spec.far);
  spec.class_names = j.value("class_names", std::vector<std::string>{});
  spec.labeled_views = j.value("labeled_views", std::vector<int>{});
  spec.labeled_fraction = j.value("labeled_fraction", spec.labeled_fraction);
  spec.unlabeled_views = j.value("unlabeled_views", std::vector<int>{});
  spec.rng_seed = j.value("rng_seed", std::uint64_t{0});
  return spec;
}

// One sphere (class 1) on a ground slab (class 0), 16 ring cameras, two
// adjacent labeled views.
inline ToySceneSpec sphere_on_plane_spec(int image_size = 40, int camera_count = 16) {
  ToySceneSpec spec;
  Primitive ground;
  ground.shape = Shape::kPlane;
  ground.position = Vec3(0, 0, 0);
  ground.size = Vec3(2.2, 0.1, 2.2);
  ground.albedo = {0.55, 0.55, 0.55};
  ground.class_index = 0;
  Primitive sphere;
  sphere.shape = Shape::kSphere;
  sphere.position = Vec3(0, 0.6, 0);
  sphere.size = Vec3::Constant(0.6);
  sphere.albedo = {0.85, 0.15, 0.12};
  sphere.class_index = 1;
  spec.primitives = {ground, sphere};
  spec.ring.radius = 3.2;
  spec.ring.height = 2.0;
  spec.ring.count = camera_count;
  spec.ring.look_at = Vec3(0, 0.3, 0);
  spec.width = image_size;
  spec.height = image_size;
  spec.fov_degrees = 55.0;
  spec.near = 1.0;
  spec.far = 6.5;
  spec.class_names = {"ground", "sphere"};
  spec.labeled_views = {0, 1};
  spec.rng_seed = 7;
  return spec;
}

}  // namespace semfield
