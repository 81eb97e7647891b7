#include <gtest/gtest.h>

#include "semfield/synthetic_scenes.hpp"
#include "test_support.hpp"

namespace semfield {
namespace {

// Independent intersector: march the ray in small steps and report the
// first primitive whose closed set contains the sample point.
int marched_class(const ToySceneSpec& spec, const Vec3& origin, const Vec3& dir) {
  constexpr double kStep = 5e-4;
  for (double t = spec.near; t <= spec.far; t += kStep) {
    const Vec3 p = origin + t * dir;
    for (const Primitive& prim : spec.primitives) {
      if (prim.shape == Shape::kSphere) {
        if ((p - prim.position).norm() <= prim.size.x()) return prim.class_index;
      } else {
        const Vec3 lo = prim.position - prim.size;
        const Vec3 hi(prim.position.x() + prim.size.x(), prim.shape == Shape::kPlane ? prim.position.y() : prim.position.y() + prim.size.y(),
                      prim.position.z() + prim.size.z());
        if ((p.array() >= lo.array()).all() && (p.array() <= hi.array()).all()) return prim.class_index;
      }
    }
  }
  return kIgnoreLabel;
}

TEST(ToyScene, SphereOnPlaneHasOneViewPerCameraAndSphereLabels) {
  const ToySceneSpec spec = testing::small_spec(24, 8);
  const Scene scene = generate_toy_scene(spec);
  ASSERT_EQ(scene.views.size(), 8u);
  EXPECT_EQ(scene.class_count, 2);
  for (const View& v : scene.views) {
    ASSERT_TRUE(v.ground_truth.has_value());
    // the ring looks at a point inside the sphere, so the centre pixel sees it
    EXPECT_EQ(v.ground_truth->at(12, 12), 1) << v.name;
    EXPECT_FLOAT_EQ(v.image.at(12, 12, 0), dequantize_channel(quantize_channel(0.85f)));
    int sphere = 0;
    for (auto l : v.ground_truth->data) sphere += l == 1;
    EXPECT_GT(sphere, 0);
  }
}

TEST(ToyScene, SameSpecIsBitIdentical) {
  ToySceneSpec spec = testing::small_spec(20, 6);
  spec.ring.jitter_degrees = 5.0;
  spec.labeled_views.clear();
  spec.labeled_fraction = 0.3;
  const Scene a = generate_toy_scene(spec);
  const Scene b = generate_toy_scene(spec);
  ASSERT_EQ(a.views.size(), b.views.size());
  for (std::size_t i = 0; i < a.views.size(); ++i) {
    EXPECT_EQ(a.views[i].image.data, b.views[i].image.data);
    EXPECT_EQ(a.views[i].ground_truth->data, b.views[i].ground_truth->data);
    EXPECT_EQ(a.views[i].camera, b.views[i].camera);
    EXPECT_EQ(a.views[i].split, b.views[i].split);
  }
}

TEST(ToyScene, RenderingOneCameraTwiceIsBitIdentical) {
  const ToySceneSpec spec = testing::small_spec(20, 4);
  const auto cams = ring_cameras(spec);
  const auto [img1, lab1] = render_toy_view(spec, cams[2]);
  const auto [img2, lab2] = render_toy_view(spec, cams[2]);
  EXPECT_EQ(img1.data, img2.data);
  EXPECT_EQ(lab1.data, lab2.data);
}

TEST(ToyScene, SingleCameraAimedAtSphereCentreSeesItAtImageCentre) {
  ToySceneSpec spec = testing::small_spec(31, 1);
  spec.labeled_views = {0};
  spec.ring.look_at = spec.primitives[1].position;
  const Scene scene = generate_toy_scene(spec);
  const CameraModel& cam = scene.views[0].camera;
  const Vec3 p = cam.project(spec.primitives[1].position);
  EXPECT_NEAR(p.x(), 15.5, 1e-9);
  EXPECT_NEAR(p.y(), 15.5, 1e-9);
  EXPECT_EQ(scene.views[0].ground_truth->at(15, 15), 1);
}

TEST(ToyScene, LabeledFractionSelectsAtLeastOneView) {
  ToySceneSpec spec = testing::small_spec(16, 10);
  spec.labeled_views.clear();
  spec.labeled_fraction = 0.02;
  const Scene scene = generate_toy_scene(spec);
  EXPECT_EQ(scene.labeled_view_count(), 1);
}

TEST(ToyScene, UnlabeledViewsAreMarked) {
  ToySceneSpec spec = testing::small_spec(16, 5);
  spec.unlabeled_views = {3};
  const Scene scene = generate_toy_scene(spec);
  EXPECT_EQ(scene.views[3].split, SplitTag::kTrainUnlabeled);
  EXPECT_FALSE(scene.views[3].labels.has_value());
  EXPECT_EQ(scene.views[4].split, SplitTag::kTest);
}

TEST(ToyScene, EmptyPrimitiveListIsRejected) {
  ToySceneSpec spec = testing::small_spec();
  spec.primitives.clear();
  EXPECT_THROW(generate_toy_scene(spec), Error);
}

TEST(ToyScene, NonContiguousClassesAreRejected) {
  ToySceneSpec spec = testing::small_spec();
  spec.primitives[1].class_index = 2;
  EXPECT_THROW(generate_toy_scene(spec), Error);
}

TEST(ToyScene, SpecJsonRoundTrip) {
  ToySceneSpec spec = testing::small_spec(20, 6);
  Primitive box;
  box.shape = Shape::kBox;
  box.position = Vec3(0.5, 0.2, -0.4);
  box.size = Vec3(0.2, 0.2, 0.3);
  box.class_index = 2;
  spec.primitives.push_back(box);
  spec.class_names.push_back("box");
  const ToySceneSpec back = toy_spec_from_json(to_json(spec));
  EXPECT_EQ(to_json(back), to_json(spec));
  const Scene a = generate_toy_scene(spec);
  const Scene b = generate_toy_scene(back);
  for (std::size_t i = 0; i < a.views.size(); ++i) EXPECT_EQ(a.views[i].image.data, b.views[i].image.data);
}

TEST(GroundTruthDensity, SphereCentreSurfaceAndFarPoint) {
  const ToySceneSpec spec = testing::small_spec();
  const Primitive& sphere = spec.primitives[1];
  EXPECT_TRUE(ground_truth_density(spec, sphere.position));
  EXPECT_TRUE(ground_truth_density(spec, sphere.position + Vec3(0, sphere.size.x(), 0)));
  EXPECT_FALSE(ground_truth_density(spec, sphere.position + Vec3(0, 2.0 * sphere.bounding_radius(), 0)));
}

TEST(GroundTruthDensity, GroundSlabTopIsInside) {
  const ToySceneSpec spec = testing::small_spec();
  EXPECT_TRUE(ground_truth_density(spec, Vec3(1.0, 0.0, 1.0)));
  EXPECT_TRUE(ground_truth_density(spec, Vec3(1.0, -0.05, 1.0)));
  EXPECT_FALSE(ground_truth_density(spec, Vec3(1.0, 0.01, 1.0)));
}

TEST(ToyScene, LabelsMatchMarchedIntersectorOnRandomPixels) {
  ToySceneSpec spec = testing::small_spec(32, 8);
  Primitive box;
  box.shape = Shape::kBox;
  box.position = Vec3(0.9, 0.25, 0.6);
  box.size = Vec3(0.25, 0.25, 0.25);
  box.albedo = {0.1, 0.3, 0.9};
  box.class_index = 2;
  spec.primitives.push_back(box);
  spec.class_names.push_back("box");
  const Scene scene = generate_toy_scene(spec);
  Rng rng(99);
  int checked = 0;
  for (int i = 0; i < 1200; ++i) {
    const View& v = scene.views[rng.below(scene.views.size())];
    const int x = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.camera.width)));
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(v.camera.height)));
    const Vec3 dir = v.camera.direction(x + 0.5, y + 0.5);
    EXPECT_EQ(v.ground_truth->at(x, y), marched_class(spec, v.camera.centre(), dir)) << v.name << " " << x << "," << y;
    ++checked;
  }
  EXPECT_GE(checked, 1000);
}

}  // namespace
}  // namespace semfield
