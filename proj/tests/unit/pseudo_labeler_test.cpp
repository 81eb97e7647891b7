#include <gtest/gtest.h>

#include <algorithm>

#include "semfield/pseudo_labeler.hpp"
#include "test_support.hpp"

namespace semfield {
namespace {

// A feature map whose grid matches the image one cell per pixel, so the
// lookup at a pixel centre returns exactly that pixel's cell.
FeatureMap per_pixel_map(int w, int h, int dim) {
  FeatureMap f;
  f.grid_w = f.source_w = w;
  f.grid_h = f.source_h = h;
  f.dim = dim;
  f.backend_id = "test";
  f.grid.assign(static_cast<std::size_t>(w) * h * dim, 0.0f);
  return f;
}

void set_cell(FeatureMap& f, int x, int y, std::initializer_list<float> v) { std::copy(v.begin(), v.end(), f.cell(y, x).begin()); }

FeatureMap random_map(int w, int h, int dim, std::uint64_t seed) {
  FeatureMap f = per_pixel_map(w, h, dim);
  Rng rng(seed);
  for (float& v : f.grid) v = static_cast<float>(rng.uniform(-1, 1));
  return f;
}

LabelMap random_labels(int w, int h, int classes, double labeled_fraction, std::uint64_t seed) {
  LabelMap l(w, h);
  Rng rng(seed);
  for (auto& v : l.data)
    if (rng.uniform() < labeled_fraction) v = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(classes)));
  return l;
}

ClassCentroids centroids_of(std::initializer_list<std::initializer_list<double>> rows) {
  ClassCentroids c;
  c.dim = static_cast<int>(rows.begin()->size());
  for (const auto& r : rows) {
    c.centroids.insert(c.centroids.end(), r.begin(), r.end());
    c.counts.push_back(1);
  }
  return c;
}

TEST(ComputeCentroids, OnePixelPerClass) {
  FeatureMap f = per_pixel_map(2, 1, 2);
  set_cell(f, 0, 0, {1, 2});
  set_cell(f, 1, 0, {3, -4});
  LabelMap l(2, 1);
  l.at(0, 0) = 0;
  l.at(1, 0) = 1;
  const LabeledFeatureView v{&f, &l};
  const ClassCentroids c = compute_centroids(std::span(&v, 1), 2);
  EXPECT_EQ(c.counts, (std::vector<std::size_t>{1, 1}));
  EXPECT_EQ(c.centroids, (std::vector<double>{1, 2, 3, -4}));
}

TEST(ComputeCentroids, TwoPixelsAverage) {
  FeatureMap f = per_pixel_map(3, 1, 2);
  set_cell(f, 0, 0, {1, 2});
  set_cell(f, 2, 0, {3, 8});
  LabelMap l(3, 1);
  l.at(0, 0) = 0;
  l.at(2, 0) = 0;
  const LabeledFeatureView v{&f, &l};
  const ClassCentroids c = compute_centroids(std::span(&v, 1), 2);
  EXPECT_EQ(c.counts[0], 2u);
  EXPECT_EQ(c.row(0)[0], 2.0);
  EXPECT_EQ(c.row(0)[1], 5.0);
  EXPECT_FALSE(c.valid(1));
  EXPECT_EQ(c.invalid_classes(), std::vector<int>{1});
}

TEST(ComputeCentroids, MatchesBruteForceAccumulation) {
  const int classes = 4, dim = 6;
  std::vector<FeatureMap> maps;
  std::vector<LabelMap> labels;
  for (int v = 0; v < 3; ++v) {
    maps.push_back(random_map(7, 5, dim, 10 + static_cast<std::uint64_t>(v)));
    labels.push_back(random_labels(7, 5, classes, 0.5, 20 + static_cast<std::uint64_t>(v)));
  }
  std::vector<LabeledFeatureView> views;
  for (int v = 0; v < 3; ++v) views.push_back({&maps[static_cast<std::size_t>(v)], &labels[static_cast<std::size_t>(v)]});
  const ClassCentroids got = compute_centroids(views, classes);

  std::vector<std::vector<double>> sums(classes, std::vector<double>(dim, 0.0));
  std::vector<int> counts(classes, 0);
  int labeled = 0;
  for (int v = 0; v < 3; ++v)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 7; ++x) {
        const int l = labels[static_cast<std::size_t>(v)].at(x, y);
        if (l == kIgnoreLabel) continue;
        ++labeled;
        ++counts[static_cast<std::size_t>(l)];
        for (int d = 0; d < dim; ++d) sums[static_cast<std::size_t>(l)][static_cast<std::size_t>(d)] += maps[static_cast<std::size_t>(v)].cell(y, x)[d];
      }
  EXPECT_GE(labeled, 40);
  for (int c = 0; c < classes; ++c) {
    ASSERT_EQ(got.counts[static_cast<std::size_t>(c)], static_cast<std::size_t>(counts[static_cast<std::size_t>(c)]));
    for (int d = 0; d < dim; ++d) EXPECT_NEAR(got.row(c)[d], sums[static_cast<std::size_t>(c)][static_cast<std::size_t>(d)] / counts[static_cast<std::size_t>(c)], 1e-6);
  }
}

TEST(ComputeCentroids, ViewOrderDoesNotMatter) {
  std::vector<FeatureMap> maps;
  std::vector<LabelMap> labels;
  for (int v = 0; v < 4; ++v) {
    maps.push_back(random_map(9, 6, 5, 30 + static_cast<std::uint64_t>(v)));
    labels.push_back(random_labels(9, 6, 3, 0.7, 40 + static_cast<std::uint64_t>(v)));
  }
  std::vector<LabeledFeatureView> views;
  for (std::size_t v = 0; v < 4; ++v) views.push_back({&maps[v], &labels[v]});
  const ClassCentroids a = compute_centroids(views, 3);
  std::reverse(views.begin(), views.end());
  std::swap(views[0], views[2]);
  const ClassCentroids b = compute_centroids(views, 3);
  EXPECT_EQ(a.counts, b.counts);
  for (std::size_t i = 0; i < a.centroids.size(); ++i) EXPECT_NEAR(a.centroids[i], b.centroids[i], 1e-6);
}

TEST(ComputeCentroids, NoLabeledPixelsIsAnError) {
  FeatureMap f = per_pixel_map(2, 2, 2);
  LabelMap l(2, 2);
  const LabeledFeatureView v{&f, &l};
  EXPECT_THROW(compute_centroids(std::span(&v, 1), 2), Error);
}

TEST(AssignPseudoLabels, FeatureAtCentroidTakesItsClass) {
  const ClassCentroids c = centroids_of({{0, 0}, {4, 0}, {0, 1}, {3, 3}});
  FeatureMap f = per_pixel_map(1, 1, 2);
  set_cell(f, 0, 0, {3, 3});
  const PseudoLabelMap p = assign_pseudo_labels(f, c);
  EXPECT_EQ(p.labels.at(0, 0), 3);
  EXPECT_NEAR(p.margins[0], std::sqrt(10.0), 1e-6);  // runner-up is class 1
}

TEST(AssignPseudoLabels, SingleValidClassLabelsEverythingWithZeroMargin) {
  ClassCentroids c = centroids_of({{0, 0}, {1, 1}, {2, 2}});
  c.counts = {0, 5, 0};
  const PseudoLabelMap p = assign_pseudo_labels(random_map(4, 3, 2, 1), c);
  for (auto l : p.labels.data) EXPECT_EQ(l, 1);
  for (float m : p.margins) EXPECT_EQ(m, 0.0f);
}

TEST(AssignPseudoLabels, FourPixelHandCase) {
  const ClassCentroids c = centroids_of({{0, 0}, {2, 0}});
  FeatureMap f = per_pixel_map(4, 1, 2);
  set_cell(f, 0, 0, {-1, 0});    // d = (1, 3)
  set_cell(f, 1, 0, {0.9, 0});   // d = (0.9, 1.1)
  set_cell(f, 2, 0, {1.5, 1});   // d = (sqrt 3.25, sqrt 1.25)
  set_cell(f, 3, 0, {5, -4});    // d = (sqrt 41, 5)
  const PseudoLabelMap p = assign_pseudo_labels(f, c);
  EXPECT_EQ(p.labels.data, (std::vector<std::uint8_t>{0, 0, 1, 1}));
  EXPECT_NEAR(p.margins[0], 2.0, 1e-6);
  EXPECT_NEAR(p.margins[1], 0.2, 1e-6);
  EXPECT_NEAR(p.margins[2], std::sqrt(3.25) - std::sqrt(1.25), 1e-6);
  EXPECT_NEAR(p.margins[3], std::sqrt(41.0) - 5.0, 1e-6);
}

TEST(AssignPseudoLabels, TiesGoToLowestClass) {
  const ClassCentroids c = centroids_of({{5, 5}, {-1, 0}, {1, 0}});
  FeatureMap f = per_pixel_map(1, 1, 2);
  const PseudoLabelMap p = assign_pseudo_labels(f, c);
  EXPECT_EQ(p.labels.at(0, 0), 1);
  EXPECT_EQ(p.margins[0], 0.0f);
}

TEST(AssignPseudoLabels, MatchesBruteForceOnRandomMaps) {
  const int classes = 5, dim = 8;
  const FeatureMap f = random_map(20, 16, dim, 77);
  ClassCentroids c;
  c.dim = dim;
  Rng rng(78);
  for (int i = 0; i < classes * dim; ++i) c.centroids.push_back(rng.uniform(-1, 1));
  c.counts.assign(classes, 3);
  for (const DistanceMetric metric : {DistanceMetric::kEuclidean, DistanceMetric::kCosine}) {
    c.metric = metric;
    const PseudoLabelMap p = assign_pseudo_labels(f, c);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 20; ++x) {
        std::vector<double> d(classes);
        for (int k = 0; k < classes; ++k) {
          const auto cell = f.cell(y, x);
          double dot = 0, n1 = 0, n2 = 0, sq = 0;
          for (int j = 0; j < dim; ++j) {
            const double a = cell[j], b = c.row(k)[j];
            dot += a * b;
            n1 += a * a;
            n2 += b * b;
            sq += (a - b) * (a - b);
          }
          d[static_cast<std::size_t>(k)] = metric == DistanceMetric::kEuclidean ? std::sqrt(sq) : 1 - dot / std::sqrt(n1 * n2);
        }
        const auto best = std::min_element(d.begin(), d.end()) - d.begin();
        EXPECT_EQ(p.labels.at(x, y), best);
        std::vector<double> sorted = d;
        std::sort(sorted.begin(), sorted.end());
        EXPECT_NEAR(p.margins[static_cast<std::size_t>(y) * 20 + x], sorted[1] - sorted[0], 1e-5);
        EXPECT_GE(p.margins[static_cast<std::size_t>(y) * 20 + x], 0.0f);
      }
  }
}

TEST(AssignPseudoLabels, UniformFeatureScalingKeepsLabels) {
  const FeatureMap f = random_map(10, 10, 4, 5);
  const LabelMap l = random_labels(10, 10, 3, 0.4, 6);
  const LabeledFeatureView v{&f, &l};
  const PseudoLabelMap a = assign_pseudo_labels(f, compute_centroids(std::span(&v, 1), 3));
  for (double scale : {0.01, 3.0, 250.0}) {
    FeatureMap g = f;
    for (float& x : g.grid) x = static_cast<float>(x * scale);
    const LabeledFeatureView w{&g, &l};
    EXPECT_EQ(assign_pseudo_labels(g, compute_centroids(std::span(&w, 1), 3)).labels.data, a.labels.data) << scale;
  }
}

TEST(AssignPseudoLabels, NoValidClassIsAnError) {
  ClassCentroids c = centroids_of({{0, 0}, {1, 1}});
  c.counts = {0, 0};
  EXPECT_THROW(assign_pseudo_labels(per_pixel_map(2, 2, 2), c), Error);
  EXPECT_THROW(assign_pseudo_labels(per_pixel_map(2, 2, 3), centroids_of({{0, 0}})), Error);
}

// Nearest-centroid labels on the labeled training pixels beat predicting
// the most frequent class everywhere.
TEST(AssignPseudoLabels, BeatsMajorityBaselineOnToyScene) {
  const Scene scene = testing::small_scene(48, 4);
  const StubBackend stub(8, 4);
  std::vector<FeatureMap> maps;
  std::vector<const LabelMap*> labels;
  for (const View& v : scene.views)
    if (v.labels) {
      maps.push_back(stub.extract(v.image));
      labels.push_back(&*v.labels);
    }
  std::vector<LabeledFeatureView> views;
  for (std::size_t i = 0; i < maps.size(); ++i) views.push_back({&maps[i], labels[i]});
  const ClassCentroids c = compute_centroids(views, scene.class_count);
  std::size_t correct = 0, total = 0;
  std::vector<std::size_t> freq(static_cast<std::size_t>(scene.class_count), 0);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const PseudoLabelMap p = assign_pseudo_labels(maps[i], c);
    for (std::size_t k = 0; k < labels[i]->data.size(); ++k) {
      const auto l = labels[i]->data[k];
      if (l == kIgnoreLabel) continue;
      ++total;
      ++freq[l];
      correct += p.labels.data[k] == l;
    }
  }
  const std::size_t majority = *std::max_element(freq.begin(), freq.end());
  EXPECT_GT(correct, majority);
}

TEST(PseudoLabels, SaveLoadRoundTrip) {
  testing::TempDir dir;
  const ClassCentroids c = centroids_of({{0, 0}, {2, 0}});
  const PseudoLabelMap p = assign_pseudo_labels(random_map(5, 4, 2, 3), c, 7);
  save_pseudo_labels(dir.path(), "007", p);
  save_centroids(dir.path(), c);
  const PseudoLabelMap q = load_pseudo_labels(dir.path(), "007", 7);
  EXPECT_EQ(q.labels.data, p.labels.data);
  EXPECT_EQ(q.margins, p.margins);
  const ClassCentroids back = load_centroids(dir.path());
  EXPECT_EQ(back.centroids, c.centroids);
  EXPECT_EQ(back.counts, c.counts);
  EXPECT_THROW(load_pseudo_labels(dir.path(), "008", 8), Error);
}

}  // namespace
}  // namespace semfield
