#include <gtest/gtest.h>

#include <cstdlib>

#include "semfield/foundation_features.hpp"
#include "test_support.hpp"

namespace semfield {
namespace {

using testing::TempDir;

Image random_image(int w, int h, std::uint64_t seed) {
  Rng rng(seed);
  Image img(w, h);
  for (float& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

FeatureMap random_grid(int gw, int gh, int dim, int sw, int sh, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMap f;
  f.grid_w = gw;
  f.grid_h = gh;
  f.dim = dim;
  f.source_w = sw;
  f.source_h = sh;
  f.backend_id = "test";
  f.grid.resize(static_cast<std::size_t>(gw) * gh * dim);
  for (float& v : f.grid) v = static_cast<float>(rng.uniform(-1, 1));
  f.update_checksum();
  return f;
}

TEST(StubBackend, ShapeAndIdentifier) {
  const StubBackend stub(8, 4);
  const FeatureMap f = stub.extract(random_image(30, 21, 1));
  EXPECT_EQ(f.dim, StubBackend::kDim);
  EXPECT_EQ(f.grid_w, 8);
  EXPECT_EQ(f.grid_h, 6);
  EXPECT_EQ(f.source_w, 30);
  EXPECT_EQ(f.source_h, 21);
  EXPECT_EQ(f.backend_id, "stub-p8-s4-v1");
  f.validate();
}

TEST(StubBackend, SameImageSameChecksum) {
  const StubBackend stub;
  const Image img = random_image(40, 40, 2);
  const FeatureMap a = stub.extract(img);
  const FeatureMap b = stub.extract(img);
  EXPECT_EQ(a.checksum, b.checksum);
  EXPECT_EQ(a.grid, b.grid);
}

TEST(StubBackend, FirstChannelsAreColourMoments) {
  Image img(16, 16);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      img.at(x, y, 0) = 0.25f;
      img.at(x, y, 1) = (x % 2) ? 1.0f : 0.0f;
      img.at(x, y, 2) = 0.0f;
    }
  const FeatureMap f = StubBackend(16, 16).extract(img);
  const auto c = f.cell(0, 0);
  EXPECT_NEAR(c[0], 0.25, 1e-6);
  EXPECT_NEAR(c[1], 0.5, 1e-6);
  EXPECT_NEAR(c[2], 0.0, 1e-6);
  EXPECT_NEAR(c[3], 0.0, 1e-6);
  EXPECT_NEAR(c[4], 0.5, 1e-6);
  EXPECT_NEAR(c[5], 0.0, 1e-6);
}

TEST(StubBackend, EditingOnePatchOnlyChangesOverlappingCells) {
  const StubBackend stub(8, 4);
  const Image a = random_image(48, 40, 3);
  Image b = a;
  const int px0 = 20, px1 = 28, py0 = 12, py1 = 20;
  for (int y = py0; y < py1; ++y)
    for (int x = px0; x < px1; ++x)
      for (int c = 0; c < 3; ++c) b.at(x, y, c) = 1.0f - a.at(x, y, c);
  const FeatureMap fa = stub.extract(a);
  const FeatureMap fb = stub.extract(b);
  int changed = 0;
  for (int v = 0; v < fa.grid_h; ++v)
    for (int u = 0; u < fa.grid_w; ++u) {
      const auto [x0, x1] = stub.window(u, fa.grid_w, 48);
      const auto [y0, y1] = stub.window(v, fa.grid_h, 40);
      const bool overlaps = x0 < px1 && px0 < x1 && y0 < py1 && py0 < y1;
      const auto ca = fa.cell(v, u);
      const auto cb = fb.cell(v, u);
      const bool same = std::equal(ca.begin(), ca.end(), cb.begin());
      if (!overlaps) {
        EXPECT_TRUE(same) << u << "," << v;
      }
      changed += !same;
    }
  EXPECT_GT(changed, 0);
}

TEST(StubBackend, RejectsBadGeometry) {
  EXPECT_THROW(StubBackend(0, 4), Error);
  EXPECT_THROW(StubBackend(4, 0), Error);
}

TEST(Lookup, CellCentreReturnsThatCell) {
  const FeatureMap f = random_grid(5, 4, 6, 40, 24, 7);
  for (int v = 0; v < 4; ++v)
    for (int u = 0; u < 5; ++u) {
      const auto got = lookup(f, (u + 0.5) * 40 / 5, (v + 0.5) * 24 / 4);
      const auto want = f.cell(v, u);
      for (int d = 0; d < 6; ++d) EXPECT_FLOAT_EQ(got[static_cast<std::size_t>(d)], want[static_cast<std::size_t>(d)]);
    }
}

TEST(Lookup, MidpointIsMeanOfNeighbours) {
  const FeatureMap f = random_grid(5, 4, 6, 40, 24, 8);
  const auto got = lookup(f, 2.0 * 8, 1.5 * 6);  // between cells (1,1) and (2,1)
  for (int d = 0; d < 6; ++d)
    EXPECT_NEAR(got[static_cast<std::size_t>(d)], 0.5 * (f.cell(1, 1)[d] + f.cell(1, 2)[d]), 1e-6);
}

TEST(Lookup, ConstantGridIsConstantEverywhere) {
  FeatureMap f = random_grid(3, 3, 4, 17, 11, 9);
  for (std::size_t i = 0; i < f.grid.size(); ++i) f.grid[i] = static_cast<float>(i % 4) * 0.5f;
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto got = lookup(f, rng.uniform(0, 17), rng.uniform(0, 11));
    for (int d = 0; d < 4; ++d) EXPECT_FLOAT_EQ(got[static_cast<std::size_t>(d)], d * 0.5f);
  }
}

TEST(Lookup, OutOfBoundsIsRejected) {
  const FeatureMap f = random_grid(3, 3, 4, 17, 11, 9);
  EXPECT_THROW(lookup(f, -0.1, 3), Error);
  EXPECT_THROW(lookup(f, 3, 11.5), Error);
  EXPECT_NO_THROW(lookup(f, 17, 11));
}

// Bilinear interpolation is Lipschitz with constant bounded by the largest
// neighbouring-cell difference divided by the cell pitch.
TEST(Lookup, LipschitzBoundFromGridValues) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const FeatureMap f = random_grid(6, 5, 3, 60, 40, 100 + static_cast<std::uint64_t>(trial));
    double max_step = 0;
    for (int v = 0; v < 5; ++v)
      for (int u = 0; u < 6; ++u)
        for (int d = 0; d < 3; ++d) {
          if (u + 1 < 6) max_step = std::max(max_step, std::abs(static_cast<double>(f.cell(v, u + 1)[d] - f.cell(v, u)[d])));
          if (v + 1 < 5) max_step = std::max(max_step, std::abs(static_cast<double>(f.cell(v + 1, u)[d] - f.cell(v, u)[d])));
        }
    const double pitch = 60.0 / 6.0;
    for (int i = 0; i < 100; ++i) {
      const double x = rng.uniform(0, 59.9), y = rng.uniform(0, 40);
      const double eps = rng.uniform(1e-4, 0.1);
      const auto a = lookup(f, x, y);
      const auto b = lookup(f, x + eps, y);
      for (int d = 0; d < 3; ++d)
        EXPECT_LE(std::abs(a[static_cast<std::size_t>(d)] - b[static_cast<std::size_t>(d)]), max_step / pitch * eps + 1e-6);
    }
  }
}

TEST(FeatureCache, RoundTripIsBitIdentical) {
  TempDir dir;
  const FeatureCache cache(dir.path());
  const StubBackend stub(8, 8);
  const Image img = random_image(24, 16, 5);
  const FeatureMap first = extract_features(img, stub, &cache);
  ASSERT_TRUE(std::filesystem::exists(cache.path_for(image_hash(img), stub.id())));
  const auto loaded = cache.load(image_hash(img), stub.id());
  ASSERT_TRUE(loaded.has_value());
  EXPECT_EQ(loaded->grid, first.grid);
  EXPECT_EQ(loaded->checksum, first.checksum);
  EXPECT_EQ(loaded->source_w, 24);
  EXPECT_EQ(loaded->backend_id, stub.id());
  EXPECT_FALSE(cache.load(image_hash(img), "other-backend").has_value());
}

TEST(FeatureCache, HitIsServedFromDisk) {
  TempDir dir;
  const FeatureCache cache(dir.path());
  const StubBackend stub(8, 8);
  const Image img = random_image(24, 16, 5);
  FeatureMap planted = stub.extract(img);
  planted.grid[0] = 42.0f;
  planted.update_checksum();
  cache.store(image_hash(img), planted);
  EXPECT_EQ(extract_features(img, stub, &cache).grid[0], 42.0f);
}

TEST(FeatureCache, TruncatedFileIsRejected) {
  TempDir dir;
  const FeatureMap f = random_grid(2, 2, 2, 4, 4, 1);
  save_feature_map((dir / "f.feat").string(), f);
  std::filesystem::resize_file(dir / "f.feat", 30);
  EXPECT_THROW(load_feature_map((dir / "f.feat").string()), Error);
}

TEST(FeatureCache, EnvironmentVariableOverridesDirectory) {
  const char* old = std::getenv(kFeatureCacheEnv);
  const std::string saved = old ? old : "";
  ::unsetenv(kFeatureCacheEnv);
  EXPECT_EQ(feature_cache_dir("fallback"), std::filesystem::path("fallback"));
  ::setenv(kFeatureCacheEnv, "/tmp/somewhere", 1);
  EXPECT_EQ(feature_cache_dir("fallback"), std::filesystem::path("/tmp/somewhere"));
  if (old) ::setenv(kFeatureCacheEnv, saved.c_str(), 1);
  else ::unsetenv(kFeatureCacheEnv);
}

TEST(ExtractFeatures, RejectsOutOfRangeImage) {
  Image img = random_image(8, 8, 1);
  img.data[5] = 1.5f;
  EXPECT_THROW(extract_features(img, StubBackend(4, 4)), Error);
}

// Pixels from differently coloured primitives sit farther apart in stub
// feature space than pixels of the same primitive.
TEST(StubBackend, SeparatesToySceneRegions) {
  const Scene scene = testing::small_scene(48, 4);
  const StubBackend stub(8, 4);
  double within = 0, across = 0;
  std::size_t n_within = 0, n_across = 0;
  for (const View& v : scene.views) {
    const FeatureMap f = stub.extract(v.image);
    std::vector<std::pair<int, std::vector<float>>> samples;
    for (int y = 2; y < 48; y += 3)
      for (int x = 2; x < 48; x += 3) {
        const auto l = v.ground_truth->at(x, y);
        if (l == kIgnoreLabel) continue;
        samples.emplace_back(l, lookup(f, x + 0.5, y + 0.5));
      }
    for (std::size_t i = 0; i < samples.size(); ++i)
      for (std::size_t j = i + 1; j < samples.size(); ++j) {
        double d = 0;
        for (std::size_t k = 0; k < samples[i].second.size(); ++k) {
          const double diff = samples[i].second[k] - samples[j].second[k];
          d += diff * diff;
        }
        d = std::sqrt(d);
        if (samples[i].first == samples[j].first) {
          within += d;
          ++n_within;
        } else {
          across += d;
          ++n_across;
        }
      }
  }
  ASSERT_GT(n_within, 0u);
  ASSERT_GT(n_across, 0u);
  EXPECT_GT(across / n_across - within / n_within, 0.0);
}

}  // namespace
}  // namespace semfield
