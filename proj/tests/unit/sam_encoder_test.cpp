#include <gtest/gtest.h>

#include "semfield/sam_encoder.hpp"
#include "test_support.hpp"

namespace semfield {
namespace {

const std::string kFixture = std::string(SEMFIELD_FIXTURE_DIR) + "/sam_tiny";

sam::MatrixF rows_of(const npy::Array& a, Eigen::Index cols) {
  sam::MatrixF m(static_cast<Eigen::Index>(a.data.size()) / cols, cols);
  std::copy(a.data.begin(), a.data.end(), m.data());
  return m;
}

// Output of the reference implementation on the same random weights.
TEST(SamEncoder, MatchesReferenceOutput) {
  const sam::Encoder enc = sam::Encoder::load(kFixture + "/encoder.ckpt");
  const auto& c = enc.config();
  const sam::MatrixF input = rows_of(npy::load(kFixture + "/input.npy"), 3);
  ASSERT_EQ(input.rows(), static_cast<Eigen::Index>(c.image_size) * c.image_size);
  const sam::MatrixF got = enc.forward(input);
  const sam::MatrixF want = rows_of(npy::load(kFixture + "/output.npy"), c.out_channels);
  ASSERT_EQ(got.rows(), want.rows());
  ASSERT_EQ(got.cols(), want.cols());
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-4f);
}

TEST(SamEncoder, PreprocessingMatchesReferenceProcessor) {
  const Image img = read_image_png(kFixture + "/image.png");
  const sam::MatrixF got = sam::preprocess(img, 64);
  const sam::MatrixF want = rows_of(npy::load(kFixture + "/pixels.npy"), 3);
  ASSERT_EQ(got.rows(), want.rows());
  // the reference resamples on uint8, so allow one grey level of rounding
  EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 0.03f);
  // the padded region is exactly zero
  const auto [h, w] = sam::resized_shape(img.height, img.width, 64);
  for (int y = h; y < 64; ++y)
    for (int x = 0; x < 64; ++x) EXPECT_EQ(got.row(y * 64 + x).cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(w, 64);
}

TEST(SamEncoder, ResizedShapeKeepsAspect) {
  EXPECT_EQ(sam::resized_shape(512, 512, 1024), (std::pair<int, int>{1024, 1024}));
  EXPECT_EQ(sam::resized_shape(30, 45, 64), (std::pair<int, int>{43, 64}));
}

TEST(SamBackend, ExtractsCroppedGridWithEncoderWidth) {
  const sam::SamBackend backend(kFixture + "/encoder.ckpt");
  const Image img = read_image_png(kFixture + "/image.png");
  const FeatureMap f = extract_features(img, backend);
  EXPECT_EQ(f.dim, 16);
  EXPECT_EQ(f.grid_w, 8);
  EXPECT_EQ(f.grid_h, 6);
  EXPECT_EQ(f.source_w, img.width);
  EXPECT_EQ(f.backend_id.rfind("sam-tiny-64-", 0), 0u) << f.backend_id;
  EXPECT_EQ(extract_features(img, backend).checksum, f.checksum);
}

TEST(SamBackend, MissingWeightsPointToStub) {
  BackendOptions o;
  o.name = "sam";
  try {
    make_backend(o);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("stub"), std::string::npos);
  }
  o.sam_weights = "/nonexistent/sam.ckpt";
  try {
    make_backend(o);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("stub"), std::string::npos);
  }
}

TEST(MakeBackend, UnknownNameIsRejected) {
  BackendOptions o;
  o.name = "clip";
  EXPECT_THROW(make_backend(o), Error);
  o.name = "stub";
  EXPECT_EQ(make_backend(o)->id(), "stub-p16-s16-v1");
}

}  // namespace
}  // namespace semfield
