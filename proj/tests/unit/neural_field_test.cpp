#include <gtest/gtest.h>

#include "semfield/neural_field.hpp"
#include "test_support.hpp"

namespace semfield {
namespace {

using ag::Matrix;
using testing::TempDir;

Matrix<double> random_rows(Eigen::Index n, Eigen::Index d, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Matrix<double> m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-scale, scale);
  return m;
}

Matrix<double> unit_rows(Eigen::Index n, std::uint64_t seed) {
  Matrix<double> m = random_rows(n, 3, seed);
  for (Eigen::Index r = 0; r < n; ++r) m.row(r).normalize();
  return m;
}

TEST(PositionalEncode, ZeroInputGivesZeroSinesAndUnitCosines) {
  const Matrix<double> pe = positional_encode<double>(Matrix<double>::Zero(1, 3), 2);
  ASSERT_EQ(pe.cols(), 3 + 3 * 2 * 2);
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < 3; ++i) {
      EXPECT_EQ(pe(0, 3 + 6 * k + i), 0.0);
      EXPECT_EQ(pe(0, 3 + 6 * k + 3 + i), 1.0);
    }
}

TEST(PositionalEncode, OutputWidth) {
  EXPECT_EQ(positional_encode<double>(Matrix<double>::Zero(2, 3), 4).cols(), 27);
  FieldConfig c;
  c.position_freqs = 4;
  EXPECT_EQ(c.position_encoding_dim(), 27);
}

TEST(PositionalEncode, HalfAtOneOctave) {
  Matrix<double> x(1, 1);
  x(0, 0) = 0.5;
  const Matrix<double> pe = positional_encode<double>(x, 1);
  ASSERT_EQ(pe.cols(), 3);
  EXPECT_NEAR(pe(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(pe(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(pe(0, 2), 0.0, 1e-15);
}

TEST(PositionalEncode, RejectsZeroFrequencies) {
  EXPECT_THROW(positional_encode<double>(Matrix<double>::Zero(1, 3), 0), Error);
}

TEST(FieldConfig, RejectsSmallBaseFeature) {
  FieldConfig c = testing::tiny_field();
  c.base_feature_dim = 7;
  EXPECT_THROW(c.validate(), Error);
  c.base_feature_dim = 8;
  c.depth = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(QueryField, OutputShapesAndRanges) {
  const FieldConfig cfg = testing::tiny_field();
  nn::ParameterSet<double> params;
  init_field_params(params, cfg, 1);
  const auto out = query_field<double>(random_rows(17, 3, 2, 2.0), unit_rows(17, 3), params, cfg);
  EXPECT_EQ(out.sigma.rows(), 17);
  EXPECT_EQ(out.sigma.cols(), 1);
  EXPECT_EQ(out.colour.cols(), 3);
  EXPECT_EQ(out.base.cols(), cfg.base_feature_dim);
  EXPECT_GE(out.sigma.minCoeff(), 0.0);
  EXPECT_GE(out.colour.minCoeff(), 0.0);
  EXPECT_LE(out.colour.maxCoeff(), 1.0);
}

TEST(QueryField, ZeroDensityHeadGivesConstantSigma) {
  const FieldConfig cfg = testing::tiny_field();
  nn::ParameterSet<double> params;
  init_field_params(params, cfg, 1);
  params.at("field.density.sigma.weight").value.setZero();
  params.at("field.density.sigma.bias").value.setConstant(0.3);
  const auto out = query_field<double>(random_rows(20, 3, 4, 2.0), unit_rows(20, 5), params, cfg);
  for (Eigen::Index r = 0; r < out.sigma.rows(); ++r) EXPECT_EQ(out.sigma(r, 0), out.sigma(0, 0));
  EXPECT_NEAR(out.sigma(0, 0), std::log1p(std::exp(0.3)), 1e-12);
}

TEST(QueryField, DensityIgnoresDirection) {
  FieldConfig cfg = testing::tiny_field();
  cfg.depth = 4;  // exercise the skip connection too
  nn::ParameterSet<double> params;
  init_field_params(params, cfg, 8);
  const Matrix<double> points = random_rows(30, 3, 6, 2.0);
  const auto a = query_field<double>(points, unit_rows(30, 7), params, cfg);
  const auto b = query_field<double>(points, unit_rows(30, 8), params, cfg);
  EXPECT_EQ(a.sigma, b.sigma);
  EXPECT_EQ(a.base, b.base);
  EXPECT_NE(a.colour, b.colour);
}

TEST(QueryField, NonFiniteInputIsRejected) {
  const FieldConfig cfg = testing::tiny_field();
  nn::ParameterSet<double> params;
  init_field_params(params, cfg, 1);
  Matrix<double> p = random_rows(3, 3, 1);
  p(1, 2) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(query_field<double>(p, unit_rows(3, 1), params, cfg), Error);
  p(1, 2) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(query_field<double>(p, unit_rows(3, 1), params, cfg), Error);
}

TEST(QueryField, DeterministicForSameParamsAndInputs) {
  const FieldConfig cfg = testing::tiny_field();
  nn::ParameterSet<float> p1, p2;
  init_field_params(p1, cfg, 42);
  init_field_params(p2, cfg, 42);
  const Matrix<float> pts = random_rows(40, 3, 1, 2.0).cast<float>();
  const Matrix<float> dirs = unit_rows(40, 2).cast<float>();
  const auto a = query_field<float>(pts, dirs, p1, cfg);
  const auto b = query_field<float>(pts, dirs, p2, cfg);
  EXPECT_EQ(a.sigma, b.sigma);
  EXPECT_EQ(a.colour, b.colour);
  EXPECT_EQ(a.base, b.base);
}

TEST(FreezeDensity, OptimizerStepLeavesDensityUntouched) {
  const FieldConfig cfg = testing::tiny_field();
  nn::ParameterSet<double> params;
  init_field_params(params, cfg, 3);
  params.add("fusion.probe", Matrix<double>::Constant(1, 4, 0.5));
  freeze_density(params);
  const nn::ParameterSet<double> before = params;

  std::map<std::string, Matrix<double>> grads;
  for (const auto& [name, p] : params) grads[name] = Matrix<double>::Ones(p.value.rows(), p.value.cols());
  nn::Adam<double> adam;
  adam.step(params, grads, 1e-2);

  for (const auto& [name, p] : params) {
    if (name.rfind(kDensityPrefix, 0) == 0)
      EXPECT_EQ(p.value, before.at(name).value) << name;
    else
      EXPECT_NE(p.value, before.at(name).value) << name;
  }
}

TEST(FreezeDensity, QueryUnchangedAndIdempotent) {
  const FieldConfig cfg = testing::tiny_field();
  nn::ParameterSet<double> params;
  init_field_params(params, cfg, 3);
  const Matrix<double> pts = random_rows(9, 3, 1);
  const Matrix<double> dirs = unit_rows(9, 2);
  const auto a = query_field<double>(pts, dirs, params, cfg);
  freeze_density(params);
  freeze_density(params);
  const auto b = query_field<double>(pts, dirs, params, cfg);
  EXPECT_EQ(a.sigma, b.sigma);
  for (const auto& [name, p] : params) EXPECT_EQ(p.trainable, name.rfind(kDensityPrefix, 0) != 0) << name;
}

TEST(FreezeDensity, FrozenParametersReceiveNoGradient) {
  const FieldConfig cfg = testing::tiny_field();
  nn::ParameterSet<double> params;
  init_field_params(params, cfg, 3);
  freeze_density(params);
  ag::Tape<double> tape;
  nn::Binding<double> bind(tape, params);
  const auto vars = field_forward(bind, cfg, random_rows(5, 3, 1), unit_rows(5, 2));
  tape.backward(ag::sum(ag::add(ag::sum(vars.colour), ag::sum(vars.sigma))));
  for (const auto& [name, g] : bind.gradients()) EXPECT_NE(name.rfind(kDensityPrefix, 0), 0u) << name;
}

TEST(FreezeDensity, EmptyParameterSetIsAnError) {
  nn::ParameterSet<double> params;
  EXPECT_THROW(freeze_density(params), Error);
}

// Central differences on >= 100 weights across every tensor.
TEST(QueryField, GradientMatchesFiniteDifferences) {
  FieldConfig cfg = testing::tiny_field();
  cfg.depth = 4;
  nn::ParameterSet<double> params;
  init_field_params(params, cfg, 5);
  const Matrix<double> pts = random_rows(6, 3, 10, 2.0);
  const Matrix<double> dirs = unit_rows(6, 11);
  const Matrix<double> ws = random_rows(6, 1, 12);
  const Matrix<double> wc = random_rows(6, 3, 13);
  const Matrix<double> wb = random_rows(6, cfg.base_feature_dim, 14);
  auto loss_of = [&](const FieldOutput<double>& o) {
    return (o.sigma.cwiseProduct(ws)).sum() + (o.colour.cwiseProduct(wc)).sum() + (o.base.cwiseProduct(wb)).sum();
  };

  ag::Tape<double> tape;
  nn::Binding<double> bind(tape, params);
  const auto vars = field_forward(bind, cfg, pts, dirs);
  tape.backward(ag::add(ag::add(ag::dot(vars.sigma, ws), ag::dot(vars.colour, wc)), ag::dot(vars.base, wb)));
  const auto grads = bind.gradients();

  Rng rng(77);
  int checked = 0;
  for (const auto& [name, g] : grads) {
    for (int k = 0; k < 12; ++k) {
      const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(g.size())));
      double& w = params.at(name).value.data()[idx];
      const double saved = w;
      const double h = 1e-4;
      w = saved + h;
      const double up = loss_of(query_field<double>(pts, dirs, params, cfg));
      w = saved - h;
      const double down = loss_of(query_field<double>(pts, dirs, params, cfg));
      w = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g.data()[idx];
      if (std::abs(numeric) < 1e-7 && std::abs(analytic) < 1e-7) continue;
      EXPECT_LT(testing::relative_error(analytic, numeric), 1e-3) << name << "[" << idx << "]";
      ++checked;
    }
  }
  EXPECT_GE(checked, 100);
}

TEST(FieldCheckpoint, RoundTripAndConfigMismatch) {
  TempDir dir;
  const FieldConfig cfg = testing::tiny_field();
  nn::ParameterSet<float> params;
  init_field_params(params, cfg, 9);
  freeze_density(params);
  Checkpoint<float> ckpt;
  ckpt.header = {{"field", to_json(cfg)}};
  ckpt.params = params;
  const std::string path = (dir / "f.ckpt").string();
  save_checkpoint(path, ckpt);

  const auto loaded = load_field_checkpoint<float>(path, cfg);
  ASSERT_EQ(loaded.params.size(), params.size());
  for (const auto& [name, p] : params) {
    EXPECT_EQ(loaded.params.at(name).value, p.value) << name;
    EXPECT_EQ(loaded.params.at(name).trainable, p.trainable) << name;
  }
  FieldConfig other = cfg;
  other.hidden_width = 32;
  EXPECT_THROW(load_field_checkpoint<float>(path, other), Error);
}

TEST(FieldCheckpoint, RejectsForeignFiles) {
  TempDir dir;
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint<float>((dir / "junk.ckpt").string()), Error);
  EXPECT_THROW(load_checkpoint<float>((dir / "missing.ckpt").string()), Error);
}

}  // namespace
}  // namespace semfield
