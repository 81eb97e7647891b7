#include <gtest/gtest.h>

#include <cmath>

#include "semfield/volume_renderer.hpp"
#include "test_support.hpp"

namespace semfield {
namespace {

using ag::Matrix;

Ray make_ray(double near, double far) {
  Ray r;
  r.near = near;
  r.far = far;
  return r;
}

TEST(SampleAlongRay, SingleSampleSitsAtBinCentre) {
  const RaySamples s = sample_along_ray(make_ray(1.0, 3.0), 1, false);
  ASSERT_EQ(s.depths.size(), 1u);
  EXPECT_EQ(s.depths[0], 2.0);
  EXPECT_EQ(s.deltas[0], kFarDeltaSentinel);
}

TEST(SampleAlongRay, DeterministicDepthsAreBinCentres) {
  const RaySamples s = sample_along_ray(make_ray(0.0, 4.0), 4, false);
  EXPECT_EQ(s.depths, (std::vector<double>{0.5, 1.5, 2.5, 3.5}));
  EXPECT_EQ(s.deltas, (std::vector<double>{1.0, 1.0, 1.0, kFarDeltaSentinel}));
}

TEST(SampleAlongRay, StratifiedDepthsStayInTheirBins) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const double near = rng.uniform(0.0, 2.0);
    const double far = near + rng.uniform(0.1, 5.0);
    const int n = 1 + static_cast<int>(rng.below(40));
    const RaySamples s = sample_along_ray(make_ray(near, far), n, true, &rng);
    const double bin = (far - near) / n;
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      EXPECT_GE(s.depths[k], near + i * bin - 1e-12);
      EXPECT_LE(s.depths[k], near + (i + 1) * bin + 1e-12);
      if (i > 0) {
        EXPECT_GT(s.depths[k], s.depths[k - 1]);
        EXPECT_NEAR(s.deltas[k - 1], s.depths[k] - s.depths[k - 1], 1e-12);
      }
    }
  }
}

TEST(SampleAlongRay, SeededStratifiedSamplingIsReproducible) {
  const RaySamples a = sample_along_ray(make_ray(0.5, 4.0), 16, true, std::uint64_t{9});
  const RaySamples b = sample_along_ray(make_ray(0.5, 4.0), 16, true, std::uint64_t{9});
  EXPECT_EQ(a.depths, b.depths);
}

TEST(SampleAlongRay, RejectsZeroSamples) { EXPECT_THROW(sample_along_ray(make_ray(0, 1), 0, false), Error); }

TEST(ComputeWeights, TransparentMediumHasZeroWeights) {
  const auto w = compute_weights(std::vector<double>(5, 0.0), std::vector<double>(5, 0.3));
  for (double x : w) EXPECT_EQ(x, 0.0);
}

TEST(ComputeWeights, OpaqueSingleSampleHasUnitWeight) {
  const auto w = compute_weights(std::vector<double>{1e9}, std::vector<double>{1.0});
  EXPECT_NEAR(w[0], 1.0, 1e-12);
}

TEST(ComputeWeights, TwoUnitSamples) {
  const auto w = compute_weights(std::vector<double>{1, 1}, std::vector<double>{1, 1});
  EXPECT_NEAR(w[0], 0.63212, 1e-5);
  EXPECT_NEAR(w[1], 0.23254, 1e-5);
  const double e = std::exp(-1.0);
  EXPECT_NEAR(w[0], 1 - e, 1e-15);
  EXPECT_NEAR(w[1], e * (1 - e), 1e-15);
}

TEST(ComputeWeights, NegativeInputIsRejected) {
  EXPECT_THROW(compute_weights(std::vector<double>{1, -0.1}, std::vector<double>{1, 1}), Error);
  EXPECT_THROW(compute_weights(std::vector<double>{1, 1}, std::vector<double>{-1, 1}), Error);
  EXPECT_THROW(compute_weights(std::vector<double>{1, 1}, std::vector<double>{1}), Error);
}

TEST(ComputeWeights, SumEqualsOneMinusTotalTransmittance) {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    const auto n = static_cast<std::size_t>(1 + rng.below(64));
    std::vector<double> sig(n), del(n);
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sig[i] = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.0, 20.0);
      del[i] = rng.uniform(0.0, 0.2);
      total += sig[i] * del[i];
    }
    const auto w = compute_weights(sig, del);
    double sum = 0;
    for (double x : w) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0 - std::exp(-total), 1e-6);
    EXPECT_LE(sum, 1.0 + 1e-6);
  }
}

TEST(RenderColour, Examples) {
  auto c = render_colour({1.0}, {{0.2, 0.4, 0.6}});
  EXPECT_DOUBLE_EQ(c[0], 0.2);
  EXPECT_DOUBLE_EQ(c[1], 0.4);
  EXPECT_DOUBLE_EQ(c[2], 0.6);
  c = render_colour({0.0, 0.0}, {{0.2, 0.4, 0.6}, {1, 1, 1}});
  EXPECT_EQ(c, (std::array<double, 3>{0, 0, 0}));
  c = render_colour({0.5, 0.25}, {{1, 0, 0}, {0, 1, 0}});
  EXPECT_DOUBLE_EQ(c[0], 0.5);
  EXPECT_DOUBLE_EQ(c[1], 0.25);
  EXPECT_DOUBLE_EQ(c[2], 0.0);
}

TEST(RenderColour, LengthMismatchIsRejected) { EXPECT_THROW(render_colour({0.5, 0.5}, {{1, 0, 0}}), Error); }

TEST(RenderSemantics, OneHotSingleSample) {
  Matrix<double> s = Matrix<double>::Zero(1, 4);
  s(0, 2) = 1.0;
  EXPECT_EQ(render_semantics({1.0}, s).argmax, 2);
}

TEST(RenderSemantics, HandCase) {
  Matrix<double> s(2, 2);
  s << 2, 0, 0, 4;
  const SemanticRender r = render_semantics({0.6, 0.2}, s);
  EXPECT_NEAR(r.logits[0], 1.2, 1e-15);
  EXPECT_NEAR(r.logits[1], 0.8, 1e-15);
  EXPECT_EQ(r.argmax, 0);
  const double p0 = 1.0 / (1.0 + std::exp(-0.4));
  EXPECT_NEAR(r.probabilities[0], p0, 1e-15);
  EXPECT_NEAR(r.probabilities[1], 1.0 - p0, 1e-15);
}

TEST(RenderSemantics, IdenticalAttributesAreProportionalRegardlessOfSplit) {
  Matrix<double> s(3, 3);
  s << 0.3, 1.0, 2.0, 0.3, 1.0, 2.0, 0.3, 1.0, 2.0;
  for (const auto& w : {std::vector<double>{0.1, 0.2, 0.3}, std::vector<double>{0.5, 0.05, 0.05}}) {
    const SemanticRender r = render_semantics(w, s);
    const double total = w[0] + w[1] + w[2];
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(r.logits[static_cast<std::size_t>(c)], total * s(0, c), 1e-15);
  }
}

TEST(RenderSemantics, ProbabilitiesAreNormalized) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Matrix<double> s(8, 5);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = rng.uniform(-30, 30);
    std::vector<double> w(8);
    for (double& x : w) x = rng.uniform(0, 0.125);
    const SemanticRender r = render_semantics(w, s);
    double sum = 0;
    for (double p : r.probabilities) {
      EXPECT_GE(p, 0.0);
      sum += p;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

// Colour and semantics share the weight vector: compositing an attribute
// block that stacks colour and semantic columns matches both renders.
TEST(Composite, ColourAndSemanticsUseTheSameWeights) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 12;
    std::vector<double> sig(n), del(n);
    for (int i = 0; i < n; ++i) {
      sig[static_cast<std::size_t>(i)] = rng.uniform(0, 5);
      del[static_cast<std::size_t>(i)] = rng.uniform(0, 0.3);
    }
    const auto w = compute_weights(sig, del);
    std::vector<std::array<double, 3>> colours(n);
    Matrix<double> sem(n, 4), both(n, 7);
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) both(i, c) = colours[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = rng.uniform();
      for (int c = 0; c < 4; ++c) both(i, 3 + c) = sem(i, c) = rng.uniform(-2, 2);
    }
    const auto rgb = render_colour(w, colours);
    const auto seg = render_semantics(w, sem);
    const auto joint = composite<double>(std::span<const double>(w), both);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(rgb[static_cast<std::size_t>(c)], joint(c));
    for (int c = 0; c < 4; ++c) EXPECT_EQ(seg.logits[static_cast<std::size_t>(c)], joint(3 + c));
  }
}

TEST(Composite, SplittingASampleKeepsConstantColour) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 10;
    std::vector<double> sig(n), del(n);
    for (int i = 0; i < n; ++i) {
      sig[static_cast<std::size_t>(i)] = rng.uniform(0, 8);
      del[static_cast<std::size_t>(i)] = rng.uniform(0.01, 0.3);
    }
    const auto k = static_cast<std::size_t>(rng.below(n));
    std::vector<double> sig2 = sig, del2 = del;
    del2[k] /= 2;
    sig2.insert(sig2.begin() + static_cast<std::ptrdiff_t>(k), sig[k]);
    del2.insert(del2.begin() + static_cast<std::ptrdiff_t>(k), del[k] / 2);
    const std::array<double, 3> colour{0.3, 0.6, 0.9};
    const auto a = render_colour(compute_weights(sig, del), std::vector<std::array<double, 3>>(sig.size(), colour));
    const auto b = render_colour(compute_weights(sig2, del2), std::vector<std::array<double, 3>>(sig2.size(), colour));
    for (int c = 0; c < 3; ++c) EXPECT_LT(std::abs(a[static_cast<std::size_t>(c)] - b[static_cast<std::size_t>(c)]), 1e-6);
  }
}

TEST(BatchWeights, MatchesPerRayWeights) {
  Rng rng(4);
  const int rays = 5, n = 7;
  Matrix<double> sig(rays * n, 1), del(rays * n, 1);
  for (int i = 0; i < rays * n; ++i) {
    sig(i, 0) = rng.uniform(0, 3);
    del(i, 0) = rng.uniform(0, 0.5);
  }
  const Matrix<double> w = batch_weights<double>(sig, del, n);
  for (int r = 0; r < rays; ++r) {
    const auto ref = compute_weights(std::vector<double>(sig.data() + r * n, sig.data() + (r + 1) * n),
                                     std::vector<double>(del.data() + r * n, del.data() + (r + 1) * n));
    for (int i = 0; i < n; ++i) EXPECT_EQ(w(r * n + i, 0), ref[static_cast<std::size_t>(i)]);
  }
  EXPECT_THROW(batch_weights<double>(sig, del, 6), Error);
}

// Analytic sigma and value gradients of the differentiable compositor
// against central differences of the plain forward.
TEST(Composite, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  const int rays = 3, n = 8, channels = 3;
  Matrix<double> sig(rays * n, 1), val(rays * n, channels), del(rays * n, 1), probe(rays, channels);
  for (int i = 0; i < rays * n; ++i) {
    sig(i, 0) = rng.uniform(0.1, 4.0);
    del(i, 0) = (i % n == n - 1) ? kFarDeltaSentinel : rng.uniform(0.05, 0.4);
    for (int c = 0; c < channels; ++c) val(i, c) = rng.uniform();
  }
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = rng.uniform(-1, 1);

  auto forward = [&](const Matrix<double>& s, const Matrix<double>& v) {
    const Matrix<double> w = batch_weights<double>(s, del, n);
    double loss = 0;
    for (int r = 0; r < rays; ++r)
      for (int i = 0; i < n; ++i) loss += w(r * n + i, 0) * v.row(r * n + i).dot(probe.row(r));
    return loss;
  };

  ag::Tape<double> tape;
  const auto s_var = tape.variable(sig);
  const auto v_var = tape.variable(val);
  tape.backward(ag::dot(composite<double>(s_var, v_var, del, n), probe));
  const Matrix<double> gs = s_var.grad();
  const Matrix<double> gv = v_var.grad();

  const double h = 1e-6;
  int checked = 0;
  for (int i = 0; i < rays * n; ++i) {
    Matrix<double> up = sig, down = sig;
    up(i, 0) += h;
    down(i, 0) -= h;
    const double numeric = (forward(up, val) - forward(down, val)) / (2 * h);
    if (std::abs(numeric) < 1e-9 && std::abs(gs(i, 0)) < 1e-9) continue;
    EXPECT_LT(testing::relative_error(gs(i, 0), numeric), 1e-3) << "sigma " << i;
    ++checked;
  }
  for (int i = 0; i < rays * n; ++i)
    for (int c = 0; c < channels; ++c) {
      Matrix<double> up = val, down = val;
      up(i, c) += h;
      down(i, c) -= h;
      const double numeric = (forward(sig, up) - forward(sig, down)) / (2 * h);
      EXPECT_NEAR(gv(i, c), numeric, 1e-6) << "value " << i << "," << c;
    }
  EXPECT_GE(checked, rays * (n - 1));
}

}  // namespace
}  // namespace semfield
