#pragma once

// Sampling along rays and transmittance-weighted compositing. Colour and
// semantic rendering go through the same weight routine:
//
//   w_i = exp(-sum_{j<i} delta_j sigma_j) * (1 - exp(-delta_i sigma_i))
//   out = sum_i w_i v_i
//
// The semantic output is the composited attribute vector; probabilities are
// obtained by a softmax applied afterwards.

#include <cmath>
#include <span>
#include <vector>

#include "semfield/autograd.hpp"
#include "semfield/common.hpp"
#include "semfield/scene_io.hpp"

namespace semfield {

inline constexpr double kFarDeltaSentinel = 1e10;

struct RaySamples {
  std::vector<double> depths;
  std::vector<double> deltas;
};

// Splits [near, far] into n equal bins. Deterministic mode takes bin
// centres; stratified mode draws one uniform depth per bin. The last delta
// is a large sentinel so the final sample can absorb the remaining
// transmittance.
inline RaySamples sample_along_ray(const Ray& ray, int n, bool stratified, Rng* rng = nullptr) {
  if (n < 1) throw Error("sample_along_ray: need at least one sample");
  if (stratified && rng == nullptr) throw Error("sample_along_ray: stratified sampling needs a generator");
  RaySamples out;
  out.depths.resize(static_cast<std::size_t>(n));
  out.deltas.resize(static_cast<std::size_t>(n));
  const double bin = (ray.far - ray.near) / n;
  for (int i = 0; i < n; ++i) {
    const double u = stratified ? rng->uniform() : 0.5;
    out.depths[static_cast<std::size_t>(i)] = ray.near + (i + u) * bin;
  }
  for (int i = 0; i + 1 < n; ++i)
    out.deltas[static_cast<std::size_t>(i)] = out.depths[static_cast<std::size_t>(i) + 1] - out.depths[static_cast<std::size_t>(i)];
  out.deltas.back() = kFarDeltaSentinel;
  return out;
}

inline RaySamples sample_along_ray(const Ray& ray, int n, bool stratified, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  return sample_along_ray(ray, n, stratified, &rng);
}

template <class T>
void compute_weights(std::span<const T> sigmas, std::span<const T> deltas, std::span<T> weights) {
  if (sigmas.size() != deltas.size() || weights.size() != sigmas.size())
    throw Error("compute_weights: sigma, delta and weight lengths differ");
  T optical_depth = 0;  // sum_{j<i} delta_j sigma_j
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (sigmas[i] < T(0) || deltas[i] < T(0) || std::isnan(sigmas[i]) || std::isnan(deltas[i]))
      throw Error("compute_weights: sigma and delta must be non-negative");
    const T tau = deltas[i] * sigmas[i];
    weights[i] = std::exp(-optical_depth) * -std::expm1(-tau);
    optical_depth += tau;
  }
}

template <class T>
std::vector<T> compute_weights(std::span<const T> sigmas, std::span<const T> deltas) {
  std::vector<T> w(sigmas.size());
  compute_weights<T>(sigmas, deltas, std::span<T>(w));
  return w;
}

inline std::vector<double> compute_weights(const std::vector<double>& sigmas, const std::vector<double>& deltas) {
  return compute_weights<double>(std::span<const double>(sigmas), std::span<const double>(deltas));
}

// sum_i w_i v_i for an n x C attribute block.
template <class T>
ag::RowVector<T> composite(std::span<const T> weights, const Eigen::Ref<const ag::Matrix<T>>& values) {
  if (static_cast<Eigen::Index>(weights.size()) != values.rows())
    throw Error("composite: weight count does not match sample count");
  ag::RowVector<T> out = ag::RowVector<T>::Zero(values.cols());
  for (std::size_t i = 0; i < weights.size(); ++i) out += weights[i] * values.row(static_cast<Eigen::Index>(i));
  return out;
}

inline std::array<double, 3> render_colour(const std::vector<double>& weights,
                                           const std::vector<std::array<double, 3>>& colours) {
  if (weights.size() != colours.size()) throw Error("render_colour: weights and colours differ in length");
  ag::Matrix<double> values(static_cast<Eigen::Index>(colours.size()), 3);
  for (std::size_t i = 0; i < colours.size(); ++i)
    for (int c = 0; c < 3; ++c) values(static_cast<Eigen::Index>(i), c) = colours[i][static_cast<std::size_t>(c)];
  const auto rgb = composite<double>(std::span<const double>(weights), values);
  return {rgb(0), rgb(1), rgb(2)};
}

template <class T>
ag::RowVector<T> softmax(const ag::RowVector<T>& logits) {
  ag::RowVector<T> p = (logits.array() - logits.maxCoeff()).exp().matrix();
  return p / p.sum();
}

struct SemanticRender {
  std::vector<double> logits;         // composited attribute vector
  std::vector<double> probabilities;  // softmax of logits
  int argmax = 0;
};

inline SemanticRender render_semantics(const std::vector<double>& weights, const ag::Matrix<double>& semantic_attrs) {
  SemanticRender out;
  const ag::RowVector<double> logits = composite<double>(std::span<const double>(weights), semantic_attrs);
  const ag::RowVector<double> probs = softmax<double>(logits);
  out.logits.assign(logits.data(), logits.data() + logits.size());
  out.probabilities.assign(probs.data(), probs.data() + probs.size());
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  out.argmax = static_cast<int>(best);
  return out;
}

// Batched weights for rays of `samples_per_ray` consecutive rows.
template <class T>
ag::Matrix<T> batch_weights(const ag::Matrix<T>& sigmas, const ag::Matrix<T>& deltas, Eigen::Index samples_per_ray) {
  if (sigmas.cols() != 1 || deltas.cols() != 1 || sigmas.rows() != deltas.rows())
    throw Error("batch_weights: sigma and delta must be matching column vectors");
  if (samples_per_ray <= 0 || sigmas.rows() % samples_per_ray != 0)
    throw Error("batch_weights: row count is not a multiple of samples per ray");
  ag::Matrix<T> w(sigmas.rows(), 1);
  for (Eigen::Index r = 0; r < sigmas.rows(); r += samples_per_ray) {
    compute_weights<T>(std::span<const T>(sigmas.data() + r, static_cast<std::size_t>(samples_per_ray)),
                       std::span<const T>(deltas.data() + r, static_cast<std::size_t>(samples_per_ray)),
                       std::span<T>(w.data() + r, static_cast<std::size_t>(samples_per_ray)));
  }
  return w;
}

// Differentiable batched compositing. `sigmas` is (B*n) x 1, `values` is
// (B*n) x C, `deltas` is (B*n) x 1 and constant; the result is B x C.
// Gradient with respect to sigma_k of ray output o = sum_i w_i v_i:
//   d o / d sigma_k = delta_k (T_{k+1} v_k - sum_{i>k} w_i v_i)
template <class T>
ag::Var<T> composite(const ag::Var<T>& sigmas, const ag::Var<T>& values, const ag::Matrix<T>& deltas,
                     Eigen::Index samples_per_ray) {
  if (values.rows() != sigmas.rows()) throw Error("composite: sigma and value row counts differ");
  const Eigen::Index n = samples_per_ray;
  const ag::Matrix<T> w = batch_weights<T>(sigmas.value(), deltas, n);
  const Eigen::Index rays = sigmas.rows() / n;
  const Eigen::Index channels = values.cols();
  ag::Matrix<T> out = ag::Matrix<T>::Zero(rays, channels);
  for (Eigen::Index r = 0; r < rays; ++r)
    for (Eigen::Index i = 0; i < n; ++i) out.row(r) += w(r * n + i, 0) * values.value().row(r * n + i);
  ag::Tape<T>& tape = *sigmas.tape();
  return tape.record(std::move(out), {sigmas, values}, [&tape, sigmas, values, deltas, w, n, rays, channels](const ag::Matrix<T>& g) {
    if (values.requires_grad()) {
      ag::Matrix<T> dv(values.rows(), channels);
      for (Eigen::Index r = 0; r < rays; ++r)
        for (Eigen::Index i = 0; i < n; ++i) dv.row(r * n + i) = w(r * n + i, 0) * g.row(r);
      tape.accumulate(values, dv);
    }
    if (sigmas.requires_grad()) {
      ag::Matrix<T> ds(sigmas.rows(), 1);
      std::vector<T> after(static_cast<std::size_t>(n));  // exp(-sum_{j<=k} delta_j sigma_j)
      for (Eigen::Index r = 0; r < rays; ++r) {
        T optical_depth = 0;
        for (Eigen::Index k = 0; k < n; ++k) {
          optical_depth += deltas(r * n + k, 0) * sigmas.value()(r * n + k, 0);
          after[static_cast<std::size_t>(k)] = std::exp(-optical_depth);
        }
        T suffix = 0;  // sum_{i>k} w_i (g . v_i)
        for (Eigen::Index k = n; k-- > 0;) {
          const Eigen::Index row = r * n + k;
          const T gv = g.row(r).dot(values.value().row(row));
          ds(row, 0) = deltas(row, 0) * (after[static_cast<std::size_t>(k)] * gv - suffix);
          suffix += w(row, 0) * gv;
        }
      }
      tape.accumulate(sigmas, ds);
    }
  });
}

}  // namespace semfield
