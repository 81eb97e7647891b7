#pragma once

// The implicit field: a density network mapping encoded position to
// (sigma, base feature) and a colour network mapping (base feature, encoded
// direction) to RGB. Parameter names are namespaced so the density branch
// can be frozen as a unit:
//
//   field.density.layer<k>.{weight,bias}   trunk
//   field.density.sigma.{weight,bias}      sigma head (softplus)
//   field.density.feature.{weight,bias}    base feature head
//   field.colour.hidden.{weight,bias}
//   field.colour.out.{weight,bias}         sigmoid

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "semfield/autograd.hpp"
#include "semfield/checkpoint.hpp"
#include "semfield/common.hpp"
#include "semfield/nn.hpp"

namespace semfield {

using ag::Matrix;

enum class Activation { kRelu, kGelu, kSoftplus };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::kRelu:
      return "relu";
    case Activation::kGelu:
      return "gelu";
    case Activation::kSoftplus:
      return "softplus";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "gelu") return Activation::kGelu;
  if (s == "softplus") return Activation::kSoftplus;
  throw Error("unknown activation '" + s + "'");
}

template <class T>
ag::Var<T> activate(Activation a, const ag::Var<T>& x) {
  switch (a) {
    case Activation::kRelu:
      return ag::relu(x);
    case Activation::kGelu:
      return ag::gelu(x);
    case Activation::kSoftplus:
      return ag::softplus(x);
  }
  return x;
}

struct FieldConfig {
  int position_freqs = 10;
  int direction_freqs = 4;
  int hidden_width = 256;
  int depth = 8;
  int base_feature_dim = 256;
  Activation activation = Activation::kGelu;
  // Scene coordinates are multiplied by this before encoding so that the
  // bounded scene maps roughly into [-1, 1].
  double position_scale = 1.0;

  void validate() const {
    if (position_freqs <= 0 || direction_freqs <= 0 || hidden_width <= 0 || depth <= 0)
      throw Error("field config: all sizes must be positive");
    if (base_feature_dim < 8) throw Error("field config: base_feature_dim must be at least 8");
    if (!(position_scale > 0.0)) throw Error("field config: position_scale must be positive");
  }

  int position_encoding_dim() const { return 3 + 3 * 2 * position_freqs; }
  int direction_encoding_dim() const { return 3 + 3 * 2 * direction_freqs; }
  // Layer whose input is concatenated with the encoded position.
  int skip_layer() const { return depth >= 4 ? depth / 2 : -1; }

  bool operator==(const FieldConfig&) const = default;
};

inline nlohmann::json to_json(const FieldConfig& c) {
  return {{"position_freqs", c.position_freqs}, {"direction_freqs", c.direction_freqs},
          {"hidden_width", c.hidden_width},     {"depth", c.depth},
          {"base_feature_dim", c.base_feature_dim}, {"activation", to_string(c.activation)},
          {"position_scale", c.position_scale}};
}

inline FieldConfig field_config_from_json(const nlohmann::json& j) {
  FieldConfig c;
  c.position_freqs = j.value("position_freqs", c.position_freqs);
  c.direction_freqs = j.value("direction_freqs", c.direction_freqs);
  c.hidden_width = j.value("hidden_width", c.hidden_width);
  c.depth = j.value("depth", c.depth);
  c.base_feature_dim = j.value("base_feature_dim", c.base_feature_dim);
  c.activation = parse_activation(j.value("activation", to_string(c.activation)));
  c.position_scale = j.value("position_scale", c.position_scale);
  c.validate();
  return c;
}

// Rows of `x` are d-vectors. Output columns: raw x, then for k = 0..freqs-1
// the d sines followed by the d cosines of 2^k * pi * x.
template <class T>
Matrix<T> positional_encode(const Matrix<T>& x, int freqs) {
  if (freqs < 1) throw Error("positional_encode: freqs must be at least 1");
  const Eigen::Index d = x.cols();
  Matrix<T> out(x.rows(), d + 2 * d * freqs);
  out.leftCols(d) = x;
  for (int k = 0; k < freqs; ++k) {
    const T w = static_cast<T>(std::ldexp(M_PI, k));
    const Eigen::Index base = d + 2 * d * k;
    out.middleCols(base, d) = (x.array() * w).sin().matrix();
    out.middleCols(base + d, d) = (x.array() * w).cos().matrix();
  }
  return out;
}

template <class T>
struct FieldOutput {
  Matrix<T> sigma;   // n x 1
  Matrix<T> colour;  // n x 3
  Matrix<T> base;    // n x base_feature_dim
};

template <class T>
struct FieldVars {
  ag::Var<T> sigma;
  ag::Var<T> colour;
  ag::Var<T> base;
};

inline const std::string kDensityPrefix = "field.density.";
inline const std::string kColourPrefix = "field.colour.";

template <class T>
void init_field_params(nn::ParameterSet<T>& params, const FieldConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0xF1E1D));
  const int width = config.hidden_width;
  const int pe = config.position_encoding_dim();
  for (int k = 0; k < config.depth; ++k) {
    int in = k == 0 ? pe : width;
    if (k == config.skip_layer()) in += pe;
    nn::add_linear(params, kDensityPrefix + "layer" + std::to_string(k), in, width, rng);
  }
  nn::add_linear(params, kDensityPrefix + "sigma", width, 1, rng);
  nn::add_linear(params, kDensityPrefix + "feature", width, config.base_feature_dim, rng);
  const int colour_hidden = std::max(8, width / 2);
  nn::add_linear(params, kColourPrefix + "hidden", config.base_feature_dim + config.direction_encoding_dim(),
                 colour_hidden, rng);
  nn::add_linear(params, kColourPrefix + "out", colour_hidden, 3, rng);
}

template <class T>
void require_finite(const Matrix<T>& m, const char* what) {
  if (!m.allFinite()) throw Error(std::string("query_field: non-finite ") + what);
}

// Differentiable forward pass. `points` and `directions` are n x 3.
template <class T>
FieldVars<T> field_forward(nn::Binding<T>& bind, const FieldConfig& config, const Matrix<T>& points,
                           const Matrix<T>& directions) {
  require_finite(points, "point coordinates");
  require_finite(directions, "direction coordinates");
  if (points.cols() != 3 || directions.cols() != 3 || points.rows() != directions.rows())
    throw Error("query_field: points and directions must both be n x 3");
  ag::Tape<T>& tape = bind.tape();
  const Matrix<T> scaled = points * static_cast<T>(config.position_scale);
  const ag::Var<T> pe = tape.constant(positional_encode<T>(scaled, config.position_freqs));
  const ag::Var<T> de = tape.constant(positional_encode<T>(directions, config.direction_freqs));
  ag::Var<T> h = pe;
  for (int k = 0; k < config.depth; ++k) {
    if (k == config.skip_layer()) h = ag::concat_cols(h, pe);
    h = activate(config.activation, nn::apply_linear(bind, kDensityPrefix + "layer" + std::to_string(k), h));
  }
  FieldVars<T> out;
  out.sigma = ag::softplus(nn::apply_linear(bind, kDensityPrefix + "sigma", h));
  out.base = nn::apply_linear(bind, kDensityPrefix + "feature", h);
  ag::Var<T> c = activate(config.activation, nn::apply_linear(bind, kColourPrefix + "hidden", ag::concat_cols(out.base, de)));
  out.colour = ag::sigmoid(nn::apply_linear(bind, kColourPrefix + "out", c));
  return out;
}

// Pure evaluation of the field, no gradient bookkeeping.
template <class T>
FieldOutput<T> query_field(const Matrix<T>& points, const Matrix<T>& directions, const nn::ParameterSet<T>& params,
                           const FieldConfig& config) {
  ag::Tape<T> tape;
  nn::Binding<T> bind(tape, params, /*differentiable=*/false);
  FieldVars<T> vars = field_forward(bind, config, points, directions);
  return {vars.sigma.value(), vars.colour.value(), vars.base.value()};
}

// Marks the density branch (trunk, sigma head, base-feature head) frozen.
template <class T>
void freeze_density(nn::ParameterSet<T>& params) {
  if (params.freeze(kDensityPrefix) == 0) throw Error("freeze_density: parameter set holds no density network");
}

template <class T>
void freeze_colour(nn::ParameterSet<T>& params) {
  params.freeze(kColourPrefix);
}

// Loads a checkpoint and checks that its field configuration matches.
template <class T>
Checkpoint<T> load_field_checkpoint(const std::string& path, const FieldConfig& expected) {
  Checkpoint<T> ckpt = load_checkpoint<T>(path);
  if (!ckpt.header.contains("field")) throw Error("checkpoint has no field configuration: " + path);
  const FieldConfig stored = field_config_from_json(ckpt.header.at("field"));
  if (!(stored == expected))
    throw Error("checkpoint field configuration does not match the requested one: " + path + " stores " +
                ckpt.header.at("field").dump());
  return ckpt;
}

}  // namespace semfield
