#pragma once

// Transformer head turning per-sample base features into per-sample
// semantic attributes:
//
//   s   = encoder(base features of the n samples on one ray)
//   s1  = decoder(queries = s, memory = projected pixel feature of the ray)
//   s2  = (s + s1) W_out + b_out                 (n x L)
//
// Layers are post-norm. Attention never mixes samples of different rays;
// the decoder memory is a single token per ray. All parameters live under
// the "fusion." prefix.

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfield/autograd.hpp"
#include "semfield/common.hpp"
#include "semfield/nn.hpp"

namespace semfield {

inline const std::string kFusionPrefix = "fusion.";

struct FusionConfig {
  int model_dim = 64;
  int head_count = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int feedforward_dim = 128;
  int semantic_dim = 0;  // class count L
  int base_dim = 256;    // width of the field's base features
  int prior_dim = 256;   // width of the foundation features
  bool depth_encoding = true;
  bool use_prior = true;  // false replaces the cross-attention branch by zero
  double depth_encoding_scale = 64.0;

  void validate() const {
    if (model_dim <= 0 || head_count <= 0 || encoder_layers < 0 || decoder_layers < 0 || feedforward_dim <= 0 ||
        semantic_dim <= 0 || base_dim <= 0 || prior_dim <= 0)
      throw Error("fusion config: sizes must be positive");
    if (model_dim % head_count != 0) throw Error("fusion config: model_dim must be divisible by head_count");
  }

  bool operator==(const FusionConfig&) const = default;
};

inline nlohmann::json to_json(const FusionConfig& c) {
  return {{"model_dim", c.model_dim},           {"head_count", c.head_count},
          {"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
          {"feedforward_dim", c.feedforward_dim}, {"semantic_dim", c.semantic_dim},
          {"base_dim", c.base_dim},             {"prior_dim", c.prior_dim},
          {"depth_encoding", c.depth_encoding}, {"use_prior", c.use_prior},
          {"depth_encoding_scale", c.depth_encoding_scale}};
}

inline FusionConfig fusion_config_from_json(const nlohmann::json& j) {
  FusionConfig c;
  c.model_dim = j.value("model_dim", c.model_dim);
  c.head_count = j.value("head_count", c.head_count);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.feedforward_dim = j.value("feedforward_dim", c.feedforward_dim);
  c.semantic_dim = j.value("semantic_dim", c.semantic_dim);
  c.base_dim = j.value("base_dim", c.base_dim);
  c.prior_dim = j.value("prior_dim", c.prior_dim);
  c.depth_encoding = j.value("depth_encoding", c.depth_encoding);
  c.use_prior = j.value("use_prior", c.use_prior);
  c.depth_encoding_scale = j.value("depth_encoding_scale", c.depth_encoding_scale);
  return c;
}

namespace detail {

template <class T>
void add_attention_params(nn::ParameterSet<T>& params, const std::string& prefix, int dim, Rng& rng) {
  for (const char* part : {".q", ".k", ".v", ".o"}) nn::add_linear(params, prefix + part, dim, dim, rng);
}

template <class T>
ag::Var<T> multi_head_attention(nn::Binding<T>& bind, const std::string& prefix, const ag::Var<T>& queries,
                                const ag::Var<T>& memory, Eigen::Index groups, int heads) {
  const ag::Var<T> q = nn::apply_linear(bind, prefix + ".q", queries);
  const ag::Var<T> k = nn::apply_linear(bind, prefix + ".k", memory);
  const ag::Var<T> v = nn::apply_linear(bind, prefix + ".v", memory);
  return nn::apply_linear(bind, prefix + ".o", ag::attention(q, k, v, groups, heads));
}

template <class T>
ag::Var<T> feed_forward(nn::Binding<T>& bind, const std::string& prefix, const ag::Var<T>& x) {
  return nn::apply_linear(bind, prefix + ".ff2", ag::gelu(nn::apply_linear(bind, prefix + ".ff1", x)));
}

}  // namespace detail

template <class T>
void init_fusion_params(nn::ParameterSet<T>& params, const FusionConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0xF5510));
  const int d = config.model_dim;
  nn::add_linear(params, kFusionPrefix + "input", config.base_dim, d, rng);
  for (int l = 0; l < config.encoder_layers; ++l) {
    const std::string p = kFusionPrefix + "encoder" + std::to_string(l);
    detail::add_attention_params(params, p + ".self", d, rng);
    nn::add_layer_norm(params, p + ".norm1", d);
    nn::add_linear(params, p + ".ff1", d, config.feedforward_dim, rng);
    nn::add_linear(params, p + ".ff2", config.feedforward_dim, d, rng);
    nn::add_layer_norm(params, p + ".norm2", d);
  }
  nn::add_linear(params, kFusionPrefix + "prior", config.prior_dim, d, rng);
  for (int l = 0; l < config.decoder_layers; ++l) {
    const std::string p = kFusionPrefix + "decoder" + std::to_string(l);
    detail::add_attention_params(params, p + ".self", d, rng);
    nn::add_layer_norm(params, p + ".norm1", d);
    detail::add_attention_params(params, p + ".cross", d, rng);
    nn::add_layer_norm(params, p + ".norm2", d);
    nn::add_linear(params, p + ".ff1", d, config.feedforward_dim, rng);
    nn::add_linear(params, p + ".ff2", config.feedforward_dim, d, rng);
    nn::add_layer_norm(params, p + ".norm3", d);
  }
  nn::add_linear(params, kFusionPrefix + "output", d, config.semantic_dim, rng);
}

// Zeroes the output projection of every cross-attention block, which
// removes the pixel-feature prior from the forward pass.
template <class T>
void zero_cross_attention_output(nn::ParameterSet<T>& params, const FusionConfig& config) {
  for (int l = 0; l < config.decoder_layers; ++l) {
    const std::string p = kFusionPrefix + "decoder" + std::to_string(l) + ".cross.o";
    params.at(p + ".weight").value.setZero();
    params.at(p + ".bias").value.setZero();
  }
}

// Sinusoidal encoding of normalised sample depth (column vector in [0, 1]).
template <class T>
ag::Matrix<T> depth_encoding(const ag::Matrix<T>& normalized_depth, int dim, double scale) {
  ag::Matrix<T> pe(normalized_depth.rows(), dim);
  for (Eigen::Index r = 0; r < normalized_depth.rows(); ++r) {
    const double p = static_cast<double>(normalized_depth(r, 0)) * scale;
    for (int i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / dim);
      pe(r, i) = static_cast<T>(std::sin(p * freq));
      if (i + 1 < dim) pe(r, i + 1) = static_cast<T>(std::cos(p * freq));
    }
  }
  return pe;
}

template <class T>
struct SemanticVars {
  ag::Var<T> s;   // encoder output, (B*n) x model_dim
  ag::Var<T> s1;  // decoder output, (B*n) x model_dim
  ag::Var<T> s2;  // semantic attributes, (B*n) x L
};

// `base` holds B rays of n consecutive samples. `normalized_depth` may be
// empty when depth encoding is disabled.
template <class T>
ag::Var<T> fusion_encode(nn::Binding<T>& bind, const FusionConfig& config, const ag::Var<T>& base,
                         const ag::Matrix<T>& normalized_depth, Eigen::Index samples_per_ray) {
  if (samples_per_ray <= 0 || base.rows() == 0) throw Error("encode_samples: need at least one sample");
  if (base.rows() % samples_per_ray != 0) throw Error("encode_samples: rows are not a multiple of samples per ray");
  if (base.cols() != config.base_dim) throw Error("encode_samples: base feature width mismatch");
  const Eigen::Index rays = base.rows() / samples_per_ray;
  ag::Var<T> x = nn::apply_linear(bind, kFusionPrefix + "input", base);
  if (config.depth_encoding) {
    if (normalized_depth.rows() != base.rows()) throw Error("encode_samples: depth column does not match samples");
    x = ag::add(x, bind.tape().constant(depth_encoding<T>(normalized_depth, config.model_dim, config.depth_encoding_scale)));
  }
  for (int l = 0; l < config.encoder_layers; ++l) {
    const std::string p = kFusionPrefix + "encoder" + std::to_string(l);
    x = nn::apply_layer_norm(bind, p + ".norm1",
                             ag::add(x, detail::multi_head_attention(bind, p + ".self", x, x, rays, config.head_count)));
    x = nn::apply_layer_norm(bind, p + ".norm2", ag::add(x, detail::feed_forward(bind, p, x)));
  }
  return x;
}

// `prior` is B x prior_dim: one foundation feature per ray.
template <class T>
ag::Var<T> fusion_decode(nn::Binding<T>& bind, const FusionConfig& config, const ag::Var<T>& s, const ag::Var<T>& prior,
                         Eigen::Index samples_per_ray) {
  if (prior.cols() != config.prior_dim) throw Error("decode_with_prior: pixel feature width mismatch");
  if (s.cols() != config.model_dim) throw Error("decode_with_prior: sequence width mismatch");
  const Eigen::Index rays = s.rows() / samples_per_ray;
  if (prior.rows() != rays) throw Error("decode_with_prior: need one pixel feature per ray");
  const ag::Var<T> memory = nn::apply_linear(bind, kFusionPrefix + "prior", prior);
  ag::Var<T> x = s;
  for (int l = 0; l < config.decoder_layers; ++l) {
    const std::string p = kFusionPrefix + "decoder" + std::to_string(l);
    x = nn::apply_layer_norm(bind, p + ".norm1",
                             ag::add(x, detail::multi_head_attention(bind, p + ".self", x, x, rays, config.head_count)));
    if (config.use_prior) {
      x = ag::add(x, detail::multi_head_attention(bind, p + ".cross", x, memory, rays, config.head_count));
    }
    x = nn::apply_layer_norm(bind, p + ".norm2", x);
    x = nn::apply_layer_norm(bind, p + ".norm3", ag::add(x, detail::feed_forward(bind, p, x)));
  }
  return x;
}

template <class T>
ag::Var<T> fusion_fuse(nn::Binding<T>& bind, const ag::Var<T>& s, const ag::Var<T>& s1) {
  return nn::apply_linear(bind, kFusionPrefix + "output", ag::add(s, s1));
}

template <class T>
SemanticVars<T> fusion_forward(nn::Binding<T>& bind, const FusionConfig& config, const ag::Var<T>& base,
                               const ag::Matrix<T>& normalized_depth, const ag::Var<T>& prior,
                               Eigen::Index samples_per_ray) {
  SemanticVars<T> out;
  out.s = fusion_encode(bind, config, base, normalized_depth, samples_per_ray);
  out.s1 = fusion_decode(bind, config, out.s, prior, samples_per_ray);
  out.s2 = fusion_fuse(bind, out.s, out.s1);
  return out;
}

// Single-ray convenience evaluations (no gradients).

template <class T>
ag::Matrix<T> encode_samples(const ag::Matrix<T>& base, const nn::ParameterSet<T>& params, const FusionConfig& config,
                             const ag::Matrix<T>& normalized_depth = {}) {
  if (base.rows() == 0) throw Error("encode_samples: need at least one sample");
  ag::Tape<T> tape;
  nn::Binding<T> bind(tape, params, false);
  return fusion_encode(bind, config, tape.constant(base), normalized_depth, base.rows()).value();
}

template <class T>
ag::Matrix<T> decode_with_prior(const ag::Matrix<T>& s, std::span<const T> pixel_feature,
                                const nn::ParameterSet<T>& params, const FusionConfig& config) {
  if (static_cast<int>(pixel_feature.size()) != config.prior_dim)
    throw Error("decode_with_prior: pixel feature width mismatch");
  ag::Tape<T> tape;
  nn::Binding<T> bind(tape, params, false);
  ag::Matrix<T> prior(1, config.prior_dim);
  for (int d = 0; d < config.prior_dim; ++d) prior(0, d) = pixel_feature[static_cast<std::size_t>(d)];
  return fusion_decode(bind, config, tape.constant(s), tape.constant(prior), s.rows()).value();
}

template <class T>
ag::Matrix<T> fuse(const ag::Matrix<T>& s, const ag::Matrix<T>& s1, const nn::ParameterSet<T>& params) {
  if (s.rows() != s1.rows() || s.cols() != s1.cols()) throw Error("fuse: s and s1 shapes differ");
  ag::Tape<T> tape;
  nn::Binding<T> bind(tape, params, false);
  return fusion_fuse(bind, tape.constant(s), tape.constant(s1)).value();
}

}  // namespace semfield
