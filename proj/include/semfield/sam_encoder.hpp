#pragma once

// Image encoder of the Segment Anything model (a plain ViT with windowed
// attention, decomposed relative positions and a convolutional neck),
// evaluated on the CPU with Eigen. Weights come from a checkpoint produced
// by tools/convert_sam_checkpoint.py.
//
// Tensor layout: token maps are (H*W) x C, row index y*W + x.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfield/autograd.hpp"
#include "semfield/checkpoint.hpp"
#include "semfield/common.hpp"
#include "semfield/foundation_features.hpp"
#include "semfield/image.hpp"

namespace semfield::sam {

using MatrixF = ag::Matrix<float>;

struct EncoderConfig {
  std::string variant = "vit_b";
  int image_size = 1024;
  int patch_size = 16;
  int embed_dim = 768;
  int depth = 12;
  int num_heads = 12;
  int mlp_dim = 3072;
  int window_size = 14;
  std::vector<int> global_attn_indexes = {2, 5, 8, 11};
  int out_channels = 256;
  double layer_norm_eps = 1e-6;

  int grid() const { return image_size / patch_size; }
  int head_dim() const { return embed_dim / num_heads; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw Error("sam config: image_size must be a positive multiple of patch_size");
    if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
      throw Error("sam config: embed_dim must be divisible by num_heads");
    if (depth < 0 || mlp_dim <= 0 || window_size < 0 || out_channels <= 0) throw Error("sam config: bad sizes");
  }

  bool is_global(int block) const {
    for (int g : global_attn_indexes)
      if (g == block) return true;
    return window_size == 0;
  }
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"variant", c.variant},       {"image_size", c.image_size},   {"patch_size", c.patch_size},
          {"embed_dim", c.embed_dim},   {"depth", c.depth},             {"num_heads", c.num_heads},
          {"mlp_dim", c.mlp_dim},       {"window_size", c.window_size}, {"global_attn_indexes", c.global_attn_indexes},
          {"out_channels", c.out_channels}, {"layer_norm_eps", c.layer_norm_eps}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.variant = j.value("variant", c.variant);
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.depth = j.value("depth", c.depth);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_dim = j.value("mlp_dim", c.mlp_dim);
  c.window_size = j.value("window_size", c.window_size);
  c.global_attn_indexes = j.value("global_attn_indexes", c.global_attn_indexes);
  c.out_channels = j.value("out_channels", c.out_channels);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  c.validate();
  return c;
}

namespace detail {

inline void layer_norm_rows(MatrixF& x, const MatrixF& gain, const MatrixF& bias, double eps) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    const double mean = row.cast<double>().mean();
    const double var = (row.cast<double>().array() - mean).square().mean();
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    row = ((row.array() - static_cast<float>(mean)) * inv * gain.array() + bias.array()).matrix();
  }
}

inline float gelu(float x) { return 0.5f * x * (1.0f + std::erf(x / std::sqrt(2.0f))); }

// Relative-position table for query length q and key length k, as the
// reference implementation builds it (no resampling: the table must have
// 2*max(q, k) - 1 rows).
inline MatrixF rel_pos_table(int q, int k, const MatrixF& rel_pos) {
  const int max_dist = 2 * std::max(q, k) - 1;
  if (rel_pos.rows() != max_dist)
    throw Error("sam encoder: relative position table has " + std::to_string(rel_pos.rows()) + " rows, expected " +
                std::to_string(max_dist));
  const double qs = std::max(static_cast<double>(k) / q, 1.0);
  const double ks = std::max(static_cast<double>(q) / k, 1.0);
  MatrixF out(static_cast<Eigen::Index>(q) * k, rel_pos.cols());
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < k; ++j) {
      const auto idx = static_cast<Eigen::Index>(i * qs - j * ks + (k - 1) * ks);
      out.row(static_cast<Eigen::Index>(i) * k + j) = rel_pos.row(idx);
    }
  return out;
}

}  // namespace detail

class Encoder {
 public:
  Encoder(EncoderConfig config, nn::ParameterSet<float> params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    check_shapes();
  }

  static Encoder load(const std::string& path) {
    if (!std::filesystem::exists(path))
      throw Error("SAM encoder weights not found at '" + path +
                  "'. Convert a checkpoint with tools/convert_sam_checkpoint.py, or use --backend stub.");
    Checkpoint<float> ckpt = load_checkpoint<float>(path);
    if (!ckpt.header.contains("sam")) throw Error("not a SAM encoder checkpoint: " + path);
    return Encoder(encoder_config_from_json(ckpt.header.at("sam")), std::move(ckpt.params));
  }

  const EncoderConfig& config() const { return config_; }

  // `input` is the normalised, padded image: image_size^2 x 3 (row-major
  // pixels). Returns the grid^2 x out_channels feature map.
  MatrixF forward(const MatrixF& input) const { return neck(tokens(input, config_.depth)); }

  // Token map after the patch embedding and the first `blocks` blocks.
  MatrixF tokens(const MatrixF& input, int blocks) const {
    const int s = config_.image_size, p = config_.patch_size, g = config_.grid();
    if (input.rows() != static_cast<Eigen::Index>(s) * s || input.cols() != 3)
      throw Error("sam encoder: input must be image_size^2 x 3");
    // Patch embedding as a matrix product over flattened (c, ky, kx) patches.
    MatrixF patches(static_cast<Eigen::Index>(g) * g, 3 * p * p);
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx)
        for (int c = 0; c < 3; ++c)
          for (int ky = 0; ky < p; ++ky)
            for (int kx = 0; kx < p; ++kx)
              patches(gy * g + gx, (c * p + ky) * p + kx) = input((gy * p + ky) * s + gx * p + kx, c);
    MatrixF x = patches * w("patch_embed.proj.weight").transpose();
    x.rowwise() += w("patch_embed.proj.bias").row(0);
    x += w("pos_embed");
    for (int b = 0; b < std::min(blocks, config_.depth); ++b) block(x, b);
    return x;
  }

 private:
  const MatrixF& w(const std::string& name) const { return params_.at(name).value; }

  void check_shapes() const {
    const int d = config_.embed_dim, p = config_.patch_size, g = config_.grid();
    auto expect = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
      const MatrixF& m = w(name);
      if (m.rows() != r || m.cols() != c)
        throw Error("sam encoder: tensor " + name + " has shape " + std::to_string(m.rows()) + "x" +
                    std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
    };
    expect("patch_embed.proj.weight", d, 3 * p * p);
    expect("patch_embed.proj.bias", 1, d);
    expect("pos_embed", static_cast<Eigen::Index>(g) * g, d);
    for (int b = 0; b < config_.depth; ++b) {
      const std::string pre = "blocks." + std::to_string(b) + ".";
      const int span = config_.is_global(b) ? g : config_.window_size;
      expect(pre + "attn.qkv.weight", 3 * d, d);
      expect(pre + "attn.proj.weight", d, d);
      expect(pre + "attn.rel_pos_h", 2 * span - 1, config_.head_dim());
      expect(pre + "attn.rel_pos_w", 2 * span - 1, config_.head_dim());
      expect(pre + "mlp.lin1.weight", config_.mlp_dim, d);
      expect(pre + "mlp.lin2.weight", d, config_.mlp_dim);
    }
    expect("neck.0.weight", config_.out_channels, d);
    expect("neck.2.weight", config_.out_channels, config_.out_channels * 9);
  }

  void linear(const MatrixF& in, const std::string& prefix, MatrixF& out) const {
    out.noalias() = in * w(prefix + ".weight").transpose();
    out.rowwise() += w(prefix + ".bias").row(0);
  }

  // Multi-head attention with decomposed relative positions over one
  // h x w token window (rows y*w + x).
  MatrixF attention(const MatrixF& x, int h, int wd, const std::string& pre) const {
    const int d = config_.embed_dim, heads = config_.num_heads, hd = config_.head_dim();
    MatrixF qkv;
    linear(x, pre + "attn.qkv", qkv);
    const MatrixF rh = detail::rel_pos_table(h, h, w(pre + "attn.rel_pos_h"));
    const MatrixF rw = detail::rel_pos_table(wd, wd, w(pre + "attn.rel_pos_w"));
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const Eigen::Index n = x.rows();
    MatrixF out(n, d);
    for (int head = 0; head < heads; ++head) {
      const MatrixF q = qkv.middleCols(head * hd, hd);
      const MatrixF k = qkv.middleCols(d + head * hd, hd);
      const MatrixF v = qkv.middleCols(2 * d + head * hd, hd);
      MatrixF logits = (q * scale) * k.transpose();
      for (int qy = 0; qy < h; ++qy)
        for (int qx = 0; qx < wd; ++qx) {
          const Eigen::Index qi = static_cast<Eigen::Index>(qy) * wd + qx;
          for (int ky = 0; ky < h; ++ky) {
            const float bias_h = q.row(qi).dot(rh.row(static_cast<Eigen::Index>(qy) * h + ky));
            for (int kx = 0; kx < wd; ++kx) {
              const float bias_w = q.row(qi).dot(rw.row(static_cast<Eigen::Index>(qx) * wd + kx));
              logits(qi, static_cast<Eigen::Index>(ky) * wd + kx) += bias_h + bias_w;
            }
          }
        }
      for (Eigen::Index r = 0; r < n; ++r) {
        auto row = logits.row(r);
        row = (row.array() - row.maxCoeff()).exp().matrix();
        row /= row.sum();
      }
      out.middleCols(head * hd, hd).noalias() = logits * v;
    }
    MatrixF projected;
    linear(out, pre + "attn.proj", projected);
    return projected;
  }

  void block(MatrixF& x, int b) const {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    const int g = config_.grid(), d = config_.embed_dim;
    MatrixF h = x;
    detail::layer_norm_rows(h, w(pre + "norm1.weight"), w(pre + "norm1.bias"), config_.layer_norm_eps);
    MatrixF attended(h.rows(), d);
    if (config_.is_global(b)) {
      attended = attention(h, g, g, pre);
    } else {
      // Zero-pad to a multiple of the window, attend per window, crop.
      const int ws = config_.window_size;
      const int padded = (g + ws - 1) / ws * ws;
      MatrixF win(static_cast<Eigen::Index>(ws) * ws, d);
      for (int wy = 0; wy < padded; wy += ws)
        for (int wx = 0; wx < padded; wx += ws) {
          for (int y = 0; y < ws; ++y)
            for (int xx = 0; xx < ws; ++xx) {
              const int gy = wy + y, gx = wx + xx;
              if (gy < g && gx < g)
                win.row(y * ws + xx) = h.row(static_cast<Eigen::Index>(gy) * g + gx);
              else
                win.row(y * ws + xx).setZero();
            }
          const MatrixF o = attention(win, ws, ws, pre);
          for (int y = 0; y < ws; ++y)
            for (int xx = 0; xx < ws; ++xx) {
              const int gy = wy + y, gx = wx + xx;
              if (gy < g && gx < g) attended.row(static_cast<Eigen::Index>(gy) * g + gx) = o.row(y * ws + xx);
            }
        }
    }
    x += attended;
    h = x;
    detail::layer_norm_rows(h, w(pre + "norm2.weight"), w(pre + "norm2.bias"), config_.layer_norm_eps);
    MatrixF hidden;
    linear(h, pre + "mlp.lin1", hidden);
    hidden = hidden.unaryExpr([](float v) { return detail::gelu(v); });
    MatrixF mlp;
    linear(hidden, pre + "mlp.lin2", mlp);
    x += mlp;
  }

  MatrixF neck(const MatrixF& x) const {
    const int g = config_.grid(), c = config_.out_channels;
    MatrixF y = x * w("neck.0.weight").transpose();
    detail::layer_norm_rows(y, w("neck.1.weight"), w("neck.1.bias"), config_.layer_norm_eps);
    // 3x3 convolution, zero padding 1; weight columns ordered (in, ky, kx).
    const MatrixF& k = w("neck.2.weight");
    MatrixF out = MatrixF::Zero(static_cast<Eigen::Index>(g) * g, c);
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        MatrixF tap(c, c);  // out x in
        for (int i = 0; i < c; ++i) tap.col(i) = k.col(i * 9 + ky * 3 + kx);
        MatrixF shifted = MatrixF::Zero(static_cast<Eigen::Index>(g) * g, c);
        for (int gy = 0; gy < g; ++gy)
          for (int gx = 0; gx < g; ++gx) {
            const int sy = gy + ky - 1, sx = gx + kx - 1;
            if (sy >= 0 && sy < g && sx >= 0 && sx < g)
              shifted.row(static_cast<Eigen::Index>(gy) * g + gx) = y.row(static_cast<Eigen::Index>(sy) * g + sx);
          }
        out.noalias() += shifted * tap.transpose();
      }
    detail::layer_norm_rows(out, w("neck.3.weight"), w("neck.3.bias"), config_.layer_norm_eps);
    return out;
  }

  EncoderConfig config_;
  nn::ParameterSet<float> params_;
};

// ------------------------------------------------------------ preprocessing

inline constexpr std::array<float, 3> kPixelMean = {123.675f, 116.28f, 103.53f};
inline constexpr std::array<float, 3> kPixelStd = {58.395f, 57.12f, 57.375f};

// Longest side scaled to `target`, the other rounded half-up.
inline std::pair<int, int> resized_shape(int height, int width, int target) {
  const double scale = static_cast<double>(target) / std::max(height, width);
  return {static_cast<int>(height * scale + 0.5), static_cast<int>(width * scale + 0.5)};
}

namespace detail {

// Triangle (bilinear) kernel.
inline double triangle(double t) {
  t = std::abs(t);
  return t < 1.0 ? 1.0 - t : 0.0;
}

// Separable bilinear resampling whose support widens when shrinking
// (antialiased, as in PIL).
inline std::vector<std::vector<std::pair<int, double>>> resample_taps(int in, int out) {
  const double scale = static_cast<double>(in) / out;
  const double f = std::max(1.0, scale);
  const double support = f;
  std::vector<std::vector<std::pair<int, double>>> taps(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    const double centre = (o + 0.5) * scale;
    double total = 0.0;
    auto& t = taps[static_cast<std::size_t>(o)];
    // taps outside the image are dropped and the rest renormalised
    const int lo = std::max(0, static_cast<int>(std::floor(centre - support)));
    const int hi = std::min(in - 1, static_cast<int>(std::ceil(centre + support)));
    for (int i = lo; i <= hi; ++i) {
      const double wgt = triangle((i + 0.5 - centre) / f);
      if (wgt == 0.0) continue;
      t.emplace_back(i, wgt);
      total += wgt;
    }
    for (auto& [idx, wgt] : t) wgt /= total;
  }
  return taps;
}

}  // namespace detail

inline Image resize_bilinear(const Image& image, int height, int width) {
  const auto tx = detail::resample_taps(image.width, width);
  const auto ty = detail::resample_taps(image.height, height);
  Image horizontal(width, image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (const auto& [i, wgt] : tx[static_cast<std::size_t>(x)]) acc += wgt * image.at(i, y, c);
        horizontal.at(x, y, c) = static_cast<float>(acc);
      }
  Image out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (const auto& [i, wgt] : ty[static_cast<std::size_t>(y)]) acc += wgt * horizontal.at(x, i, c);
        out.at(x, y, c) = std::clamp(static_cast<float>(acc), 0.0f, 1.0f);
      }
  return out;
}

// Resize, normalise with the SAM pixel statistics (on a 0..255 scale) and
// zero-pad bottom/right to a square of side `target`.
inline MatrixF preprocess(const Image& image, int target) {
  const auto [h, w] = resized_shape(image.height, image.width, target);
  const Image resized = resize_bilinear(image, h, w);
  MatrixF out = MatrixF::Zero(static_cast<Eigen::Index>(target) * target, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out(static_cast<Eigen::Index>(y) * target + x, c) =
            (resized.at(x, y, c) * 255.0f - kPixelMean[static_cast<std::size_t>(c)]) / kPixelStd[static_cast<std::size_t>(c)];
  return out;
}

// Foundation-feature backend running the encoder. The output grid is
// cropped to the cells that cover the resized (unpadded) image.
class SamBackend final : public FeatureBackend {
 public:
  explicit SamBackend(const std::string& weights_path)
      : encoder_(Encoder::load(weights_path)), weights_hash_(sha256_file(weights_path).substr(0, 12)) {}

  std::string id() const override {
    const auto& c = encoder_.config();
    return "sam-" + c.variant + "-" + std::to_string(c.image_size) + "-" + weights_hash_;
  }
  int feature_dim() const override { return encoder_.config().out_channels; }

  FeatureMap extract(const Image& image) const override {
    const auto& c = encoder_.config();
    const MatrixF features = encoder_.forward(preprocess(image, c.image_size));
    const auto [h, w] = resized_shape(image.height, image.width, c.image_size);
    const int g = c.grid();
    FeatureMap fmap;
    fmap.grid_h = std::min(g, (h + c.patch_size - 1) / c.patch_size);
    fmap.grid_w = std::min(g, (w + c.patch_size - 1) / c.patch_size);
    fmap.dim = c.out_channels;
    fmap.source_h = image.height;
    fmap.source_w = image.width;
    fmap.backend_id = id();
    fmap.grid.resize(static_cast<std::size_t>(fmap.grid_h) * fmap.grid_w * fmap.dim);
    for (int v = 0; v < fmap.grid_h; ++v)
      for (int u = 0; u < fmap.grid_w; ++u) {
        auto cell = fmap.cell(v, u);
        for (int d = 0; d < fmap.dim; ++d) cell[static_cast<std::size_t>(d)] = features(v * g + u, d);
      }
    fmap.update_checksum();
    return fmap;
  }

 private:
  Encoder encoder_;
  std::string weights_hash_;
};

}  // namespace semfield::sam

namespace semfield {

// Backend by name: "stub" (patch/stride options) or "sam" (weights path).
struct BackendOptions {
  std::string name = "stub";
  int stub_patch = 16;
  int stub_stride = 16;
  std::string sam_weights;

  bool operator==(const BackendOptions&) const = default;
};

inline nlohmann::json to_json(const BackendOptions& o) {
  return {{"backend", o.name}, {"stub_patch", o.stub_patch}, {"stub_stride", o.stub_stride}, {"sam_weights", o.sam_weights}};
}

inline BackendOptions backend_options_from_json(const nlohmann::json& j) {
  BackendOptions o;
  o.name = j.value("backend", o.name);
  o.stub_patch = j.value("stub_patch", o.stub_patch);
  o.stub_stride = j.value("stub_stride", o.stub_stride);
  o.sam_weights = j.value("sam_weights", o.sam_weights);
  return o;
}

inline std::unique_ptr<FeatureBackend> make_backend(const BackendOptions& o) {
  if (o.name == "stub") return std::make_unique<StubBackend>(o.stub_patch, o.stub_stride);
  if (o.name == "sam") {
    if (o.sam_weights.empty())
      throw Error("the sam backend needs a converted encoder weights file (--weights); use --backend stub otherwise");
    return std::make_unique<sam::SamBackend>(o.sam_weights);
  }
  throw Error("unknown feature backend '" + o.name + "' (expected stub or sam)");
}

}  // namespace semfield
