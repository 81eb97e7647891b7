#pragma once

// Dense per-image feature maps, pluggable extraction backends, bilinear
// lookup and an on-disk cache keyed by (image hash, backend id).
//
// Grid alignment: cell (u, v) of an h_f x w_f grid is centred on image
// coordinates ((u + 0.5) * W / w_f, (v + 0.5) * H / h_f).

#include <algorithm>
#include <array>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "semfield/common.hpp"
#include "semfield/image.hpp"

namespace semfield {

struct FeatureMap {
  int grid_h = 0;
  int grid_w = 0;
  int dim = 0;
  int source_h = 0;
  int source_w = 0;
  std::string backend_id;
  std::vector<float> grid;  // grid_h x grid_w x dim, row-major
  std::string checksum;

  std::span<const float> cell(int v, int u) const {
    return {grid.data() + (static_cast<std::size_t>(v) * grid_w + u) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<float> cell(int v, int u) {
    return {grid.data() + (static_cast<std::size_t>(v) * grid_w + u) * dim, static_cast<std::size_t>(dim)};
  }

  void update_checksum() {
    checksum = Sha256().update_span(std::span<const float>(grid)).update(backend_id).hex();
  }

  void validate() const {
    if (grid_h < 1 || grid_w < 1 || dim < 1) throw Error("feature map: empty grid");
    if (grid.size() != static_cast<std::size_t>(grid_h) * grid_w * dim) throw Error("feature map: grid size mismatch");
    for (float f : grid)
      if (!std::isfinite(f)) throw Error("feature map: non-finite entry");
  }
};

// Bilinear lookup at continuous image coordinates (x, y); coordinates beyond
// the outermost cell centres clamp to the border cells.
inline void lookup_into(const FeatureMap& fmap, double x, double y, std::span<float> out) {
  if (!(x >= 0.0 && x <= fmap.source_w && y >= 0.0 && y <= fmap.source_h))
    throw Error("feature lookup: (" + std::to_string(x) + ", " + std::to_string(y) + ") outside the source image");
  if (out.size() != static_cast<std::size_t>(fmap.dim)) throw Error("feature lookup: output width mismatch");
  const double gx = std::clamp(x * fmap.grid_w / fmap.source_w - 0.5, 0.0, fmap.grid_w - 1.0);
  const double gy = std::clamp(y * fmap.grid_h / fmap.source_h - 0.5, 0.0, fmap.grid_h - 1.0);
  const int u0 = static_cast<int>(std::floor(gx));
  const int v0 = static_cast<int>(std::floor(gy));
  const int u1 = std::min(u0 + 1, fmap.grid_w - 1);
  const int v1 = std::min(v0 + 1, fmap.grid_h - 1);
  const double fx = gx - u0;
  const double fy = gy - v0;
  const auto c00 = fmap.cell(v0, u0);
  const auto c01 = fmap.cell(v0, u1);
  const auto c10 = fmap.cell(v1, u0);
  const auto c11 = fmap.cell(v1, u1);
  for (int d = 0; d < fmap.dim; ++d) {
    const double top = (1.0 - fx) * c00[d] + fx * c01[d];
    const double bottom = (1.0 - fx) * c10[d] + fx * c11[d];
    out[static_cast<std::size_t>(d)] = static_cast<float>((1.0 - fy) * top + fy * bottom);
  }
}

inline std::vector<float> lookup(const FeatureMap& fmap, double x, double y) {
  std::vector<float> out(static_cast<std::size_t>(fmap.dim));
  lookup_into(fmap, x, y, out);
  return out;
}

class FeatureBackend {
 public:
  virtual ~FeatureBackend() = default;
  virtual std::string id() const = 0;
  virtual int feature_dim() const = 0;
  virtual FeatureMap extract(const Image& image) const = 0;
};

// Deterministic stand-in for a foundation encoder. Each grid cell describes
// the pixels in a square window centred on the cell: per-channel mean and
// standard deviation followed by a fixed pseudo-random nonlinear projection
// of those moments and of the mean absolute horizontal/vertical gradients.
class StubBackend final : public FeatureBackend {
 public:
  static constexpr int kDim = 32;
  static constexpr int kStatCount = 12;
  static constexpr int kHashed = kDim - 6;

  explicit StubBackend(int patch_size = 16, int stride = 16) : patch_(patch_size), stride_(stride) {
    if (patch_ < 1 || stride_ < 1) throw Error("stub backend: patch size and stride must be positive");
    std::uint64_t state = 0x5EEDF00DULL;
    for (int i = 0; i < kHashed; ++i) {
      for (int j = 0; j < kStatCount; ++j)
        projection_[static_cast<std::size_t>(i * kStatCount + j)] =
            2.0f * (static_cast<float>(splitmix64(state) >> 40) / static_cast<float>(1 << 24) * 2.0f - 1.0f);
      offset_[static_cast<std::size_t>(i)] =
          0.5f * (static_cast<float>(splitmix64(state) >> 40) / static_cast<float>(1 << 24) * 2.0f - 1.0f);
    }
  }

  std::string id() const override {
    return "stub-p" + std::to_string(patch_) + "-s" + std::to_string(stride_) + "-v1";
  }
  int feature_dim() const override { return kDim; }

  FeatureMap extract(const Image& image) const override {
    if (image.width <= 0 || image.height <= 0) throw Error("stub backend: empty image");
    FeatureMap fmap;
    fmap.grid_w = (image.width + stride_ - 1) / stride_;
    fmap.grid_h = (image.height + stride_ - 1) / stride_;
    fmap.dim = kDim;
    fmap.source_w = image.width;
    fmap.source_h = image.height;
    fmap.backend_id = id();
    fmap.grid.assign(static_cast<std::size_t>(fmap.grid_w) * fmap.grid_h * kDim, 0.0f);
    for (int v = 0; v < fmap.grid_h; ++v) {
      for (int u = 0; u < fmap.grid_w; ++u) {
        const auto [x0, x1] = window(u, fmap.grid_w, image.width);
        const auto [y0, y1] = window(v, fmap.grid_h, image.height);
        describe(image, x0, x1, y0, y1, fmap.cell(v, u));
      }
    }
    fmap.update_checksum();
    return fmap;
  }

  // Pixel range [begin, end) covered by cell `index` along one axis.
  std::pair<int, int> window(int index, int cells, int extent) const {
    const double centre = (index + 0.5) * extent / cells;
    int begin = static_cast<int>(std::lround(centre - 0.5 * patch_));
    int end = begin + patch_;
    begin = std::clamp(begin, 0, extent - 1);
    end = std::clamp(end, begin + 1, extent);
    return {begin, end};
  }

 private:
  void describe(const Image& image, int x0, int x1, int y0, int y1, std::span<float> out) const {
    std::array<double, kStatCount> stats{};
    const double count = static_cast<double>(x1 - x0) * (y1 - y0);
    for (int c = 0; c < 3; ++c) {
      double s = 0.0, s2 = 0.0, gx = 0.0, gy = 0.0;
      int nx = 0, ny = 0;
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
          const double p = image.at(x, y, c);
          s += p;
          s2 += p * p;
          if (x + 1 < x1) {
            gx += std::abs(image.at(x + 1, y, c) - p);
            ++nx;
          }
          if (y + 1 < y1) {
            gy += std::abs(image.at(x, y + 1, c) - p);
            ++ny;
          }
        }
      }
      const double mean = s / count;
      stats[static_cast<std::size_t>(c)] = mean;
      stats[static_cast<std::size_t>(3 + c)] = std::sqrt(std::max(0.0, s2 / count - mean * mean));
      stats[static_cast<std::size_t>(6 + c)] = nx > 0 ? gx / nx : 0.0;
      stats[static_cast<std::size_t>(9 + c)] = ny > 0 ? gy / ny : 0.0;
    }
    for (int i = 0; i < 6; ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(stats[static_cast<std::size_t>(i)]);
    for (int i = 0; i < kHashed; ++i) {
      double acc = offset_[static_cast<std::size_t>(i)];
      for (int j = 0; j < kStatCount; ++j)
        acc += projection_[static_cast<std::size_t>(i * kStatCount + j)] * stats[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(6 + i)] = static_cast<float>(std::tanh(acc));
    }
  }

  int patch_;
  int stride_;
  std::array<float, kHashed * kStatCount> projection_{};
  std::array<float, kHashed> offset_{};
};

inline constexpr char kFeatureMagic[8] = {'S', 'E', 'M', 'F', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

// Header (backend id, D, h_f, w_f, H, W) followed by the raw float32 grid.
inline void save_feature_map(const std::string& path, const FeatureMap& fmap) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write feature map: " + path);
    auto put = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
    out.write(kFeatureMagic, sizeof(kFeatureMagic));
    put(kFeatureVersion);
    put(static_cast<std::uint32_t>(fmap.backend_id.size()));
    out.write(fmap.backend_id.data(), static_cast<std::streamsize>(fmap.backend_id.size()));
    for (int v : {fmap.dim, fmap.grid_h, fmap.grid_w, fmap.source_h, fmap.source_w}) put(static_cast<std::uint32_t>(v));
    out.write(reinterpret_cast<const char*>(fmap.grid.data()),
              static_cast<std::streamsize>(fmap.grid.size() * sizeof(float)));
    if (!out) throw Error("failed while writing feature map: " + path);
  }
  std::filesystem::rename(tmp, path);
}

inline FeatureMap load_feature_map(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (pos + n > bytes.size()) throw Error("feature map truncated: " + path);
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  auto get = [&]() {
    std::uint32_t v = 0;
    take(&v, sizeof(v));
    return v;
  };
  char magic[8];
  take(magic, sizeof(magic));
  if (std::memcmp(magic, kFeatureMagic, sizeof(magic)) != 0) throw Error("not a feature map file: " + path);
  if (get() != kFeatureVersion) throw Error("unsupported feature map version: " + path);
  FeatureMap fmap;
  fmap.backend_id.resize(get());
  take(fmap.backend_id.data(), fmap.backend_id.size());
  fmap.dim = static_cast<int>(get());
  fmap.grid_h = static_cast<int>(get());
  fmap.grid_w = static_cast<int>(get());
  fmap.source_h = static_cast<int>(get());
  fmap.source_w = static_cast<int>(get());
  fmap.grid.resize(static_cast<std::size_t>(fmap.dim) * fmap.grid_h * fmap.grid_w);
  take(fmap.grid.data(), fmap.grid.size() * sizeof(float));
  if (pos != bytes.size()) throw Error("trailing bytes in feature map: " + path);
  fmap.validate();
  fmap.update_checksum();
  return fmap;
}

inline constexpr const char* kFeatureCacheEnv = "SEMFIELD_FEATURE_CACHE";

// Directory from SEMFIELD_FEATURE_CACHE, else `fallback`.
inline std::filesystem::path feature_cache_dir(const std::filesystem::path& fallback) {
  if (const char* env = std::getenv(kFeatureCacheEnv); env != nullptr && *env != '\0') return env;
  return fallback;
}

inline std::string image_hash(const Image& image) {
  return Sha256()
      .update(std::to_string(image.width) + "x" + std::to_string(image.height))
      .update_span(std::span<const float>(image.data))
      .hex();
}

class FeatureCache {
 public:
  explicit FeatureCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::filesystem::path path_for(const std::string& hash, const std::string& backend_id) const {
    return dir_ / (hash.substr(0, 32) + "-" + backend_id + ".feat");
  }

  std::optional<FeatureMap> load(const std::string& hash, const std::string& backend_id) const {
    const auto path = path_for(hash, backend_id);
    if (!std::filesystem::exists(path)) return std::nullopt;
    FeatureMap fmap = load_feature_map(path.string());
    if (fmap.backend_id != backend_id) return std::nullopt;
    return fmap;
  }

  void store(const std::string& hash, const FeatureMap& fmap) const {
    std::filesystem::create_directories(dir_);
    save_feature_map(path_for(hash, fmap.backend_id).string(), fmap);
  }

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

// Extracts through the cache: a hit returns the persisted grid, a miss runs
// the backend and persists the result.
inline FeatureMap extract_features(const Image& image, const FeatureBackend& backend,
                                   const FeatureCache* cache = nullptr) {
  for (float v : image.data)
    if (!(v >= 0.0f && v <= 1.0f)) throw Error("extract_features: image values must lie in [0, 1]");
  const std::string hash = cache ? image_hash(image) : std::string();
  if (cache) {
    if (auto hit = cache->load(hash, backend.id())) return *hit;
  }
  FeatureMap fmap = backend.extract(image);
  fmap.validate();
  if (fmap.dim != backend.feature_dim()) throw Error("extract_features: backend returned the wrong feature width");
  if (cache) cache->store(hash, fmap);
  return fmap;
}

}  // namespace semfield
