#pragma once

// Nearest-centroid pseudo-labels in foundation-feature space. Class
// centroids are the mean features of labeled training pixels; every pixel
// of a target view takes the class of the closest valid centroid.

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semfield/common.hpp"
#include "semfield/foundation_features.hpp"
#include "semfield/image.hpp"
#include "semfield/npy.hpp"

namespace semfield {

enum class DistanceMetric { kEuclidean, kCosine };

inline std::string to_string(DistanceMetric m) { return m == DistanceMetric::kEuclidean ? "euclidean" : "cosine"; }

inline DistanceMetric parse_metric(const std::string& s) {
  if (s == "euclidean") return DistanceMetric::kEuclidean;
  if (s == "cosine") return DistanceMetric::kCosine;
  throw Error("unknown distance metric '" + s + "'");
}

struct ClassCentroids {
  int dim = 0;
  std::vector<double> centroids;    // L x D, row-major
  std::vector<std::size_t> counts;  // labeled pixels per class
  DistanceMetric metric = DistanceMetric::kEuclidean;

  int class_count() const { return static_cast<int>(counts.size()); }
  bool valid(int c) const { return counts[static_cast<std::size_t>(c)] > 0; }
  std::vector<int> invalid_classes() const {
    std::vector<int> out;
    for (int c = 0; c < class_count(); ++c)
      if (!valid(c)) out.push_back(c);
    return out;
  }
  std::span<const double> row(int c) const {
    return {centroids.data() + static_cast<std::size_t>(c) * dim, static_cast<std::size_t>(dim)};
  }
};

struct PseudoLabelMap {
  int view_id = -1;
  LabelMap labels;
  std::vector<float> margins;  // H x W, best-to-runner-up distance gap
};

struct LabeledFeatureView {
  const FeatureMap* features = nullptr;
  const LabelMap* labels = nullptr;
};

inline double feature_distance(std::span<const float> f, std::span<const double> centroid, DistanceMetric metric) {
  if (metric == DistanceMetric::kEuclidean) {
    double s = 0.0;
    for (std::size_t d = 0; d < f.size(); ++d) {
      const double diff = f[d] - centroid[d];
      s += diff * diff;
    }
    return std::sqrt(s);
  }
  double dot = 0.0, nf = 0.0, nc = 0.0;
  for (std::size_t d = 0; d < f.size(); ++d) {
    dot += f[d] * centroid[d];
    nf += static_cast<double>(f[d]) * f[d];
    nc += centroid[d] * centroid[d];
  }
  if (nf == 0.0 || nc == 0.0) return 1.0;
  return 1.0 - dot / std::sqrt(nf * nc);
}

// Mean looked-up feature at the centre of every labeled pixel, per class.
// Classes without labeled pixels are kept with count 0 and flagged invalid.
inline ClassCentroids compute_centroids(std::span<const LabeledFeatureView> views, int class_count,
                                        DistanceMetric metric = DistanceMetric::kEuclidean) {
  if (views.empty()) throw Error("compute_centroids: no labeled views");
  ClassCentroids out;
  out.dim = views.front().features->dim;
  out.metric = metric;
  out.counts.assign(static_cast<std::size_t>(class_count), 0);
  out.centroids.assign(static_cast<std::size_t>(class_count) * out.dim, 0.0);
  std::vector<float> f(static_cast<std::size_t>(out.dim));
  for (const auto& view : views) {
    const FeatureMap& fmap = *view.features;
    const LabelMap& labels = *view.labels;
    if (fmap.dim != out.dim) throw Error("compute_centroids: feature widths differ between views");
    if (labels.width != fmap.source_w || labels.height != fmap.source_h)
      throw Error("compute_centroids: label map and feature source sizes differ");
    for (int y = 0; y < labels.height; ++y) {
      for (int x = 0; x < labels.width; ++x) {
        const std::uint8_t l = labels.at(x, y);
        if (l == kIgnoreLabel) continue;
        if (l >= class_count) throw Error("compute_centroids: label out of range");
        lookup_into(fmap, x + 0.5, y + 0.5, f);
        double* row = out.centroids.data() + static_cast<std::size_t>(l) * out.dim;
        for (int d = 0; d < out.dim; ++d) row[d] += f[static_cast<std::size_t>(d)];
        ++out.counts[l];
      }
    }
  }
  std::size_t total = 0;
  for (int c = 0; c < class_count; ++c) {
    const std::size_t n = out.counts[static_cast<std::size_t>(c)];
    total += n;
    if (n == 0) continue;
    double* row = out.centroids.data() + static_cast<std::size_t>(c) * out.dim;
    for (int d = 0; d < out.dim; ++d) row[d] /= static_cast<double>(n);
  }
  if (total == 0) throw Error("compute_centroids: no labeled pixels");
  return out;
}

// Per pixel: argmin over valid classes, ties to the lowest class index.
inline PseudoLabelMap assign_pseudo_labels(const FeatureMap& fmap, const ClassCentroids& centroids, int view_id = -1) {
  if (fmap.dim != centroids.dim) throw Error("assign_pseudo_labels: feature width does not match centroids");
  std::vector<int> valid;
  for (int c = 0; c < centroids.class_count(); ++c)
    if (centroids.valid(c)) valid.push_back(c);
  if (valid.empty()) throw Error("assign_pseudo_labels: no valid class centroid");
  PseudoLabelMap out;
  out.view_id = view_id;
  out.labels = LabelMap(fmap.source_w, fmap.source_h, 0);
  out.margins.assign(out.labels.pixel_count(), 0.0f);
  std::vector<float> f(static_cast<std::size_t>(fmap.dim));
  for (int y = 0; y < fmap.source_h; ++y) {
    for (int x = 0; x < fmap.source_w; ++x) {
      lookup_into(fmap, x + 0.5, y + 0.5, f);
      double best = std::numeric_limits<double>::infinity();
      double second = std::numeric_limits<double>::infinity();
      int best_class = valid.front();
      for (int c : valid) {
        const double d = feature_distance(f, centroids.row(c), centroids.metric);
        if (d < best) {
          second = best;
          best = d;
          best_class = c;
        } else if (d < second) {
          second = d;
        }
      }
      out.labels.at(x, y) = static_cast<std::uint8_t>(best_class);
      out.margins[static_cast<std::size_t>(y) * fmap.source_w + x] =
          valid.size() > 1 ? static_cast<float>(second - best) : 0.0f;
    }
  }
  return out;
}

inline void save_centroids(const std::filesystem::path& dir, const ClassCentroids& c) {
  std::filesystem::create_directories(dir);
  std::vector<float> values(c.centroids.begin(), c.centroids.end());
  npy::save((dir / "centroids.npy").string(), {c.counts.size(), static_cast<std::size_t>(c.dim)}, values);
  std::ofstream out(dir / "centroids.json");
  out << nlohmann::json{{"metric", to_string(c.metric)},
                        {"dim", c.dim},
                        {"counts", c.counts},
                        {"invalid_classes", c.invalid_classes()},
                        {"centroids", c.centroids}}
             .dump(2)
      << "\n";
}

inline ClassCentroids load_centroids(const std::filesystem::path& dir) {
  std::ifstream in(dir / "centroids.json");
  if (!in) throw Error("cannot open " + (dir / "centroids.json").string());
  const auto j = nlohmann::json::parse(in);
  ClassCentroids c;
  c.metric = parse_metric(j.at("metric").get<std::string>());
  c.dim = j.at("dim").get<int>();
  c.counts = j.at("counts").get<std::vector<std::size_t>>();
  c.centroids = j.at("centroids").get<std::vector<double>>();
  return c;
}

// labels_pseudo/NNN.png and margins_NNN.npy under `dir`.
inline void save_pseudo_labels(const std::filesystem::path& dir, const std::string& view_name, const PseudoLabelMap& map) {
  std::filesystem::create_directories(dir / "labels_pseudo");
  write_png((dir / "labels_pseudo" / (view_name + ".png")).string(), map.labels);
  npy::save((dir / ("margins_" + view_name + ".npy")).string(),
            {static_cast<std::size_t>(map.labels.height), static_cast<std::size_t>(map.labels.width)}, map.margins);
}

inline PseudoLabelMap load_pseudo_labels(const std::filesystem::path& dir, const std::string& view_name, int view_id) {
  const auto path = dir / "labels_pseudo" / (view_name + ".png");
  if (!std::filesystem::exists(path)) throw Error("missing pseudo-label map for view " + view_name + ": " + path.string());
  PseudoLabelMap map;
  map.view_id = view_id;
  map.labels = read_label_png(path.string());
  const auto margins = dir / ("margins_" + view_name + ".npy");
  if (std::filesystem::exists(margins)) map.margins = npy::load(margins.string()).data;
  return map;
}

}  // namespace semfield
