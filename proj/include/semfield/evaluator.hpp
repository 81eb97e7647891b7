#pragma once

// Confusion matrices and mIoU, per view, per scene and across scenes.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "semfield/common.hpp"
#include "semfield/image.hpp"
#include "semfield/scene_io.hpp"

namespace semfield {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int class_count = 0)
      : classes_(class_count), counts_(static_cast<std::size_t>(class_count) * class_count, 0) {
    if (class_count < 0) throw Error("confusion matrix: negative class count");
  }

  int class_count() const { return classes_; }

  // rows = ground truth, columns = prediction
  std::uint64_t at(int gt, int pred) const { return counts_[index(gt, pred)]; }
  std::uint64_t& at(int gt, int pred) { return counts_[index(gt, pred)]; }

  std::uint64_t ignored() const { return ignored_; }
  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

  // Adds one (gt, pred) pair. An ignore label on either side is counted as
  // ignored; a prediction can only be ignore where nothing was rendered.
  void add(std::uint8_t gt, std::uint8_t pred) {
    if (gt == kIgnoreLabel || pred == kIgnoreLabel) {
      ++ignored_;
      return;
    }
    if (gt >= classes_ || pred >= classes_) throw Error("confusion matrix: label out of range");
    ++counts_[index(gt, pred)];
  }

  void accumulate(const LabelMap& gt, const LabelMap& pred) {
    if (gt.width != pred.width || gt.height != pred.height)
      throw Error("confusion matrix: ground-truth and prediction shapes differ (" + std::to_string(gt.width) + "x" +
                  std::to_string(gt.height) + " vs " + std::to_string(pred.width) + "x" + std::to_string(pred.height) +
                  ")");
    for (std::size_t i = 0; i < gt.data.size(); ++i) add(gt.data[i], pred.data[i]);
  }

  void merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw Error("confusion matrix: cannot merge different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    ignored_ += other.ignored_;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t index(int gt, int pred) const {
    if (gt < 0 || pred < 0 || gt >= classes_ || pred >= classes_) throw Error("confusion matrix: index out of range");
    return static_cast<std::size_t>(gt) * classes_ + pred;
  }

  int classes_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t ignored_ = 0;
};

inline ConfusionMatrix accumulate(ConfusionMatrix cm, const LabelMap& gt, const LabelMap& pred) {
  cm.accumulate(gt, pred);
  return cm;
}

struct MiouResult {
  double miou = 0.0;
  std::vector<std::optional<double>> iou;  // nullopt for classes excluded from the mean
};

namespace detail {

// Sum of non-negative fractions kept exact while numerator and denominator
// stay below 2^60; past that it degrades to a floating-point sum.
class FractionSum {
 public:
  void add(std::uint64_t num, std::uint64_t den) {
    approx_ += static_cast<double>(num) / static_cast<double>(den);
    if (!exact_) return;
    const Int g = gcd(den_, den);
    const Int lcm = den_ / g * den;
    Int n = num_ * (lcm / den_) + static_cast<Int>(num) * (lcm / den);
    Int d = lcm;
    const Int r = gcd(n, d);
    n /= r;
    d /= r;
    if (n >= kLimit || d >= kLimit) {
      exact_ = false;
      return;
    }
    num_ = n;
    den_ = d;
  }

  // Sum divided by `count`, rounded once when exact.
  double mean(int count) const {
    if (!exact_) return approx_ / count;
    return static_cast<double>(num_) / static_cast<double>(den_ * count);
  }

 private:
  using Int = __int128;
  static constexpr Int kLimit = Int(1) << 60;
  static Int gcd(Int a, Int b) {
    while (b != 0) {
      const Int t = a % b;
      a = b;
      b = t;
    }
    return a == 0 ? 1 : a;
  }

  Int num_ = 0;
  Int den_ = 1;
  bool exact_ = true;
  double approx_ = 0.0;
};

}  // namespace detail

// IoU_c = TP / (TP + FP + FN). Classes absent from both ground truth and
// prediction are excluded from the mean unless `absent_as_zero` is set.
// The mean is the double nearest the exact rational mean whenever the
// counts allow it.
inline MiouResult miou(const ConfusionMatrix& cm, bool absent_as_zero = false) {
  if (cm.total() == 0) throw Error("miou: confusion matrix holds no evaluated pixel");
  MiouResult out;
  detail::FractionSum sum;
  int used = 0;
  for (int c = 0; c < cm.class_count(); ++c) {
    std::uint64_t row = 0, col = 0;
    for (int k = 0; k < cm.class_count(); ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t denom = row + col - tp;
    if (denom == 0) {
      out.iou.push_back(absent_as_zero ? std::optional<double>(0.0) : std::nullopt);
      if (absent_as_zero) ++used;
      continue;
    }
    out.iou.push_back(static_cast<double>(tp) / static_cast<double>(denom));
    sum.add(tp, denom);
    ++used;
  }
  out.miou = used > 0 ? sum.mean(used) : 0.0;
  return out;
}

struct ViewScore {
  int view_id = -1;
  std::string name;
  SplitTag split = SplitTag::kTest;
  ConfusionMatrix cm;
  MiouResult result;
};

struct SceneScore {
  std::string scene;
  std::vector<ViewScore> views;
  ConfusionMatrix total;
  MiouResult result;
};

// Per-view scores plus a scene score computed from the merged matrix.
inline SceneScore score_scene(const std::string& scene_name, const Scene& scene, const std::vector<int>& view_ids,
                              const std::vector<LabelMap>& predictions) {
  if (view_ids.size() != predictions.size()) throw Error("score_scene: one prediction per view is required");
  SceneScore out;
  out.scene = scene_name;
  out.total = ConfusionMatrix(scene.class_count);
  for (std::size_t i = 0; i < view_ids.size(); ++i) {
    const View& view = scene.views.at(static_cast<std::size_t>(view_ids[i]));
    const LabelMap* gt = view.ground_truth ? &*view.ground_truth : (view.labels ? &*view.labels : nullptr);
    if (gt == nullptr) throw Error("score_scene: view " + view.name + " has no ground-truth labels");
    ViewScore vs;
    vs.view_id = view_ids[i];
    vs.name = view.name;
    vs.split = view.split;
    vs.cm = ConfusionMatrix(scene.class_count);
    vs.cm.accumulate(*gt, predictions[i]);
    vs.result = miou(vs.cm);
    out.total.merge(vs.cm);
    out.views.push_back(std::move(vs));
  }
  out.result = miou(out.total);
  return out;
}

// Mean of per-scene mIoU values.
inline double average_miou(const std::vector<SceneScore>& scenes) {
  if (scenes.empty()) throw Error("average_miou: no scenes");
  double sum = 0.0;
  for (const auto& s : scenes) sum += s.result.miou;
  return sum / static_cast<double>(scenes.size());
}

inline std::string format_score(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

// CSV columns: scene,view,split,miou,iou_0..iou_{L-1}. Per-view rows are
// followed by one "all" row per scene holding the merged-matrix score, and
// a final "mean" row when several scenes are given.
inline std::string scores_csv(const std::vector<SceneScore>& scenes) {
  if (scenes.empty()) throw Error("scores_csv: no scenes");
  const int classes = scenes.front().total.class_count();
  std::ostringstream os;
  os << "scene,view,split,miou";
  for (int c = 0; c < classes; ++c) os << ",iou_" << c;
  os << "\n";
  auto row = [&](const std::string& scene, const std::string& view, const std::string& split, const MiouResult& r) {
    os << scene << "," << view << "," << split << "," << format_score(r.miou);
    for (const auto& iou : r.iou) os << "," << (iou ? format_score(*iou) : std::string("nan"));
    os << "\n";
  };
  for (const auto& s : scenes) {
    for (const auto& v : s.views) row(s.scene, v.name, to_string(v.split), v.result);
    row(s.scene, "all", "-", s.result);
  }
  if (scenes.size() > 1) {
    os << "mean,all,-," << format_score(average_miou(scenes));
    for (int c = 0; c < classes; ++c) os << ",nan";
    os << "\n";
  }
  return os.str();
}

inline std::string scores_table(const SceneScore& s) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "view" << std::setw(18) << "split" << "mIoU\n";
  for (const auto& v : s.views)
    os << std::setw(10) << v.name << std::setw(18) << to_string(v.split) << format_score(v.result.miou) << "\n";
  os << std::setw(10) << "all" << std::setw(18) << "-" << format_score(s.result.miou) << "\n";
  return os.str();
}

// Angle between a view's optical axis and the closest train-labeled view's
// optical axis, in radians.
inline double angular_distance_to_labeled(const Scene& scene, int view_id) {
  const Vec3 axis = -scene.views.at(static_cast<std::size_t>(view_id)).camera.rotation().col(2);
  double best = std::numeric_limits<double>::infinity();
  for (int l : scene.views_in({SplitTag::kTrainLabeled})) {
    const Vec3 other = -scene.views[static_cast<std::size_t>(l)].camera.rotation().col(2);
    best = std::min(best, std::acos(std::clamp(axis.dot(other), -1.0, 1.0)));
  }
  return best;
}

// The ceil(fraction * |views|) views farthest from any labeled camera;
// distance ties keep the lower view index first.
inline std::vector<int> farthest_views(const Scene& scene, const std::vector<int>& views, double fraction = 0.25) {
  if (scene.labeled_view_count() == 0) throw Error("farthest_views: scene has no labeled view");
  std::vector<std::pair<double, int>> ranked;
  for (int v : views) ranked.emplace_back(angular_distance_to_labeled(scene, v), v);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ranked.size())));
  std::vector<int> out;
  for (std::size_t i = 0; i < keep && i < ranked.size(); ++i) out.push_back(ranked[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace semfield
