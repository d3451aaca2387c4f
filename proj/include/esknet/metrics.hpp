#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "esknet/tensor.hpp"

namespace esknet {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  bool operator==(const ConfusionCounts&) const = default;
};

template <typename T>
ConfusionCounts confusion(const Tensor<T>& prediction, const Tensor<T>& ground_truth) {
  if (prediction.shape() != ground_truth.shape()) {
    throw ShapeError("confusion: prediction " + to_string(prediction.shape()) + " vs ground truth " +
                     to_string(ground_truth.shape()));
  }
  ConfusionCounts c;
  const auto p = prediction.data();
  const auto g = ground_truth.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool pb = p[i] == T(1), gb = g[i] == T(1);
    if ((!pb && p[i] != T(0)) || (!gb && g[i] != T(0))) throw ShapeError("confusion: masks must be binary");
    if (pb && gb)
      ++c.tp;
    else if (pb)
      ++c.fp;
    else if (gb)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

/// Bits set when a ratio had a zero denominator and a convention was applied.
enum DegenerateFlag : unsigned {
  kVacuous = 1u << 0,            // empty prediction and empty ground truth: overlap metrics = 100
  kEmptyPrediction = 1u << 1,    // tp + fp = 0 with foreground present: precision = 0
  kEmptyGroundTruth = 1u << 2,   // tp + fn = 0 with a non-empty prediction: recall = 0
  kNoNegatives = 1u << 3,        // tn + fp = 0: specificity = 100
};

/// Percent-scaled segmentation scores.
struct SegmentationMetrics {
  double jaccard = 0, precision = 0, recall = 0, specificity = 0, dice = 0;
  unsigned flags = 0;
};

inline SegmentationMetrics compute_metrics(const ConfusionCounts& c) {
  SegmentationMetrics m;
  const auto tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  const auto tn = static_cast<double>(c.tn), fn = static_cast<double>(c.fn);
  if (c.tn + c.fp == 0) {
    m.specificity = 100.0;
    m.flags |= kNoNegatives;
  } else {
    m.specificity = tn / (tn + fp) * 100.0;
  }
  if (c.tp + c.fp + c.fn == 0) {
    m.jaccard = m.precision = m.recall = m.dice = 100.0;
    m.flags |= kVacuous;
    return m;
  }
  m.jaccard = tp / (fp + tp + fn) * 100.0;
  if (c.tp + c.fp == 0) {
    m.flags |= kEmptyPrediction;
  } else {
    m.precision = tp / (tp + fp) * 100.0;
  }
  if (c.tp + c.fn == 0) {
    m.flags |= kEmptyGroundTruth;
  } else {
    m.recall = tp / (tp + fn) * 100.0;
  }
  m.dice = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

template <typename T>
Tensor<T> binarize(const Tensor<T>& probabilities, double threshold) {
  std::vector<T> out(probabilities.numel());
  const auto p = probabilities.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = p[i] >= threshold ? T(1) : T(0);
  return Tensor<T>::from(probabilities.shape(), std::move(out));
}

struct MetricStats {
  double mean = 0, stddev = 0;  // population standard deviation
};

struct AggregateRow {
  std::string group;  // "All" or a category tag
  std::size_t count = 0;
  MetricStats jaccard, precision, recall, specificity, dice;
};

struct ImageRow {
  std::string id;
  std::string category;
  ConfusionCounts counts;
  SegmentationMetrics metrics;
};

struct MetricsReport {
  double threshold = 0.5;
  std::vector<ImageRow> images;
  std::vector<AggregateRow> aggregates;  // "All" first, then categories in sorted order

  const AggregateRow& all() const { return aggregates.front(); }
};

inline MetricStats stats_of(const std::vector<double>& v) {
  MetricStats s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.stddev = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

/// Mean and population std of each metric over per-image values.
inline AggregateRow aggregate(const std::string& group, const std::vector<const ImageRow*>& rows) {
  AggregateRow a;
  a.group = group;
  a.count = rows.size();
  std::vector<double> j, p, r, s, d;
  for (const auto* row : rows) {
    j.push_back(row->metrics.jaccard);
    p.push_back(row->metrics.precision);
    r.push_back(row->metrics.recall);
    s.push_back(row->metrics.specificity);
    d.push_back(row->metrics.dice);
  }
  a.jaccard = stats_of(j);
  a.precision = stats_of(p);
  a.recall = stats_of(r);
  a.specificity = stats_of(s);
  a.dice = stats_of(d);
  return a;
}

inline MetricsReport build_report(std::vector<ImageRow> rows, double threshold) {
  MetricsReport report;
  report.threshold = threshold;
  report.images = std::move(rows);
  std::vector<const ImageRow*> all;
  std::map<std::string, std::vector<const ImageRow*>> groups;
  for (const auto& r : report.images) {
    all.push_back(&r);
    if (!r.category.empty()) groups[r.category].push_back(&r);
  }
  report.aggregates.push_back(aggregate("All", all));
  for (const auto& [name, members] : groups) report.aggregates.push_back(aggregate(name, members));
  return report;
}

/// Thresholds each probability map (p >= threshold is foreground) and scores
/// it against the matching ground truth. Ids must match exactly.
template <typename T>
MetricsReport evaluate_dataset(const std::map<std::string, Tensor<T>>& predictions,
                               const std::map<std::string, Tensor<T>>& ground_truths, double threshold = 0.5,
                               const std::map<std::string, std::string>& categories = {}) {
  for (const auto& [id, t] : predictions)
    if (!ground_truths.count(id)) throw DataError("prediction '" + id + "' has no ground truth");
  for (const auto& [id, t] : ground_truths)
    if (!predictions.count(id)) throw DataError("ground truth '" + id + "' has no prediction");
  std::vector<ImageRow> rows;
  for (const auto& [id, prob] : predictions) {
    ImageRow row;
    row.id = id;
    if (auto it = categories.find(id); it != categories.end()) row.category = it->second;
    row.counts = confusion(binarize(prob, static_cast<T>(threshold)), ground_truths.at(id));
    row.metrics = compute_metrics(row.counts);
    rows.push_back(std::move(row));
  }
  return build_report(std::move(rows), threshold);
}

// ---------------------------------------------------------------------------
// P-R and ROC curves

enum CurveFlag : unsigned {
  kNoPositivePixels = 1u << 0,  // recall / tpr undefined, reported as 0; auc = 0
  kNoNegativePixels = 1u << 1,  // fpr undefined, reported as 0
};

struct CurvePoint {
  double threshold = 0;
  double precision = 0, recall = 0;
  double tpr = 0, fpr = 0;
};

struct CurveData {
  std::vector<CurvePoint> points;  // thresholds descending
  double auc = 0;
  unsigned flags = 0;
};

/// Trapezoidal area under the ROC polyline through (0,0), the points sorted by
/// (fpr, tpr), and (1,1).
inline double roc_auc(std::vector<std::pair<double, double>> fpr_tpr) {
  fpr_tpr.emplace_back(0.0, 0.0);
  fpr_tpr.emplace_back(1.0, 1.0);
  std::sort(fpr_tpr.begin(), fpr_tpr.end());
  double area = 0;
  for (std::size_t i = 1; i < fpr_tpr.size(); ++i) {
    area += (fpr_tpr[i].first - fpr_tpr[i - 1].first) * (fpr_tpr[i].second + fpr_tpr[i - 1].second) / 2.0;
  }
  return area;
}

/// Pools all pixels of all images and sweeps `n_thresholds` evenly spaced
/// thresholds from 1 down to 0; a pixel is positive when p >= threshold.
/// Precision with no predicted positives is reported as 1.
template <typename T>
CurveData curves(const std::vector<Tensor<T>>& probabilities, const std::vector<Tensor<T>>& ground_truths,
                 std::size_t n_thresholds) {
  if (probabilities.size() != ground_truths.size()) throw DataError("curves: image counts differ");
  if (n_thresholds < 2) throw ConfigError("curves: need at least 2 thresholds");
  std::vector<std::pair<T, bool>> pixels;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    if (probabilities[i].shape() != ground_truths[i].shape()) {
      throw ShapeError("curves: probability " + to_string(probabilities[i].shape()) + " vs ground truth " +
                       to_string(ground_truths[i].shape()));
    }
    const auto p = probabilities[i].data();
    const auto g = ground_truths[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      if (!(p[k] >= T(0) && p[k] <= T(1))) throw DataError("curves: probabilities must lie in [0, 1]");
      pixels.emplace_back(p[k], g[k] == T(1));
    }
  }
  std::sort(pixels.begin(), pixels.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::uint64_t positives = 0;
  for (const auto& px : pixels) positives += px.second;
  const std::uint64_t negatives = pixels.size() - positives;

  CurveData cd;
  if (positives == 0) cd.flags |= kNoPositivePixels;
  if (negatives == 0) cd.flags |= kNoNegativePixels;
  std::size_t cursor = 0;
  std::uint64_t tp = 0, fp = 0;
  for (std::size_t j = 0; j < n_thresholds; ++j) {
    const double t = 1.0 - static_cast<double>(j) / static_cast<double>(n_thresholds - 1);
    while (cursor < pixels.size() && static_cast<double>(pixels[cursor].first) >= t) {
      (pixels[cursor].second ? tp : fp) += 1;
      ++cursor;
    }
    CurvePoint pt;
    pt.threshold = t;
    pt.precision = tp + fp == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    pt.recall = pt.tpr = positives == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(positives);
    pt.fpr = negatives == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(negatives);
    cd.points.push_back(pt);
  }
  if (!(cd.flags & kNoPositivePixels)) {
    std::vector<std::pair<double, double>> roc;
    for (const auto& p : cd.points) roc.emplace_back(p.fpr, p.tpr);
    cd.auc = roc_auc(std::move(roc));
  }
  return cd;
}

// ---------------------------------------------------------------------------
// Export

inline void write_report(std::ostream& os, const MetricsReport& r) {
  os << std::fixed << std::setprecision(4);
  os << "id\tcategory\ttp\tfp\ttn\tfn\tjaccard\tprecision\trecall\tspecificity\tdice\tflags\n";
  for (const auto& row : r.images) {
    os << row.id << '\t' << row.category << '\t' << row.counts.tp << '\t' << row.counts.fp << '\t' << row.counts.tn
       << '\t' << row.counts.fn << '\t' << row.metrics.jaccard << '\t' << row.metrics.precision << '\t'
       << row.metrics.recall << '\t' << row.metrics.specificity << '\t' << row.metrics.dice << '\t'
       << row.metrics.flags << '\n';
  }
  for (const auto& a : r.aggregates) {
    for (const char* which : {"mean", "std"}) {
      const bool m = which[0] == 'm';
      auto pick = [&](const MetricStats& s) { return m ? s.mean : s.stddev; };
      os << which << ':' << a.group << "\t\t\t\t\t\t" << pick(a.jaccard) << '\t' << pick(a.precision) << '\t'
         << pick(a.recall) << '\t' << pick(a.specificity) << '\t' << pick(a.dice) << "\t\n";
    }
  }
}

inline void write_curves(std::ostream& os, const CurveData& c) {
  os << std::setprecision(10);
  os << "threshold\tprecision\trecall\ttpr\tfpr\n";
  for (const auto& p : c.points) {
    os << p.threshold << '\t' << p.precision << '\t' << p.recall << '\t' << p.tpr << '\t' << p.fpr << '\n';
  }
}

inline std::string format_stats(const MetricStats& s) {
  std::ostringstream oss;
  oss << std::fixed << std::setprecision(2) << s.mean << " +- " << s.stddev;
  return oss.str();
}

}  // namespace esknet
