#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sarseg/datagen.hpp"

namespace sarseg::metrics {

// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 0)
      : k_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
    if (num_classes < 1) throw ArgumentError("confusion matrix needs at least one class");
  }

  int num_classes() const { return k_; }
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * k_ + pred]; }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  void accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                  std::uint8_t ignore = data::kIgnoreLabel) {
    if (pred.size() != gt.size()) throw ShapeError("confusion: prediction/label size mismatch");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      if (gt[i] >= k_ || pred[i] >= k_)
        throw DataError("confusion: class id " + std::to_string(std::max(gt[i], pred[i])) + " >= " +
                        std::to_string(k_));
      ++counts_[static_cast<std::size_t>(gt[i]) * k_ + pred[i]];
    }
  }

  ConfusionMatrix& merge(const ConfusionMatrix& o) {
    if (o.k_ != k_) throw ShapeError("confusion: merging matrices of different sizes");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  std::uint64_t tp(int k) const { return at(k, k); }
  std::uint64_t fn(int k) const {
    std::uint64_t s = 0;
    for (int j = 0; j < k_; ++j) s += j == k ? 0 : at(k, j);
    return s;
  }
  std::uint64_t fp(int k) const {
    std::uint64_t s = 0;
    for (int j = 0; j < k_; ++j) s += j == k ? 0 : at(j, k);
    return s;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int k_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix merge(ConfusionMatrix a, const ConfusionMatrix& b) { return a.merge(b); }

using Optional = std::optional<double>;

inline Optional ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

inline std::vector<Optional> iou_per_class(const ConfusionMatrix& cm) {
  std::vector<Optional> out;
  for (int k = 0; k < cm.num_classes(); ++k) out.push_back(ratio(cm.tp(k), cm.tp(k) + cm.fp(k) + cm.fn(k)));
  return out;
}

inline std::vector<Optional> acc_per_class(const ConfusionMatrix& cm) {
  std::vector<Optional> out;
  for (int k = 0; k < cm.num_classes(); ++k) out.push_back(ratio(cm.tp(k), cm.tp(k) + cm.fn(k)));
  return out;
}

// Mean over defined entries only.
inline Optional defined_mean(const std::vector<Optional>& v) {
  double s = 0;
  int n = 0;
  for (const auto& x : v)
    if (x) {
      s += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / n;
}

inline Optional mean_iou(const ConfusionMatrix& cm) { return defined_mean(iou_per_class(cm)); }
inline Optional mean_acc(const ConfusionMatrix& cm) { return defined_mean(acc_per_class(cm)); }

struct WaterMetrics {
  Optional iou;
  Optional precision;
  Optional recall;
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

// Probability >= threshold counts as water.
inline WaterMetrics water_metrics(std::span<const float> prob, std::span<const std::uint8_t> gt,
                                  double threshold = 0.5, std::uint8_t ignore = data::kIgnoreLabel) {
  if (prob.size() != gt.size()) throw ShapeError("water_metrics: probability/label size mismatch");
  WaterMetrics m;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore) continue;
    if (gt[i] > 1) throw DataError("water_metrics: label " + std::to_string(gt[i]) + " is not binary");
    const bool pred = prob[i] >= threshold, truth = gt[i] == 1;
    m.tp += pred && truth;
    m.fp += pred && !truth;
    m.fn += !pred && truth;
    m.tn += !pred && !truth;
  }
  m.iou = ratio(m.tp, m.tp + m.fp + m.fn);
  m.precision = ratio(m.tp, m.tp + m.fp);
  m.recall = ratio(m.tp, m.tp + m.fn);
  return m;
}

inline WaterMetrics merge(WaterMetrics a, const WaterMetrics& b) {
  a.tp += b.tp;
  a.fp += b.fp;
  a.fn += b.fn;
  a.tn += b.tn;
  a.iou = ratio(a.tp, a.tp + a.fp + a.fn);
  a.precision = ratio(a.tp, a.tp + a.fp);
  a.recall = ratio(a.tp, a.tp + a.fn);
  return a;
}

// ---------------------------------------------------------------------------
// Reports. Undefined values are JSON null and an empty CSV cell.

inline nlohmann::json to_json(const Optional& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline std::string csv_cell(const Optional& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(8);
  os << *v;
  return os.str();
}

inline nlohmann::json lulc_report(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
  const auto iou = iou_per_class(cm), acc = acc_per_class(cm);
  nlohmann::json classes = nlohmann::json::array();
  for (int k = 0; k < cm.num_classes(); ++k)
    classes.push_back({{"id", k},
                       {"name", k < static_cast<int>(names.size()) ? names[k] : "class" + std::to_string(k)},
                       {"iou", to_json(iou[k])},
                       {"acc", to_json(acc[k])},
                       {"support", cm.tp(k) + cm.fn(k)}});
  nlohmann::json rows = nlohmann::json::array();
  for (int g = 0; g < cm.num_classes(); ++g) {
    std::vector<std::uint64_t> row;
    for (int p = 0; p < cm.num_classes(); ++p) row.push_back(cm.at(g, p));
    rows.push_back(row);
  }
  return {{"task", "lulc"},
          {"miou", to_json(mean_iou(cm))},
          {"macc", to_json(mean_acc(cm))},
          {"pixels", cm.total()},
          {"classes", classes},
          {"confusion", rows}};
}

inline std::string lulc_csv(const ConfusionMatrix& cm, const std::vector<std::string>& names) {
  const auto iou = iou_per_class(cm), acc = acc_per_class(cm);
  std::ostringstream os;
  os << "class_id,class_name,iou,acc,support\n";
  for (int k = 0; k < cm.num_classes(); ++k)
    os << k << ',' << (k < static_cast<int>(names.size()) ? names[k] : "class" + std::to_string(k)) << ','
       << csv_cell(iou[k]) << ',' << csv_cell(acc[k]) << ',' << cm.tp(k) + cm.fn(k) << '\n';
  os << "mean,mean," << csv_cell(mean_iou(cm)) << ',' << csv_cell(mean_acc(cm)) << ',' << cm.total() << '\n';
  return os.str();
}

inline nlohmann::json water_report(const WaterMetrics& m, double threshold) {
  return {{"task", "water"},
          {"threshold", threshold},
          {"iou_water", to_json(m.iou)},
          {"precision", to_json(m.precision)},
          {"recall", to_json(m.recall)},
          {"tp", m.tp},
          {"fp", m.fp},
          {"fn", m.fn},
          {"tn", m.tn}};
}

inline std::string water_csv(const WaterMetrics& m) {
  std::ostringstream os;
  os << "metric,value\n"
     << "iou_water," << csv_cell(m.iou) << '\n'
     << "precision," << csv_cell(m.precision) << '\n'
     << "recall," << csv_cell(m.recall) << '\n';
  return os.str();
}

}  // namespace sarseg::metrics
