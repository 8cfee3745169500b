#pragma once

#include <numeric>
#include <span>
#include <sstream>

#include <json.hpp>

#include "owseg/core.hpp"

namespace owseg {

namespace detail {

inline void require_both_classes(std::span<const double> scores, const std::vector<bool>& is_unknown,
                                 bool need_negative) {
  if (scores.size() != is_unknown.size()) throw DomainError("scores and labels differ in length");
  const auto pos = std::count(is_unknown.begin(), is_unknown.end(), true);
  if (pos == 0) throw DomainError("no unknown (positive) points");
  if (need_negative && pos == static_cast<long>(is_unknown.size())) throw DomainError("no known (negative) points");
}

}  // namespace detail

/// Mann-Whitney AUROC with unknown as the positive class; ties count one half.
/// Sort-based average ranks, O(N log N).
inline double auroc(std::span<const double> scores, const std::vector<bool>& is_unknown) {
  detail::require_both_classes(scores, is_unknown, true);
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k)
      if (is_unknown[order[k]]) rank_sum += avg_rank;
    i = j + 1;
  }
  const auto pos = static_cast<double>(std::count(is_unknown.begin(), is_unknown.end(), true));
  const double neg = static_cast<double>(n) - pos;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

/// Average precision: sum over descending distinct thresholds of (ΔRecall x Precision).
inline double aupr(std::span<const double> scores, const std::vector<bool>& is_unknown) {
  detail::require_both_classes(scores, is_unknown, false);
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  const auto pos = static_cast<double>(std::count(is_unknown.begin(), is_unknown.end(), true));
  double tp = 0.0, seen = 0.0, prev_recall = 0.0, area = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) {
      tp += is_unknown[order[j]] ? 1.0 : 0.0;
      seen += 1.0;
      ++j;
    }
    const double recall = tp / pos;
    area += (recall - prev_recall) * (tp / seen);
    prev_recall = recall;
    i = j;
  }
  return area;
}

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<long> known;
  std::vector<long> unknown;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "bin_left,bin_right,count_known,count_unknown\n";
    for (size_t b = 0; b + 1 < edges.size(); ++b)
      os << edges[b] << ',' << edges[b + 1] << ',' << known[b] << ',' << unknown[b] << '\n';
    return os.str();
  }
};

inline void to_json(nlohmann::json& j, const Histogram& h) {
  j = {{"edges", h.edges}, {"count_known", h.known}, {"count_unknown", h.unknown}};
}

/// Equal-width bins over [min, max] of the scores; the last bin is closed.
inline Histogram export_histogram(std::span<const double> scores, const std::vector<bool>& is_unknown, int bins) {
  if (bins < 2) throw DomainError("histogram needs at least two bins");
  if (scores.size() != is_unknown.size()) throw DomainError("scores and labels differ in length");
  Histogram h;
  h.known.assign(static_cast<size_t>(bins), 0);
  h.unknown.assign(static_cast<size_t>(bins), 0);
  double lo = 0.0, hi = 1.0;
  if (!scores.empty()) {
    auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
    lo = *mn;
    hi = *mx;
  }
  if (hi <= lo) hi = lo + 1.0;
  const double width = (hi - lo) / bins;
  for (int b = 0; b <= bins; ++b) h.edges.push_back(b == bins ? hi : lo + width * b);
  for (size_t i = 0; i < scores.size(); ++i) {
    auto b = static_cast<int>((scores[i] - lo) / width);
    b = std::clamp(b, 0, bins - 1);
    (is_unknown[i] ? h.unknown : h.known)[static_cast<size_t>(b)] += 1;
  }
  return h;
}

/// Confusion counts over {0} ∪ K_0 ∪ K_n plus derived IoUs.
struct EvalReport {
  std::vector<ClassId> classes;           // row/column order; classes[0] == 0
  std::vector<std::vector<long>> confusion;  // [gt][pred]
  std::map<ClassId, double> iou;          // classes present in GT or prediction
  double miou = 0.0;
  double miou_old = 0.0;
  double miou_novel = 0.0;
  std::optional<double> auroc;
  std::optional<double> aupr;
  std::optional<Histogram> histogram;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json iou = nlohmann::json::object();
  for (auto [c, v] : r.iou) iou[std::to_string(c)] = v;
  j = {{"classes", r.classes}, {"confusion", r.confusion}, {"iou", iou},
       {"miou", r.miou},       {"miou_old", r.miou_old},   {"miou_novel", r.miou_novel}};
  if (r.auroc) j["auroc"] = *r.auroc;
  if (r.aupr) j["aupr"] = *r.aupr;
  if (r.histogram) j["histogram"] = *r.histogram;
}

/// Accumulates confusion counts; scans can be added one at a time and merged by addition.
class ConfusionAccumulator {
 public:
  explicit ConfusionAccumulator(const ClassRegistry& reg) : reg_(reg) {
    classes_.push_back(kUnknown);
    for (ClassId c : reg.old_classes()) classes_.push_back(c);
    for (ClassId c : reg.learned_novel()) classes_.push_back(c);
    counts_.assign(classes_.size(), std::vector<long>(classes_.size(), 0));
  }

  /// Void GT points are skipped; GT classes the registry does not know count as unknown (0).
  void add(const LabelSet& pred, const LabelSet& gt) {
    if (pred.size() != gt.size()) throw DomainError("prediction and ground truth differ in length");
    for (int i = 0; i < gt.size(); ++i) {
      if (gt.is_void(i)) continue;
      ClassId g = gt.labels[static_cast<size_t>(i)];
      if (!reg_.is_known(g)) g = kUnknown;
      counts_[index(g)][index(pred.labels[static_cast<size_t>(i)])] += 1;
      ++total_;
    }
  }

  void merge(const ConfusionAccumulator& o) {
    for (size_t a = 0; a < counts_.size(); ++a)
      for (size_t b = 0; b < counts_.size(); ++b) counts_[a][b] += o.counts_[a][b];
    total_ += o.total_;
  }

  EvalReport report() const {
    if (total_ == 0) throw DomainError("no non-void ground-truth points to evaluate");
    EvalReport r;
    r.classes = classes_;
    r.confusion = counts_;
    std::vector<double> all, old, novel;
    for (size_t k = 1; k < classes_.size(); ++k) {
      long tp = counts_[k][k], fp = 0, fn = 0;
      for (size_t o = 0; o < classes_.size(); ++o)
        if (o != k) {
          fp += counts_[o][k];
          fn += counts_[k][o];
        }
      if (tp + fp + fn == 0) continue;
      const double v = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      r.iou[classes_[k]] = v;
      all.push_back(v);
      (reg_.is_old(classes_[k]) ? old : novel).push_back(v);
    }
    auto mean = [](const std::vector<double>& v) {
      return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    r.miou = mean(all);
    r.miou_old = mean(old);
    r.miou_novel = mean(novel);
    return r;
  }

 private:
  size_t index(ClassId c) const {
    auto it = std::find(classes_.begin(), classes_.end(), c);
    if (it == classes_.end()) throw DomainError("predicted label " + std::to_string(c) + " outside the registry");
    return static_cast<size_t>(it - classes_.begin());
  }

  ClassRegistry reg_;
  std::vector<ClassId> classes_;
  std::vector<std::vector<long>> counts_;
  long total_ = 0;
};

/// Per-class IoU = TP / (TP + FP + FN); classes absent from both GT and prediction are dropped.
inline EvalReport miou_report(const LabelSet& pred, const LabelSet& gt, const ClassRegistry& reg) {
  ConfusionAccumulator acc(reg);
  acc.add(pred, gt);
  return acc.report();
}

}  // namespace owseg
