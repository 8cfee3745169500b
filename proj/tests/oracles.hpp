#pragma once

// Slow, obviously-correct reference implementations used by the unit and acceptance tests.

#include <random>
#include <set>

#include "owseg/experiment.hpp"

namespace owseg::oracle {

/// P(random unknown outscores random known), ties 1/2, by enumerating every pair.
inline double auroc_pairs(const std::vector<double>& s, const std::vector<bool>& unk) {
  double wins = 0.0, pairs = 0.0;
  for (size_t i = 0; i < s.size(); ++i)
    for (size_t j = 0; j < s.size(); ++j)
      if (unk[i] && !unk[j]) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return wins / pairs;
}

/// Step-wise PR area: for each distinct threshold t (descending), predict unknown iff score >= t
/// and accumulate (recall gain) x precision, counting every point from scratch.
inline double aupr_sweep(const std::vector<double>& s, const std::vector<bool>& unk) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  const double pos = static_cast<double>(std::count(unk.begin(), unk.end(), true));
  double area = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0, fp = 0.0;
    for (size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) (unk[i] ? tp : fp) += 1.0;
    const double recall = tp / pos;
    area += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
  }
  return area;
}

/// Per-class IoU by counting triples point by point; classes absent from both sides skipped.
/// GT classes unknown to the registry count as 0; void GT points are ignored.
inline std::map<ClassId, double> iou_naive(const LabelSet& pred, const LabelSet& gt, const ClassRegistry& reg) {
  std::vector<ClassId> classes = reg.old_classes();
  for (ClassId c : reg.learned_novel()) classes.push_back(c);
  std::map<ClassId, double> out;
  for (ClassId c : classes) {
    long tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < gt.size(); ++i) {
      if (gt.is_void(i)) continue;
      ClassId g = gt.labels[static_cast<size_t>(i)];
      if (!reg.is_known(g)) g = kUnknown;
      const ClassId p = pred.labels[static_cast<size_t>(i)];
      if (g == c && p == c) ++tp;
      if (g != c && p == c) ++fp;
      if (g == c && p != c) ++fn;
    }
    if (tp + fp + fn > 0) out[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
  }
  return out;
}

struct GradCheck {
  double max_rel = 0.0;
  long checked = 0;
  std::string worst;
};

/// Central differences over every weight entry. Relative error uses max(|a|, |n|, floor).
template <class LossFn>
GradCheck finite_difference(Model& model, const Weights& analytic, LossFn&& loss, double step = 1e-4,
                            double floor = 1e-6) {
  GradCheck out;
  std::vector<std::pair<const char*, Matrix*>> params;
  std::vector<const Matrix*> grads;
  model.weights.for_each([&](const char* n, Matrix& t) { params.emplace_back(n, &t); });
  analytic.for_each([&](const char*, const Matrix& t) { grads.push_back(&t); });
  for (size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k].second;
    for (Eigen::Index j = 0; j < p.size(); ++j) {
      const double orig = p.data()[j];
      p.data()[j] = orig + step;
      const double up = loss(model);
      p.data()[j] = orig - step;
      const double down = loss(model);
      p.data()[j] = orig;
      const double num = (up - down) / (2.0 * step), an = grads[k]->data()[j];
      const double rel = std::abs(num - an) / std::max({std::abs(num), std::abs(an), floor});
      ++out.checked;
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = std::string(params[k].first) + "[" + std::to_string(j) + "]";
      }
    }
  }
  return out;
}

inline ClassRegistry toy_registry(int r = 3) { return ClassRegistry({1, 2, 3, 4}, {5}, r); }

inline GeneratedScene toy_scene(uint64_t seed, int points) {
  SceneConfig sc = SceneConfig::defaults();
  sc.rng_seed = seed;
  sc.points_per_scan = points;
  return generate_scene(sc, toy_registry());
}

}  // namespace owseg::oracle
