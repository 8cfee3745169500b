#pragma once

#include <functional>
#include <span>

#include <json.hpp>

#include "owseg/network.hpp"

namespace owseg {

struct LossConfig {
  double lambda_syn = 1.0;
  double lambda_cal = 0.1;

  void validate() const {
    if (!(lambda_syn >= 0.0) || !(lambda_cal >= 0.0)) throw ConfigError("loss weights must be non-negative");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LossConfig, lambda_syn, lambda_cal)

/// Numerically stable log-softmax of one row.
inline Eigen::RowVectorXd log_softmax(const Eigen::Ref<const Eigen::RowVectorXd>& z) {
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return z.array() - lse;
}

/// Mean over non-void rows of -log softmax(row)[target]. `grad`, when given, receives dL/dscores.
inline double cross_entropy(const Matrix& scores, std::span<const int> targets, const std::vector<bool>& void_mask,
                            Matrix* grad = nullptr) {
  const Eigen::Index k = scores.rows(), d = scores.cols();
  if (targets.size() != static_cast<size_t>(k) || void_mask.size() != static_cast<size_t>(k))
    throw DomainError("cross_entropy: target/void lengths must match the score rows");
  long count = 0;
  for (Eigen::Index i = 0; i < k; ++i) {
    if (void_mask[static_cast<size_t>(i)]) continue;
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0 || t >= d) throw DomainError("cross_entropy: target " + std::to_string(t) + " out of range");
    ++count;
  }
  if (count == 0) throw DomainError("cross_entropy: every point is void");
  if (grad) *grad = Matrix::Zero(k, d);
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(count);
  for (Eigen::Index i = 0; i < k; ++i) {
    if (void_mask[static_cast<size_t>(i)]) continue;
    const int t = targets[static_cast<size_t>(i)];
    Eigen::RowVectorXd lp = log_softmax(scores.row(i));
    total -= lp(t);
    if (grad) {
      grad->row(i) = lp.array().exp() * inv;
      (*grad)(i, t) -= inv;
    }
  }
  return total * inv;
}

inline void check_gradients(const Weights& g) {
  g.for_each([](const char* name, const Matrix& t) {
    if (!t.allFinite()) throw NumericError(std::string("non-finite gradient for parameter '") + name + "'");
  });
}

/// Column of `c` in the assembled vector: unknown 0, old 1..C, learned C+1..C+n.
inline int assembled_index(const ClassRegistry& reg, ClassId c) {
  if (c == kUnknown) return 0;
  const int idx = reg.closed_index(c);
  if (idx < 0) throw DomainError("class " + std::to_string(c) + " has no entry in the assembled scores");
  return 1 + idx;
}

/// Synthesised points are pushed toward the unknown entry. Empty P_syn contributes 0.
inline double loss_syn(const Matrix& assembled, const std::vector<bool>& syn_mask, Matrix* grad = nullptr) {
  const Eigen::Index m = assembled.rows();
  if (grad) *grad = Matrix::Zero(m, assembled.cols());
  if (std::none_of(syn_mask.begin(), syn_mask.end(), [](bool b) { return b; })) return 0.0;
  std::vector<bool> excluded(syn_mask.size());
  for (size_t i = 0; i < syn_mask.size(); ++i) excluded[i] = !syn_mask[i];
  std::vector<int> targets(static_cast<size_t>(m), 0);
  return cross_entropy(assembled, targets, excluded, grad);
}

struct CalibrationLoss {
  double original = 0.0;  // CE against the label
  double unknown = 0.0;   // CE toward unknown with the label's entry removed
  double total = 0.0;
};

/// `targets` are assembled indices; -1 marks points outside P_nm or void. Points whose target is
/// the unknown entry itself (pseudo-labelled unknown during IL) only enter the original term.
inline CalibrationLoss loss_cal(const Matrix& assembled, std::span<const int> targets, double lambda_cal,
                                Matrix* grad = nullptr) {
  const Eigen::Index m = assembled.rows(), d = assembled.cols();
  std::vector<bool> skip(static_cast<size_t>(m));
  std::vector<int> safe(static_cast<size_t>(m), 0);
  for (Eigen::Index i = 0; i < m; ++i) {
    skip[static_cast<size_t>(i)] = targets[static_cast<size_t>(i)] < 0;
    safe[static_cast<size_t>(i)] = std::max(0, targets[static_cast<size_t>(i)]);
  }
  CalibrationLoss out;
  Matrix g_ori;
  out.original = cross_entropy(assembled, safe, skip, grad ? &g_ori : nullptr);

  // Reduced vectors drop the target column; unknown stays at position 0.
  long count = 0;
  for (Eigen::Index i = 0; i < m; ++i)
    if (targets[static_cast<size_t>(i)] > 0) ++count;
  Matrix g_uk = Matrix::Zero(m, d);
  if (count > 0) {
    const double inv = 1.0 / static_cast<double>(count);
    Eigen::RowVectorXd reduced(d - 1);
    for (Eigen::Index i = 0; i < m; ++i) {
      const int t = targets[static_cast<size_t>(i)];
      if (t <= 0) continue;
      for (Eigen::Index j = 0, r = 0; j < d; ++j)
        if (j != t) reduced(r++) = assembled(i, j);
      Eigen::RowVectorXd lp = log_softmax(reduced);
      out.unknown -= lp(0) * inv;
      if (grad) {
        Eigen::RowVectorXd p = lp.array().exp();
        for (Eigen::Index j = 0, r = 0; j < d; ++j) {
          if (j == t) continue;
          g_uk(i, j) = (p(r) - (r == 0 ? 1.0 : 0.0)) * inv;
          ++r;
        }
      }
    }
  }
  out.total = out.original + lambda_cal * out.unknown;
  if (grad) *grad = g_ori + lambda_cal * g_uk;
  return out;
}

/// One training example for the open-set objectives. `scan` is already synthesised.
struct LossBatch {
  const Scan& scan;
  const LabelSet& labels;            // Y_nm: ground truth (OSeg) or the pseudo-label union (IL)
  const std::vector<bool>& syn_mask;  // P_syn
};

struct LossBreakdown {
  CalibrationLoss cal;
  double syn = 0.0;
  double total = 0.0;
};

/// Assembled targets for P_nm. Label 0 is only legal for post-IL training on pseudo labels.
inline std::vector<int> calibration_targets(const Model& model, const LossBatch& batch) {
  const int m = batch.scan.size();
  if (batch.labels.size() != m || batch.syn_mask.size() != static_cast<size_t>(m))
    throw DomainError("labels and syn_mask must match the scan");
  std::vector<int> t(static_cast<size_t>(m), -1);
  for (int i = 0; i < m; ++i) {
    if (batch.syn_mask[static_cast<size_t>(i)] || batch.labels.is_void(i)) continue;
    const ClassId c = batch.labels.labels[static_cast<size_t>(i)];
    if (c == kUnknown && model.stage != Stage::post_il)
      throw DomainError("label 0 in Y_nm is only valid for incremental pseudo-label training");
    t[static_cast<size_t>(i)] = assembled_index(model.registry, c);
  }
  return t;
}

/// L = L_cal(P_nm) + lambda_syn * L_syn(P_syn) on an open or post-IL model.
/// When `grads` is set the full parameter gradient is written there.
inline LossBreakdown loss_total(const Model& model, const LossBatch& batch, const LossConfig& cfg,
                                Weights* grads = nullptr, std::mt19937_64* dropout_rng = nullptr) {
  cfg.validate();
  if (model.stage == Stage::closed) throw DomainError("open-set losses need redundancy heads");
  const auto targets = calibration_targets(model, batch);
  const bool any_nm = std::any_of(targets.begin(), targets.end(), [](int t) { return t >= 0; });
  const bool any_syn = std::any_of(batch.syn_mask.begin(), batch.syn_mask.end(), [](bool b) { return b; });
  if (!any_nm && !any_syn) throw DomainError("batch has neither labelled nor synthesised points");
  ForwardResult fr = forward_with_cache(model, batch.scan, dropout_rng);
  AssembledScores a = assemble_scores(fr.bundle, model.stage);

  LossBreakdown out;
  Matrix g_cal, g_syn;
  if (any_nm) out.cal = loss_cal(a.scores, targets, cfg.lambda_cal, grads ? &g_cal : nullptr);
  out.syn = loss_syn(a.scores, batch.syn_mask, grads ? &g_syn : nullptr);
  out.total = out.cal.total + cfg.lambda_syn * out.syn;

  if (grads) {
    Matrix d = any_nm ? g_cal : Matrix::Zero(a.scores.rows(), a.scores.cols());
    d += cfg.lambda_syn * g_syn;
    LogitsBundle db = assembled_backward(a, d, fr.bundle);
    *grads = backward(model, fr.cache, db.y_old, merge_heads(model, db));
    check_gradients(*grads);
  }
  return out;
}

/// Loss closure over a forward pass: returns the value and fills dL/d(bundle).
using LossClosure = std::function<double(const LogitsBundle&, LogitsBundle& d_bundle)>;

/// Gradient of an arbitrary bundle-level loss with respect to every weight tensor.
inline Weights gradients(const Model& model, const Scan& scan, const LossClosure& loss, double* value = nullptr,
                         std::mt19937_64* dropout_rng = nullptr) {
  ForwardResult fr = forward_with_cache(model, scan, dropout_rng);
  LogitsBundle d;
  d.y_old = Matrix::Zero(fr.bundle.y_old.rows(), fr.bundle.y_old.cols());
  d.y_uk = Matrix::Zero(fr.bundle.y_uk.rows(), fr.bundle.y_uk.cols());
  d.y_nv = Matrix::Zero(fr.bundle.y_nv.rows(), fr.bundle.y_nv.cols());
  const double v = loss(fr.bundle, d);
  if (value) *value = v;
  Weights g = backward(model, fr.cache, d.y_old, merge_heads(model, d));
  check_gradients(g);
  return g;
}

/// Plain cross-entropy on y_old for closed-set training; void points ignored.
inline LossClosure closed_set_loss(const ClassRegistry& reg, const LabelSet& labels) {
  std::vector<int> targets(static_cast<size_t>(labels.size()), 0);
  for (int i = 0; i < labels.size(); ++i)
    if (!labels.is_void(i)) {
      const int idx = reg.closed_index(labels.labels[static_cast<size_t>(i)]);
      if (idx < 0 || idx >= reg.num_old())
        throw DomainError("closed-set training label outside K_0: " + std::to_string(labels.labels[static_cast<size_t>(i)]));
      targets[static_cast<size_t>(i)] = idx;
    }
  return [targets, mask = labels.void_mask](const LogitsBundle& b, LogitsBundle& d) {
    return cross_entropy(b.y_old, targets, mask, &d.y_old);
  };
}

}  // namespace owseg
