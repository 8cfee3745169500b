#pragma once

#include "owseg/training.hpp"

namespace owseg {

struct ILStagePlan {
  ClassId promoted_class = 0;
  int epochs = 5;
  std::string source_checkpoint;  // informational; recorded in the stage manifest
};

/// Novel ground truth wins where it exists; everywhere else the open-set prediction of the
/// pre-IL model (including 0 for unknown) becomes the pseudo label. No point stays void.
inline LabelSet make_pseudo_labels(const Model& model_o, const LogitsBundle& bundle, const LabelSet& novel_gt,
                                   double lambda_th) {
  if (novel_gt.size() != bundle.rows()) throw DomainError("novel ground truth does not match the scan");
  for (int i = 0; i < novel_gt.size(); ++i) {
    if (novel_gt.is_void(i)) continue;
    const ClassId c = novel_gt.labels[static_cast<size_t>(i)];
    if (c == kUnknown || model_o.registry.is_known(c))
      throw DomainError("novel ground truth may only label novel classes, found " + std::to_string(c));
  }
  LabelSet out = predict_open(model_o, bundle, lambda_th);
  out.domain = LabelDomain::post_il;
  for (int i = 0; i < novel_gt.size(); ++i)
    if (!novel_gt.is_void(i)) out.labels[static_cast<size_t>(i)] = novel_gt.labels[static_cast<size_t>(i)];
  return out;
}

inline LabelSet make_pseudo_labels(const Model& model_o, const Scan& scan, const LabelSet& novel_gt,
                                   const InferenceConfig& cfg = {}) {
  return make_pseudo_labels(model_o, forward(model_o, scan), novel_gt, resolve_threshold(model_o, cfg));
}

/// Decodes a pseudo-label cache file. Class 0 there means unknown, so no point is void.
inline LabelSet read_pseudo_labels(std::span<const uint8_t> bytes, int m) {
  LabelSet out = read_labels(bytes, m).labels;
  out.domain = LabelDomain::post_il;
  std::fill(out.void_mask.begin(), out.void_mask.end(), false);
  return out;
}

/// registry_advance followed by reassign_rc for a single promoted class.
inline Model promote(const Model& model_o, ClassId cls, uint64_t seed) {
  if (model_o.stage == Stage::closed) throw DomainError("incremental learning starts from an open-set model");
  return reassign_rc(model_o, model_o.registry.advance({cls}), seed);
}

struct ILResult {
  Model model;
  std::vector<double> trace;
  std::vector<LabelSet> pseudo_labels;  // per training scan, empty for the baselines
};

namespace detail {

inline void check_plan(const Model& model_o, const ILStagePlan& plan) {
  if (!model_o.registry.is_remaining(plan.promoted_class))
    throw DomainError("class " + std::to_string(plan.promoted_class) + " is not a remaining novel class");
  if (plan.epochs < 0) throw ConfigError("IL epochs must be >= 0");
}

inline uint64_t stage_seed(const TrainingConfig& cfg, ClassId cls) { return cfg.seed + 1000 + static_cast<uint64_t>(cls); }

}  // namespace detail

/// Pseudo labels are generated once with model_o, then the promoted model trains on the union
/// with synthesis and calibration exactly as in open-set finetuning.
inline ILResult run_il_stage(const Model& model_o, const ILStagePlan& plan, const std::vector<Sample>& train,
                             const SynthesisConfig& syn, const LossConfig& loss, const TrainingConfig& cfg) {
  detail::check_plan(model_o, plan);
  cfg.validate();
  const double th = resolve_threshold(model_o, {});
  ILResult r{promote(model_o, plan.promoted_class, detail::stage_seed(cfg, plan.promoted_class)), {}, {}};
  for (const auto& s : train)
    r.pseudo_labels.push_back(
        make_pseudo_labels(model_o, forward(model_o, s.scan), single_class_view(s.full_labels, plan.promoted_class), th));
  r.trace = train_loop(r.model, static_cast<int>(train.size()), plan.epochs, cfg.lr_oseg * cfg.il_lr_factor,
                       detail::stage_seed(cfg, plan.promoted_class),
                       [&](const Model& m, int i, std::mt19937_64& rng, Weights& g) {
                         return open_set_step(m, train[static_cast<size_t>(i)].scan,
                                              r.pseudo_labels[static_cast<size_t>(i)], syn, loss, rng, g);
                       },
                       {}, cfg.redundancy_lr_factor, cfg.weight_decay);
  return r;
}

namespace detail {

/// Novel-only finetuning shared by both baselines: plain cross-entropy on the post-IL
/// assembled vector, no synthesis, no pseudo labels.
inline ILResult novel_only_finetune(const Model& model_o, const ILStagePlan& plan, const std::vector<Sample>& train,
                                    const TrainingConfig& cfg, const GradientFilter& filter) {
  check_plan(model_o, plan);
  cfg.validate();
  ILResult r{promote(model_o, plan.promoted_class, stage_seed(cfg, plan.promoted_class)), {}, {}};
  std::vector<LabelSet> gt;
  for (const auto& s : train) gt.push_back(single_class_view(s.full_labels, plan.promoted_class));
  const LossConfig plain{0.0, 0.0};
  r.trace = train_loop(r.model, static_cast<int>(train.size()), plan.epochs, cfg.lr_baseline,
                       stage_seed(cfg, plan.promoted_class),
                       [&](const Model& m, int i, std::mt19937_64& rng, Weights& g) {
                         const auto& labels = gt[static_cast<size_t>(i)];
                         const auto& scan = train[static_cast<size_t>(i)].scan;
                         if (labels.non_void_count() == 0) {
                           g = m.weights.zeros_like();
                           return 0.0;
                         }
                         std::vector<bool> none(static_cast<size_t>(scan.size()), false);
                         return loss_total(m, LossBatch{scan, labels, none}, plain, &g, &rng).total;
                       },
                       filter, 1.0, cfg.weight_decay);
  return r;
}

}  // namespace detail

/// Finetunes every weight on the novel labels alone.
inline ILResult baseline_finetune(const Model& model_o, const ILStagePlan& plan, const std::vector<Sample>& train,
                                  const TrainingConfig& cfg) {
  return detail::novel_only_finetune(model_o, plan, train, cfg, {});
}

/// Freezes everything except the promoted class's redundancy slot.
inline ILResult baseline_feature_extraction(const Model& model_o, const ILStagePlan& plan,
                                            const std::vector<Sample>& train, const TrainingConfig& cfg) {
  const int slot = model_o.registry.unknown_slots().front();  // the slot promote() rebinds
  return detail::novel_only_finetune(model_o, plan, train, cfg, [slot](Weights& g) {
    Matrix w = g.redundancy.W.col(slot);
    const double b = g.redundancy.b(0, slot);
    g.for_each([](const char*, Matrix& t) { t.setZero(); });
    g.redundancy.W.col(slot) = w;
    g.redundancy.b(0, slot) = b;
  });
}

}  // namespace owseg
