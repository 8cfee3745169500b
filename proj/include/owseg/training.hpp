#pragma once

#include <numeric>

#include <json.hpp>

#include "owseg/data.hpp"
#include "owseg/losses.hpp"
#include "owseg/openset.hpp"
#include "owseg/synthesis.hpp"

namespace owseg {

struct TrainingConfig {
  uint64_t seed = 7;
  int epochs_closed = 40;
  int epochs_oseg = 40;
  int epochs_il = 5;
  double lr_closed = 5e-3;
  double lr_oseg = 2e-3;
  double il_lr_factor = 0.1;  // REAL incremental stages train at il_lr_factor * lr_oseg
  double lr_baseline = 5e-2;  // finetune / feature-extraction IL baselines
  double redundancy_lr_factor = 1.0;  // extra step-size factor for the redundancy head (OSeg and IL)
  double weight_decay = 0.0;          // decoupled (AdamW) decay, all stages

  void validate() const {
    if (epochs_closed < 0 || epochs_oseg < 0 || epochs_il < 0) throw ConfigError("epoch counts must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(lr_closed > 0.0 && lr_oseg > 0.0 && lr_baseline > 0.0 && il_lr_factor > 0.0 && redundancy_lr_factor > 0.0)) throw ConfigError("learning rates must be > 0");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainingConfig, seed, epochs_closed, epochs_oseg, epochs_il,
                                                lr_closed, lr_oseg, il_lr_factor, lr_baseline, redundancy_lr_factor,
                                                weight_decay)

/// Training stopped on a non-finite loss; carries the weights from the last finite epoch.
struct DivergenceError : NumericError {
  DivergenceError(const std::string& what, Model last) : NumericError(what), last_finite(std::move(last)) {}
  Model last_finite;
};

class Adam {
 public:
  Adam(const Weights& shape, double lr, double redundancy_factor = 1.0, double weight_decay = 0.0)
      : m_(shape.zeros_like()),
        v_(shape.zeros_like()),
        lr_(lr),
        redundancy_factor_(redundancy_factor),
        weight_decay_(weight_decay) {}

  /// Decoupled weight decay. Entries whose gradient has been exactly zero so far keep their
  /// values bit for bit, which is how frozen parameters stay frozen.
  void step(Weights& w, const Weights& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, t_), c2 = 1.0 - std::pow(kBeta2, t_);
    std::vector<Matrix*> ws, ms, vs;
    std::vector<const Matrix*> gs;
    std::vector<double> rates;
    w.for_each([&](const char* name, Matrix& t) {
      ws.push_back(&t);
      rates.push_back(lr_ * (std::string_view(name).starts_with("redundancy") ? redundancy_factor_ : 1.0));
    });
    m_.for_each([&](const char*, Matrix& t) { ms.push_back(&t); });
    v_.for_each([&](const char*, Matrix& t) { vs.push_back(&t); });
    g.for_each([&](const char*, const Matrix& t) { gs.push_back(&t); });
    for (size_t k = 0; k < ws.size(); ++k) {
      if (ws[k]->size() == 0) continue;
      Matrix& m = *ms[k];
      Matrix& v = *vs[k];
      m = kBeta1 * m + (1.0 - kBeta1) * *gs[k];
      v = kBeta2 * v + (1.0 - kBeta2) * gs[k]->cwiseProduct(*gs[k]);
      *ws[k] -= (rates[k] * (m / c1).array() / ((v / c2).array().sqrt() + kEps)).matrix();
      if (weight_decay_ > 0.0)
        *ws[k] = (v.array() > 0.0).select(ws[k]->array() * (1.0 - rates[k] * weight_decay_), ws[k]->array()).matrix();
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  Weights m_, v_;
  double lr_;
  double redundancy_factor_;
  double weight_decay_;
  int t_ = 0;
};

/// Independent, reproducible rng stream for (seed, epoch, sample, purpose).
inline std::mt19937_64 stream_rng(uint64_t seed, int epoch, int sample, int purpose) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                    static_cast<uint32_t>(sample), static_cast<uint32_t>(purpose)};
  return std::mt19937_64(seq);
}

/// Computes loss and gradient for one sample. The rng is private to (epoch, sample).
using StepFn = std::function<double(const Model&, int sample, std::mt19937_64& rng, Weights& grad)>;
using GradientFilter = std::function<void(Weights&)>;

/// Mini-batch of one scan per step, shuffled per epoch. Returns the mean loss of every epoch.
inline std::vector<double> train_loop(Model& model, int num_samples, int epochs, double lr, uint64_t seed,
                                      const StepFn& step, const GradientFilter& filter = {},
                                      double redundancy_lr_factor = 1.0, double weight_decay = 0.0) {
  std::vector<double> trace;
  if (num_samples <= 0 || epochs == 0) return trace;
  Adam opt(model.weights, lr, redundancy_lr_factor, weight_decay);
  Model last_good = model;
  for (int e = 0; e < epochs; ++e) {
    std::vector<int> order(static_cast<size_t>(num_samples));
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = stream_rng(seed, e, -1, 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double sum = 0.0;
    for (int s : order) {
      auto rng = stream_rng(seed, e, s, 1);
      Weights g;
      double loss = 0.0;
      try {
        loss = step(model, s, rng, g);
      } catch (const NumericError& err) {
        throw DivergenceError(std::string("training diverged: ") + err.what(), last_good);
      }
      if (!std::isfinite(loss))
        throw DivergenceError("training diverged: non-finite loss in epoch " + std::to_string(e), last_good);
      if (filter) filter(g);
      opt.step(model.weights, g);
      sum += loss;
    }
    trace.push_back(sum / num_samples);
    last_good = model;
  }
  return trace;
}

/// Plain cross-entropy on old classes; classes outside K_0 are void.
inline std::vector<double> train_closed(Model& model, const std::vector<Sample>& train, const TrainingConfig& cfg) {
  cfg.validate();
  if (model.stage != Stage::closed) throw DomainError("closed-set training expects a closed model");
  std::vector<LabelSet> labels;
  for (const auto& s : train) labels.push_back(training_view(s.full_labels, model.registry));
  return train_loop(model, static_cast<int>(train.size()), cfg.epochs_closed, cfg.lr_closed, cfg.seed,
                    [&](const Model& m, int i, std::mt19937_64& rng, Weights& g) {
                      double v = 0.0;
                      g = gradients(m, train[static_cast<size_t>(i)].scan,
                                    closed_set_loss(m.registry, labels[static_cast<size_t>(i)]), &v, &rng);
                      return v;
                    },
                    {}, 1.0, cfg.weight_decay);
}

/// One open-set training step: synthesise, then L_cal on P_nm plus lambda_syn * L_syn on P_syn.
inline double open_set_step(const Model& m, const Scan& scan, const LabelSet& labels, const SynthesisConfig& syn,
                            const LossConfig& loss, std::mt19937_64& rng, Weights& g) {
  SynthesisResult s = apply_synthesis(scan, labels, syn, m.registry, rng);
  return loss_total(m, LossBatch{s.scan, labels, s.syn_mask}, loss, &g, &rng).total;
}

/// Closed -> open finetuning with synthesis and calibration.
inline std::vector<double> finetune_oseg(Model& model, const std::vector<Sample>& train, const SynthesisConfig& syn,
                                         const LossConfig& loss, const TrainingConfig& cfg) {
  cfg.validate();
  if (model.stage != Stage::open) throw DomainError("open-set finetuning expects an open model");
  std::vector<LabelSet> labels;
  for (const auto& s : train) labels.push_back(training_view(s.full_labels, model.registry));
  return train_loop(model, static_cast<int>(train.size()), cfg.epochs_oseg, cfg.lr_oseg, cfg.seed + 1,
                    [&](const Model& m, int i, std::mt19937_64& rng, Weights& g) {
                      return open_set_step(m, train[static_cast<size_t>(i)].scan, labels[static_cast<size_t>(i)],
                                           syn, loss, rng, g);
                    },
                    {}, cfg.redundancy_lr_factor, cfg.weight_decay);
}

/// Sets the model's lambda_th so `target_tpr` of known validation points score below it.
inline double calibrate_model_threshold(Model& model, const std::vector<Sample>& val, double target_tpr) {
  std::vector<double> known;
  for (const auto& s : val) {
    auto score = unknown_score(forward(model, s.scan), ScoringMethod::real);
    for (int i = 0; i < s.full_labels.size(); ++i)
      if (!s.full_labels.is_void(i) && model.registry.is_known(s.full_labels.labels[static_cast<size_t>(i)]))
        known.push_back(score[static_cast<size_t>(i)]);
  }
  model.lambda_th = calibrate_threshold(std::move(known), target_tpr);
  return *model.lambda_th;
}

}  // namespace owseg
