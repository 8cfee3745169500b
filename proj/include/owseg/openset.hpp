#pragma once

#include <limits>

#include <json.hpp>

#include "owseg/losses.hpp"

namespace owseg {

enum class ScoringMethod { real, msp, maxlogit, mcdropout };

NLOHMANN_JSON_SERIALIZE_ENUM(ScoringMethod, {{ScoringMethod::real, "real"},
                                             {ScoringMethod::msp, "msp"},
                                             {ScoringMethod::maxlogit, "maxlogit"},
                                             {ScoringMethod::mcdropout, "mcdropout"}})

inline std::string_view to_string(ScoringMethod m) {
  switch (m) {
    case ScoringMethod::real: return "real";
    case ScoringMethod::msp: return "msp";
    case ScoringMethod::maxlogit: return "maxlogit";
    case ScoringMethod::mcdropout: return "mcdropout";
  }
  return "?";
}

inline ScoringMethod scoring_method_from_string(std::string_view s) {
  if (s == "real") return ScoringMethod::real;
  if (s == "msp") return ScoringMethod::msp;
  if (s == "maxlogit") return ScoringMethod::maxlogit;
  if (s == "mcdropout") return ScoringMethod::mcdropout;
  throw ConfigError("unknown scoring method '" + std::string(s) + "'");
}

struct InferenceConfig {
  std::optional<double> lambda_th;  // falls back to the model's calibrated threshold
  int mc_passes = 10;
  ScoringMethod scoring_method = ScoringMethod::real;
  double target_tpr = 0.95;
  uint64_t mc_seed = 0;

  void validate() const {
    if (scoring_method == ScoringMethod::mcdropout && mc_passes < 2)
      throw ConfigError("MC-Dropout needs at least two passes");
    if (!(target_tpr > 0.0 && target_tpr < 1.0)) throw ConfigError("target_tpr must lie in (0,1)");
  }
};

inline void to_json(nlohmann::json& j, const InferenceConfig& c) {
  j = {{"mc_passes", c.mc_passes}, {"scoring_method", c.scoring_method}, {"target_tpr", c.target_tpr},
       {"mc_seed", c.mc_seed}};
  j["lambda_th"] = c.lambda_th ? nlohmann::json(*c.lambda_th) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, InferenceConfig& c) {
  c.mc_passes = j.value("mc_passes", c.mc_passes);
  c.scoring_method = j.value("scoring_method", c.scoring_method);
  c.target_tpr = j.value("target_tpr", c.target_tpr);
  c.mc_seed = j.value("mc_seed", c.mc_seed);
  if (j.contains("lambda_th") && !j["lambda_th"].is_null()) c.lambda_th = j["lambda_th"].get<double>();
}

/// The model's closed-set scores: y_old, extended by y_nv once classes have been learned.
inline Matrix closed_logits(const LogitsBundle& b) {
  if (b.y_nv.cols() == 0) return b.y_old;
  Matrix out(b.y_old.rows(), b.y_old.cols() + b.y_nv.cols());
  out << b.y_old, b.y_nv;
  return out;
}

inline Matrix softmax_rows(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) p.row(i) = log_softmax(z.row(i)).array().exp();
  return p;
}

/// Per-point unknown score from one forward pass (all methods but MC-Dropout).
inline std::vector<double> unknown_score(const LogitsBundle& b, ScoringMethod method) {
  const Eigen::Index m = b.rows();
  std::vector<double> s(static_cast<size_t>(m));
  switch (method) {
    case ScoringMethod::real:
      if (b.y_uk.cols() == 0) throw DomainError("REAL scoring needs an open or post-IL model");
      for (Eigen::Index i = 0; i < m; ++i) s[static_cast<size_t>(i)] = b.y_uk.row(i).maxCoeff();
      break;
    case ScoringMethod::msp: {
      Matrix p = softmax_rows(closed_logits(b));
      for (Eigen::Index i = 0; i < m; ++i) s[static_cast<size_t>(i)] = 1.0 - p.row(i).maxCoeff();
      break;
    }
    case ScoringMethod::maxlogit: {
      Matrix z = closed_logits(b);
      for (Eigen::Index i = 0; i < m; ++i) s[static_cast<size_t>(i)] = -z.row(i).maxCoeff();
      break;
    }
    case ScoringMethod::mcdropout:
      throw DomainError("MC-Dropout needs the model and several passes");
  }
  return s;
}

/// Entropy of the mean softmax over `passes` dropout-on forward passes.
inline std::vector<double> mc_dropout_entropy(const Model& model, const Scan& scan, int passes, std::mt19937_64& rng) {
  if (passes < 2) throw ConfigError("MC-Dropout needs at least two passes");
  Matrix mean;
  for (int t = 0; t < passes; ++t) {
    Matrix p = softmax_rows(closed_logits(forward(model, scan, true, &rng)));
    mean = t == 0 ? p : Matrix(mean + p);
  }
  mean /= static_cast<double>(passes);
  std::vector<double> s(static_cast<size_t>(mean.rows()));
  for (Eigen::Index i = 0; i < mean.rows(); ++i) {
    double h = 0.0;
    for (Eigen::Index k = 0; k < mean.cols(); ++k)
      if (mean(i, k) > 0.0) h -= mean(i, k) * std::log(mean(i, k));
    s[static_cast<size_t>(i)] = h;
  }
  return s;
}

/// Higher means more likely unknown, for every method.
inline std::vector<double> unknown_score(const Model& model, const Scan& scan, const InferenceConfig& cfg) {
  cfg.validate();
  if (cfg.scoring_method == ScoringMethod::real && model.stage == Stage::closed)
    throw DomainError("REAL scoring is undefined for a closed-set model");
  if (cfg.scoring_method == ScoringMethod::mcdropout) {
    std::mt19937_64 rng(cfg.mc_seed);
    return mc_dropout_entropy(model, scan, cfg.mc_passes, rng);
  }
  return unknown_score(forward(model, scan), cfg.scoring_method);
}

/// Argmax over g_nm only; ties go to the lowest class ID.
inline LabelSet predict_closed(const Model& model, const LogitsBundle& b) {
  const int m = b.rows();
  LabelSet out{std::vector<ClassId>(static_cast<size_t>(m)), std::vector<bool>(static_cast<size_t>(m), false),
               LabelDomain::closed_old};
  for (int i = 0; i < m; ++i) {
    Eigen::Index best;
    b.y_old.row(i).maxCoeff(&best);
    out.labels[static_cast<size_t>(i)] = model.registry.closed_class(static_cast<int>(best));
  }
  return out;
}

inline LabelSet predict_closed(const Model& model, const Scan& scan) { return predict_closed(model, forward(model, scan)); }

/// Argmax over [y_old, y_nv]; unknown slots never take part.
inline LabelSet predict_post_il(const Model& model, const LogitsBundle& b) {
  Matrix z = closed_logits(b);
  const int m = b.rows();
  LabelSet out{std::vector<ClassId>(static_cast<size_t>(m)), std::vector<bool>(static_cast<size_t>(m), false),
               LabelDomain::post_il};
  for (int i = 0; i < m; ++i) {
    Eigen::Index best;
    z.row(i).maxCoeff(&best);
    out.labels[static_cast<size_t>(i)] = model.registry.closed_class(static_cast<int>(best));
  }
  return out;
}

inline LabelSet predict_post_il(const Model& model, const Scan& scan) {
  return predict_post_il(model, forward(model, scan));
}

/// Closed label where lambda_conf < lambda_th, else 0.
inline LabelSet predict_open(const Model& model, const LogitsBundle& b, double lambda_th) {
  if (model.stage == Stage::closed) throw DomainError("open-set prediction needs redundancy heads");
  if (std::isnan(lambda_th)) throw ConfigError("lambda_th is not set");
  LabelSet out = predict_post_il(model, b);
  out.domain = model.stage == Stage::open ? LabelDomain::open : LabelDomain::post_il;
  const auto conf = unknown_score(b, ScoringMethod::real);
  for (int i = 0; i < out.size(); ++i)
    if (!(conf[static_cast<size_t>(i)] < lambda_th)) out.labels[static_cast<size_t>(i)] = kUnknown;
  return out;
}

inline double resolve_threshold(const Model& model, const InferenceConfig& cfg) {
  if (cfg.lambda_th) return *cfg.lambda_th;
  if (model.lambda_th) return *model.lambda_th;
  throw ConfigError("no unknown threshold: set inference.lambda_th or calibrate the model");
}

inline LabelSet predict_open(const Model& model, const Scan& scan, const InferenceConfig& cfg) {
  return predict_open(model, forward(model, scan), resolve_threshold(model, cfg));
}

/// Linear-interpolation quantile at `target_tpr`, so that fraction of known scores sit below it.
inline double calibrate_threshold(std::vector<double> known_scores, double target_tpr) {
  if (known_scores.empty()) throw DomainError("threshold calibration needs at least one score");
  if (!(target_tpr > 0.0 && target_tpr < 1.0)) throw DomainError("target_tpr must lie in (0,1)");
  std::sort(known_scores.begin(), known_scores.end());
  const double pos = target_tpr * static_cast<double>(known_scores.size() - 1);
  const auto lo = static_cast<size_t>(std::floor(pos));
  const size_t hi = std::min(lo + 1, known_scores.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return known_scores[lo] + frac * (known_scores[hi] - known_scores[lo]);
}

}  // namespace owseg
