#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace owseg;

namespace {

LogitsBundle bundle(Matrix old, Matrix uk = Matrix(0, 0)) {
  const auto m = old.rows();
  if (uk.size() == 0) uk = Matrix(m, 0);
  return {std::move(old), std::move(uk), Matrix(m, 0)};
}

Model open_model() { return add_redundancy_heads(init_model(oracle::toy_registry(), {}, 1), 2); }

}  // namespace

TEST(Scores, HandExamples) {
  Matrix z(1, 2);
  z << 0, 0;
  EXPECT_DOUBLE_EQ(unknown_score(bundle(z), ScoringMethod::msp)[0], 0.5);
  z << 3.2, -1.0;
  EXPECT_DOUBLE_EQ(unknown_score(bundle(z), ScoringMethod::maxlogit)[0], -3.2);
  Matrix uk(1, 3);
  uk << 0.2, 1.5, -0.3;
  EXPECT_DOUBLE_EQ(unknown_score(bundle(z, uk), ScoringMethod::real)[0], 1.5);
  EXPECT_THROW(unknown_score(bundle(z), ScoringMethod::real), DomainError);
}

TEST(Scores, RealOnClosedModelIsRejected) {
  Model c = init_model(oracle::toy_registry(), {}, 1);
  GeneratedScene g = oracle::toy_scene(1, 64);
  InferenceConfig cfg;
  EXPECT_THROW(unknown_score(c, g.scan, cfg), DomainError);
  cfg.scoring_method = ScoringMethod::msp;
  EXPECT_NO_THROW(unknown_score(c, g.scan, cfg));
}

TEST(Scores, BaselineRanges) {
  Model o = open_model();
  GeneratedScene g = oracle::toy_scene(1, 256);
  const double c = 4.0;
  InferenceConfig cfg;
  cfg.scoring_method = ScoringMethod::msp;
  for (double s : unknown_score(o, g.scan, cfg)) {
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0 - 1.0 / c + 1e-12);
  }
  cfg.scoring_method = ScoringMethod::mcdropout;
  for (double s : unknown_score(o, g.scan, cfg)) {
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, std::log(c) + 1e-12);
  }
  cfg.mc_passes = 1;
  EXPECT_THROW(unknown_score(o, g.scan, cfg), ConfigError);
}

TEST(Scores, McDropoutReproducibleForFixedSeed) {
  Model o = open_model();
  GeneratedScene g = oracle::toy_scene(1, 128);
  InferenceConfig cfg;
  cfg.scoring_method = ScoringMethod::mcdropout;
  EXPECT_EQ(unknown_score(o, g.scan, cfg), unknown_score(o, g.scan, cfg));
}

TEST(Predict, ClosedArgmaxAndTies) {
  Model c = init_model(ClassRegistry({1, 2, 3}, {5}, 1), {}, 1);
  Matrix z(2, 3);
  z << 0.1, 2.0, -1, 1, 1, 0;
  LabelSet l = predict_closed(c, bundle(z));
  EXPECT_EQ(l.labels, (std::vector<ClassId>{2, 1}));
}

TEST(Predict, OpenThresholdRuleAndDegenerateThresholds) {
  Model o = open_model();
  GeneratedScene g = oracle::toy_scene(3, 300);
  LogitsBundle b = forward(o, g.scan);
  const LabelSet closed = predict_closed(o, b);
  EXPECT_EQ(predict_open(o, b, std::numeric_limits<double>::infinity()).labels, closed.labels);
  for (ClassId c : predict_open(o, b, -std::numeric_limits<double>::infinity()).labels) EXPECT_EQ(c, 0);
  Matrix old(1, 4), uk(1, 3);
  old << 1, 0, 0, 0;
  uk << 2.0, 0, 0;
  EXPECT_EQ(predict_open(o, bundle(old, uk), 1.0).labels[0], 0);
  EXPECT_EQ(predict_open(o, bundle(old, uk), 2.5).labels[0], 1);
  EXPECT_THROW(predict_open(o, b, std::numeric_limits<double>::quiet_NaN()), ConfigError);
  EXPECT_THROW(predict_open(init_model(oracle::toy_registry(), {}, 1), b, 0.0), DomainError);
}

TEST(Predict, OpenMonotoneInThresholdAndAgreesWithClosedBelowIt) {
  Model o = open_model();
  GeneratedScene g = oracle::toy_scene(4, 400);
  LogitsBundle b = forward(o, g.scan);
  const auto conf = unknown_score(b, ScoringMethod::real);
  const LabelSet closed = predict_closed(o, b);
  std::vector<double> ths = conf;
  std::sort(ths.begin(), ths.end());
  long prev = std::numeric_limits<long>::max();
  for (size_t k = 0; k < ths.size(); k += 37) {
    const LabelSet open = predict_open(o, b, ths[k]);
    const long unknowns = std::count(open.labels.begin(), open.labels.end(), 0);
    EXPECT_LE(unknowns, prev);
    prev = unknowns;
    for (int i = 0; i < open.size(); ++i)
      if (conf[static_cast<size_t>(i)] < ths[k]) {
        EXPECT_EQ(open.labels[static_cast<size_t>(i)], closed.labels[static_cast<size_t>(i)]);
      }
  }
}

TEST(Predict, PostIlCodomain) {
  ClassRegistry reg({1, 2, 3, 4}, {5, 6}, 3);
  Model p = promote(add_redundancy_heads(init_model(reg, {}, 1), 2), 5, 3);
  Matrix old(1, 4), uk(1, 3), nv(1, 1);
  old << 0, 0, 0, 0;
  uk << 9, 9, 9;
  nv << 1;
  EXPECT_EQ(predict_post_il(p, LogitsBundle{old, uk, nv}).labels[0], 5);
  GeneratedScene g = oracle::toy_scene(4, 400);
  for (ClassId c : predict_post_il(p, g.scan).labels) EXPECT_TRUE(c >= 1 && c <= 5 && c != 6);
}

TEST(Threshold, PercentileOracle) {
  EXPECT_DOUBLE_EQ(calibrate_threshold({1, 2, 3, 4}, 0.75), 3.25);
  EXPECT_DOUBLE_EQ(calibrate_threshold({4, 1, 3, 2, 5}, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(calibrate_threshold({2, 2, 2}, 0.9), 2.0);
  EXPECT_THROW(calibrate_threshold({}, 0.5), DomainError);
  EXPECT_THROW(calibrate_threshold({1}, 1.0), DomainError);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  std::vector<double> s(10001);
  for (double& v : s) v = n(rng);
  const double th = calibrate_threshold(s, 0.95);
  const double below = std::count_if(s.begin(), s.end(), [&](double v) { return v < th; }) / 10001.0;
  EXPECT_NEAR(below, 0.95, 1e-3);
}

TEST(InferenceConfig, JsonRoundTripAndValidation) {
  InferenceConfig c;
  c.lambda_th = 1.25;
  c.scoring_method = ScoringMethod::maxlogit;
  InferenceConfig d = nlohmann::json(c).get<InferenceConfig>();
  EXPECT_EQ(d.lambda_th, c.lambda_th);
  EXPECT_EQ(d.scoring_method, ScoringMethod::maxlogit);
  EXPECT_THROW(scoring_method_from_string("entropy"), ConfigError);
  c.target_tpr = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}
