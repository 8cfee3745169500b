#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace owseg;

namespace {

struct Instance {
  std::vector<double> s;
  std::vector<bool> u;
};

Instance random_instance(std::mt19937_64& rng, int n, bool coarse) {
  Instance x;
  std::uniform_int_distribution<int> lvl(0, 5);
  std::normal_distribution<double> nd;
  do {
    x.s.clear();
    x.u.clear();
    for (int i = 0; i < n; ++i) {
      x.s.push_back(coarse ? lvl(rng) : nd(rng));
      x.u.push_back(rng() % 3 == 0);
    }
  } while (std::count(x.u.begin(), x.u.end(), true) == 0 || std::count(x.u.begin(), x.u.end(), false) == 0);
  return x;
}

}  // namespace

TEST(Auroc, HandExamples) {
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, {false, false, true, true}), 1.0);
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.4, 0.6, 0.2}, {false, true, true}), 0.5);
  EXPECT_DOUBLE_EQ(auroc(std::vector<double>{3, 3, 3, 3}, {false, true, false, true}), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, {true, true}), DomainError);
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, {false, false}), DomainError);
}

TEST(Auroc, MatchesPairwiseOracle) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 100; ++t) {
    Instance x = random_instance(rng, 5 + static_cast<int>(rng() % 60), t % 2 == 0);
    EXPECT_NEAR(auroc(x.s, x.u), oracle::auroc_pairs(x.s, x.u), 1e-12);
  }
}

TEST(Auroc, NegationAndMonotoneInvariance) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    Instance x = random_instance(rng, 40, false);
    std::vector<double> neg, warped;
    for (double v : x.s) {
      neg.push_back(-v);
      warped.push_back(std::exp(3.0 * v) + 7.0);
    }
    EXPECT_NEAR(auroc(x.s, x.u) + auroc(neg, x.u), 1.0, 1e-12);
    EXPECT_NEAR(auroc(warped, x.u), auroc(x.s, x.u), 1e-12);
  }
}

TEST(Aupr, HandExamples) {
  EXPECT_DOUBLE_EQ(aupr(std::vector<double>{0.1, 0.9}, {false, true}), 1.0);
  // All tied: one threshold, precision equals the positive fraction.
  EXPECT_DOUBLE_EQ(aupr(std::vector<double>{1, 1, 1, 1, 1}, {true, false, false, true, false}), 0.4);
  EXPECT_THROW(aupr(std::vector<double>{1, 2}, {false, false}), DomainError);
  EXPECT_DOUBLE_EQ(aupr(std::vector<double>{1, 2}, {true, true}), 1.0);
}

TEST(Aupr, MatchesThresholdSweepOracle) {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 100; ++t) {
    Instance x = random_instance(rng, 20, t % 2 == 0);
    EXPECT_NEAR(aupr(x.s, x.u), oracle::aupr_sweep(x.s, x.u), 1e-9);
  }
}

TEST(Miou, HandCountedTwoClassExample) {
  ClassRegistry reg({1, 2}, {}, 1);
  LabelSet pred{{1, 1, 2, 2}, std::vector<bool>(4, false), LabelDomain::closed_old};
  LabelSet gt{{1, 2, 2, 2}, std::vector<bool>(4, false), LabelDomain::ground_truth};
  EvalReport r = miou_report(pred, gt, reg);
  EXPECT_DOUBLE_EQ(r.iou.at(1), 0.5);
  EXPECT_DOUBLE_EQ(r.iou.at(2), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.miou, 7.0 / 12.0);
  EXPECT_DOUBLE_EQ(r.miou_old, 7.0 / 12.0);
  EXPECT_DOUBLE_EQ(r.miou_novel, 0.0);
}

TEST(Miou, IdentityAndVoidHandling) {
  ClassRegistry reg({1, 2, 3}, {5}, 1);
  LabelSet gt{{1, 2, 3, 1}, {false, false, false, true}, LabelDomain::ground_truth};
  LabelSet pred{{1, 2, 3, 3}, std::vector<bool>(4, false), LabelDomain::closed_old};
  EvalReport r = miou_report(pred, gt, reg);
  for (auto [c, v] : r.iou) EXPECT_DOUBLE_EQ(v, 1.0);
  LabelSet all_void{{1}, {true}, LabelDomain::ground_truth};
  EXPECT_THROW(miou_report(LabelSet{{1}, {false}, LabelDomain::closed_old}, all_void, reg), DomainError);
}

TEST(Miou, ClosedModelOnNovelDataHasZeroNovelScore) {
  ClassRegistry reg = ClassRegistry({1, 2}, {5}, 1).advance({5});
  LabelSet gt{{1, 5, 5, 2}, std::vector<bool>(4, false), LabelDomain::ground_truth};
  LabelSet pred{{1, 1, 2, 2}, std::vector<bool>(4, false), LabelDomain::closed_old};
  EvalReport r = miou_report(pred, gt, reg);
  EXPECT_DOUBLE_EQ(r.miou_novel, 0.0);
  EXPECT_DOUBLE_EQ(r.iou.at(5), 0.0);
}

TEST(Miou, MatchesNaiveOracleOnRandomInstances) {
  std::mt19937_64 rng(99);
  ClassRegistry reg = ClassRegistry({1, 2, 3, 4}, {5, 6}, 2).advance({5});
  for (int t = 0; t < 20; ++t) {
    LabelSet gt{std::vector<ClassId>(1000), std::vector<bool>(1000, false), LabelDomain::ground_truth};
    LabelSet pred{std::vector<ClassId>(1000), std::vector<bool>(1000, false), LabelDomain::post_il};
    for (int i = 0; i < 1000; ++i) {
      gt.labels[static_cast<size_t>(i)] = 1 + static_cast<int>(rng() % 6);
      gt.void_mask[static_cast<size_t>(i)] = rng() % 10 == 0;
      pred.labels[static_cast<size_t>(i)] = static_cast<int>(rng() % 6);  // 0..5
    }
    EvalReport r = miou_report(pred, gt, reg);
    EXPECT_EQ(r.iou, oracle::iou_naive(pred, gt, reg));
  }
}

TEST(Confusion, MergeEqualsJointAccumulation) {
  ClassRegistry reg({1, 2}, {5}, 1);
  LabelSet g1{{1, 2, 5}, std::vector<bool>(3, false), LabelDomain::ground_truth};
  LabelSet p1{{1, 1, 2}, std::vector<bool>(3, false), LabelDomain::closed_old};
  LabelSet g2{{2, 2}, std::vector<bool>(2, false), LabelDomain::ground_truth};
  LabelSet p2{{2, 1}, std::vector<bool>(2, false), LabelDomain::closed_old};
  ConfusionAccumulator a(reg), b(reg), joint(reg);
  a.add(p1, g1);
  b.add(p2, g2);
  joint.add(p1, g1);
  joint.add(p2, g2);
  a.merge(b);
  EXPECT_EQ(a.report().confusion, joint.report().confusion);
  LabelSet bad{{7}, {false}, LabelDomain::closed_old};
  EXPECT_THROW(a.add(bad, LabelSet{{1}, {false}, LabelDomain::ground_truth}), DomainError);
}

TEST(Histogram, ConservationSeparationAndConstant) {
  std::vector<double> s{0, 0.1, 0.2, 0.8, 0.9, 1.0};
  std::vector<bool> u{false, false, false, true, true, true};
  Histogram h = export_histogram(s, u, 10);
  EXPECT_EQ(std::accumulate(h.known.begin(), h.known.end(), 0L), 3);
  EXPECT_EQ(std::accumulate(h.unknown.begin(), h.unknown.end(), 0L), 3);
  for (size_t b = 0; b < h.known.size(); ++b) EXPECT_FALSE(h.known[b] > 0 && h.unknown[b] > 0);
  Histogram c = export_histogram(std::vector<double>{2, 2, 2}, {false, true, false}, 5);
  EXPECT_EQ(c.known[0] + c.unknown[0], 3);
  EXPECT_THROW(export_histogram(s, u, 1), DomainError);
  EXPECT_EQ(h.to_csv().substr(0, 41), "bin_left,bin_right,count_known,count_unkn");
}
