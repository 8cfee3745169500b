#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace owseg;

namespace {

LogitsBundle random_bundle(std::mt19937_64& rng, int m, int c, int uk, int nv) {
  std::uniform_int_distribution<int> small(-3, 3);  // integers so ties actually occur
  auto fill = [&](int cols) {
    Matrix x(m, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = small(rng);
    return x;
  };
  return {fill(c), fill(uk), fill(nv)};
}

}  // namespace

TEST(Init, DeterministicAndShaped) {
  ClassRegistry reg = oracle::toy_registry();
  ArchConfig arch;
  Model a = init_model(reg, arch, 5), b = init_model(reg, arch, 5), c = init_model(reg, arch, 6);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_FALSE(a.weights == c.weights);
  EXPECT_EQ(a.weights.encoder1.W.rows(), arch.input_features());
  EXPECT_EQ(a.weights.normal.W.cols(), 4);
  EXPECT_EQ(a.weights.redundancy.W.cols(), 0);
}

TEST(Heads, AddRedundancyKeepsBackbone) {
  ClassRegistry reg = oracle::toy_registry(3);
  Model c = init_model(reg, {}, 1);
  Model o = add_redundancy_heads(c, 2);
  EXPECT_EQ(o.stage, Stage::open);
  EXPECT_EQ(o.weights.redundancy.W.cols(), 3);
  EXPECT_EQ(o.weights.hidden.W, c.weights.hidden.W);
  EXPECT_EQ(o.weights.normal.W, c.weights.normal.W);
  EXPECT_THROW(add_redundancy_heads(o, 2), DomainError);
}

TEST(Heads, ReassignPreservesPromotedSlotWeights) {
  ClassRegistry reg({1, 2}, {5, 6}, 3);
  Model o = add_redundancy_heads(init_model(reg, {}, 1), 2);
  Model p = reassign_rc(o, reg.advance({5}), 3);
  EXPECT_EQ(p.stage, Stage::post_il);
  EXPECT_EQ(p.weights.redundancy.W.cols(), 4);
  EXPECT_EQ(p.weights.redundancy.W.leftCols(3), o.weights.redundancy.W);
  EXPECT_EQ(reassign_rc(o, reg, 3).weights, o.weights);  // unchanged registry is a no-op
  EXPECT_EQ(reassign_rc(o, reg.advance({5}).advance({6}), 3).weights.redundancy.W.cols(), 5);  // two promotions at once
  EXPECT_THROW(reassign_rc(o, ClassRegistry({1, 2}, {5, 6}, 4), 3), DomainError);  // not an advance of o's registry
  EXPECT_THROW(reassign_rc(init_model(reg, {}, 1), reg.advance({5}), 3), DomainError);
}

TEST(Forward, ShapesPerStage) {
  ClassRegistry reg({1, 2, 3, 4}, {5, 6}, 3);
  GeneratedScene g = oracle::toy_scene(2, 300);
  Model c = init_model(reg, {}, 1);
  LogitsBundle bc = forward(c, g.scan);
  EXPECT_EQ(bc.y_old.cols(), 4);
  EXPECT_EQ(bc.y_uk.cols(), 0);
  Model o = add_redundancy_heads(c, 2);
  Model p = reassign_rc(o, reg.advance({5}), 3);
  LogitsBundle bp = forward(p, g.scan);
  EXPECT_EQ(bp.y_uk.cols(), 3);
  EXPECT_EQ(bp.y_nv.cols(), 1);
  EXPECT_TRUE(bp.y_old.allFinite());
}

TEST(Forward, DeterministicWithoutDropoutAndStochasticWithIt) {
  GeneratedScene g = oracle::toy_scene(2, 300);
  Model o = add_redundancy_heads(init_model(oracle::toy_registry(), {}, 1), 2);
  EXPECT_EQ(forward(o, g.scan), forward(o, g.scan));
  std::mt19937_64 r1(1), r2(2);
  EXPECT_FALSE(forward(o, g.scan, true, &r1) == forward(o, g.scan, true, &r2));
}

TEST(Features, InvariantToPointOrderPermutation) {
  GeneratedScene g = oracle::toy_scene(3, 400);
  Scan s = g.scan;
  std::vector<int> perm(static_cast<size_t>(s.size()));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(1);
  std::shuffle(perm.begin(), perm.end(), rng);
  Scan t = s;
  for (int i = 0; i < s.size(); ++i) {
    t.points.row(i) = s.points.row(perm[static_cast<size_t>(i)]);
    t.intensity[static_cast<size_t>(i)] = s.intensity[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    t.instance_ids[static_cast<size_t>(i)] = s.instance_ids[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  Model m = add_redundancy_heads(init_model(oracle::toy_registry(), {}, 1), 2);
  LogitsBundle a = forward(m, s), b = forward(m, t);
  for (int i = 0; i < s.size(); ++i)
    EXPECT_LE((a.y_old.row(perm[static_cast<size_t>(i)]) - b.y_old.row(i)).cwiseAbs().maxCoeff(), 1e-9);
}

// Assembly: entry 0 is the max over unknown slots, post-IL never reads assigned slots.
TEST(Assembly, UnknownEntryIsMaxOverUnknownSlots) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const int uk = 1 + static_cast<int>(rng() % 4), nv = static_cast<int>(rng() % 3);
    LogitsBundle b = random_bundle(rng, 16, 4, uk, nv);
    AssembledScores a = assemble_scores(b, nv ? Stage::post_il : Stage::open);
    for (int i = 0; i < 16; ++i) {
      EXPECT_EQ(a.scores(i, 0), b.y_uk.row(i).maxCoeff());
      const int w = a.uk_argmax[static_cast<size_t>(i)];
      EXPECT_EQ(b.y_uk(i, w), a.scores(i, 0));
      for (int k = 0; k < w; ++k) EXPECT_LT(b.y_uk(i, k), b.y_uk(i, w));  // lowest slot wins ties
      EXPECT_EQ(a.scores.row(i).segment(1, 4), b.y_old.row(i));
      if (nv) {
        EXPECT_EQ(a.scores.row(i).tail(nv), b.y_nv.row(i));
      }
    }
  }
}

TEST(Assembly, PostIlIgnoresAssignedSlots) {
  ClassRegistry reg = ClassRegistry({1, 2, 3, 4}, {5, 6}, 3).advance({5});
  Model p = reassign_rc(add_redundancy_heads(init_model(ClassRegistry({1, 2, 3, 4}, {5, 6}, 3), {}, 1), 2), reg, 3);
  GeneratedScene g = oracle::toy_scene(5, 200);
  LogitsBundle before = forward(p, g.scan);
  Model q = p;
  // Perturb the slot bound to class 5: y_uk must not change, y_nv must.
  const int slot = reg.rc_assigned().begin()->first;
  q.weights.redundancy.W.col(slot).array() += 3.0;
  q.weights.redundancy.b(0, slot) += 7.0;
  LogitsBundle after = forward(q, g.scan);
  EXPECT_EQ(assemble_scores(before, Stage::post_il).scores.col(0), assemble_scores(after, Stage::post_il).scores.col(0));
  EXPECT_NE(before.y_nv, after.y_nv);
}

TEST(Assembly, BackwardRoutesOnlyToWinningSlot) {
  std::mt19937_64 rng(3);
  LogitsBundle b = random_bundle(rng, 8, 3, 3, 0);
  AssembledScores a = assemble_scores(b, Stage::open);
  Matrix d = Matrix::Ones(8, 4);
  LogitsBundle g = assembled_backward(a, d, b);
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(g.y_uk.row(i).sum(), 1.0);
    EXPECT_EQ(g.y_uk(i, a.uk_argmax[static_cast<size_t>(i)]), 1.0);
  }
}

TEST(Assembly, RejectsClosedStage) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(assemble_scores(random_bundle(rng, 2, 3, 0, 0), Stage::open), DomainError);
  EXPECT_THROW(assemble_scores(random_bundle(rng, 2, 3, 2, 0), Stage::closed), DomainError);
}

TEST(ArchConfig, Validation) {
  ArchConfig a;
  a.dropout_rate = 1.0;
  EXPECT_THROW(a.validate(), ConfigError);
  a = {};
  a.pool_cells.clear();
  EXPECT_THROW(a.validate(), ConfigError);
  a = {};
  a.height_rings = {-1};
  EXPECT_THROW(a.validate(), ConfigError);
}
