#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace owseg;

namespace {

struct Fixture {
  ClassRegistry reg = ClassRegistry({1, 2, 3, 4}, {5, 6}, 3);
  Model model_o;
  std::vector<Sample> train;

  Fixture() {
    SceneConfig sc = SceneConfig::defaults();
    sc.points_per_scan = 256;
    sc.novel_shape_classes.push_back({6, "extra", Shape::cylinder, {1.0, 1.2}, {1.0, 1.2}, {3.0, 3.5}, {1, 1}, 0.3, 0.05});
    for (uint64_t s = 0; s < 3; ++s) {
      sc.rng_seed = 2 * s;
      GeneratedScene g = generate_scene(sc, reg);
      train.push_back({g.scan, g.full_labels});
    }
    model_o = add_redundancy_heads(init_model(reg, {}, 1), 2);
    model_o.lambda_th = 0.0;
  }
};

}  // namespace

TEST(PseudoLabels, AllVoidNovelGtEqualsOpenPrediction) {
  Fixture f;
  const Scan& scan = f.train[0].scan;
  LabelSet none = LabelSet::all_void(scan.size(), LabelDomain::post_il);
  LabelSet p = make_pseudo_labels(f.model_o, scan, none);
  EXPECT_EQ(p.labels, predict_open(f.model_o, scan, InferenceConfig{}).labels);
}

TEST(PseudoLabels, TotalAndGroundTruthWins) {
  Fixture f;
  for (const auto& s : f.train) {
    LabelSet gt = single_class_view(s.full_labels, 5);
    LabelSet p = make_pseudo_labels(f.model_o, s.scan, gt);
    EXPECT_EQ(p.non_void_count(), p.size());
    EXPECT_NO_THROW(p.validate(f.reg.advance({5}), s.scan.size()));
    for (int i = 0; i < p.size(); ++i)
      if (!gt.is_void(i)) {
        EXPECT_EQ(p.labels[static_cast<size_t>(i)], 5);
      }
  }
}

TEST(PseudoLabels, CacheRoundTripKeepsUnknownLabelled) {
  Fixture f;
  const Scan& scan = f.train[0].scan;
  LabelSet p = make_pseudo_labels(f.model_o, scan, single_class_view(f.train[0].full_labels, 5));
  ASSERT_GT(std::count(p.labels.begin(), p.labels.end(), kUnknown), 0);  // lambda_th 0 flags most points
  const Bytes bytes = write_labels(p, std::vector<uint32_t>(p.labels.size(), 0));
  LabelSet back = read_pseudo_labels(bytes, scan.size());
  EXPECT_EQ(back.labels, p.labels);
  EXPECT_EQ(back.void_mask, p.void_mask);
  EXPECT_EQ(back.domain, LabelDomain::post_il);
}

TEST(PseudoLabels, RejectsOldOrUnknownGroundTruth) {
  Fixture f;
  LabelSet gt = LabelSet::all_void(f.train[0].scan.size(), LabelDomain::post_il);
  gt.void_mask[0] = false;
  gt.labels[0] = 2;
  EXPECT_THROW(make_pseudo_labels(f.model_o, f.train[0].scan, gt), DomainError);
  gt.labels[0] = 0;
  EXPECT_THROW(make_pseudo_labels(f.model_o, f.train[0].scan, gt), DomainError);
}

TEST(IlStage, ZeroEpochsReturnsReassignedModel) {
  Fixture f;
  TrainingConfig cfg;
  ILResult r = run_il_stage(f.model_o, {5, 0, ""}, f.train, {}, {}, cfg);
  Model expected = promote(f.model_o, 5, detail::stage_seed(cfg, 5));
  EXPECT_EQ(r.model.weights, expected.weights);
  EXPECT_EQ(r.model.stage, Stage::post_il);
  EXPECT_EQ(r.pseudo_labels.size(), f.train.size());
  EXPECT_EQ(baseline_finetune(f.model_o, {5, 0, ""}, f.train, cfg).model.weights, expected.weights);
}

TEST(IlStage, GuardsPromotedClass) {
  Fixture f;
  EXPECT_THROW(run_il_stage(f.model_o, {2, 1, ""}, f.train, {}, {}, {}), DomainError);
  EXPECT_THROW(promote(init_model(f.reg, {}, 1), 5, 1), DomainError);
}

TEST(IlStage, StagedPromotionGrowsKnownSetByOne) {
  Fixture f;
  TrainingConfig cfg;
  cfg.epochs_il = 1;
  Model m = f.model_o;
  size_t known = m.registry.old_classes().size();
  for (ClassId c : {5, 6}) {
    m = run_il_stage(m, {c, 1, ""}, f.train, {}, {}, cfg).model;
    m.lambda_th = 0.0;
    const size_t now = m.registry.old_classes().size() + m.registry.learned_novel().size();
    EXPECT_EQ(now, known + 1);
    known = now;
    for (const auto& s : f.train)
      for (ClassId p : predict_post_il(m, s.scan).labels) EXPECT_TRUE(m.registry.is_known(p)) << p;
  }
  EXPECT_EQ(m.registry.unknown_slot_count(), 3);
  // Remaining novel classes can still be flagged unknown after the first stage.
  Model one = run_il_stage(f.model_o, {5, 1, ""}, f.train, {}, {}, cfg).model;
  const auto open = predict_open(one, f.train[0].scan, InferenceConfig{-1e9});
  EXPECT_TRUE(std::all_of(open.labels.begin(), open.labels.end(), [](ClassId c) { return c == 0; }));
}

TEST(Baselines, FeatureExtractionTouchesOnlyThePromotedSlot) {
  Fixture f;
  TrainingConfig cfg;
  cfg.epochs_il = 2;
  cfg.weight_decay = 0.01;  // decay must not leak into frozen tensors either
  ILResult r = baseline_feature_extraction(f.model_o, {5, 2, ""}, f.train, cfg);
  Model start = promote(f.model_o, 5, detail::stage_seed(cfg, 5));
  EXPECT_EQ(r.model.weights.encoder1.W, start.weights.encoder1.W);
  EXPECT_EQ(r.model.weights.encoder2.W, start.weights.encoder2.W);
  EXPECT_EQ(r.model.weights.hidden.W, start.weights.hidden.W);
  EXPECT_EQ(r.model.weights.normal.W, start.weights.normal.W);
  EXPECT_EQ(r.model.weights.normal.b, start.weights.normal.b);
  const int slot = r.model.registry.novel_slots().front();
  for (int k = 0; k < start.weights.redundancy.W.cols(); ++k)
    if (k != slot) {
      EXPECT_EQ(r.model.weights.redundancy.W.col(k), start.weights.redundancy.W.col(k));
    }
  EXPECT_NE(r.model.weights.redundancy.W.col(slot), start.weights.redundancy.W.col(slot));
}

TEST(Training, DeterministicLossTrace) {
  Fixture f;
  TrainingConfig cfg;
  cfg.epochs_closed = 2;
  Model a = init_model(f.reg, {}, 3), b = init_model(f.reg, {}, 3);
  EXPECT_EQ(train_closed(a, f.train, cfg), train_closed(b, f.train, cfg));
  EXPECT_EQ(a.weights, b.weights);
}

TEST(Training, DivergenceCarriesLastFiniteWeights) {
  Fixture f;
  Model m = init_model(f.reg, {}, 3);
  Model before = m;
  int calls = 0;
  try {
    train_loop(m, 2, 3, 1e-3, 1, [&](const Model&, int, std::mt19937_64&, Weights& g) {
      g = m.weights.zeros_like();
      return ++calls > 3 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
    });
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.last_finite.weights, before.weights);  // zero gradients: epoch 1 left weights unchanged
  }
}
