#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "eac/loss.hpp"
#include "eac/rng.hpp"
#include "testutil.hpp"

using eac::EacVariant;
using eac::LossBundle;
using eac::Tensor;

namespace {

struct BatchFixture {
  eac::Model<double> model = eactest::tiny_model();
  Tensor<double> images{{3, 2, 6, 6}};
  Tensor<double> flipped;
  std::vector<int> labels{0, 1, 2};

  // input seed picked so no preactivation sits near the ReLU kink; the
  // finite-difference checks below would otherwise straddle it
  BatchFixture() {
    eac::Rng rng(260);
    eactest::fill_uniform(images, rng, 0.05, 0.95);
    flipped = eac::horizontal_flip(images);
  }
};

std::vector<Tensor<double>> grads_of(eac::Model<double>& model) {
  std::vector<Tensor<double>> out;
  for (auto& p : model.parameters()) out.push_back(*p.grad);
  return out;
}

} // namespace

TEST(Variant, ParseRoundTrip) {
  for (EacVariant v : {EacVariant::full, EacVariant::no_flip_consistency,
                       EacVariant::no_imbalance, EacVariant::no_erasing,
                       EacVariant::baseline})
    EXPECT_EQ(eac::parse_variant(eac::to_string(v)), v);
  EXPECT_THROW(eac::parse_variant("bogus"), eac::ConfigError);
}

TEST(ClassificationLoss, TwoEqualLogitsGiveLogTwo) {
  Tensor<double> logits({1, 2}, 0.0);
  EXPECT_DOUBLE_EQ(eac::classification_loss(logits, {0}), 0.6931471805599453);
  EXPECT_DOUBLE_EQ(eac::classification_loss(logits, {1}), 0.6931471805599453);
}

TEST(ClassificationLoss, ThreeWayOracle) {
  Tensor<double> logits({1, 3});
  logits(0, 0) = 2.0;
  logits(0, 1) = 0.0;
  logits(0, 2) = -1.0;
  EXPECT_DOUBLE_EQ(eac::classification_loss(logits, {0}), 0.16984601955628564);
}

TEST(ClassificationLoss, MeanOfPerSample) {
  Tensor<double> logits({2, 2}, 0.0);
  logits(1, 0) = 3.0;
  std::vector<double> per;
  const double mean = eac::classification_loss(logits, {0, 1}, &per);
  ASSERT_EQ(per.size(), 2u);
  EXPECT_DOUBLE_EQ(per[0], 0.6931471805599453);
  EXPECT_NEAR(per[1], std::log(1.0 + std::exp(3.0)), 1e-15);
  EXPECT_DOUBLE_EQ(mean, 0.5 * (per[0] + per[1]));
}

TEST(ClassificationLoss, ConfidentCorrectApproachesZero) {
  Tensor<double> logits({1, 2});
  double prev = 10.0;
  for (double margin : {1.0, 5.0, 20.0, 200.0}) {
    logits(0, 0) = margin;
    logits(0, 1) = 0.0;
    const double loss = eac::classification_loss(logits, {0});
    EXPECT_LT(loss, prev);
    EXPECT_GE(loss, 0.0);
    prev = loss;
  }
  EXPECT_LT(prev, 1e-80);
  logits(0, 0) = 5000.0; // stable even when exp would overflow
  EXPECT_EQ(eac::classification_loss(logits, {0}), 0.0);
  EXPECT_EQ(eac::classification_loss(logits, {1}), 5000.0);
}

TEST(ClassificationLoss, RejectsBadLabels) {
  Tensor<double> logits({2, 3}, 0.0);
  EXPECT_THROW(eac::classification_loss(logits, {0, 3}), eac::DataError);
  EXPECT_THROW(eac::classification_loss(logits, {-1, 0}), eac::DataError);
  EXPECT_THROW(eac::classification_loss(logits, {0}), eac::ContractError);
}

TEST(ClassificationLoss, GradientIsSoftmaxMinusOneHot) {
  Tensor<double> logits({1, 3});
  logits(0, 0) = 2.0;
  logits(0, 1) = 0.0;
  logits(0, 2) = -1.0;
  Tensor<double> d({1, 3}, 0.0);
  eac::classification_loss(logits, {0}, nullptr, &d);
  const double z = std::exp(2.0) + 1.0 + std::exp(-1.0);
  EXPECT_NEAR(d(0, 0), std::exp(2.0) / z - 1.0, 1e-15);
  EXPECT_NEAR(d(0, 1), 1.0 / z, 1e-15);
  EXPECT_NEAR(d(0, 2), std::exp(-1.0) / z, 1e-15);
  double sum = 0.0;
  for (std::size_t j = 0; j < 3; ++j) sum += d.flat(j);
  EXPECT_NEAR(sum, 0.0, 1e-15);
}

TEST(ClassificationLoss, GradCoeffAndAccumulation) {
  eac::Rng rng(3);
  Tensor<double> logits({4, 5});
  eactest::fill_uniform(logits, rng);
  const std::vector<int> labels{1, 0, 4, 2};
  Tensor<double> unit({4, 5}, 0.0), scaled({4, 5}, 1.0);
  eac::classification_loss(logits, labels, nullptr, &unit);
  eac::classification_loss(logits, labels, nullptr, &scaled, 0.5);
  for (std::size_t i = 0; i < unit.numel(); ++i)
    EXPECT_NEAR(scaled.flat(i), 1.0 + 0.5 * unit.flat(i), 1e-12);
}

TEST(ClassificationLoss, NumericGradientCheck) {
  eac::Rng rng(9);
  Tensor<double> logits({3, 4});
  eactest::fill_uniform(logits, rng, -2.0, 2.0);
  const std::vector<int> labels{2, 0, 3};
  Tensor<double> d({3, 4}, 0.0);
  eac::classification_loss(logits, labels, nullptr, &d);
  auto loss = [&]() { return eac::classification_loss(logits, labels); };
  EXPECT_LT(eactest::check_gradient(logits, d, loss), 1e-6);
}

TEST(ConsistencyLoss, MirroredMapsScoreZero) {
  eac::Rng rng(4);
  Tensor<double> m({2, 3, 4, 5});
  eactest::fill_uniform(m, rng);
  const Tensor<double> mirrored = eac::horizontal_flip(m);
  EXPECT_EQ(eac::consistency_loss(m, mirrored), 0.0);
}

TEST(ConsistencyLoss, ZerosVersusOnesScoreOne) {
  Tensor<double> zeros({2, 2, 3, 3}, 0.0), ones({2, 2, 3, 3}, 1.0);
  EXPECT_DOUBLE_EQ(eac::consistency_loss(zeros, ones), 1.0);
}

TEST(ConsistencyLoss, ExplicitQuadrupleLoopOracle) {
  eac::Rng rng(15);
  Tensor<double> m({2, 3, 2, 4}), mp({2, 3, 2, 4});
  eactest::fill_uniform(m, rng);
  eactest::fill_uniform(mp, rng);
  double expected = 0.0;
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t w = 0; w < 4; ++w) {
          const double diff = m(i, j, h, w) - mp(i, j, h, 3 - w);
          expected += diff * diff;
        }
  expected /= static_cast<double>(m.numel());
  EXPECT_NEAR(eac::consistency_loss(m, mp), expected, 1e-15);
  EXPECT_GE(eac::consistency_loss(m, mp), 0.0);
}

TEST(ConsistencyLoss, SymmetricUnderBranchSwapWithMirroring) {
  eac::Rng rng(25);
  Tensor<double> m({1, 2, 3, 3}), mp({1, 2, 3, 3});
  eactest::fill_uniform(m, rng);
  eactest::fill_uniform(mp, rng);
  // l(m, m') compares m against flip(m'); swapping roles and flipping both
  // leaves every pairwise difference intact
  EXPECT_NEAR(eac::consistency_loss(m, mp), eac::consistency_loss(mp, m), 1e-15);
}

TEST(ConsistencyLoss, ShapeMismatchRejected) {
  Tensor<double> a({1, 2, 3, 3}), b({1, 2, 3, 4});
  EXPECT_THROW(eac::consistency_loss(a, b), eac::ContractError);
  Tensor<double> c({2, 3, 3});
  EXPECT_THROW(eac::consistency_loss(c, c), eac::ContractError);
}

TEST(ConsistencyLoss, NumericGradientCheckBothBranches) {
  eac::Rng rng(35);
  Tensor<double> m({1, 2, 2, 3}), mp({1, 2, 2, 3});
  eactest::fill_uniform(m, rng);
  eactest::fill_uniform(mp, rng);
  Tensor<double> dm({1, 2, 2, 3}, 0.0), dmp({1, 2, 2, 3}, 0.0);
  eac::consistency_loss(m, mp, &dm, &dmp, 1.0);
  auto loss = [&]() { return eac::consistency_loss(m, mp); };
  EXPECT_LT(eactest::check_gradient(m, dm, loss), 1e-7);
  EXPECT_LT(eactest::check_gradient(mp, dmp, loss), 1e-7);
}

TEST(ConsistencyLoss, GradCoeffScalesGradients) {
  eac::Rng rng(45);
  Tensor<double> m({1, 1, 2, 2}), mp({1, 1, 2, 2});
  eactest::fill_uniform(m, rng);
  eactest::fill_uniform(mp, rng);
  Tensor<double> d1({1, 1, 2, 2}, 0.0), d5({1, 1, 2, 2}, 0.0);
  eac::consistency_loss<double>(m, mp, &d1, nullptr, 1.0);
  eac::consistency_loss<double>(m, mp, &d5, nullptr, 5.0);
  for (std::size_t i = 0; i < d1.numel(); ++i)
    EXPECT_NEAR(d5.flat(i), 5.0 * d1.flat(i), 1e-15);
}

TEST(EacBatchLoss, BundleIdentityHoldsForEveryVariant) {
  for (EacVariant v : {EacVariant::full, EacVariant::no_flip_consistency,
                       EacVariant::no_imbalance, EacVariant::no_erasing,
                       EacVariant::baseline}) {
    BatchFixture fx;
    const LossBundle b =
        eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 5.0, v);
    EXPECT_EQ(b.l_total, b.l_cls + b.lambda * b.l_c) << eac::to_string(v);
    EXPECT_GE(b.l_c, 0.0);
    EXPECT_GE(b.l_cls, 0.0);
  }
}

TEST(EacBatchLoss, EffectiveLambdaPerVariant) {
  BatchFixture fx;
  EXPECT_EQ(eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 5.0,
                                EacVariant::full)
                .lambda,
            5.0);
  EXPECT_EQ(eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 5.0,
                                EacVariant::no_flip_consistency)
                .lambda,
            0.0);
  EXPECT_EQ(eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 5.0,
                                EacVariant::baseline)
                .lambda,
            0.0);
}

TEST(EacBatchLoss, NoFlipConsistencyStillReportsDiagnosticLc) {
  BatchFixture fx;
  const LossBundle ablated = eac::eac_batch_loss(fx.model, fx.images, fx.flipped,
                                                 fx.labels, 5.0,
                                                 EacVariant::no_flip_consistency);
  const LossBundle full =
      eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 5.0,
                          EacVariant::full);
  EXPECT_GT(ablated.l_c, 0.0);
  EXPECT_DOUBLE_EQ(ablated.l_c, full.l_c);
  EXPECT_DOUBLE_EQ(ablated.l_total, ablated.l_cls);
}

TEST(EacBatchLoss, LambdaZeroCollapsesToClassification) {
  BatchFixture fx;
  const LossBundle b = eac::eac_batch_loss(fx.model, fx.images, fx.flipped,
                                           fx.labels, 0.0, EacVariant::full);
  EXPECT_EQ(b.l_total, b.l_cls);
  EXPECT_GT(b.l_c, 0.0); // still reported
}

TEST(EacBatchLoss, RejectsNegativeLambda) {
  BatchFixture fx;
  EXPECT_THROW(eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, -1.0,
                                   EacVariant::full),
               eac::ConfigError);
}

TEST(EacBatchLoss, NoImbalanceAveragesBothBranches) {
  BatchFixture fx;
  const LossBundle b = eac::eac_batch_loss(fx.model, fx.images, fx.flipped,
                                           fx.labels, 0.0, EacVariant::no_imbalance);
  const Tensor<double> feat = fx.model.backbone.forward(fx.images);
  const Tensor<double> feat_flip = fx.model.backbone.forward(fx.flipped);
  auto [p1, logits] = eac::pool_and_logits(fx.model.head, feat);
  auto [p2, logits_flip] = eac::pool_and_logits(fx.model.head, feat_flip);
  const double expected = 0.5 * (eac::classification_loss(logits, fx.labels) +
                                 eac::classification_loss(logits_flip, fx.labels));
  EXPECT_NEAR(b.l_cls, expected, 1e-14);
  // imbalanced variants use the original branch only
  const LossBundle full = eac::eac_batch_loss(fx.model, fx.images, fx.flipped,
                                              fx.labels, 0.0, EacVariant::full);
  EXPECT_NEAR(full.l_cls, eac::classification_loss(logits, fx.labels), 1e-14);
}

TEST(EacBatchLoss, ExposesOriginalBranchLogits) {
  BatchFixture fx;
  eac::BatchWork<double> work;
  eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 5.0,
                      EacVariant::full, false, work);
  const Tensor<double> feat = fx.model.backbone.forward(fx.images);
  auto [pooled, logits] = eac::pool_and_logits(fx.model.head, feat);
  EXPECT_TRUE(work.logits == logits);
}

TEST(EacBatchLoss, FullObjectiveGradientCheck) {
  BatchFixture fx;
  ASSERT_TRUE(eactest::relu_clearance_at_least(fx.model, fx.images, 1e-3));
  ASSERT_TRUE(eactest::relu_clearance_at_least(fx.model, fx.flipped, 1e-3));
  eac::BatchWork<double> work;
  fx.model.zero_grads();
  eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 5.0,
                      EacVariant::full, true, work);
  auto loss = [&]() {
    return eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 5.0,
                               EacVariant::full)
        .l_total;
  };
  for (auto& p : fx.model.parameters())
    EXPECT_LT(eactest::check_gradient(*p.value, *p.grad, loss), 1e-4)
        << "parameter " << p.name;
}

TEST(EacBatchLoss, NoImbalanceGradientCheck) {
  BatchFixture fx;
  ASSERT_TRUE(eactest::relu_clearance_at_least(fx.model, fx.images, 1e-3));
  ASSERT_TRUE(eactest::relu_clearance_at_least(fx.model, fx.flipped, 1e-3));
  eac::BatchWork<double> work;
  fx.model.zero_grads();
  eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 2.0,
                      EacVariant::no_imbalance, true, work);
  auto loss = [&]() {
    return eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 2.0,
                               EacVariant::no_imbalance)
        .l_total;
  };
  for (auto& p : fx.model.parameters())
    EXPECT_LT(eactest::check_gradient(*p.value, *p.grad, loss), 1e-4)
        << "parameter " << p.name;
}

TEST(EacBatchLoss, AblatedConsistencyMatchesBaselineGradients) {
  // with the consistency term removed, the surviving objective is plain
  // cross-entropy on the original branch, so gradients must match the
  // baseline bit for bit on identical inputs
  BatchFixture fa, fb;
  eac::BatchWork<double> wa, wb;
  fa.model.zero_grads();
  fb.model.zero_grads();
  const LossBundle a = eac::eac_batch_loss(fa.model, fa.images, fa.flipped, fa.labels,
                                           5.0, EacVariant::no_flip_consistency, true, wa);
  const LossBundle b = eac::eac_batch_loss(fb.model, fb.images, fb.flipped, fb.labels,
                                           5.0, EacVariant::baseline, true, wb);
  EXPECT_EQ(a.l_cls, b.l_cls);
  EXPECT_EQ(a.l_total, b.l_total);
  const auto ga = grads_of(fa.model), gb = grads_of(fb.model);
  ASSERT_EQ(ga.size(), gb.size());
  for (std::size_t p = 0; p < ga.size(); ++p) {
    ASSERT_TRUE(ga[p].same_shape(gb[p]));
    for (std::size_t i = 0; i < ga[p].numel(); ++i)
      EXPECT_EQ(ga[p].flat(i), gb[p].flat(i)) << "param " << p << " elem " << i;
  }
}

TEST(EacBatchLoss, ConsistencyTermMovesHeadAndBothBranches) {
  BatchFixture base, with;
  eac::BatchWork<double> wb, ww;
  base.model.zero_grads();
  with.model.zero_grads();
  eac::eac_batch_loss(base.model, base.images, base.flipped, base.labels, 0.0,
                      EacVariant::full, true, wb);
  eac::eac_batch_loss(with.model, with.images, with.flipped, with.labels, 5.0,
                      EacVariant::full, true, ww);
  const auto g0 = grads_of(base.model), g5 = grads_of(with.model);
  bool any_differs = false;
  for (std::size_t p = 0; p < g0.size(); ++p)
    for (std::size_t i = 0; i < g0[p].numel(); ++i)
      any_differs |= g0[p].flat(i) != g5[p].flat(i);
  EXPECT_TRUE(any_differs);
}

TEST(EacBatchLoss, ClassificationBlindToFlippedBranch) {
  BatchFixture fx;
  const LossBundle clean = eac::eac_batch_loss(fx.model, fx.images, fx.flipped,
                                               fx.labels, 5.0, EacVariant::full);
  Tensor<double> tampered = fx.flipped;
  eac::Rng rng(99);
  for (std::size_t i = 0; i < tampered.numel(); i += 7)
    tampered.flat(i) += rng.uniform(-0.5, 0.5);
  const LossBundle moved = eac::eac_batch_loss(fx.model, fx.images, tampered,
                                               fx.labels, 5.0, EacVariant::full);
  EXPECT_LT(std::fabs(moved.l_cls - clean.l_cls), 1e-10);
  EXPECT_NE(moved.l_c, clean.l_c); // the consistency term does see it
  Tensor<double> wrong_shape({3, 2, 6, 5});
  EXPECT_THROW(eac::eac_batch_loss(fx.model, fx.images, wrong_shape, fx.labels, 5.0,
                                   EacVariant::full),
               eac::ContractError);
}

TEST(EacBatchLoss, PerSampleLossesComeFromOriginalBranch) {
  BatchFixture fx;
  eac::BatchWork<double> work;
  std::vector<double> per;
  eac::eac_batch_loss(fx.model, fx.images, fx.flipped, fx.labels, 5.0,
                      EacVariant::full, false, work, &per);
  ASSERT_EQ(per.size(), 3u);
  const Tensor<double> feat = fx.model.backbone.forward(fx.images);
  auto [pooled, logits] = eac::pool_and_logits(fx.model.head, feat);
  std::vector<double> expected;
  eac::classification_loss(logits, fx.labels, &expected);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(per[i], expected[i]);
}
