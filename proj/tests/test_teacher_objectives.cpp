#include "vlkd/teacher_objectives.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace vlkd;
using vlkd::testing::random_matrix;
using vlkd::testing::random_vector;

namespace {

MaskedSequence masked(int positions, std::vector<int> where, std::vector<int> original) {
  MaskedSequence m;
  m.seq.ids.assign(positions, Vocabulary::kMask);
  m.seq.ids[0] = Vocabulary::kCls;
  m.seq.pad_mask.assign(positions, false);
  m.seq.length = positions - 1;
  m.mask_positions = std::move(where);
  m.original_ids = std::move(original);
  return m;
}

}  // namespace

TEST(Hinge, PerfectSeparationIsZero) {
  Vector v(3);
  v << 1, 0, 0;
  ContrastiveBatch b;
  b.h_x = v.transpose().replicate(3, 1);
  b.h_x_neg = (-v).transpose().replicate(3, 1);
  b.v_bar = v;
  b.v_bar_neg = -v;
  EXPECT_EQ(contrastive_hinge_loss(b).value, 0.0);
}

TEST(Hinge, DegenerateNegativesGiveTwoAlphaPerToken) {
  Rng rng = make_rng(1);
  for (double alpha : {1.0, 0.3}) {
    ContrastiveBatch b;
    b.h_x = random_matrix(rng, 3, 5);
    b.h_x_neg = b.h_x;
    b.v_bar = random_vector(rng, 5);
    b.v_bar_neg = b.v_bar;
    b.alpha = alpha;
    EXPECT_NEAR(contrastive_hinge_loss(b).value, 2.0 * 3 * alpha, 1e-9);
  }
}

TEST(Hinge, MatchesDirectEvaluation) {
  Rng rng = make_rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    ContrastiveBatch b;
    b.h_x = random_matrix(rng, 4, 6);
    b.h_x_neg = random_matrix(rng, 1 + trial % 6, 6);
    b.v_bar = random_vector(rng, 6);
    b.v_bar_neg = random_vector(rng, 6);
    b.alpha = 0.5;
    EXPECT_NEAR(contrastive_hinge_loss(b).value, oracle::hinge(b), 1e-12);
  }
}

TEST(Hinge, ScaleInvariantAndNonNegative) {
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    ContrastiveBatch b;
    b.h_x = random_matrix(rng, 3, 4);
    b.h_x_neg = random_matrix(rng, 2, 4);
    b.v_bar = random_vector(rng, 4);
    b.v_bar_neg = random_vector(rng, 4);
    const double base = contrastive_hinge_loss(b).value;
    EXPECT_GE(base, 0.0);
    ContrastiveBatch scaled = b;
    scaled.h_x *= 7.0;
    scaled.v_bar *= 0.01;
    EXPECT_NEAR(contrastive_hinge_loss(scaled).value, base, 1e-10);
    // Larger margins never lower the loss.
    ContrastiveBatch wider = b;
    wider.alpha = 2.0;
    EXPECT_GE(contrastive_hinge_loss(wider).value, base);
  }
}

TEST(Hinge, ZeroNormIsDegenerate) {
  ContrastiveBatch b;
  b.h_x = Matrix::Zero(2, 3);
  b.h_x_neg = Matrix::Ones(2, 3);
  b.v_bar = Vector::Ones(3);
  b.v_bar_neg = Vector::Ones(3);
  try {
    contrastive_hinge_loss(b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate embedding"), std::string::npos);
  }
}

TEST(Mlm, UniformLogitsGiveLogVocab) {
  const Matrix logits = Matrix::Constant(5, 6, 0.37);
  EXPECT_NEAR(mlm_loss(logits, masked(5, {1, 3}, {4, 5})).value, std::log(6.0), 1e-6);
  EXPECT_NEAR(mlm_loss(logits, masked(5, {2}, {0})).value, 1.791759469228055, 1e-6);
}

TEST(Mlm, SaturatedIsZero) {
  Matrix logits = Matrix::Zero(4, 6);
  logits(2, 5) = 100.0;
  EXPECT_NEAR(mlm_loss(logits, masked(4, {2}, {5})).value, 0.0, 1e-6);
}

TEST(Mlm, MeanOfPositions) {
  Rng rng = make_rng(4);
  const Matrix logits = random_matrix(rng, 6, 9);
  const double a = mlm_loss(logits, masked(6, {1}, {3})).value;
  const double b = mlm_loss(logits, masked(6, {4}, {7})).value;
  EXPECT_NEAR(mlm_loss(logits, masked(6, {1, 4}, {3, 7})).value, (a + b) / 2.0, 1e-12);
  EXPECT_NEAR(mlm_loss(logits, masked(6, {1, 4}, {3, 7}), Reduction::kSum).value, a + b, 1e-12);
}

TEST(Mlm, EmptyMaskIsAnError) {
  EXPECT_THROW(mlm_loss(Matrix::Zero(3, 4), masked(3, {}, {})), Error);
}

TEST(Mlm, GradientIsSoftmaxMinusOneHot) {
  Rng rng = make_rng(5);
  const Matrix logits = random_matrix(rng, 4, 5);
  const auto ce = mlm_loss(logits, masked(4, {2}, {1}));
  const Matrix p = log_softmax_rows(logits).array().exp();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 5; ++c) {
      const double want = r == 2 ? p(r, c) - (c == 1) : 0.0;
      EXPECT_NEAR(ce.d_logits(r, c), want, 1e-12);
    }
}

TEST(LogSoftmax, StableForLargeLogits) {
  Matrix x(1, 3);
  x << 1000.0, 1000.0, -1000.0;
  const Matrix l = log_softmax_rows(x);
  EXPECT_NEAR(l(0, 0), -std::log(2.0), 1e-12);
  EXPECT_TRUE(std::isfinite(l(0, 2)));
}

TEST(TeacherLoss, WeightedSum) {
  EXPECT_EQ(teacher_loss(0.0, 0.0), 0.0);
  EXPECT_EQ(teacher_loss(2.5, 1.5), 4.0);
  EXPECT_EQ(teacher_loss(2.0, 1.0, {0.5, 2.0}), 3.0);
}
