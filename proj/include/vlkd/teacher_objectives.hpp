#pragma once

#include "vlkd/common.hpp"
#include "vlkd/corpus.hpp"

#include <span>

namespace vlkd {

enum class Reduction { kMean, kSum };

/// Inputs of the token-level video-language hinge loss for one sample.
struct ContrastiveBatch {
  Matrix h_x;        // positive text content states, |x| x d
  Matrix h_x_neg;    // negative text content states, |x'| x d
  Vector v_bar;      // pooled positive video
  Vector v_bar_neg;  // pooled negative video
  double alpha = 1.0;
};

struct ContrastiveLoss {
  double value = 0.0;
  Matrix d_h_x;
  Matrix d_h_x_neg;
  Vector d_v_bar;
  Vector d_v_bar_neg;
  // Smallest |hinge argument| seen; gradient checks skip points near a kink.
  double min_abs_margin = 0.0;
};

/// Sum over positive-text tokens i of
///   max{0, a - cos(h^x_i, v) + cos(h^x'_j, v)} + max{0, a - cos(h^x_i, v) + cos(h^x_i, v')}
/// where j = min(i, |x'| - 1). Gradients use the zero subgradient at the kink.
ContrastiveLoss contrastive_hinge_loss(const ContrastiveBatch& batch);

struct CrossEntropy {
  double value = 0.0;
  Matrix d_logits;
};

/// Row-wise softmax cross-entropy against integer targets.
CrossEntropy cross_entropy(const Matrix& logits, std::span<const int> targets, Reduction reduction = Reduction::kMean);

/// Negative log-likelihood of the original tokens at masked positions.
/// `logits` has one row per sequence position.
CrossEntropy mlm_loss(const Matrix& logits, const MaskedSequence& masked, Reduction reduction = Reduction::kMean);

struct TeacherLossWeights {
  double contrastive = 1.0;
  double mlm = 1.0;
};

double teacher_loss(double contrastive, double mlm, const TeacherLossWeights& w = {});

/// Row-wise log-softmax, numerically stable.
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace vlkd
