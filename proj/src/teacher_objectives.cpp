#include "vlkd/teacher_objectives.hpp"

#include <cmath>
#include <limits>

namespace vlkd {

namespace {

struct CosGrad {
  double value;
  Vector d_a;
  Vector d_b;
};

CosGrad cos_with_grad(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw Error("degenerate embedding");
  const double c = a.dot(b) / (na * nb);
  return {c, b / (na * nb) - c * a / (na * na), a / (na * nb) - c * b / (nb * nb)};
}

}  // namespace

ContrastiveLoss contrastive_hinge_loss(const ContrastiveBatch& batch) {
  const Eigen::Index n = batch.h_x.rows();
  const Eigen::Index m = batch.h_x_neg.rows();
  if (n < 1 || m < 1) throw Error("contrastive loss needs at least one token on each side");
  if (!(batch.alpha > 0.0)) throw Error("hinge margin must be positive");

  ContrastiveLoss out;
  out.d_h_x = Matrix::Zero(n, batch.h_x.cols());
  out.d_h_x_neg = Matrix::Zero(m, batch.h_x_neg.cols());
  out.d_v_bar = Vector::Zero(batch.v_bar.size());
  out.d_v_bar_neg = Vector::Zero(batch.v_bar_neg.size());
  out.min_abs_margin = std::numeric_limits<double>::infinity();

  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index j = std::min(i, m - 1);
    const Vector hx = batch.h_x.row(i).transpose();
    const Vector hn = batch.h_x_neg.row(j).transpose();
    const CosGrad pos = cos_with_grad(hx, batch.v_bar);
    const CosGrad neg_text = cos_with_grad(hn, batch.v_bar);
    const CosGrad neg_video = cos_with_grad(hx, batch.v_bar_neg);

    const double t1 = batch.alpha - pos.value + neg_text.value;
    const double t2 = batch.alpha - pos.value + neg_video.value;
    out.min_abs_margin = std::min({out.min_abs_margin, std::abs(t1), std::abs(t2)});
    if (t1 > 0.0) {
      out.value += t1;
      out.d_h_x.row(i) -= pos.d_a.transpose();
      out.d_v_bar -= pos.d_b;
      out.d_h_x_neg.row(j) += neg_text.d_a.transpose();
      out.d_v_bar += neg_text.d_b;
    }
    if (t2 > 0.0) {
      out.value += t2;
      out.d_h_x.row(i) -= pos.d_a.transpose();
      out.d_v_bar -= pos.d_b;
      out.d_h_x.row(i) += neg_video.d_a.transpose();
      out.d_v_bar_neg += neg_video.d_b;
    }
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

CrossEntropy cross_entropy(const Matrix& logits, std::span<const int> targets, Reduction reduction) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows())
    throw Error("cross entropy: one target per row required");
  if (targets.empty()) throw Error("cross entropy over zero rows");
  const Matrix logp = log_softmax_rows(logits);
  const double scale = reduction == Reduction::kMean ? 1.0 / static_cast<double>(targets.size()) : 1.0;
  CrossEntropy ce;
  ce.d_logits = logp.array().exp() * scale;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const int t = targets[r];
    if (t < 0 || t >= logits.cols()) throw Error("target id " + std::to_string(t) + " out of range");
    ce.value -= logp(static_cast<Eigen::Index>(r), t) * scale;
    ce.d_logits(static_cast<Eigen::Index>(r), t) -= scale;
  }
  return ce;
}

CrossEntropy mlm_loss(const Matrix& logits, const MaskedSequence& masked, Reduction reduction) {
  if (masked.mask_positions.empty()) throw Error("empty mask");
  if (logits.rows() < masked.seq.positions()) throw Error("logits must cover every position");
  Matrix rows(static_cast<Eigen::Index>(masked.mask_positions.size()), logits.cols());
  for (std::size_t i = 0; i < masked.mask_positions.size(); ++i)
    rows.row(static_cast<Eigen::Index>(i)) = logits.row(masked.mask_positions[i]);
  CrossEntropy ce = cross_entropy(rows, masked.original_ids, reduction);
  Matrix full = Matrix::Zero(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < masked.mask_positions.size(); ++i)
    full.row(masked.mask_positions[i]) = ce.d_logits.row(static_cast<Eigen::Index>(i));
  ce.d_logits = std::move(full);
  return ce;
}

double teacher_loss(double contrastive, double mlm, const TeacherLossWeights& w) {
  return w.contrastive * contrastive + w.mlm * mlm;
}

}  // namespace vlkd
