#include "vlkd/eval.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace vlkd;
using vlkd::testing::random_matrix;
using vlkd::testing::random_vector;

namespace {

EncoderModel model(std::uint64_t seed, int vocab = 20, bool head = false) {
  EncoderConfig c = encoder_preset("toy-2L-64H");
  c.vocab_size = vocab;
  c.distill_head = head;
  Rng rng = make_rng(seed);
  return init_encoder(c, rng);
}

std::vector<std::string> ids_for(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) ids.push_back("v" + std::to_string(100 + i));
  return ids;
}

TokenSequence seq_of(std::vector<int> content) {
  TokenSequence s;
  s.ids.push_back(Vocabulary::kCls);
  s.ids.insert(s.ids.end(), content.begin(), content.end());
  s.length = static_cast<int>(content.size());
  s.pad_mask.assign(s.ids.size(), false);
  return s;
}

}  // namespace

TEST(Embedding, MeanOfContentRows) {
  Rng rng = make_rng(1);
  Matrix states = random_matrix(rng, 5, 4);
  HiddenStates h{states, {false, true, true, true, false}};
  Vector want = Vector::Zero(4);
  for (int r = 1; r <= 3; ++r) want += states.row(r).transpose() / 3.0;
  const auto content = h.content_positions();
  ASSERT_EQ(content.size(), 3u);
  EXPECT_LT((mean_content_state(h) - want).norm(), 1e-12);
  Vector with_cls = Vector::Zero(4);
  for (int r = 0; r <= 3; ++r) with_cls += states.row(r).transpose() / 4.0;
  EXPECT_LT((mean_content_state(h, true) - with_cls).norm(), 1e-12);

  HiddenStates cls_only{random_matrix(rng, 1, 4), {false}};
  EXPECT_THROW(mean_content_state(cls_only), Error);
}

TEST(Rank, SelfRetrievalIsRankOne) {
  Rng rng = make_rng(2);
  const Matrix bank = random_matrix(rng, 12, 8);
  const auto ids = ids_for(12);
  for (int i = 0; i < 12; ++i) {
    const auto r = rank_videos(bank.row(i).transpose(), bank, ids, 3, "q", ids[i]);
    EXPECT_EQ(r.gt_rank, 1);
    EXPECT_EQ(r.topk[0].video_id, ids[i]);
    EXPECT_NEAR(r.topk[0].score, 1.0, 1e-12);
  }
}

TEST(Rank, FullDepthIsPermutationWithNonIncreasingScores) {
  Rng rng = make_rng(3);
  const Matrix bank = random_matrix(rng, 9, 5);
  const auto ids = ids_for(9);
  const auto r = rank_videos(random_vector(rng, 5), bank, ids, 9);
  ASSERT_EQ(r.topk.size(), 9u);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < r.topk.size(); ++i) {
    seen.insert(r.topk[i].video_id);
    if (i > 0) EXPECT_LE(r.topk[i].score, r.topk[i - 1].score);
  }
  EXPECT_EQ(seen.size(), 9u);
  EXPECT_EQ(r.gt_rank, 0);
}

TEST(Rank, MatchesBruteForceOracle) {
  Rng rng = make_rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 3 + trial % 10;
    const Matrix bank = random_matrix(rng, n, 6);
    const auto ids = ids_for(n);
    const Vector q = random_vector(rng, 6);
    std::vector<std::pair<double, std::string>> scored;
    for (int i = 0; i < n; ++i) scored.push_back({-bank.row(i).dot(q.transpose()) / (bank.row(i).norm() * q.norm()), ids[i]});
    std::sort(scored.begin(), scored.end());
    const std::string gt = ids[trial % n];
    const auto r = rank_videos(q, bank, ids, 3, "q", gt);
    for (int i = 0; i < 3; ++i) {
      EXPECT_EQ(r.topk[i].video_id, scored[i].second);
      EXPECT_NEAR(r.topk[i].score, -scored[i].first, 1e-12);
    }
    const auto it = std::find_if(scored.begin(), scored.end(), [&](auto& p) { return p.second == gt; });
    EXPECT_EQ(r.gt_rank, static_cast<int>(it - scored.begin()) + 1);
  }
}

TEST(Rank, TiesGoToLowerId) {
  const Matrix bank = Matrix::Ones(3, 2);
  const auto r = rank_videos(Vector::Ones(2), bank, {"b", "c", "a"}, 3);
  EXPECT_EQ(r.topk[0].video_id, "a");
  EXPECT_EQ(r.topk[2].video_id, "c");
}

TEST(Rank, Errors) {
  const auto ids = ids_for(2);
  EXPECT_THROW(rank_videos(Vector::Ones(2), Matrix(0, 2), {}, 1), Error);
  EXPECT_THROW(rank_videos(Vector::Ones(2), Matrix::Ones(2, 2), ids, 3), Error);
  EXPECT_THROW(rank_videos(Vector::Ones(2), Matrix::Ones(2, 2), ids, 1, "q", "nope"), Error);
}

TEST(Rank, JsonReport) {
  const auto r = rank_videos(Vector::Ones(2), Matrix::Identity(2, 2), {"x", "y"}, 2, "q7", "y");
  const auto j = r.to_json();
  EXPECT_EQ(j.at("query_id"), "q7");
  EXPECT_EQ(j.at("topk").size(), 2u);
  EXPECT_TRUE(j.at("topk")[0].contains("video_id"));
  EXPECT_TRUE(j.at("topk")[0].contains("score"));
  EXPECT_GE(j.at("gt_rank").get<int>(), 1);
}

TEST(Probe, ChanceOnRandomLabels) {
  Rng rng = make_rng(5);
  const Matrix x = random_matrix(rng, 400, 6);
  const Matrix test = random_matrix(rng, 400, 6);
  std::vector<int> y(400), ty(400);
  std::uniform_int_distribution<int> coin(0, 1);
  for (auto& v : y) v = coin(rng);
  for (auto& v : ty) v = coin(rng);
  EXPECT_NEAR(linear_probe_accuracy(x, y, test, ty, 2), 0.5, 0.1);
}

TEST(Probe, SeparableIsPerfectAndRotationInvariant) {
  Rng rng = make_rng(6);
  auto make = [&rng](int n, Matrix& x, std::vector<int>& y) {
    x = random_matrix(rng, n, 4);
    y.resize(n);
    for (int i = 0; i < n; ++i) {
      y[i] = i % 3;
      x(i, y[i]) += 6.0;
    }
  };
  Matrix x, t;
  std::vector<int> y, ty;
  make(60, x, y);
  make(60, t, ty);
  const double acc = linear_probe_accuracy(x, y, t, ty, 3);
  EXPECT_GE(acc, 0.95);

  const Eigen::HouseholderQR<Matrix> qr(random_matrix(rng, 4, 4));
  const Matrix q = qr.householderQ();
  EXPECT_NEAR(linear_probe_accuracy(x * q, y, t * q, ty, 3), acc, 0.05);
}

TEST(Probe, SingleClassIsAnError) {
  const Matrix x = Matrix::Ones(4, 2);
  EXPECT_THROW(linear_probe_accuracy(x, {0, 0, 0, 0}, x, {0, 0, 0, 0}, 1), Error);
}

TEST(Probe, TaskIsBalancedAndDisjoint) {
  SynthConfig c;
  c.num_clusters = 6;
  const auto data = gen_synthetic_pairs(c, 3);
  const ProbeTask task = make_probe_task(data, 9, {5, 10});
  EXPECT_NO_THROW(task.validate());
  EXPECT_EQ(task.num_classes, 6);
  EXPECT_EQ(task.train.size(), 30u);
  EXPECT_EQ(task.test.size(), 60u);
  std::set<std::vector<int>> train_ids;
  for (auto& s : task.train) train_ids.insert(s.ids);
  for (auto& s : task.test) EXPECT_FALSE(train_ids.contains(s.ids));

  ProbeTask skewed = task;
  std::fill(skewed.train_labels.begin(), skewed.train_labels.begin() + 10, 0);
  EXPECT_THROW(skewed.validate(), Error);
}

TEST(Agreement, CopyAndOrthogonal) {
  const auto teacher = model(7);
  const std::vector<TokenSequence> texts{seq_of({4, 5, 6}), seq_of({7, 8})};
  const auto same = agreement_metrics(teacher, teacher, texts);
  EXPECT_NEAR(same.mean_l2, 0.0, 1e-12);
  EXPECT_NEAR(same.mean_cosine, 1.0, 1e-12);
  EXPECT_EQ(same.positions, 5);

  // An independently initialized student is near-orthogonal.
  const auto other = model(8);
  const auto ind = agreement_metrics(other, teacher, texts);
  EXPECT_LT(std::abs(ind.mean_cosine), 3.0 / std::sqrt(64.0));
}

TEST(Agreement, HeadIsAppliedWhenPresent) {
  const auto teacher = model(9);
  auto student = model(9, 20, true);
  student.weights.head_w1 = Matrix::Zero(64, 64);
  student.weights.head_w2 = Matrix::Zero(64, 64);
  student.weights.head_b1.setZero();
  student.weights.head_b2 = Matrix::Ones(1, 64);
  const std::vector<TokenSequence> texts{seq_of({4, 5})};
  const auto with_head = agreement_metrics(student, teacher, texts, true);
  const auto without = agreement_metrics(student, teacher, texts, false);
  EXPECT_NEAR(without.mean_cosine, 1.0, 1e-12);
  EXPECT_LT(with_head.mean_cosine, 0.9);
}

TEST(Retrieval, UntrainedSmokeAndShapes) {
  SynthConfig c;
  c.num_pairs = 24;
  c.d_v = 8;
  const auto data = gen_synthetic_pairs(c, 1);
  EncoderConfig tc = encoder_preset("toy-2L-64H");
  tc.vocab_size = data.vocab.size();
  EncoderConfig vc = tc;
  vc.kind = EncoderKind::kVideo;
  vc.d_v = 8;
  vc.max_positions = kMaxFrames;
  Rng rng = make_rng(2);
  const auto text = init_encoder(tc, rng);
  const auto video = init_encoder(vc, rng);
  const auto summary = evaluate_retrieval(text, video, data.samples, 3);
  EXPECT_EQ(summary.results.size(), 24u);
  EXPECT_LE(summary.recall_at_1, summary.recall_at_k);
  for (const auto& r : summary.results) {
    EXPECT_EQ(r.topk.size(), 3u);
    EXPECT_GE(r.gt_rank, 1);
  }
  const auto bank = pooled_video_bank(video, data.samples);
  EXPECT_EQ(bank.size(), 24);
}
