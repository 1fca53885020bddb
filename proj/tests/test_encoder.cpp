#include "vlkd/encoder.hpp"
#include "vlkd/gradcheck.hpp"
#include "vlkd/optim.hpp"
#include "vlkd/teacher_objectives.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace vlkd;
using vlkd::testing::random_matrix;

namespace {

EncoderModel text_model(std::uint64_t seed, int vocab = 12, const std::string& preset = "toy-2L-64H") {
  EncoderConfig c = encoder_preset(preset);
  c.kind = EncoderKind::kText;
  c.vocab_size = vocab;
  Rng rng = make_rng(seed);
  return init_encoder(c, rng);
}

EncoderModel video_model(std::uint64_t seed, int d_v = 6) {
  EncoderConfig c = encoder_preset("toy-2L-64H");
  c.kind = EncoderKind::kVideo;
  c.d_v = d_v;
  c.max_positions = kMaxFrames;
  Rng rng = make_rng(seed);
  return init_encoder(c, rng);
}

TokenSequence seq_of(std::vector<int> content, int pad = 0) {
  TokenSequence s;
  s.ids.push_back(Vocabulary::kCls);
  s.ids.insert(s.ids.end(), content.begin(), content.end());
  s.length = static_cast<int>(content.size());
  for (int i = 0; i < pad; ++i) s.ids.push_back(Vocabulary::kPad);
  s.pad_mask.assign(s.ids.size(), false);
  for (int i = 0; i < pad; ++i) s.pad_mask[1 + s.length + i] = true;
  return s;
}

}  // namespace

TEST(EncodeText, ClsOnlyShape) {
  const auto m = text_model(1);
  const auto h = encode_text(m, seq_of({}));
  EXPECT_EQ(h.states.rows(), 1);
  EXPECT_EQ(h.states.cols(), 64);
  EXPECT_TRUE(h.content_positions().empty());
}

TEST(EncodeText, Deterministic) {
  const auto m = text_model(2);
  const auto s = seq_of({4, 5, 6});
  EXPECT_EQ(encode_text(m, s).states, encode_text(m, s).states);
}

TEST(EncodeText, PositionEmbeddingsAreActive) {
  const auto m = text_model(3);
  const Matrix a = encode_text(m, seq_of({4, 5, 6})).states;
  const Matrix b = encode_text(m, seq_of({5, 4, 6})).states;
  EXPECT_GT((a - b).norm(), 1e-6);
}

TEST(EncodeText, PaddingInvariance) {
  const auto m = text_model(4);
  const Matrix base = encode_text(m, seq_of({4, 7, 9})).states;
  for (int pad : {1, 3, 8}) {
    const auto h = encode_text(m, seq_of({4, 7, 9}, pad));
    ASSERT_EQ(h.states.rows(), 4 + pad);
    EXPECT_LT((h.states.topRows(4) - base).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(h.content_positions(), (std::vector<int>{1, 2, 3}));
  }
}

TEST(EncodeText, RejectsOutOfRangeIds) {
  const auto m = text_model(5, 8);
  EXPECT_THROW(encode_text(m, seq_of({8})), Error);
}

TEST(EncodeVideo, Shapes) {
  const auto m = video_model(1);
  Rng rng = make_rng(1);
  EXPECT_EQ(encode_video(m, {random_matrix(rng, 1, 6), "a"}).states.rows(), 1);
  const auto h = encode_video(m, {random_matrix(rng, 512, 6), "b"});
  EXPECT_EQ(h.states.rows(), 512);
  EXPECT_EQ(h.states.cols(), 64);
  EXPECT_EQ(h.content_positions().size(), 512u);
  EXPECT_THROW(encode_video(m, {random_matrix(rng, 513, 6), "c"}), Error);
  EXPECT_THROW(encode_video(m, {random_matrix(rng, 3, 5), "d"}), Error);
}

TEST(EncodeVideo, ZeroProjectionGivesBiasPropagatedRows) {
  auto m = video_model(2);
  m.weights.input_proj.setZero();
  m.weights.position_embedding.setZero();
  Rng rng = make_rng(2);
  m.weights.input_bias = random_matrix(rng, 1, 64);
  const Matrix one = encode_video(m, {Matrix::Zero(1, 6), "one"}).states;
  const Matrix many = encode_video(m, {Matrix::Zero(7, 6), "many"}).states;
  for (Eigen::Index r = 0; r < many.rows(); ++r) EXPECT_LT((many.row(r) - one.row(0)).norm(), 1e-10);
}

TEST(PoolVideo, Means) {
  Rng rng = make_rng(3);
  const RowVector r = random_matrix(rng, 1, 5);
  HiddenStates h{r.replicate(5, 1), std::vector<bool>(5, true)};
  EXPECT_LT((pool_video(h) - r.transpose()).norm(), 1e-12);

  Matrix pm(2, 5);
  pm << r, -r;
  EXPECT_LT(pool_video(HiddenStates{pm, {true, true}}).norm(), 1e-15);

  const Matrix x = random_matrix(rng, 3, 5);
  Vector oracle = Vector::Zero(5);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) oracle(j) += x(i, j) / 3.0;
  EXPECT_LT((pool_video(HiddenStates{x, {true, true, true}}) - oracle).norm(), 1e-12);
}

TEST(LmHead, AffineDegenerate) {
  auto m = text_model(6);
  m.weights.token_embedding.setZero();
  Rng rng = make_rng(6);
  m.weights.lm_bias = random_matrix(rng, 1, 12);
  const Matrix logits = lm_head(m, Matrix::Zero(3, 64));
  for (int r = 0; r < 3; ++r) EXPECT_EQ(logits.row(r), m.weights.lm_bias.row(0));
}

TEST(LmHead, SoftmaxRowsSumToOne) {
  const auto m = text_model(7);
  const Matrix logits = lm_head(m, encode_text(m, seq_of({4, 5, 6, 7})).states);
  const Matrix p = log_softmax_rows(logits).array().exp();
  for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
}

TEST(LmHead, UntiedHeadHasOwnWeight) {
  EncoderConfig c = encoder_preset("toy-2L-64H");
  c.vocab_size = 10;
  c.tie_lm_head = false;
  Rng rng = make_rng(8);
  const auto m = init_encoder(c, rng);
  EXPECT_EQ(m.weights.lm_weight.rows(), 64);
  EXPECT_EQ(m.weights.lm_weight.cols(), 10);
}

TEST(LmHead, OverfitsSmallMaskedSet) {
  // 100 fixed masked sentences over a 24-token vocabulary; after training the
  // head must recover the original token at >= 90% of masked positions.
  const int vocab = 28;
  auto m = text_model(9, vocab);
  Rng rng = make_rng(9);
  std::uniform_int_distribution<int> tok(4, vocab - 1), len(3, 6);
  std::vector<MaskedSequence> set;
  for (int i = 0; i < 100; ++i) {
    std::vector<int> ids(len(rng));
    for (auto& t : ids) t = tok(rng);
    MaskingOptions mo;
    mo.rate = 0.2;
    set.push_back(apply_mlm_mask(seq_of(ids), rng, mo));
  }
  OptimState opt;
  opt.options.lr = 3e-3;
  opt.options.weight_decay = 0.0;
  for (int step = 0; step < 150; ++step) {
    EncoderWeights grads = m.weights.zeros_like();
    for (auto& ms : set) {
      EncoderTrace trace;
      const auto h = encode_text(m, ms.seq, &trace);
      const auto ce = mlm_loss(lm_head(m, h.states), ms);
      const Matrix d = lm_head_backward(m, h.states, ce.d_logits / 100.0, grads);
      encoder_backward(m, trace, d, grads);
    }
    std::vector<ParamRef> refs;
    auto p = m.weights.named();
    auto g = grads.named();
    for (std::size_t i = 0; i < p.size(); ++i) refs.push_back({p[i].first, p[i].second, g[i].second});
    adamw_step(refs, opt);
  }
  int correct = 0, total = 0;
  for (auto& ms : set) {
    const Matrix logits = lm_head(m, encode_text(m, ms.seq).states);
    for (std::size_t k = 0; k < ms.mask_positions.size(); ++k) {
      Eigen::Index best;
      logits.row(ms.mask_positions[k]).maxCoeff(&best);
      correct += best == ms.original_ids[k];
      ++total;
    }
  }
  EXPECT_GE(static_cast<double>(correct) / total, 0.9);
}

TEST(DistillHead, IdentityAndClamp) {
  EncoderConfig c = encoder_preset("toy-2L-64H");
  c.vocab_size = 10;
  c.distill_head = true;
  Rng rng = make_rng(10);
  auto m = init_encoder(c, rng);
  m.weights.head_w1 = Matrix::Identity(64, 64);
  m.weights.head_w2 = Matrix::Identity(64, 64);
  m.weights.head_b1.setZero();
  m.weights.head_b2.setZero();
  const Matrix pos = random_matrix(rng, 3, 64).cwiseAbs();
  EXPECT_EQ(distill_head(m, pos).out, pos);

  m.weights.head_b2 = random_matrix(rng, 1, 64);
  const Matrix out = distill_head(m, -pos).out;
  for (int r = 0; r < 3; ++r) EXPECT_EQ(out.row(r), m.weights.head_b2.row(0));
}

TEST(DistillHead, MatchesTwoMatrixOracle) {
  EncoderConfig c = encoder_preset("toy-2L-64H");
  c.vocab_size = 10;
  c.distill_head = true;
  Rng rng = make_rng(11);
  auto m = init_encoder(c, rng);
  m.weights.head_b1 = random_matrix(rng, 1, 64, 0.1);
  m.weights.head_b2 = random_matrix(rng, 1, 64, 0.1);
  const Matrix h = random_matrix(rng, 4, 64);
  const Matrix out = distill_head(m, h).out;
  for (int r = 0; r < 4; ++r)
    for (int j = 0; j < 64; ++j) {
      double acc = m.weights.head_b2(0, j);
      for (int k = 0; k < 64; ++k) {
        double pre = m.weights.head_b1(0, k);
        for (int i = 0; i < 64; ++i) pre += h(r, i) * m.weights.head_w1(i, k);
        acc += std::max(0.0, pre) * m.weights.head_w2(k, j);
      }
      EXPECT_NEAR(out(r, j), acc, 1e-10);
    }
}

TEST(DistillHead, MissingHeadIsAnError) {
  const auto m = text_model(12);
  EXPECT_THROW(distill_head(m, Matrix::Zero(1, 64)), Error);
}

TEST(EncoderGradients, MatchFiniteDifferences) {
  GradcheckOptions opts;
  opts.instances = 8;
  opts.seed = 5;
  for (auto& r : run_gradcheck_suite(opts))
    if (r.loss == "encoder") EXPECT_LT(r.max_rel_err, 1e-4);
}

TEST(Presets, ShapeContracts) {
  for (const std::string preset : {"toy-2L-64H", "bert-6L-512H", "bert-12L-768H"}) {
    const auto m = text_model(13, 10, preset);
    const int d = m.config.d_hidden;
    EXPECT_EQ(static_cast<int>(m.weights.blocks.size()), m.config.n_layers);
    const auto h = encode_text(m, seq_of({4, 5, 6}));
    EXPECT_EQ(h.states.rows(), 4);
    EXPECT_EQ(h.states.cols(), d);
    EXPECT_EQ(lm_head(m, h.states).cols(), 10);
  }
  EXPECT_EQ(encoder_preset("bert-6L-512H").d_hidden, 512);
  EXPECT_EQ(encoder_preset("bert-12L-768H").n_layers, 12);
  EXPECT_THROW(encoder_preset("nope"), Error);
}

TEST(Init, TruncatedNormalAndZeros) {
  const auto m = text_model(14);
  const double bound = 2.0 * m.config.init_std + 1e-15;
  EXPECT_LE(m.weights.token_embedding.cwiseAbs().maxCoeff(), bound);
  EXPECT_LE(m.weights.blocks[0].wq.cwiseAbs().maxCoeff(), bound);
  EXPECT_EQ(m.weights.blocks[0].bq.norm(), 0.0);
  EXPECT_EQ(m.weights.emb_ln_g, Matrix::Ones(1, 64));
}
