#include "vlkd/corpus.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

using namespace vlkd;
using vlkd::testing::TempDir;

TEST(Vocab, CountsAndSpecials) {
  const auto v = build_vocab("a b a");
  EXPECT_EQ(v.size(), 6);
  EXPECT_EQ(v.token(Vocabulary::kPad), "[PAD]");
  EXPECT_EQ(v.token(Vocabulary::kUnk), "[UNK]");
  EXPECT_EQ(v.token(Vocabulary::kCls), "[CLS]");
  EXPECT_EQ(v.token(Vocabulary::kMask), "[MASK]");
  // Most frequent first.
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), 5);
}

TEST(Vocab, MinFrequency) {
  const auto v = build_vocab("a b a", 2);
  EXPECT_EQ(v.size(), 5);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_FALSE(v.contains("b"));
  EXPECT_EQ(v.id("b"), Vocabulary::kUnk);
}

TEST(Vocab, EmptyCorpusIsAnError) { EXPECT_THROW(build_vocab("  \n "), Error); }

TEST(Vocab, MatchesIndependentCount) {
  Rng rng = make_rng(11);
  std::uniform_int_distribution<int> word(0, 299), len(1, 12);
  std::string corpus;
  std::map<std::string, int> counts;
  for (int line = 0; line < 1000; ++line) {
    const int n = len(rng);
    for (int i = 0; i < n; ++i) {
      const std::string w = "Tok" + std::to_string(word(rng));
      corpus += w + (i + 1 < n ? " " : "\n");
      std::string lower = w;
      for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      ++counts[lower];
    }
  }
  for (int min_freq : {1, 3, 5}) {
    int expected = 0;
    for (auto& [w, c] : counts) expected += c >= min_freq;
    EXPECT_EQ(build_vocab(corpus, min_freq).size(), expected + Vocabulary::kNumSpecial);
  }
}

TEST(Tokenize, EmptyText) {
  const auto v = build_vocab("a b");
  const auto seq = tokenize("", v);
  EXPECT_EQ(seq.ids, std::vector<int>{Vocabulary::kCls});
  EXPECT_EQ(seq.length, 0);
}

TEST(Tokenize, DirectLookup) {
  const auto v = build_vocab("a b");
  const auto seq = tokenize("A b", v);
  EXPECT_EQ(seq.ids, (std::vector<int>{Vocabulary::kCls, v.id("a"), v.id("b")}));
  EXPECT_EQ(seq.length, 2);
  EXPECT_EQ(tokenize("a zzz", v).ids.back(), Vocabulary::kUnk);
}

TEST(Tokenize, TruncatesTo128ContentTokens) {
  const auto v = build_vocab("w");
  std::string line;
  for (int i = 0; i < 200; ++i) line += "w ";
  const auto seq = tokenize(line, v);
  EXPECT_EQ(seq.positions(), 129);
  EXPECT_EQ(seq.length, 128);
}

TEST(Tokenize, PaddingIsMarked) {
  const auto v = build_vocab("a b");
  const auto seq = tokenize("a", v, kMaxContentTokens, 5);
  ASSERT_EQ(seq.positions(), 5);
  EXPECT_EQ(seq.length, 1);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(seq.pad_mask[i], i >= 2);
  EXPECT_EQ(seq.ids[4], Vocabulary::kPad);
}

TEST(Tokenize, DetokenizeRoundTrip) {
  const auto v = build_vocab("the cat sat on the mat");
  for (const std::string text : {"the cat", "mat on sat the cat", "cat"})
    EXPECT_EQ(detokenize(tokenize(text, v), v), text);
}

TEST(Masking, RoundedCountAndMinimumOne) {
  const auto v = build_vocab("a b c d e f g h i j k l m n o p q r s t");
  const auto twenty = tokenize("a b c d e f g h i j k l m n o p q r s t", v);
  Rng rng = make_rng(1);
  EXPECT_EQ(apply_mlm_mask(twenty, rng).mask_positions.size(), 3u);
  EXPECT_EQ(apply_mlm_mask(tokenize("a", v), rng).mask_positions.size(), 1u);
}

TEST(Masking, DeterministicForSeed) {
  const auto v = build_vocab("a b c d e f g h i j k l m n o p q r s t");
  const auto seq = tokenize("a b c d e f g h i j k l m n o p q r s t", v);
  Rng r1 = make_rng(7), r2 = make_rng(7);
  EXPECT_EQ(apply_mlm_mask(seq, r1).mask_positions, apply_mlm_mask(seq, r2).mask_positions);
}

TEST(Masking, NothingToMaskIsAnError) {
  const auto v = build_vocab("a");
  Rng rng = make_rng(0);
  EXPECT_THROW(apply_mlm_mask(tokenize("", v), rng), Error);
}

TEST(Masking, NeverTouchesClsOrPaddingProperty) {
  const auto v = build_vocab("a b c d e f g h");
  Rng rng = make_rng(3);
  std::uniform_int_distribution<int> len(1, 8), pad(0, 6);
  for (int trial = 0; trial < 300; ++trial) {
    std::string text;
    const int n = len(rng);
    for (int i = 0; i < n; ++i) text += std::string(1, static_cast<char>('a' + i)) + " ";
    const auto seq = tokenize(text, v, kMaxContentTokens, n + 1 + pad(rng));
    MaskingOptions opts;
    opts.rate = 0.4;
    const auto m = apply_mlm_mask(seq, rng, opts);
    ASSERT_FALSE(m.mask_positions.empty());
    ASSERT_TRUE(std::is_sorted(m.mask_positions.begin(), m.mask_positions.end()));
    for (std::size_t k = 0; k < m.mask_positions.size(); ++k) {
      const int p = m.mask_positions[k];
      ASSERT_TRUE(seq.is_content(p));
      ASSERT_FALSE(seq.pad_mask[p]);
      EXPECT_EQ(m.seq.ids[p], Vocabulary::kMask);
      EXPECT_EQ(m.original_ids[k], seq.ids[p]);
    }
  }
}

TEST(Masking, BertCorruptionKeepsPositionsAndTargets) {
  const auto v = build_vocab("a b c d e f g h i j");
  const auto seq = tokenize("a b c d e f g h i j", v);
  MaskingOptions opts;
  opts.rate = 0.5;
  opts.bert_corruption = true;
  opts.vocab_size = v.size();
  Rng rng = make_rng(5);
  const auto m = apply_mlm_mask(seq, rng, opts);
  EXPECT_EQ(m.mask_positions.size(), 5u);
  for (std::size_t k = 0; k < m.mask_positions.size(); ++k) EXPECT_EQ(m.original_ids[k], seq.ids[m.mask_positions[k]]);
}

TEST(Vlkd, HeaderShapeAndRoundTrip) {
  TempDir dir("corpus");
  Rng rng = make_rng(2);
  const Matrix m = vlkd::testing::random_matrix(rng, 4, 8).cast<float>().cast<double>();
  save_vlkd(dir / "x.vlkd", m);
  const auto vf = load_video_features(dir / "x.vlkd");
  EXPECT_EQ(vf.frames.rows(), 4);
  EXPECT_EQ(vf.frames.cols(), 8);
  EXPECT_EQ(vf.frames, m);
}

TEST(Vlkd, LongVideosAreTruncated) {
  TempDir dir("corpus");
  save_vlkd(dir / "long.vlkd", Matrix::Ones(600, 3));
  EXPECT_EQ(load_video_features(dir / "long.vlkd").num_frames(), 512);
}

TEST(Vlkd, SaveLoadSaveIsByteIdentical) {
  Rng rng = make_rng(4);
  std::stringstream a, b;
  write_vlkd(a, vlkd::testing::random_matrix(rng, 5, 7));
  const Matrix back = read_vlkd(a);
  write_vlkd(b, back);
  EXPECT_EQ(a.str(), b.str());
}

namespace {

std::string vlkd_bytes(const Matrix& m) {
  std::stringstream s;
  write_vlkd(s, m);
  return s.str();
}

template <typename F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Vlkd, NamedErrors) {
  std::string good = vlkd_bytes(Matrix::Ones(2, 2));

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  std::istringstream s1(bad_magic);
  EXPECT_NE(error_of([&] { read_vlkd(s1); }).find("bad magic"), std::string::npos);

  std::string bad_version = good;
  bad_version[4] = 9;
  std::istringstream s2(bad_version);
  EXPECT_NE(error_of([&] { read_vlkd(s2); }).find("version"), std::string::npos);

  std::istringstream s3(good.substr(0, good.size() - 3));
  EXPECT_NE(error_of([&] { read_vlkd(s3); }).find("truncated"), std::string::npos);

  std::string nan_payload = vlkd_bytes(Matrix::Constant(1, 2, std::nan("")));
  std::istringstream s4(nan_payload);
  const auto msg = error_of([&] { read_vlkd(s4); });
  EXPECT_NE(msg.find("non-finite"), std::string::npos);
  EXPECT_NE(msg.find("offset 13"), std::string::npos);

  std::string inf_payload = vlkd_bytes(Matrix::Constant(1, 1, INFINITY));
  std::istringstream s5(inf_payload);
  EXPECT_THROW(read_vlkd(s5), FormatError);
}

TEST(Synthetic, SingleTokenSentenceFramesEqualPrototype) {
  SynthConfig cfg;
  cfg.noise = 0.0;
  const auto g = make_grounding_map(cfg, 1);
  Rng rng = make_rng(1);
  const Matrix frames = synthesize_frames(cfg, g, {5}, 6, rng);
  for (Eigen::Index f = 0; f < frames.rows(); ++f)
    EXPECT_LT((frames.row(f) - g.prototypes.row(5)).norm(), 1e-12);
}

TEST(Synthetic, TemporalMeanIsPrototypeMixtureAtZeroNoise) {
  SynthConfig cfg;
  cfg.noise = 0.0;
  const auto g = make_grounding_map(cfg, 2);
  Rng rng = make_rng(2);
  const std::vector<int> words{1, 7, 7, 30};
  const Matrix frames = synthesize_frames(cfg, g, words, 9, rng);
  const Vector mean = frames.colwise().mean().transpose();
  EXPECT_LT((mean - prototype_mixture(g, words)).norm(), 1e-12);
}

TEST(Synthetic, DeterministicForSeed) {
  SynthConfig cfg;
  cfg.num_pairs = 64;
  const auto a = gen_synthetic_pairs(cfg, 3);
  const auto b = gen_synthetic_pairs(cfg, 3);
  ASSERT_EQ(a.samples.size(), 64u);
  EXPECT_EQ(a.sentences, b.sentences);
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    EXPECT_EQ(a.samples[i].text.ids, b.samples[i].text.ids);
    EXPECT_EQ(vlkd_bytes(a.samples[i].video.frames), vlkd_bytes(b.samples[i].video.frames));
    EXPECT_EQ(a.samples[i].cluster, b.samples[i].cluster);
  }
}

namespace {

Vector sentence_mixture(const SyntheticDataset& ds, std::size_t i) {
  std::vector<int> words;
  for (auto& w : split_tokens(ds.sentences[i])) words.push_back(ds.grounding.word_index(w));
  return prototype_mixture(ds.grounding, words);
}

}  // namespace

TEST(Synthetic, AlignedPairsAreMoreSimilarThanMismatched) {
  SynthConfig cfg;
  cfg.num_pairs = 64;
  const auto ds = gen_synthetic_pairs(cfg, 4);
  double aligned = 0.0, mismatched = 0.0;
  int n_mis = 0;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Vector mix = sentence_mixture(ds, i);
    for (std::size_t j = 0; j < ds.samples.size(); ++j) {
      const Vector vmean = ds.samples[j].video.frames.colwise().mean().transpose();
      const double c = cosine(mix, vmean);
      if (i == j) aligned += c;
      else {
        mismatched += c;
        ++n_mis;
      }
    }
  }
  EXPECT_GT(aligned / 64.0 - mismatched / n_mis, 0.0);
}

TEST(Synthetic, ZeroNoiseOwnVideoIsNearestProperty) {
  SynthConfig cfg;
  cfg.noise = 0.0;
  cfg.num_pairs = 128;
  const auto ds = gen_synthetic_pairs(cfg, 5);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Vector mix = sentence_mixture(ds, i);
    const double own = cosine(mix, Vector(ds.samples[i].video.frames.colwise().mean().transpose()));
    for (std::size_t j = 0; j < ds.samples.size(); ++j)
      ASSERT_GE(own + 1e-12, cosine(mix, Vector(ds.samples[j].video.frames.colwise().mean().transpose())));
  }
}

TEST(Synthetic, InvariantsHold) {
  SynthConfig cfg;
  const auto ds = gen_synthetic_pairs(cfg, 6);
  EXPECT_EQ(ds.samples.size(), 256u);
  std::set<int> clusters;
  for (auto& s : ds.samples) {
    EXPECT_GE(s.text.length, cfg.min_len);
    EXPECT_LE(s.text.length, cfg.max_len);
    EXPECT_GE(s.video.num_frames(), cfg.min_frames);
    EXPECT_LE(s.video.num_frames(), cfg.max_frames);
    EXPECT_EQ(s.video.frames.cols(), cfg.d_v);
    EXPECT_TRUE(s.video.frames.allFinite());
    for (int p = 1; p <= s.text.length; ++p) EXPECT_NE(s.text.ids[p], Vocabulary::kUnk);
    clusters.insert(s.cluster);
  }
  EXPECT_EQ(static_cast<int>(clusters.size()), cfg.num_clusters);
}

TEST(Synthetic, TooFewPairsIsAnError) {
  SynthConfig cfg;
  cfg.num_pairs = 1;
  EXPECT_THROW(gen_synthetic_pairs(cfg, 0), Error);
}
