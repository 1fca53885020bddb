#pragma once

#include "vlkd/common.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace vlkd {

inline constexpr int kMaxContentTokens = 128;
inline constexpr int kMaxFrames = 512;

/// Token <-> id map. Special tokens occupy ids 0..3; content tokens follow in
/// (descending frequency, lexicographic) order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kMask = 3;
  static constexpr int kNumSpecial = 4;

  Vocabulary();
  /// Builds from an explicit content-token list (specials are prepended).
  explicit Vocabulary(const std::vector<std::string>& content_tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(std::string_view token) const;  // kUnk when absent
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  static bool is_special(int id) { return id >= 0 && id < kNumSpecial; }

  /// Content tokens in id order (no specials).
  std::vector<std::string> content_tokens() const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> index_;
};

/// Whitespace-split, lowercased tokens with count >= min_freq.
Vocabulary build_vocab(std::string_view corpus, int min_freq = 1);
std::vector<std::string> split_tokens(std::string_view text);

struct TokenSequence {
  std::vector<int> ids;        // ids[0] == [CLS]
  std::vector<bool> pad_mask;  // true at padding positions
  int length = 0;              // content tokens, excluding [CLS] and padding

  int positions() const { return static_cast<int>(ids.size()); }
  bool is_content(int pos) const { return pos >= 1 && pos <= length; }
};

/// Lowercases and splits `text`; OOV tokens map to [UNK]. Content beyond
/// max_content tokens is dropped. pad_to > 0 right-pads with [PAD].
TokenSequence tokenize(std::string_view text, const Vocabulary& vocab,
                       int max_content = kMaxContentTokens, int pad_to = 0);
std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab);

struct MaskedSequence {
  TokenSequence seq;                // ids with [MASK] substituted
  std::vector<int> mask_positions;  // ascending
  std::vector<int> original_ids;    // aligned with mask_positions
};

struct MaskingOptions {
  double rate = 0.15;
  // BERT-style 80/10/10 corruption. Off: every selected token becomes [MASK].
  bool bert_corruption = false;
  int vocab_size = 0;  // needed only for bert_corruption random replacement
};

/// Selects round(rate * |x|) content positions (at least one) uniformly
/// without replacement.
MaskedSequence apply_mlm_mask(const TokenSequence& seq, Rng& rng, const MaskingOptions& opts = {});

struct VideoFeatures {
  Matrix frames;  // |v| x d_v
  std::string source_id;
  int num_frames() const { return static_cast<int>(frames.rows()); }
};

// VLKD matrix file: "VLKD", u8 version=1, u32 rows, u32 cols, rows*cols f32
// row-major, all little-endian.
void write_vlkd(std::ostream& out, const Matrix& m);
Matrix read_vlkd(std::istream& in);
void save_vlkd(const std::filesystem::path& path, const Matrix& m);
Matrix load_vlkd(const std::filesystem::path& path);

/// Loads a VLKD feature file; frames beyond max_frames are dropped.
VideoFeatures load_video_features(const std::filesystem::path& path, int max_frames = kMaxFrames);
void save_video_features(const std::filesystem::path& path, const VideoFeatures& vf);

struct PairedSample {
  TokenSequence text;
  VideoFeatures video;
  int sample_index = 0;
  int cluster = 0;  // dominant prototype cluster (synthetic answer key)
};

struct SynthConfig {
  int num_pairs = 256;  // M
  int num_clusters = 64;
  int tokens_per_cluster = 2;
  int min_len = 4;
  int max_len = 10;
  int d_v = 32;
  int min_frames = 4;
  int max_frames = 12;
  double noise = 0.05;
  // Probability that a sentence token is drawn from the dominant cluster.
  double dominant_fraction = 0.6;
  // prototype = center_weight * cluster_center + token_offset
  double center_weight = 0.6;
  // Amplitude of the per-frame weight modulation, in [0, 1).
  double frame_modulation = 0.5;
};

/// Ground-truth grounding map: each content token has a visual prototype and
/// a cluster ("visual task").
struct GroundingMap {
  std::vector<std::string> words;
  std::vector<int> word_cluster;
  Matrix prototypes;  // words.size() x d_v
  int num_clusters = 0;

  int word_index(std::string_view w) const;
};

GroundingMap make_grounding_map(const SynthConfig& cfg, std::uint64_t seed);

struct SyntheticDataset {
  SynthConfig config;
  GroundingMap grounding;
  std::vector<std::string> sentences;  // corpus lines, aligned with samples
  Vocabulary vocab;
  std::vector<PairedSample> samples;
};

/// Draws one sentence (word indices) whose dominant cluster is `cluster`.
std::vector<int> sample_sentence_words(const SynthConfig& cfg, const GroundingMap& g, int cluster,
                                       Rng& rng);
/// Majority cluster of the sentence's words; ties go to `preferred`.
int dominant_cluster(const GroundingMap& g, const std::vector<int>& words, int preferred);
std::string words_to_text(const GroundingMap& g, const std::vector<int>& words);

/// Video frames for a sentence: frame f = sum_i w_{f,i} * prototype(t_i) with
/// weights whose per-token temporal mean is exactly 1/n, plus Gaussian noise.
Matrix synthesize_frames(const SynthConfig& cfg, const GroundingMap& g,
                         const std::vector<int>& words, int num_frames, Rng& rng);

/// Mean of the sentence's token prototypes.
Vector prototype_mixture(const GroundingMap& g, const std::vector<int>& words);

SyntheticDataset gen_synthetic_pairs(const SynthConfig& cfg, std::uint64_t seed);

/// Corpus text with one sentence per line.
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace vlkd
