#include "vlkd/corpus.hpp"

#include "binary_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace vlkd {

namespace {

const std::array<std::string, Vocabulary::kNumSpecial> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]",
                                                                          "[MASK]"};

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& content_tokens) {
  tokens_.assign(kSpecialTokens.begin(), kSpecialTokens.end());
  for (const auto& t : content_tokens) {
    if (index_.contains(t) || std::find(kSpecialTokens.begin(), kSpecialTokens.end(), t) != kSpecialTokens.end())
      throw Error("duplicate vocabulary token: " + t);
    tokens_.push_back(t);
    index_.emplace(t, static_cast<int>(tokens_.size()) - 1);
  }
  for (int i = 0; i < kNumSpecial; ++i) index_.emplace(kSpecialTokens[i], i);
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw Error("token id out of range: " + std::to_string(id));
  return tokens_[id];
}

bool Vocabulary::contains(std::string_view token) const { return index_.find(token) != index_.end(); }

std::vector<std::string> Vocabulary::content_tokens() const {
  return {tokens_.begin() + kNumSpecial, tokens_.end()};
}

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(lowercase(tok));
  return out;
}

Vocabulary build_vocab(std::string_view corpus, int min_freq) {
  std::unordered_map<std::string, int> counts;
  for (auto& t : split_tokens(corpus)) ++counts[t];
  if (counts.empty()) throw Error("empty corpus");
  std::vector<std::pair<std::string, int>> kept;
  for (auto& [tok, n] : counts) {
    if (n < min_freq) continue;
    if (std::find(kSpecialTokens.begin(), kSpecialTokens.end(), tok) != kSpecialTokens.end()) continue;
    kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return Vocabulary(tokens);
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab, int max_content, int pad_to) {
  TokenSequence seq;
  seq.ids.push_back(Vocabulary::kCls);
  for (auto& tok : split_tokens(text)) {
    if (seq.length >= max_content) break;
    seq.ids.push_back(vocab.id(tok));
    ++seq.length;
  }
  seq.pad_mask.assign(seq.ids.size(), false);
  while (seq.positions() < pad_to) {
    seq.ids.push_back(Vocabulary::kPad);
    seq.pad_mask.push_back(true);
  }
  return seq;
}

std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (int p = 1; p <= seq.length; ++p) {
    if (!out.empty()) out += ' ';
    out += vocab.token(seq.ids[p]);
  }
  return out;
}

MaskedSequence apply_mlm_mask(const TokenSequence& seq, Rng& rng, const MaskingOptions& opts) {
  if (seq.length < 1) throw Error("nothing to mask");
  if (!(opts.rate > 0.0 && opts.rate < 1.0)) throw Error("mask rate must lie in (0, 1)");
  const int count = std::max(1, static_cast<int>(std::lround(opts.rate * seq.length)));

  std::vector<int> candidates(seq.length);
  std::iota(candidates.begin(), candidates.end(), 1);
  // Partial Fisher-Yates: the first `count` entries are a uniform sample.
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<int> pick(i, seq.length - 1);
    std::swap(candidates[i], candidates[pick(rng)]);
  }
  candidates.resize(count);
  std::sort(candidates.begin(), candidates.end());

  MaskedSequence out;
  out.seq = seq;
  out.mask_positions = candidates;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int pos : candidates) {
    out.original_ids.push_back(seq.ids[pos]);
    int replacement = Vocabulary::kMask;
    if (opts.bert_corruption) {
      const double r = u01(rng);
      if (r >= 0.9) {
        replacement = seq.ids[pos];
      } else if (r >= 0.8) {
        if (opts.vocab_size <= Vocabulary::kNumSpecial) throw Error("bert corruption needs vocab_size");
        std::uniform_int_distribution<int> tok(Vocabulary::kNumSpecial, opts.vocab_size - 1);
        replacement = tok(rng);
      }
    }
    out.seq.ids[pos] = replacement;
  }
  return out;
}

// ---------------------------------------------------------------------------
// VLKD matrix files

void write_vlkd(std::ostream& out, const Matrix& m) {
  out.write("VLKD", 4);
  out.put(static_cast<char>(1));
  io::put_le(out, static_cast<std::uint32_t>(m.rows()));
  io::put_le(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) io::put_f32(out, static_cast<float>(m(r, c)));
  if (!out) throw Error("failed writing VLKD stream");
}

Matrix read_vlkd(std::istream& in) {
  io::ByteReader r(in);
  char magic[4];
  r.read(magic, 4, "header");
  if (std::string_view(magic, 4) != "VLKD") throw FormatError("bad magic", 0);
  const std::uint8_t version = r.u8("header");
  if (version != 1) throw FormatError("unsupported VLKD version " + std::to_string(version), 4);
  const std::uint32_t rows = r.u32("header");
  const std::uint32_t cols = r.u32("header");
  if (static_cast<std::uint64_t>(rows) * cols > (std::uint64_t{1} << 30))
    throw FormatError("implausible matrix shape " + std::to_string(rows) + "x" + std::to_string(cols), 5);
  Matrix m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < cols; ++j) {
      const std::uint64_t at = r.offset();
      const float v = r.f32("payload");
      if (!std::isfinite(v)) throw FormatError("non-finite value in payload", at);
      m(i, j) = v;
    }
  }
  return m;
}

void save_vlkd(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path.string());
  write_vlkd(out, m);
}

Matrix load_vlkd(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open: " + path.string());
  return read_vlkd(in);
}

VideoFeatures load_video_features(const std::filesystem::path& path, int max_frames) {
  VideoFeatures vf;
  vf.frames = load_vlkd(path);
  if (vf.frames.rows() > max_frames) vf.frames.conservativeResize(max_frames, Eigen::NoChange);
  vf.source_id = path.stem().string();
  return vf;
}

void save_video_features(const std::filesystem::path& path, const VideoFeatures& vf) {
  save_vlkd(path, vf.frames);
}

// ---------------------------------------------------------------------------
// Synthetic video-text pairs

int GroundingMap::word_index(std::string_view w) const {
  auto it = std::find(words.begin(), words.end(), w);
  return it == words.end() ? -1 : static_cast<int>(it - words.begin());
}

GroundingMap make_grounding_map(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.num_clusters < 1 || cfg.tokens_per_cluster < 1 || cfg.d_v < 1)
    throw Error("synthetic config needs positive cluster, token and feature counts");
  Rng rng = make_rng(seed, /*stream=*/1);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_v));

  Matrix centers(cfg.num_clusters, cfg.d_v);
  for (Eigen::Index i = 0; i < centers.size(); ++i) centers.data()[i] = normal(rng) * scale;

  GroundingMap g;
  g.num_clusters = cfg.num_clusters;
  const int n_words = cfg.num_clusters * cfg.tokens_per_cluster;
  g.prototypes.resize(n_words, cfg.d_v);
  for (int w = 0; w < n_words; ++w) {
    char name[16];
    std::snprintf(name, sizeof name, "w%03d", w);
    g.words.emplace_back(name);
    const int cluster = w % cfg.num_clusters;
    g.word_cluster.push_back(cluster);
    for (int c = 0; c < cfg.d_v; ++c)
      g.prototypes(w, c) = cfg.center_weight * centers(cluster, c) + normal(rng) * scale;
  }
  return g;
}

std::vector<int> sample_sentence_words(const SynthConfig& cfg, const GroundingMap& g, int cluster,
                                       Rng& rng) {
  std::uniform_int_distribution<int> len_dist(cfg.min_len, cfg.max_len);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> in_cluster(0, cfg.tokens_per_cluster - 1);
  std::uniform_int_distribution<int> any_word(0, static_cast<int>(g.words.size()) - 1);
  const int n = len_dist(rng);
  std::vector<int> words;
  words.reserve(n);
  for (int i = 0; i < n; ++i) {
    if (u01(rng) < cfg.dominant_fraction)
      words.push_back(in_cluster(rng) * g.num_clusters + cluster);
    else
      words.push_back(any_word(rng));
  }
  return words;
}

int dominant_cluster(const GroundingMap& g, const std::vector<int>& words, int preferred) {
  std::vector<int> counts(g.num_clusters, 0);
  for (int w : words) ++counts[g.word_cluster[w]];
  int best = preferred;
  for (int c = 0; c < g.num_clusters; ++c)
    if (counts[c] > counts[best]) best = c;
  return best;
}

std::string words_to_text(const GroundingMap& g, const std::vector<int>& words) {
  std::string out;
  for (int w : words) {
    if (!out.empty()) out += ' ';
    out += g.words[w];
  }
  return out;
}

Vector prototype_mixture(const GroundingMap& g, const std::vector<int>& words) {
  Vector mix = Vector::Zero(g.prototypes.cols());
  for (int w : words) mix += g.prototypes.row(w).transpose();
  return mix / static_cast<double>(words.size());
}

Matrix synthesize_frames(const SynthConfig& cfg, const GroundingMap& g, const std::vector<int>& words,
                         int num_frames, Rng& rng) {
  const int n = static_cast<int>(words.size());
  if (n < 1 || num_frames < 1) throw Error("synthetic video needs at least one token and frame");
  // The cosine modulation sums to zero over tokens (n >= 2) and over frames
  // (F >= 2), so every frame is a convex mixture and the temporal mean is the
  // uniform prototype mixture.
  const double amp = (n >= 2 && num_frames >= 2) ? cfg.frame_modulation : 0.0;
  std::normal_distribution<double> normal(0.0, 1.0);
  const double noise_scale = cfg.noise / std::sqrt(static_cast<double>(cfg.d_v));
  Matrix frames = Matrix::Zero(num_frames, cfg.d_v);
  for (int f = 0; f < num_frames; ++f) {
    for (int i = 0; i < n; ++i) {
      const double phase = 2.0 * std::numbers::pi * (static_cast<double>(f) / num_frames +
                                                      static_cast<double>(i) / n);
      const double w = (1.0 + amp * std::cos(phase)) / n;
      frames.row(f) += w * g.prototypes.row(words[i]);
    }
    if (cfg.noise > 0.0)
      for (int c = 0; c < cfg.d_v; ++c) frames(f, c) += noise_scale * normal(rng);
  }
  return frames;
}

SyntheticDataset gen_synthetic_pairs(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.num_pairs < 2) throw Error("synthetic dataset needs at least 2 pairs for contrastive negatives");
  if (cfg.min_len < 1 || cfg.max_len < cfg.min_len || cfg.max_len > kMaxContentTokens)
    throw Error("invalid sentence length range");
  if (cfg.min_frames < 1 || cfg.max_frames < cfg.min_frames || cfg.max_frames > kMaxFrames)
    throw Error("invalid frame count range");

  SyntheticDataset ds;
  ds.config = cfg;
  ds.grounding = make_grounding_map(cfg, seed);
  Rng rng = make_rng(seed, /*stream=*/2);

  // Round-robin clusters, shuffled, keeps dominant clusters balanced.
  std::vector<int> clusters(cfg.num_pairs);
  for (int i = 0; i < cfg.num_pairs; ++i) clusters[i] = i % cfg.num_clusters;
  std::shuffle(clusters.begin(), clusters.end(), rng);

  std::uniform_int_distribution<int> frame_dist(cfg.min_frames, cfg.max_frames);
  std::vector<std::vector<int>> sentence_words;
  for (int i = 0; i < cfg.num_pairs; ++i) {
    sentence_words.push_back(sample_sentence_words(cfg, ds.grounding, clusters[i], rng));
    ds.sentences.push_back(words_to_text(ds.grounding, sentence_words.back()));
  }

  std::string corpus;
  for (auto& s : ds.sentences) corpus += s + '\n';
  ds.vocab = build_vocab(corpus);

  for (int i = 0; i < cfg.num_pairs; ++i) {
    PairedSample s;
    s.sample_index = i;
    s.cluster = dominant_cluster(ds.grounding, sentence_words[i], clusters[i]);
    s.text = tokenize(ds.sentences[i], ds.vocab);
    s.video.frames = synthesize_frames(cfg, ds.grounding, sentence_words[i], frame_dist(rng), rng);
    char id[16];
    std::snprintf(id, sizeof id, "v%06d", i);
    s.video.source_id = id;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace vlkd
