#pragma once

#include "vlkd/corpus.hpp"
#include "vlkd/eval.hpp"
#include "vlkd/trainer.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vlkd {

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// Everything gen-synth needs: the generator plus the held-out text and the
/// probe task drawn alongside it.
struct DataConfig {
  SynthConfig synth;
  int heldout_sentences = 64;
  ProbeTaskOptions probe;
};

struct EvalConfig {
  int k = 3;
  bool include_cls = false;
  bool use_head = true;
  int probe_steps = 500;
  double probe_lr = 0.1;
  int gradcheck_instances = 20;
};

/// One experiment. The top-level seed is the only seed: it overrides the
/// "seed" of both training sections.
struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  TrainRunConfig teacher;
  TrainRunConfig student;
  EvalConfig eval;

  RunConfig();
  /// Pushes the top-level seed into the sections and fixes their stages.
  void resolve();
};

/// JSON layout: {"seed", "synth", "teacher", "student", "eval"}. Unknown keys at
/// any level throw "unknown config key: <section>.<key>".
nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// --- files -----------------------------------------------------------------

/// Writes through a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// Creates `dir`. An existing non-empty directory is an error unless `force`,
/// in which case its contents are removed first.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

struct ManifestEntry {
  std::string path;  // relative to the run directory, '/'-separated
  std::uintmax_t bytes = 0;
  std::string sha256;
};

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::string git_describe;
  std::string started_at;
  std::string finished_at;
  std::vector<ManifestEntry> files;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

std::string utc_timestamp();
std::string git_describe();

/// Hashes every file under `dir` (except manifest.json), stamps finished_at and
/// writes manifest.json atomically.
void finalize_manifest(RunManifest& manifest, const std::filesystem::path& dir);

/// Relative paths whose content no longer matches the manifest (missing files
/// included).
std::vector<std::string> verify_manifest(const std::filesystem::path& dir);

// --- dataset directories ---------------------------------------------------

inline constexpr const char* kPairsFile = "pairs.tsv";
inline constexpr const char* kCorpusFile = "corpus.txt";
inline constexpr const char* kHeldoutFile = "heldout.txt";
inline constexpr const char* kGroundingFile = "grounding.json";
inline constexpr const char* kProbeTrainFile = "probe_train.tsv";
inline constexpr const char* kProbeTestFile = "probe_test.tsv";

/// Held-out sentences drawn from the grounding map, none of them in the corpus.
std::vector<std::string> heldout_sentences(const SyntheticDataset& data, int count, std::uint64_t seed);

/// corpus.txt, videos/*.vlkd, pairs.tsv, grounding.json, heldout.txt and the
/// probe split files.
void write_dataset(const std::filesystem::path& dir, const SyntheticDataset& data, std::uint64_t seed,
                   const DataConfig& cfg);

struct LoadedDataset {
  std::vector<std::string> sentences;
  Vocabulary vocab;  // built from the corpus
  std::vector<PairedSample> samples;
  std::vector<std::string> heldout;
  int num_clusters = 0;

  /// Re-tokenizes every paired text with `v`.
  void retokenize(const Vocabulary& v);
};

/// Reads a gen-synth directory. A missing pairing index is an error.
LoadedDataset load_dataset(const std::filesystem::path& dir);

std::vector<TokenSequence> tokenize_all(const std::vector<std::string>& lines, const Vocabulary& vocab);

/// Probe task stored in a dataset directory, tokenized with `vocab`.
ProbeTask load_probe_task(const std::filesystem::path& dir, const Vocabulary& vocab);

}  // namespace vlkd
