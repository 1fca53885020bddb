#include "vlkd/run.hpp"

#include "vlkd/hashing.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#ifndef VLKD_GIT_DESCRIBE
#define VLKD_GIT_DESCRIBE "unknown"
#endif

namespace vlkd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void unknown_key(const std::string& section, const std::string& key) {
  throw Error("unknown config key: " + (section.empty() ? key : section + "." + key));
}

/// Parses a section with an existing from_json, qualifying unknown-key errors
/// with the section name.
template <typename T>
void parse_section(const json& j, T& out, const std::string& section) {
  try {
    from_json(j, out);
  } catch (const Error& e) {
    const std::string prefix = "unknown config key: ";
    const std::string msg = e.what();
    if (msg.rfind(prefix, 0) == 0) unknown_key(section, msg.substr(prefix.size()));
    throw;
  }
}

}  // namespace

void to_json(json& j, const SynthConfig& c) {
  j = json{{"num_pairs", c.num_pairs},   {"num_clusters", c.num_clusters},
           {"tokens_per_cluster", c.tokens_per_cluster},
           {"min_len", c.min_len},       {"max_len", c.max_len},
           {"d_v", c.d_v},               {"min_frames", c.min_frames},
           {"max_frames", c.max_frames}, {"noise", c.noise},
           {"dominant_fraction", c.dominant_fraction},
           {"center_weight", c.center_weight},
           {"frame_modulation", c.frame_modulation}};
}

void from_json(const json& j, SynthConfig& c) {
  if (!j.is_object()) throw Error("synth config must be a JSON object");
  for (auto& [key, v] : j.items()) {
    if (key == "num_pairs") v.get_to(c.num_pairs);
    else if (key == "num_clusters") v.get_to(c.num_clusters);
    else if (key == "tokens_per_cluster") v.get_to(c.tokens_per_cluster);
    else if (key == "min_len") v.get_to(c.min_len);
    else if (key == "max_len") v.get_to(c.max_len);
    else if (key == "d_v") v.get_to(c.d_v);
    else if (key == "min_frames") v.get_to(c.min_frames);
    else if (key == "max_frames") v.get_to(c.max_frames);
    else if (key == "noise") v.get_to(c.noise);
    else if (key == "dominant_fraction") v.get_to(c.dominant_fraction);
    else if (key == "center_weight") v.get_to(c.center_weight);
    else if (key == "frame_modulation") v.get_to(c.frame_modulation);
    else throw Error("unknown config key: " + key);
  }
}

RunConfig::RunConfig() {
  teacher.stage = Stage::kTeacher;
  student.stage = Stage::kStudent;
  student.steps = 1000;
  resolve();
}

void RunConfig::resolve() {
  teacher.seed = seed;
  student.seed = seed;
  teacher.stage = Stage::kTeacher;
  student.stage = Stage::kStudent;
}

json run_config_to_json(const RunConfig& c) {
  json synth = c.data.synth;
  synth["heldout_sentences"] = c.data.heldout_sentences;
  synth["probe_train_per_class"] = c.data.probe.train_per_class;
  synth["probe_test_per_class"] = c.data.probe.test_per_class;
  json teacher = c.teacher, student = c.student;
  teacher.erase("seed");
  student.erase("seed");
  teacher.erase("stage");
  student.erase("stage");
  return json{{"seed", c.seed},
              {"synth", synth},
              {"teacher", teacher},
              {"student", student},
              {"eval",
               {{"k", c.eval.k},
                {"include_cls", c.eval.include_cls},
                {"use_head", c.eval.use_head},
                {"probe_steps", c.eval.probe_steps},
                {"probe_lr", c.eval.probe_lr},
                {"gradcheck_instances", c.eval.gradcheck_instances}}}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw Error("run config must be a JSON object");
  RunConfig c;
  try {
    for (auto& [key, v] : j.items()) {
      if (key == "seed") v.get_to(c.seed);
      else if (key == "synth") {
        json rest = v;
        if (!rest.is_object()) throw Error("synth config must be a JSON object");
        if (rest.contains("heldout_sentences")) rest["heldout_sentences"].get_to(c.data.heldout_sentences);
        if (rest.contains("probe_train_per_class")) rest["probe_train_per_class"].get_to(c.data.probe.train_per_class);
        if (rest.contains("probe_test_per_class")) rest["probe_test_per_class"].get_to(c.data.probe.test_per_class);
        rest.erase("heldout_sentences");
        rest.erase("probe_train_per_class");
        rest.erase("probe_test_per_class");
        parse_section(rest, c.data.synth, "synth");
      } else if (key == "teacher" || key == "student") {
        for (const char* fixed : {"seed", "stage"})
          if (v.contains(fixed)) unknown_key(key, fixed);
        parse_section(v, key == "teacher" ? c.teacher : c.student, key);
      } else if (key == "eval") {
        if (!v.is_object()) throw Error("eval config must be a JSON object");
        for (auto& [k, ev] : v.items()) {
          if (k == "k") ev.get_to(c.eval.k);
          else if (k == "include_cls") ev.get_to(c.eval.include_cls);
          else if (k == "use_head") ev.get_to(c.eval.use_head);
          else if (k == "probe_steps") ev.get_to(c.eval.probe_steps);
          else if (k == "probe_lr") ev.get_to(c.eval.probe_lr);
          else if (k == "gradcheck_instances") ev.get_to(c.eval.gradcheck_instances);
          else unknown_key("eval", k);
        }
      } else {
        unknown_key("", key);
      }
    }
  } catch (const json::exception& e) {
    throw Error(std::string("malformed config: ") + e.what());
  }
  c.resolve();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Files

void write_file_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open for writing: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw Error("output path exists and is not a directory: " + dir.string());
    if (!fs::is_empty(dir)) {
      if (!force) throw Error("output directory " + dir.string() + " is not empty (pass --force to overwrite)");
      for (auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    }
  }
  fs::create_directories(dir);
}

json RunManifest::to_json() const {
  json files_json = json::array();
  for (auto& f : files) files_json.push_back({{"path", f.path}, {"bytes", f.bytes}, {"sha256", f.sha256}});
  return json{{"command", command},       {"config", config},           {"seed", seed},
              {"git_describe", git_describe}, {"started_at", started_at}, {"finished_at", finished_at},
              {"files", files_json}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  j.at("command").get_to(m.command);
  m.config = j.at("config");
  j.at("seed").get_to(m.seed);
  j.at("git_describe").get_to(m.git_describe);
  j.at("started_at").get_to(m.started_at);
  j.at("finished_at").get_to(m.finished_at);
  for (auto& f : j.at("files")) m.files.push_back({f.at("path"), f.at("bytes"), f.at("sha256")});
  return m;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string git_describe() { return VLKD_GIT_DESCRIBE; }

void finalize_manifest(RunManifest& manifest, const fs::path& dir) {
  manifest.files.clear();
  std::vector<fs::path> paths;
  for (auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) paths.push_back(entry.path());
  std::vector<std::string> rel;
  for (auto& p : paths) {
    const auto r = fs::relative(p, dir).generic_string();
    if (r != "manifest.json" && !r.ends_with(".tmp")) rel.push_back(r);
  }
  std::sort(rel.begin(), rel.end());
  for (auto& r : rel) manifest.files.push_back({r, fs::file_size(dir / r), sha256_file(dir / r)});
  manifest.finished_at = utc_timestamp();
  write_file_atomic(dir / "manifest.json", manifest.to_json().dump(2) + "\n");
}

std::vector<std::string> verify_manifest(const fs::path& dir) {
  const auto manifest = RunManifest::from_json(json::parse(read_file(dir / "manifest.json")));
  std::vector<std::string> bad;
  for (auto& f : manifest.files) {
    const fs::path p = dir / f.path;
    if (!fs::exists(p) || sha256_file(p) != f.sha256) bad.push_back(f.path);
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Dataset directories

std::vector<std::string> heldout_sentences(const SyntheticDataset& data, int count, std::uint64_t seed) {
  std::set<std::string> seen(data.sentences.begin(), data.sentences.end());
  Rng rng = make_rng(seed, 201);
  std::vector<std::string> out;
  const int clusters = data.grounding.num_clusters;
  for (int attempt = 0; static_cast<int>(out.size()) < count; ++attempt) {
    if (attempt > 1000 * std::max(count, 1)) throw Error("could not draw enough distinct held-out sentences");
    const int cluster = static_cast<int>(out.size()) % clusters;
    auto text = words_to_text(data.grounding, sample_sentence_words(data.config, data.grounding, cluster, rng));
    if (seen.insert(text).second) out.push_back(std::move(text));
  }
  return out;
}

namespace {

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (auto& l : lines) out += l + "\n";
  return out;
}

std::string probe_split_tsv(const std::vector<TokenSequence>& seqs, const std::vector<int>& labels,
                            const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seqs.size(); ++i) out += std::to_string(labels[i]) + "\t" + detokenize(seqs[i], vocab) + "\n";
  return out;
}

std::vector<std::vector<std::string>> read_tsv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  for (auto& line : read_lines(path)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    rows.push_back(std::move(cols));
  }
  return rows;
}

int parse_int(const std::string& s, const fs::path& file) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error("malformed integer '" + s + "' in " + file.string());
  }
}

}  // namespace

void write_dataset(const fs::path& dir, const SyntheticDataset& data, std::uint64_t seed, const DataConfig& cfg) {
  fs::create_directories(dir / "videos");
  write_file_atomic(dir / kCorpusFile, join_lines(data.sentences));

  std::string pairs = "sample_index\tvideo\tcluster\n";
  for (const auto& s : data.samples) {
    const std::string rel = "videos/" + s.video.source_id + ".vlkd";
    save_vlkd(dir / rel, s.video.frames);
    pairs += std::to_string(s.sample_index) + "\t" + rel + "\t" + std::to_string(s.cluster) + "\n";
  }
  write_file_atomic(dir / kPairsFile, pairs);

  json grounding{{"words", data.grounding.words},
                 {"clusters", data.grounding.word_cluster},
                 {"num_clusters", data.grounding.num_clusters},
                 {"prototypes", json::array()}};
  for (Eigen::Index r = 0; r < data.grounding.prototypes.rows(); ++r) {
    std::vector<double> row(data.grounding.prototypes.row(r).begin(), data.grounding.prototypes.row(r).end());
    grounding["prototypes"].push_back(row);
  }
  write_file_atomic(dir / kGroundingFile, grounding.dump() + "\n");

  write_file_atomic(dir / kHeldoutFile, join_lines(heldout_sentences(data, cfg.heldout_sentences, seed)));

  const ProbeTask probe = make_probe_task(data, seed, cfg.probe);
  write_file_atomic(dir / kProbeTrainFile, probe_split_tsv(probe.train, probe.train_labels, data.vocab));
  write_file_atomic(dir / kProbeTestFile, probe_split_tsv(probe.test, probe.test_labels, data.vocab));
}

void LoadedDataset::retokenize(const Vocabulary& v) {
  vocab = v;
  for (auto& s : samples) s.text = tokenize(sentences[static_cast<std::size_t>(s.sample_index)], vocab);
}

LoadedDataset load_dataset(const fs::path& dir) {
  const fs::path pairs_path = dir / kPairsFile;
  if (!fs::exists(pairs_path)) throw Error("missing pairing index: " + pairs_path.string());
  LoadedDataset out;
  out.sentences = read_lines(dir / kCorpusFile);
  out.vocab = build_vocab(join_lines(out.sentences));

  const auto rows = read_tsv(pairs_path);
  if (rows.empty() || rows.front().size() != 3 || rows.front()[0] != "sample_index")
    throw Error("pairing index has no header: " + pairs_path.string());
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != 3) throw Error("pairing index row " + std::to_string(r) + " does not have 3 columns");
    PairedSample s;
    s.sample_index = parse_int(row[0], pairs_path);
    if (s.sample_index < 0 || s.sample_index >= static_cast<int>(out.sentences.size()))
      throw Error("pairing index refers to missing corpus line " + row[0]);
    s.video = load_video_features(dir / row[1]);
    s.video.source_id = fs::path(row[1]).stem().string();
    s.cluster = parse_int(row[2], pairs_path);
    s.text = tokenize(out.sentences[static_cast<std::size_t>(s.sample_index)], out.vocab);
    out.num_clusters = std::max(out.num_clusters, s.cluster + 1);
    out.samples.push_back(std::move(s));
  }
  if (fs::exists(dir / kHeldoutFile)) out.heldout = read_lines(dir / kHeldoutFile);
  return out;
}

std::vector<TokenSequence> tokenize_all(const std::vector<std::string>& lines, const Vocabulary& vocab) {
  std::vector<TokenSequence> out;
  for (auto& l : lines)
    if (!l.empty()) out.push_back(tokenize(l, vocab));
  return out;
}

ProbeTask load_probe_task(const fs::path& dir, const Vocabulary& vocab) {
  ProbeTask task;
  int max_label = -1;
  for (auto [file, seqs, labels] : {std::tuple{kProbeTrainFile, &task.train, &task.train_labels},
                                    std::tuple{kProbeTestFile, &task.test, &task.test_labels}}) {
    const fs::path path = dir / file;
    if (!fs::exists(path)) throw Error("missing probe split: " + path.string());
    for (auto& row : read_tsv(path)) {
      if (row.size() != 2) throw Error("probe split rows need 2 columns: " + path.string());
      const int y = parse_int(row[0], path);
      max_label = std::max(max_label, y);
      labels->push_back(y);
      seqs->push_back(tokenize(row[1], vocab));
    }
  }
  task.num_classes = max_label + 1;
  task.validate();
  return task;
}

}  // namespace vlkd
