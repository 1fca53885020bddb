// vlkd: synthetic data generation, teacher pretraining, distillation and
// evaluation from the command line.

#include "vlkd/eval.hpp"
#include "vlkd/gradcheck.hpp"
#include "vlkd/run.hpp"
#include "vlkd/trainer.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vlkd;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::optional<long> steps;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool out_required) {
  cmd->add_option("--config", f.config, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "overrides the config seed");
  auto* out = cmd->add_option("--out", f.out, "run output directory");
  if (out_required) out->required();
  cmd->add_flag("--force", f.force, "overwrite a non-empty output directory");
  cmd->add_option("--steps", f.steps, "overrides the stage's step count");
}

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (f.seed) cfg.seed = *f.seed;
  cfg.resolve();
  if (const char* env = std::getenv("VLKD_THREADS")) {
    const int cap = std::max(1, std::atoi(env));
    cfg.teacher.threads = std::min(cfg.teacher.threads, cap);
    cfg.student.threads = std::min(cfg.student.threads, cap);
  }
  return cfg;
}

RunManifest start_manifest(const std::string& command, const RunConfig& cfg) {
  RunManifest m;
  m.command = command;
  m.config = run_config_to_json(cfg);
  m.seed = cfg.seed;
  m.git_describe = git_describe();
  m.started_at = utc_timestamp();
  return m;
}

void write_config_snapshot(const fs::path& dir, const RunConfig& cfg) {
  write_file_atomic(dir / "config.json", run_config_to_json(cfg).dump(2) + "\n");
}

/// Appends one JSON line per step and flushes, so a crashed run keeps its log.
StepLogger file_logger(std::ofstream& out) {
  return [&out](const StepRecord& r) { out << r.to_json_line() << '\n' << std::flush; };
}

int cmd_gen_synth(const CommonFlags& f) {
  RunConfig cfg = resolve_config(f);
  prepare_output_dir(f.out, f.force);
  RunManifest manifest = start_manifest("gen-synth", cfg);
  const SyntheticDataset data = gen_synthetic_pairs(cfg.data.synth, cfg.seed);
  write_dataset(f.out, data, cfg.seed, cfg.data);
  write_config_snapshot(f.out, cfg);
  finalize_manifest(manifest, f.out);
  std::cout << "wrote " << data.samples.size() << " pairs to " << f.out << "\n";
  return 0;
}

int cmd_train_teacher(const CommonFlags& f, const std::string& data_dir, const std::string& resume) {
  RunConfig cfg = resolve_config(f);
  if (f.steps) cfg.teacher.steps = *f.steps;
  cfg.teacher.validate();
  LoadedDataset data = load_dataset(data_dir);
  if (data.samples.empty()) throw Error("dataset has no paired samples");

  TeacherState state;
  if (!resume.empty()) {
    state = teacher_from_checkpoint(Checkpoint::load(resume));
    data.retokenize(state.model.vocab);
  } else {
    state = init_teacher(cfg.teacher, data.vocab, static_cast<int>(data.samples.front().video.frames.cols()));
  }

  prepare_output_dir(f.out, f.force);
  RunManifest manifest = start_manifest("train-teacher", cfg);
  write_config_snapshot(f.out, cfg);
  const fs::path ckpt = fs::path(f.out) / "checkpoint.vlkc";
  std::ofstream log(fs::path(f.out) / "steps.jsonl");
  int code = 0;
  try {
    train_teacher(cfg.teacher, data.samples, state, file_logger(log));
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "; saving last good state at step " << state.step << "\n";
    code = 2;
  }
  log.close();
  save_checkpoint(state, cfg.teacher, ckpt);
  finalize_manifest(manifest, f.out);
  if (code == 0) std::cout << "teacher trained for " << state.step << " steps -> " << ckpt.string() << "\n";
  return code;
}

int cmd_distill(const CommonFlags& f, const std::string& teacher_path, const std::string& data_dir,
                const std::optional<std::string>& kd, const std::string& resume) {
  RunConfig cfg = resolve_config(f);
  if (f.steps) cfg.student.steps = *f.steps;
  if (kd) {
    cfg.student.kd.objectives.clear();
    if (*kd != "none") {
      std::string list = *kd;
      std::size_t start = 0;
      for (;;) {
        const auto comma = list.find(',', start);
        cfg.student.kd.objectives.insert(parse_kd_objective(list.substr(start, comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
    }
  }
  cfg.student.validate();

  const TeacherState teacher = teacher_from_checkpoint(Checkpoint::load(teacher_path));
  LoadedDataset data = load_dataset(data_dir);
  data.retokenize(teacher.model.vocab);
  const auto texts = tokenize_all(data.sentences, teacher.model.vocab);

  // Voken KD needs its bank before anything else happens.
  std::optional<VokenBank> bank;
  auto& kdc = cfg.student.kd;
  if (kdc.enabled(KDObjective::kVoken)) {
    if (kdc.voken_bank.empty()) throw Error("voken KD enabled but no voken bank configured");
    if (kdc.voken_bank != "auto") bank = load_voken_bank(kdc.voken_bank);
  }
  kdc.dataset_size = static_cast<int>(texts.size());
  kdc.validate(cfg.student.batch_size);

  prepare_output_dir(f.out, f.force);
  RunManifest manifest = start_manifest("distill", cfg);
  write_config_snapshot(f.out, cfg);
  if (kdc.enabled(KDObjective::kVoken) && !bank) {
    bank = build_voken_bank(teacher.model, data.samples, kdc.voken_bank_size, cfg.seed);
    save_voken_bank(fs::path(f.out) / "voken_bank", *bank);
  }

  StudentState state =
      resume.empty()
          ? init_student(cfg.student, teacher.model.vocab, teacher.model.text.config.d_hidden,
                         static_cast<int>(texts.size()))
          : student_from_checkpoint(Checkpoint::load(resume));
  const std::string hash_before = parameter_hash(teacher.model.text);
  std::ofstream log(fs::path(f.out) / "steps.jsonl");
  int code = 0;
  try {
    distill_student(cfg.student, &teacher.model, texts, state, bank ? &*bank : nullptr, file_logger(log));
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "; saving last good state at step " << state.step << "\n";
    code = 2;
  }
  log.close();
  const std::string hash_after = parameter_hash(teacher.model.text);
  save_checkpoint(state, cfg.student, fs::path(f.out) / "checkpoint.vlkc");
  write_file_atomic(fs::path(f.out) / "teacher_hash.json",
                    json{{"before", hash_before}, {"after", hash_after}}.dump(2) + "\n");
  finalize_manifest(manifest, f.out);
  if (hash_before != hash_after) {
    std::cerr << "error: teacher parameters changed during distillation\n";
    return 3;
  }
  if (code == 0) std::cout << "student distilled for " << state.step << " steps\n";
  return code;
}

struct LoadedModels {
  EncoderModel text;
  std::optional<EncoderModel> video;
  std::optional<EncoderModel> teacher_text;
  Vocabulary vocab;
};

LoadedModels load_models(const std::string& student_path, const std::string& teacher_path) {
  LoadedModels m;
  const Checkpoint ck = Checkpoint::load(student_path);
  std::optional<TeacherState> teacher;
  if (!teacher_path.empty()) teacher = teacher_from_checkpoint(Checkpoint::load(teacher_path));
  if (checkpoint_kind(ck) == "teacher") {
    auto t = teacher_from_checkpoint(ck);
    m.text = t.model.text;
    m.video = t.model.video;
    m.vocab = t.model.vocab;
  } else {
    auto s = student_from_checkpoint(ck);
    m.text = s.model.text;
    m.vocab = s.model.vocab;
    if (teacher) m.video = teacher->model.video;
  }
  if (teacher) m.teacher_text = teacher->model.text;
  return m;
}

int cmd_eval(const CommonFlags& f, const std::string& student_path, const std::string& teacher_path,
             const std::string& data_dir, const std::string& mode, std::optional<int> k) {
  RunConfig cfg = resolve_config(f);
  if (k) cfg.eval.k = *k;
  std::optional<RunManifest> manifest;
  if (!f.out.empty()) {
    prepare_output_dir(f.out, f.force);
    manifest = start_manifest("eval " + mode, cfg);
    write_config_snapshot(f.out, cfg);
  }
  const fs::path out = f.out;
  int code = 0;

  if (mode == "gradcheck") {
    GradcheckOptions opts;
    opts.seed = cfg.seed;
    opts.instances = cfg.eval.gradcheck_instances;
    json report = json::array();
    for (const auto& r : run_gradcheck_suite(opts)) {
      std::cout << r.loss << " max_rel_err=" << r.max_rel_err << " instances=" << r.instances
                << " skipped=" << r.skipped << "\n";
      report.push_back({{"loss", r.loss}, {"max_rel_err", r.max_rel_err}, {"instances", r.instances},
                        {"skipped", r.skipped}});
      if (!(r.max_rel_err < 1e-4)) code = 1;
    }
    if (manifest) write_file_atomic(out / "gradcheck.json", report.dump(2) + "\n");
  } else {
    if (student_path.empty()) throw Error("--student is required for mode " + mode);
    if (data_dir.empty()) throw Error("--data is required for mode " + mode);
    LoadedModels models = load_models(student_path, teacher_path);
    if (mode == "retrieval") {
      if (!models.video) throw Error("retrieval of a student needs --teacher for the video encoder");
      LoadedDataset data = load_dataset(data_dir);
      data.retokenize(models.vocab);
      const auto summary = evaluate_retrieval(models.text, *models.video, data.samples, cfg.eval.k);
      std::string lines;
      for (auto& r : summary.results) lines += r.to_json().dump() + "\n";
      if (manifest) write_file_atomic(out / "retrieval.jsonl", lines);
      std::cout << "recall@1=" << summary.recall_at_1 << " recall@" << summary.k << "=" << summary.recall_at_k
                << " queries=" << summary.results.size() << "\n";
    } else if (mode == "probe") {
      const ProbeTask task = load_probe_task(data_dir, models.vocab);
      ProbeOptions opts;
      opts.steps = cfg.eval.probe_steps;
      opts.lr = cfg.eval.probe_lr;
      opts.include_cls = cfg.eval.include_cls;
      const double acc = probe_eval(models.text, task, opts);
      if (manifest)
        write_file_atomic(out / "probe.json",
                          json{{"task", task.name}, {"accuracy", acc}, {"seed", cfg.seed}}.dump(2) + "\n");
      std::cout << "probe accuracy=" << acc << "\n";
    } else if (mode == "agreement") {
      if (!models.teacher_text) throw Error("agreement needs --teacher");
      LoadedDataset data = load_dataset(data_dir);
      const auto texts = tokenize_all(data.heldout.empty() ? data.sentences : data.heldout, models.vocab);
      const Agreement a = agreement_metrics(models.text, *models.teacher_text, texts, cfg.eval.use_head);
      if (manifest)
        write_file_atomic(out / "agreement.json", json{{"mean_token_l2", a.mean_l2},
                                                       {"mean_token_cosine", a.mean_cosine},
                                                       {"positions", a.positions}}
                                                          .dump(2) + "\n");
      std::cout << "mean_token_l2=" << a.mean_l2 << " mean_token_cosine=" << a.mean_cosine << "\n";
    } else {
      throw Error("unknown eval mode: " + mode);
    }
  }
  if (manifest) finalize_manifest(*manifest, out);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video-language knowledge distillation toolkit"};
  app.require_subcommand(1);

  CommonFlags gen_flags, teacher_flags, distill_flags, eval_flags;
  std::string data_dir, teacher_path, student_path, mode, resume;
  std::optional<std::string> kd;
  std::optional<int> k;

  auto* gen = app.add_subcommand("gen-synth", "generate a synthetic paired corpus");
  add_common(gen, gen_flags, true);

  auto* train = app.add_subcommand("train-teacher", "pretrain the video-language teacher");
  add_common(train, teacher_flags, true);
  train->add_option("--data", data_dir, "gen-synth directory")->required();
  train->add_option("--resume", resume, "continue from a teacher checkpoint");

  auto* distill = app.add_subcommand("distill", "distill a text-only student from a frozen teacher");
  add_common(distill, distill_flags, true);
  distill->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  distill->add_option("--data", data_dir, "gen-synth directory")->required();
  distill->add_option("--kd", kd, "comma-separated KD objectives, or 'none'");
  distill->add_option("--resume", resume, "continue from a student checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate checkpoints");
  add_common(eval, eval_flags, false);
  eval->add_option("--student", student_path, "student (or teacher) checkpoint");
  eval->add_option("--teacher", teacher_path, "teacher checkpoint");
  eval->add_option("--data", data_dir, "gen-synth directory");
  eval->add_option("--mode", mode, "retrieval | probe | agreement | gradcheck")
      ->required()
      ->check(CLI::IsMember({"retrieval", "probe", "agreement", "gradcheck"}));
  eval->add_option("--k", k, "retrieval depth");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_synth(gen_flags);
    if (*train) return cmd_train_teacher(teacher_flags, data_dir, resume);
    if (*distill) return cmd_distill(distill_flags, teacher_path, data_dir, kd, resume);
    if (*eval) return cmd_eval(eval_flags, student_path, teacher_path, data_dir, mode, k);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
