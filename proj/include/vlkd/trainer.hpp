#pragma once

#include "vlkd/checkpoint.hpp"
#include "vlkd/corpus.hpp"
#include "vlkd/encoder.hpp"
#include "vlkd/kd_objectives.hpp"
#include "vlkd/optim.hpp"
#include "vlkd/teacher_objectives.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vlkd {

enum class Stage { kTeacher, kStudent };

struct OptimConfig {
  AdamWOptions adamw;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int warmup_steps = 0;    // linear warmup, then constant

  double lr_at(long step) const;
};

struct TrainRunConfig {
  std::uint64_t seed = 0;
  int batch_size = 16;
  long steps = 200;
  Stage stage = Stage::kTeacher;
  std::string preset = "toy-2L-64H";
  OptimConfig optim;
  MaskingOptions masking;
  // Teacher stage
  TeacherLossWeights teacher_weights;
  double alpha = 1.0;
  // Student stage
  KDConfig kd;
  bool distill_head = true;
  int eval_every = 0;
  int threads = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainRunConfig& c);
/// Closed-world: unknown keys throw with the key name.
void from_json(const nlohmann::json& j, TrainRunConfig& c);

struct TeacherModel {
  Vocabulary vocab;
  EncoderModel text;
  EncoderModel video;
};

struct StudentModel {
  Vocabulary vocab;
  EncoderModel text;
  std::optional<CRDState> crd;
};

struct TeacherState {
  TeacherModel model;
  OptimState optim;
  long step = 0;
};

struct StudentState {
  StudentModel model;
  OptimState optim;
  long step = 0;
};

struct StepRecord {
  long step = 0;
  Stage stage = Stage::kTeacher;
  std::map<std::string, double> losses;
  double lr = 0.0;
  std::uint64_t seed = 0;

  /// {"step", "stage", "losses", "lr", "seed"} on one line.
  std::string to_json_line() const;
};

using StepLogger = std::function<void(const StepRecord&)>;

/// Raised when a loss turns non-finite. The state passed to the trainer still
/// holds the last good parameters.
class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

/// Fixed-seed batch for a global step: epoch-wise permutation of [0, M),
/// consecutive slices, final partial batch dropped when it has < 2 samples.
std::vector<int> batch_indices(int dataset_size, int batch_size, std::uint64_t seed, long step);

TeacherState init_teacher(const TrainRunConfig& cfg, const Vocabulary& vocab, int d_v);

/// Runs steps [state.step, cfg.steps) minimizing w_ct * L_CT + w_mlm * L_MLM.
void train_teacher(const TrainRunConfig& cfg, const std::vector<PairedSample>& data, TeacherState& state,
                   const StepLogger& log = {});

/// Fresh student sharing the teacher's vocabulary and shape. `dataset_size`
/// sizes the CRD memory buffer.
StudentState init_student(const TrainRunConfig& cfg, const Vocabulary& vocab, int d_teacher, int dataset_size);

/// Runs steps [state.step, cfg.steps). With `teacher` null (or no KD
/// objectives) this is plain MLM pretraining. The teacher is read-only.
void distill_student(const TrainRunConfig& cfg, const TeacherModel* teacher, const std::vector<TokenSequence>& texts,
                     StudentState& state, const VokenBank* bank = nullptr, const StepLogger& log = {});

/// Voken bank from the teacher's pooled video representations.
VokenBank build_voken_bank(const TeacherModel& teacher, const std::vector<PairedSample>& data, int k,
                           std::uint64_t seed);

// Checkpoint mapping. Optimizer moments live under "optim.m." / "optim.v.".
Checkpoint teacher_checkpoint(const TeacherState& state, const TrainRunConfig& cfg);
TeacherState teacher_from_checkpoint(const Checkpoint& ck);
Checkpoint student_checkpoint(const StudentState& state, const TrainRunConfig& cfg);
StudentState student_from_checkpoint(const Checkpoint& ck);

void save_checkpoint(const TeacherState& state, const TrainRunConfig& cfg, const std::filesystem::path& path);
void save_checkpoint(const StudentState& state, const TrainRunConfig& cfg, const std::filesystem::path& path);

/// "teacher" or "student", from the checkpoint's config blob.
std::string checkpoint_kind(const Checkpoint& ck);

void put_encoder(Checkpoint& ck, const std::string& prefix, const EncoderModel& model);
EncoderModel get_encoder(const Checkpoint& ck, const std::string& prefix, const EncoderConfig& config);

/// SHA-256 over every parameter tensor of the model, in name order.
std::string parameter_hash(const EncoderModel& model);

/// Text encoder config for the given run and vocabulary.
EncoderConfig text_encoder_config(const TrainRunConfig& cfg, int vocab_size);

}  // namespace vlkd
