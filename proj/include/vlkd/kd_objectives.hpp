#pragma once

#include "vlkd/common.hpp"
#include "vlkd/teacher_objectives.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace vlkd {

enum class KDObjective { kSoftLabel, kL2Regression, kNst, kCrd, kVoken };

std::string to_string(KDObjective o);
KDObjective parse_kd_objective(const std::string& name);

enum class CrdTeacherInput { kSameMasked, kUnmasked };

struct KDConfig {
  std::set<KDObjective> objectives{KDObjective::kNst, KDObjective::kCrd};
  std::map<KDObjective, double> weights;  // missing entries weigh 1.0
  double tau = 2.0;
  double sigma = 1.0;
  bool nst_normalize = true;
  int negatives = 0;     // N; 0 means "batch size"
  int dataset_size = 0;  // M; filled in from the training set
  int d_proj = 0;        // 0 means max(16, d / 4)
  double crd_momentum = 0.0;
  double crd_temperature = 1.0;  // divides f1(s)^T f2(t); 1.0 leaves the critic untouched
  CrdTeacherInput crd_teacher_input = CrdTeacherInput::kSameMasked;
  Reduction reduction = Reduction::kMean;
  int voken_bank_size = 64;  // K
  std::string voken_bank;    // "" none, "auto" build from teacher, else a path prefix

  double weight(KDObjective o) const;
  bool enabled(KDObjective o) const { return objectives.contains(o); }
  int resolved_d_proj(int d_hidden) const;
  /// Checks tau, sigma, 1 <= N < M and K >= 2 for the enabled objectives.
  void validate(int batch_size) const;
};

void to_json(nlohmann::json& j, const KDConfig& c);
/// Closed-world: unknown keys throw with the key name.
void from_json(const nlohmann::json& j, KDConfig& c);

// --- soft label ------------------------------------------------------------

struct SoftLabelLoss {
  double value = 0.0;
  Matrix d_student_logits;
};

/// Cross-entropy between softmax(teacher / tau) and softmax(student / tau),
/// averaged (or summed) over rows.
SoftLabelLoss soft_label_loss(const Matrix& teacher_logits, const Matrix& student_logits, double tau,
                              Reduction reduction = Reduction::kMean);

/// Mean row entropy of softmax(logits / tau).
double softmax_entropy(const Matrix& logits, double tau);

// --- L2 regression ---------------------------------------------------------

struct RegressionLoss {
  double value = 0.0;
  Matrix d_s;
};

RegressionLoss l2_regression_loss(const Matrix& s, const Matrix& t, Reduction reduction = Reduction::kMean);

// --- NST -------------------------------------------------------------------

double gaussian_kernel(const Vector& a, const Vector& b, double sigma);

struct NstLoss {
  double value = 0.0;
  Matrix d_s;
};

/// Squared MMD between the d student neuron columns and d teacher neuron
/// columns (each a |x|-vector of activations across positions).
NstLoss nst_mmd2(const Matrix& s, const Matrix& t, double sigma, bool normalize);

// --- CRD -------------------------------------------------------------------

/// f1 (student side) and f2 (teacher side): linear maps followed by L2
/// normalization. Used for parameters and their gradients.
struct CrdProjections {
  Matrix f1_w, f1_b, f2_w, f2_b;

  std::vector<std::pair<std::string, Matrix*>> named();
  std::vector<std::pair<std::string, const Matrix*>> named() const;
  CrdProjections zeros_like() const;
};

struct CRDState {
  CrdProjections proj;
  Matrix buffer;  // M x d_proj, unit rows, keyed by sample index
  double momentum = 0.0;

  int dataset_size() const { return static_cast<int>(buffer.rows()); }
};

CRDState init_crd_state(int d_student, int d_teacher, int d_proj, int dataset_size, double momentum, Rng& rng);

/// Normalized projection rows: normalize(x * W + b).
Matrix crd_project(const Matrix& x, const Matrix& w, const Matrix& b);

struct CrdLoss {
  double value = 0.0;
  Matrix d_s;
  CrdProjections d_proj;
};

/// Per position: -log h(s, t) - sum_n log(1 - h(s, buffer[n])), with
/// h = e^z / (e^z + N / M), z = f1(s)^T f2(t) / temperature.
CrdLoss crd_loss(const Matrix& s, const Matrix& t, std::span<const int> negatives, int own_index,
                 const CRDState& state, double temperature = 1.0, Reduction reduction = Reduction::kMean);

/// The critic h(s, t) for a given inner product and N / M ratio.
double crd_critic(double z, double n_over_m);

/// N distinct buffer rows, uniform without replacement, excluding own_index.
std::vector<int> sample_crd_negatives(Rng& rng, int dataset_size, int n, int own_index);

/// Replaces (momentum 0) or blends the stored row with normalize(f2(t)).
void crd_buffer_update(CRDState& state, int sample_index, const Vector& t_vector);

// --- vokens ----------------------------------------------------------------

struct VokenBank {
  Matrix rows;  // K x d pooled video representations
  std::vector<std::string> ids;

  int size() const { return static_cast<int>(rows.rows()); }
  void validate() const;
};

/// One video per task cluster first, then the remainder uniformly at random
/// without replacement.
VokenBank select_voken_bank(const Matrix& pooled, const std::vector<std::string>& ids,
                            const std::vector<int>& clusters, int k, Rng& rng);

void save_voken_bank(const std::filesystem::path& prefix, const VokenBank& bank);
VokenBank load_voken_bank(const std::filesystem::path& prefix);

/// Per row of t: argmax over bank rows of cosine similarity, lowest id on ties.
std::vector<int> assign_vokens(const Matrix& t, const VokenBank& bank);

CrossEntropy voken_loss(const Matrix& student_voken_logits, std::span<const int> assignment,
                        Reduction reduction = Reduction::kMean);

// --- combination -----------------------------------------------------------

/// mlm + sum over enabled objectives of weight * loss.
double combined_student_loss(double mlm, const std::map<KDObjective, double>& kd_values, const KDConfig& cfg);

}  // namespace vlkd
