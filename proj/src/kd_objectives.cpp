#include "vlkd/kd_objectives.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace vlkd {

namespace {

const std::pair<KDObjective, const char*> kObjectiveNames[] = {{KDObjective::kSoftLabel, "soft_label"},
                                                               {KDObjective::kL2Regression, "l2_regression"},
                                                               {KDObjective::kNst, "nst"},
                                                               {KDObjective::kCrd, "crd"},
                                                               {KDObjective::kVoken, "voken"}};

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Rows of `raw` divided by their norms; `norms` receives the norms.
Matrix normalize_rows(const Matrix& raw, Vector& norms) {
  norms = raw.rowwise().norm();
  Matrix out(raw.rows(), raw.cols());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    if (norms(r) == 0.0) throw Error("degenerate embedding");
    out.row(r) = raw.row(r) / norms(r);
  }
  return out;
}

// Backward of row normalization: (I - u u^T) g / |raw|.
Matrix normalize_rows_backward(const Matrix& unit, const Vector& norms, const Matrix& d_unit) {
  Matrix d_raw(unit.rows(), unit.cols());
  for (Eigen::Index r = 0; r < unit.rows(); ++r) {
    const double proj = unit.row(r).dot(d_unit.row(r));
    d_raw.row(r) = (d_unit.row(r) - proj * unit.row(r)) / norms(r);
  }
  return d_raw;
}

double reduction_scale(Reduction r, Eigen::Index rows) {
  return r == Reduction::kMean ? 1.0 / static_cast<double>(rows) : 1.0;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
}

}  // namespace

std::string to_string(KDObjective o) {
  for (auto& [obj, name] : kObjectiveNames)
    if (obj == o) return name;
  return "unknown";
}

KDObjective parse_kd_objective(const std::string& name) {
  for (auto& [obj, n] : kObjectiveNames)
    if (name == n) return obj;
  throw Error("unknown KD objective: " + name);
}

double KDConfig::weight(KDObjective o) const {
  auto it = weights.find(o);
  return it == weights.end() ? 1.0 : it->second;
}

int KDConfig::resolved_d_proj(int d_hidden) const { return d_proj > 0 ? d_proj : std::max(16, d_hidden / 4); }

void KDConfig::validate(int batch_size) const {
  if (!(tau > 0.0)) throw Error("KD config: tau must be positive");
  if (!(sigma > 0.0)) throw Error("KD config: sigma must be positive");
  if (!(crd_temperature > 0.0)) throw Error("KD config: crd_temperature must be positive");
  if (crd_momentum < 0.0 || crd_momentum >= 1.0) throw Error("KD config: crd_momentum must lie in [0, 1)");
  if (enabled(KDObjective::kCrd)) {
    const int n = negatives > 0 ? negatives : batch_size;
    if (n < 1) throw Error("KD config: CRD needs at least one negative");
    if (n >= dataset_size) throw Error("insufficient negatives");
  }
  if (enabled(KDObjective::kVoken)) {
    if (voken_bank_size < 2) throw Error("KD config: voken bank needs K >= 2");
    if (voken_bank.empty()) throw Error("voken KD enabled but no voken bank configured");
  }
}

void to_json(nlohmann::json& j, const KDConfig& c) {
  nlohmann::json objectives = nlohmann::json::array();
  for (auto o : c.objectives) objectives.push_back(to_string(o));
  nlohmann::json weights = nlohmann::json::object();
  for (auto& [o, w] : c.weights) weights[to_string(o)] = w;
  j = nlohmann::json{{"objectives", objectives},
                     {"weights", weights},
                     {"tau", c.tau},
                     {"sigma", c.sigma},
                     {"nst_normalize", c.nst_normalize},
                     {"negatives", c.negatives},
                     {"d_proj", c.d_proj},
                     {"crd_momentum", c.crd_momentum},
                     {"crd_temperature", c.crd_temperature},
                     {"crd_teacher_input", c.crd_teacher_input == CrdTeacherInput::kSameMasked ? "same" : "unmasked"},
                     {"reduction", c.reduction == Reduction::kMean ? "mean" : "sum"},
                     {"voken_bank_size", c.voken_bank_size},
                     {"voken_bank", c.voken_bank}};
}

void from_json(const nlohmann::json& j, KDConfig& c) {
  for (auto& [key, value] : j.items()) {
    if (key == "objectives") {
      c.objectives.clear();
      for (auto& name : value) c.objectives.insert(parse_kd_objective(name.get<std::string>()));
    } else if (key == "weights") {
      c.weights.clear();
      for (auto& [name, w] : value.items()) c.weights[parse_kd_objective(name)] = w.get<double>();
    } else if (key == "tau") {
      value.get_to(c.tau);
    } else if (key == "sigma") {
      value.get_to(c.sigma);
    } else if (key == "nst_normalize") {
      value.get_to(c.nst_normalize);
    } else if (key == "negatives") {
      value.get_to(c.negatives);
    } else if (key == "dataset_size") {
      value.get_to(c.dataset_size);
    } else if (key == "d_proj") {
      value.get_to(c.d_proj);
    } else if (key == "crd_momentum") {
      value.get_to(c.crd_momentum);
    } else if (key == "crd_temperature") {
      value.get_to(c.crd_temperature);
    } else if (key == "crd_teacher_input") {
      const auto s = value.get<std::string>();
      if (s == "same") c.crd_teacher_input = CrdTeacherInput::kSameMasked;
      else if (s == "unmasked") c.crd_teacher_input = CrdTeacherInput::kUnmasked;
      else throw Error("kd.crd_teacher_input must be \"same\" or \"unmasked\"");
    } else if (key == "reduction") {
      const auto s = value.get<std::string>();
      if (s == "mean") c.reduction = Reduction::kMean;
      else if (s == "sum") c.reduction = Reduction::kSum;
      else throw Error("kd.reduction must be \"mean\" or \"sum\"");
    } else if (key == "voken_bank_size") {
      value.get_to(c.voken_bank_size);
    } else if (key == "voken_bank") {
      value.get_to(c.voken_bank);
    } else {
      throw Error("unknown config key: kd." + key);
    }
  }
}

// ---------------------------------------------------------------------------

SoftLabelLoss soft_label_loss(const Matrix& teacher_logits, const Matrix& student_logits, double tau,
                              Reduction reduction) {
  require_same_shape(teacher_logits, student_logits, "soft_label_loss");
  if (!(tau > 0.0)) throw Error("soft_label_loss: tau must be positive");
  if (teacher_logits.rows() < 1) throw Error("soft_label_loss over zero positions");
  const Matrix p = log_softmax_rows(teacher_logits / tau).array().exp();
  const Matrix log_q = log_softmax_rows(student_logits / tau);
  const double scale = reduction_scale(reduction, teacher_logits.rows());
  SoftLabelLoss out;
  out.value = -(p.cwiseProduct(log_q)).sum() * scale;
  out.d_student_logits = (log_q.array().exp() - p.array()).matrix() * (scale / tau);
  return out;
}

double softmax_entropy(const Matrix& logits, double tau) {
  const Matrix logp = log_softmax_rows(logits / tau);
  return -(logp.array().exp() * logp.array()).sum() / static_cast<double>(logits.rows());
}

RegressionLoss l2_regression_loss(const Matrix& s, const Matrix& t, Reduction reduction) {
  require_same_shape(s, t, "l2_regression_loss");
  if (s.rows() < 1) throw Error("l2_regression_loss over zero positions");
  const double scale = reduction_scale(reduction, s.rows());
  const Matrix diff = s - t;
  return {diff.squaredNorm() * scale, 2.0 * scale * diff};
}

double gaussian_kernel(const Vector& a, const Vector& b, double sigma) {
  if (a.size() != b.size()) throw Error("gaussian_kernel: dimension mismatch");
  if (!(sigma > 0.0)) throw Error("gaussian_kernel: sigma must be positive");
  return std::exp(-(a - b).squaredNorm() / (2.0 * sigma * sigma));
}

NstLoss nst_mmd2(const Matrix& s, const Matrix& t, double sigma, bool normalize) {
  require_same_shape(s, t, "nst_mmd2");
  if (s.rows() < 1) throw Error("nst_mmd2: zero-length sequence");
  if (s.cols() < 1) throw Error("nst_mmd2: zero neurons");
  if (!(sigma > 0.0)) throw Error("nst_mmd2: sigma must be positive");

  // Neuron activation patterns as rows: d x |x|.
  const Matrix s_raw = s.transpose();
  const Matrix t_raw = t.transpose();
  Vector s_norm = Vector::Ones(s_raw.rows());
  Matrix sc = s_raw, tc = t_raw;
  if (normalize) {
    s_norm = s_raw.rowwise().norm();
    const Vector t_norm = t_raw.rowwise().norm();
    for (Eigen::Index i = 0; i < sc.rows(); ++i) {
      if (s_norm(i) > 0.0) sc.row(i) /= s_norm(i);
      if (t_norm(i) > 0.0) tc.row(i) /= t_norm(i);
    }
  }

  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  auto kernel_matrix = [inv2s2](const Matrix& a, const Matrix& b) {
    const Vector a2 = a.rowwise().squaredNorm();
    const Vector b2 = b.rowwise().squaredNorm();
    Matrix dist = -2.0 * a * b.transpose();
    dist.colwise() += a2;
    dist.rowwise() += b2.transpose();
    return Matrix((-(dist.cwiseMax(0.0)) * inv2s2).array().exp());
  };
  const Matrix k_ss = kernel_matrix(sc, sc);
  const Matrix k_tt = kernel_matrix(tc, tc);
  const Matrix k_st = kernel_matrix(sc, tc);
  const double d2 = static_cast<double>(s.cols()) * static_cast<double>(s.cols());

  NstLoss out;
  out.value = (k_ss.sum() + k_tt.sum() - 2.0 * k_st.sum()) / d2;

  // d/dc_i = (2 / (sigma^2 d^2)) * [ -sum_i' Kss(c_i - c_i') + sum_j Kst(c_i - u_j) ]
  const double coef = 2.0 / (sigma * sigma * d2);
  Matrix d_c = -(k_ss.rowwise().sum().asDiagonal() * sc - k_ss * sc);
  d_c += k_st.rowwise().sum().asDiagonal() * sc - k_st * tc;
  d_c *= coef;

  if (normalize) {
    for (Eigen::Index i = 0; i < d_c.rows(); ++i) {
      if (s_norm(i) == 0.0) {
        d_c.row(i).setZero();
        continue;
      }
      const double proj = sc.row(i).dot(d_c.row(i));
      d_c.row(i) = (d_c.row(i) - proj * sc.row(i)) / s_norm(i);
    }
  }
  out.d_s = d_c.transpose();
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Matrix*>> CrdProjections::named() {
  return {{"crd.f1.weight", &f1_w}, {"crd.f1.bias", &f1_b}, {"crd.f2.weight", &f2_w}, {"crd.f2.bias", &f2_b}};
}

std::vector<std::pair<std::string, const Matrix*>> CrdProjections::named() const {
  auto v = const_cast<CrdProjections*>(this)->named();
  return {v.begin(), v.end()};
}

CrdProjections CrdProjections::zeros_like() const {
  return {Matrix::Zero(f1_w.rows(), f1_w.cols()), Matrix::Zero(f1_b.rows(), f1_b.cols()),
          Matrix::Zero(f2_w.rows(), f2_w.cols()), Matrix::Zero(f2_b.rows(), f2_b.cols())};
}

CRDState init_crd_state(int d_student, int d_teacher, int d_proj, int dataset_size, double momentum, Rng& rng) {
  if (d_proj < 1 || dataset_size < 2) throw Error("CRD state needs d_proj >= 1 and M >= 2");
  CRDState st;
  // Xavier-style scale keeps the initial critic inner products O(1).
  auto init = [&rng](int rows, int cols) {
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(rows)));
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
    return m;
  };
  st.proj.f1_w = init(d_student, d_proj);
  st.proj.f1_b = Matrix::Zero(1, d_proj);
  st.proj.f2_w = init(d_teacher, d_proj);
  st.proj.f2_b = Matrix::Zero(1, d_proj);
  st.momentum = momentum;
  std::normal_distribution<double> normal(0.0, 1.0);
  st.buffer.resize(dataset_size, d_proj);
  for (Eigen::Index r = 0; r < st.buffer.rows(); ++r) {
    do {
      for (Eigen::Index c = 0; c < st.buffer.cols(); ++c) st.buffer(r, c) = normal(rng);
    } while (st.buffer.row(r).norm() == 0.0);
    st.buffer.row(r).normalize();
  }
  return st;
}

Matrix crd_project(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix raw = x * w;
  raw.rowwise() += b.row(0);
  Vector norms;
  return normalize_rows(raw, norms);
}

double crd_critic(double z, double n_over_m) { return sigmoid(z - std::log(n_over_m)); }

CrdLoss crd_loss(const Matrix& s, const Matrix& t, std::span<const int> negatives, int own_index,
                 const CRDState& state, double temperature, Reduction reduction) {
  if (s.rows() != t.rows()) throw Error("crd_loss: student and teacher position counts differ");
  if (s.rows() < 1) throw Error("crd_loss over zero positions");
  const int m = state.dataset_size();
  const int n = static_cast<int>(negatives.size());
  if (n >= m) throw Error("insufficient negatives");
  if (n < 1) throw Error("crd_loss needs at least one negative");
  for (int idx : negatives) {
    if (idx < 0 || idx >= m) throw Error("crd_loss: negative index out of range");
    if (idx == own_index) throw Error("crd_loss: negative equals the positive sample");
  }
  const double log_c = std::log(static_cast<double>(n) / static_cast<double>(m));
  const auto& p = state.proj;

  Matrix a_raw = s * p.f1_w;
  a_raw.rowwise() += p.f1_b.row(0);
  Matrix b_raw = t * p.f2_w;
  b_raw.rowwise() += p.f2_b.row(0);
  Vector a_norm, b_norm;
  const Matrix a = normalize_rows(a_raw, a_norm);
  const Matrix b = normalize_rows(b_raw, b_norm);

  Matrix negs(n, state.buffer.cols());
  for (int k = 0; k < n; ++k) negs.row(k) = state.buffer.row(negatives[k]);

  const double scale = reduction_scale(reduction, s.rows());
  CrdLoss out;
  Matrix d_a = Matrix::Zero(a.rows(), a.cols());
  Matrix d_b = Matrix::Zero(b.rows(), b.cols());
  const Matrix z_neg = a * negs.transpose() / temperature;  // positions x N
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double z = a.row(i).dot(b.row(i)) / temperature;
    // -log h = softplus(log c - z)
    out.value += softplus(log_c - z) * scale;
    const double one_minus_h = sigmoid(log_c - z);
    d_a.row(i) -= one_minus_h * b.row(i) * (scale / temperature);
    d_b.row(i) -= one_minus_h * a.row(i) * (scale / temperature);
    for (int k = 0; k < n; ++k) {
      // -log(1 - h_k) = softplus(z_k - log c)
      out.value += softplus(z_neg(i, k) - log_c) * scale;
      const double h_k = sigmoid(z_neg(i, k) - log_c);
      d_a.row(i) += h_k * negs.row(k) * (scale / temperature);
    }
  }

  const Matrix d_a_raw = normalize_rows_backward(a, a_norm, d_a);
  const Matrix d_b_raw = normalize_rows_backward(b, b_norm, d_b);
  out.d_proj.f1_w = s.transpose() * d_a_raw;
  out.d_proj.f1_b = d_a_raw.colwise().sum();
  out.d_proj.f2_w = t.transpose() * d_b_raw;
  out.d_proj.f2_b = d_b_raw.colwise().sum();
  out.d_s = d_a_raw * p.f1_w.transpose();
  return out;
}

std::vector<int> sample_crd_negatives(Rng& rng, int dataset_size, int n, int own_index) {
  if (n >= dataset_size) throw Error("insufficient negatives");
  std::vector<int> pool;
  pool.reserve(dataset_size);
  for (int i = 0; i < dataset_size; ++i)
    if (i != own_index) pool.push_back(i);
  if (n > static_cast<int>(pool.size())) throw Error("insufficient negatives");
  for (int i = 0; i < n; ++i) {
    std::uniform_int_distribution<int> pick(i, static_cast<int>(pool.size()) - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(n);
  return pool;
}

void crd_buffer_update(CRDState& state, int sample_index, const Vector& t_vector) {
  if (sample_index < 0 || sample_index >= state.dataset_size())
    throw Error("crd buffer index " + std::to_string(sample_index) + " out of range");
  const Matrix projected = crd_project(t_vector.transpose(), state.proj.f2_w, state.proj.f2_b);
  auto row = state.buffer.row(sample_index);
  if (state.momentum == 0.0) {
    row = projected.row(0);
  } else {
    RowVector blended = state.momentum * row + (1.0 - state.momentum) * projected.row(0);
    if (blended.norm() == 0.0) throw Error("degenerate embedding");
    row = blended.normalized();
  }
}

// ---------------------------------------------------------------------------

void VokenBank::validate() const {
  if (rows.rows() < 1) throw Error("empty voken bank");
  if (static_cast<Eigen::Index>(ids.size()) != rows.rows()) throw Error("voken bank: id count != row count");
  if (!rows.allFinite()) throw Error("voken bank: non-finite row");
  for (Eigen::Index r = 0; r < rows.rows(); ++r)
    if (rows.row(r).norm() == 0.0) throw Error("voken bank: zero row " + std::to_string(r));
  std::set<std::string> seen(ids.begin(), ids.end());
  if (seen.size() != ids.size()) throw Error("voken bank: duplicate ids");
}

VokenBank select_voken_bank(const Matrix& pooled, const std::vector<std::string>& ids,
                            const std::vector<int>& clusters, int k, Rng& rng) {
  const int total = static_cast<int>(pooled.rows());
  if (static_cast<int>(ids.size()) != total || static_cast<int>(clusters.size()) != total)
    throw Error("select_voken_bank: inconsistent inputs");
  if (k < 2 || k > total) throw Error("select_voken_bank: K must lie in [2, number of videos]");

  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<int> chosen;
  std::set<int> covered;
  for (int idx : order) {
    if (static_cast<int>(chosen.size()) == k) break;
    if (covered.insert(clusters[idx]).second) chosen.push_back(idx);
  }
  for (int idx : order) {
    if (static_cast<int>(chosen.size()) == k) break;
    if (std::find(chosen.begin(), chosen.end(), idx) == chosen.end()) chosen.push_back(idx);
  }

  VokenBank bank;
  bank.rows.resize(k, pooled.cols());
  for (int i = 0; i < k; ++i) {
    bank.rows.row(i) = pooled.row(chosen[i]);
    bank.ids.push_back(ids[chosen[i]]);
  }
  bank.validate();
  return bank;
}

void save_voken_bank(const std::filesystem::path& prefix, const VokenBank& bank) {
  save_vlkd(std::filesystem::path(prefix.string() + ".vlkd"), bank.rows);
  std::ofstream out(prefix.string() + ".ids");
  if (!out) throw Error("cannot write voken ids: " + prefix.string() + ".ids");
  for (auto& id : bank.ids) out << id << '\n';
}

VokenBank load_voken_bank(const std::filesystem::path& prefix) {
  VokenBank bank;
  bank.rows = load_vlkd(prefix.string() + ".vlkd");
  bank.ids = read_lines(prefix.string() + ".ids");
  while (!bank.ids.empty() && bank.ids.back().empty()) bank.ids.pop_back();
  bank.validate();
  return bank;
}

std::vector<int> assign_vokens(const Matrix& t, const VokenBank& bank) {
  if (bank.size() < 1) throw Error("empty voken bank");
  if (t.rows() < 1) throw Error("assign_vokens needs at least one content position");
  if (t.cols() != bank.rows.cols()) throw Error("assign_vokens: dimension mismatch");
  const Vector bank_norms = bank.rows.rowwise().norm();
  std::vector<int> out(static_cast<std::size_t>(t.rows()));
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    const double tn = t.row(i).norm();
    if (tn == 0.0) throw Error("degenerate embedding");
    int best = 0;
    double best_cos = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < bank.rows.rows(); ++k) {
      const double c = t.row(i).dot(bank.rows.row(k)) / (tn * bank_norms(k));
      if (c > best_cos) {
        best_cos = c;
        best = static_cast<int>(k);
      }
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

CrossEntropy voken_loss(const Matrix& student_voken_logits, std::span<const int> assignment, Reduction reduction) {
  for (int id : assignment)
    if (id < 0 || id >= student_voken_logits.cols())
      throw Error("voken id " + std::to_string(id) + " outside bank of size " +
                  std::to_string(student_voken_logits.cols()));
  return cross_entropy(student_voken_logits, assignment, reduction);
}

double combined_student_loss(double mlm, const std::map<KDObjective, double>& kd_values, const KDConfig& cfg) {
  double total = mlm;
  for (auto o : cfg.objectives) {
    auto it = kd_values.find(o);
    if (it == kd_values.end()) throw Error("missing value for enabled KD objective " + to_string(o));
    total += cfg.weight(o) * it->second;
  }
  return total;
}

}  // namespace vlkd
