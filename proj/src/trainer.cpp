#include "vlkd/trainer.hpp"

#include "vlkd/hashing.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

namespace vlkd {

namespace {

// RNG stream ids; the student stage offsets them so the two stages never share draws.
constexpr std::uint64_t kStreamBatch = 101;
constexpr std::uint64_t kStreamMask = 102;
constexpr std::uint64_t kStreamNegatives = 103;
constexpr std::uint64_t kStreamInit = 104;
constexpr std::uint64_t kStreamCrdInit = 105;
constexpr std::uint64_t kStreamVokens = 106;

std::uint64_t stream(Stage stage, std::uint64_t base) { return stage == Stage::kStudent ? base + 1000 : base; }

const char* stage_name(Stage s) { return s == Stage::kTeacher ? "teacher" : "student"; }

/// Runs f(begin, end, worker) over contiguous chunks of [0, n).
template <typename F>
void parallel_chunks(int n, int threads, F&& f) {
  threads = std::clamp(threads, 1, std::max(1, n));
  if (threads == 1) {
    f(0, n, 0);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  const int per = (n + threads - 1) / threads;
  for (int w = 0; w < threads; ++w) {
    const int begin = w * per;
    const int end = std::min(n, begin + per);
    pool.emplace_back([&, w, begin, end] {
      try {
        if (begin < end) f(begin, end, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

int worker_count(int threads, int n) { return std::clamp(threads, 1, std::max(1, n)); }

Matrix scatter_rows(const std::vector<int>& positions, const Matrix& rows, Eigen::Index total_rows) {
  Matrix out = Matrix::Zero(total_rows, rows.cols());
  for (std::size_t i = 0; i < positions.size(); ++i) out.row(positions[i]) += rows.row(static_cast<Eigen::Index>(i));
  return out;
}

Matrix gather_rows(const Matrix& m, const std::vector<int>& positions) {
  Matrix out(static_cast<Eigen::Index>(positions.size()), m.cols());
  for (std::size_t i = 0; i < positions.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(positions[i]);
  return out;
}

std::vector<ParamRef> param_refs(const std::string& prefix, EncoderWeights& params, const EncoderWeights& grads) {
  auto p = params.named();
  auto g = grads.named();
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back({prefix + p[i].first, p[i].second, g[i].second});
  return out;
}

std::vector<ParamRef> param_refs(CrdProjections& params, const CrdProjections& grads) {
  auto p = params.named();
  auto g = grads.named();
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back({p[i].first, p[i].second, g[i].second});
  return out;
}

void clip(const std::vector<ParamRef>& refs, double max_norm) {
  std::vector<std::pair<std::string, Matrix*>> grads;
  for (auto& r : refs) grads.emplace_back(r.name, const_cast<Matrix*>(r.grad));
  clip_grad_norm(grads, max_norm);
}

void check_finite_losses(const std::map<std::string, double>& losses, long step) {
  for (auto& [name, v] : losses)
    if (!std::isfinite(v))
      throw TrainingDiverged("loss " + name + " became non-finite at step " + std::to_string(step));
}

int draw_other(Rng& rng, int n, int self) {
  std::uniform_int_distribution<int> pick(0, n - 2);
  const int r = pick(rng);
  return r >= self ? r + 1 : r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

double OptimConfig::lr_at(long step) const {
  if (warmup_steps <= 0) return adamw.lr;
  return adamw.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup_steps));
}

void TrainRunConfig::validate() const {
  if (batch_size < 2) throw Error("batch size must be >= 2 (in-batch negatives)");
  if (steps < 0) throw Error("steps must be >= 0");
  if (!(optim.adamw.lr > 0.0)) throw Error("learning rate must be positive");
  if (!(masking.rate > 0.0 && masking.rate < 1.0)) throw Error("mask rate must lie in (0, 1)");
  if (!(alpha > 0.0)) throw Error("hinge margin must be positive");
  if (threads < 1) throw Error("threads must be >= 1");
  encoder_preset(preset);
}

void to_json(nlohmann::json& j, const TrainRunConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"batch_size", c.batch_size},
                     {"steps", c.steps},
                     {"stage", stage_name(c.stage)},
                     {"preset", c.preset},
                     {"lr", c.optim.adamw.lr},
                     {"weight_decay", c.optim.adamw.weight_decay},
                     {"beta1", c.optim.adamw.beta1},
                     {"beta2", c.optim.adamw.beta2},
                     {"eps", c.optim.adamw.eps},
                     {"clip_norm", c.optim.clip_norm},
                     {"warmup_steps", c.optim.warmup_steps},
                     {"mask_rate", c.masking.rate},
                     {"bert_corruption", c.masking.bert_corruption},
                     {"ct_weight", c.teacher_weights.contrastive},
                     {"mlm_weight", c.teacher_weights.mlm},
                     {"alpha", c.alpha},
                     {"kd", c.kd},
                     {"distill_head", c.distill_head},
                     {"eval_every", c.eval_every},
                     {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, TrainRunConfig& c) {
  if (!j.is_object()) throw Error("run config must be a JSON object");
  for (auto& [key, v] : j.items()) {
    if (key == "seed") v.get_to(c.seed);
    else if (key == "batch_size") v.get_to(c.batch_size);
    else if (key == "steps") v.get_to(c.steps);
    else if (key == "stage") {
      const auto s = v.get<std::string>();
      if (s == "teacher") c.stage = Stage::kTeacher;
      else if (s == "student") c.stage = Stage::kStudent;
      else throw Error("stage must be \"teacher\" or \"student\"");
    } else if (key == "preset") v.get_to(c.preset);
    else if (key == "lr") v.get_to(c.optim.adamw.lr);
    else if (key == "weight_decay") v.get_to(c.optim.adamw.weight_decay);
    else if (key == "beta1") v.get_to(c.optim.adamw.beta1);
    else if (key == "beta2") v.get_to(c.optim.adamw.beta2);
    else if (key == "eps") v.get_to(c.optim.adamw.eps);
    else if (key == "clip_norm") v.get_to(c.optim.clip_norm);
    else if (key == "warmup_steps") v.get_to(c.optim.warmup_steps);
    else if (key == "mask_rate") v.get_to(c.masking.rate);
    else if (key == "bert_corruption") v.get_to(c.masking.bert_corruption);
    else if (key == "ct_weight") v.get_to(c.teacher_weights.contrastive);
    else if (key == "mlm_weight") v.get_to(c.teacher_weights.mlm);
    else if (key == "alpha") v.get_to(c.alpha);
    else if (key == "kd") from_json(v, c.kd);
    else if (key == "distill_head") v.get_to(c.distill_head);
    else if (key == "eval_every") v.get_to(c.eval_every);
    else if (key == "threads") v.get_to(c.threads);
    else throw Error("unknown config key: " + key);
  }
}

std::string StepRecord::to_json_line() const {
  nlohmann::json j{{"step", step}, {"stage", stage_name(stage)}, {"losses", losses}, {"lr", lr}, {"seed", seed}};
  return j.dump();
}

std::vector<int> batch_indices(int dataset_size, int batch_size, std::uint64_t seed, long step) {
  if (dataset_size < 2) throw Error("dataset needs at least 2 samples");
  batch_size = std::min(batch_size, dataset_size);
  const int remainder = dataset_size % batch_size;
  const long per_epoch = dataset_size / batch_size + (remainder >= 2 ? 1 : 0);
  const long epoch = step / per_epoch;
  const long slot = step % per_epoch;
  std::vector<int> order(dataset_size);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, kStreamBatch, static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  const int begin = static_cast<int>(slot) * batch_size;
  const int end = std::min(dataset_size, begin + batch_size);
  return {order.begin() + begin, order.begin() + end};
}

EncoderConfig text_encoder_config(const TrainRunConfig& cfg, int vocab_size) {
  EncoderConfig c = encoder_preset(cfg.preset);
  c.kind = EncoderKind::kText;
  c.vocab_size = vocab_size;
  c.max_positions = 1 + kMaxContentTokens;
  if (cfg.stage == Stage::kStudent) {
    c.distill_head = cfg.distill_head;
    c.voken_classes = cfg.kd.enabled(KDObjective::kVoken) ? cfg.kd.voken_bank_size : 0;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Stage 1: teacher

TeacherState init_teacher(const TrainRunConfig& cfg, const Vocabulary& vocab, int d_v) {
  cfg.validate();
  TeacherState st;
  st.model.vocab = vocab;
  Rng rng = make_rng(cfg.seed, stream(Stage::kTeacher, kStreamInit));
  st.model.text = init_encoder(text_encoder_config(cfg, vocab.size()), rng);
  EncoderConfig vc = encoder_preset(cfg.preset);
  vc.kind = EncoderKind::kVideo;
  vc.d_v = d_v;
  vc.max_positions = kMaxFrames;
  st.model.video = init_encoder(vc, rng);
  st.optim.options = cfg.optim.adamw;
  return st;
}

namespace {

struct TeacherSampleWork {
  EncoderTrace text_trace, video_trace, mlm_trace;
  HiddenStates text, video, mlm;
  Matrix content;
  Vector pooled;
  Matrix d_content;
  Vector d_pooled;
  Matrix mlm_rows, d_mlm_logits;
};

std::map<std::string, double> teacher_step(const TrainRunConfig& cfg, const std::vector<PairedSample>& data,
                                           TeacherState& st) {
  const long step = st.step;
  const auto idx = batch_indices(static_cast<int>(data.size()), cfg.batch_size, cfg.seed, step);
  const int n = static_cast<int>(idx.size());
  const bool use_ct = cfg.teacher_weights.contrastive != 0.0;
  const bool use_mlm = cfg.teacher_weights.mlm != 0.0;
  auto& model = st.model;

  std::vector<MaskedSequence> masked(n);
  if (use_mlm) {
    Rng mask_rng = make_rng(cfg.seed, stream(Stage::kTeacher, kStreamMask), static_cast<std::uint64_t>(step));
    MaskingOptions mo = cfg.masking;
    mo.vocab_size = model.vocab.size();
    for (int b = 0; b < n; ++b) masked[b] = apply_mlm_mask(data[idx[b]].text, mask_rng, mo);
  }
  std::vector<int> neg_text(n), neg_video(n);
  if (use_ct) {
    Rng neg_rng = make_rng(cfg.seed, stream(Stage::kTeacher, kStreamNegatives), static_cast<std::uint64_t>(step));
    for (int b = 0; b < n; ++b) {
      neg_text[b] = draw_other(neg_rng, n, b);
      neg_video[b] = draw_other(neg_rng, n, b);
    }
  }

  std::vector<TeacherSampleWork> work(n);
  parallel_chunks(n, cfg.threads, [&](int begin, int end, int) {
    for (int b = begin; b < end; ++b) {
      auto& w = work[b];
      const auto& sample = data[idx[b]];
      if (use_ct) {
        w.text = encode_text(model.text, sample.text, &w.text_trace);
        w.content = w.text.content_rows();
        w.video = encode_video(model.video, sample.video, &w.video_trace);
        w.pooled = pool_video(w.video);
        w.d_content = Matrix::Zero(w.content.rows(), w.content.cols());
        w.d_pooled = Vector::Zero(w.pooled.size());
      }
      if (use_mlm) {
        w.mlm = encode_text(model.text, masked[b].seq, &w.mlm_trace);
        w.mlm_rows = gather_rows(w.mlm.states, masked[b].mask_positions);
      }
    }
  });

  double ct_total = 0.0, mlm_total = 0.0;
  const double inv_n = 1.0 / n;
  if (use_ct) {
    const double g = cfg.teacher_weights.contrastive * inv_n;
    for (int b = 0; b < n; ++b) {
      ContrastiveBatch cb{work[b].content, work[neg_text[b]].content, work[b].pooled, work[neg_video[b]].pooled,
                          cfg.alpha};
      auto loss = contrastive_hinge_loss(cb);
      ct_total += loss.value * inv_n;
      work[b].d_content += g * loss.d_h_x;
      work[neg_text[b]].d_content += g * loss.d_h_x_neg;
      work[b].d_pooled += g * loss.d_v_bar;
      work[neg_video[b]].d_pooled += g * loss.d_v_bar_neg;
    }
  }
  if (use_mlm) {
    const double g = cfg.teacher_weights.mlm * inv_n;
    for (int b = 0; b < n; ++b) {
      auto ce = cross_entropy(lm_head(model.text, work[b].mlm_rows), masked[b].original_ids);
      mlm_total += ce.value * inv_n;
      work[b].d_mlm_logits = ce.d_logits * g;
    }
  }

  std::map<std::string, double> losses;
  if (use_ct) losses["ct"] = ct_total;
  if (use_mlm) losses["mlm"] = mlm_total;
  losses["total"] = teacher_loss(ct_total, mlm_total, cfg.teacher_weights);
  check_finite_losses(losses, step);

  const int workers = worker_count(cfg.threads, n);
  std::vector<EncoderWeights> g_text(workers, model.text.weights.zeros_like());
  std::vector<EncoderWeights> g_video(use_ct ? workers : 0, model.video.weights.zeros_like());
  parallel_chunks(n, cfg.threads, [&](int begin, int end, int worker) {
    for (int b = begin; b < end; ++b) {
      auto& w = work[b];
      if (use_ct) {
        const Matrix d_text = scatter_rows(w.text.content_positions(), w.d_content, w.text.rows());
        encoder_backward(model.text, w.text_trace, d_text, g_text[worker]);
        const Matrix d_video =
            Matrix::Ones(w.video.rows(), 1) * (w.d_pooled.transpose() / static_cast<double>(w.video.rows()));
        encoder_backward(model.video, w.video_trace, d_video, g_video[worker]);
      }
      if (use_mlm) {
        const Matrix d_rows = lm_head_backward(model.text, w.mlm_rows, w.d_mlm_logits, g_text[worker]);
        encoder_backward(model.text, w.mlm_trace, scatter_rows(masked[b].mask_positions, d_rows, w.mlm.rows()),
                         g_text[worker]);
      }
    }
  });
  for (int k = 1; k < workers; ++k) {
    g_text[0].add(g_text[k]);
    if (use_ct) g_video[0].add(g_video[k]);
  }

  auto refs = param_refs("text.", model.text.weights, g_text[0]);
  if (use_ct) {
    auto vrefs = param_refs("video.", model.video.weights, g_video[0]);
    refs.insert(refs.end(), vrefs.begin(), vrefs.end());
  }
  clip(refs, cfg.optim.clip_norm);
  adamw_step(refs, st.optim, cfg.optim.lr_at(step));
  ++st.step;
  return losses;
}

}  // namespace

void train_teacher(const TrainRunConfig& cfg, const std::vector<PairedSample>& data, TeacherState& state,
                   const StepLogger& log) {
  cfg.validate();
  if (data.size() < 2) throw Error("teacher training needs at least 2 paired samples");
  if (cfg.teacher_weights.contrastive == 0.0 && cfg.teacher_weights.mlm == 0.0)
    throw Error("teacher loss has no enabled objective");
  while (state.step < cfg.steps) {
    const long step = state.step;
    auto losses = teacher_step(cfg, data, state);
    if (log) log({step, Stage::kTeacher, std::move(losses), cfg.optim.lr_at(step), cfg.seed});
  }
}

// ---------------------------------------------------------------------------
// Stage 2: student

StudentState init_student(const TrainRunConfig& cfg, const Vocabulary& vocab, int d_teacher, int dataset_size) {
  cfg.validate();
  StudentState st;
  st.model.vocab = vocab;
  Rng rng = make_rng(cfg.seed, stream(Stage::kStudent, kStreamInit));
  TrainRunConfig student_cfg = cfg;
  student_cfg.stage = Stage::kStudent;
  st.model.text = init_encoder(text_encoder_config(student_cfg, vocab.size()), rng);
  if (cfg.kd.enabled(KDObjective::kCrd)) {
    Rng crd_rng = make_rng(cfg.seed, stream(Stage::kStudent, kStreamCrdInit));
    const int d = st.model.text.config.d_hidden;
    st.model.crd = init_crd_state(d, d_teacher, cfg.kd.resolved_d_proj(d), dataset_size, cfg.kd.crd_momentum, crd_rng);
  }
  st.optim.options = cfg.optim.adamw;
  return st;
}

namespace {

struct StudentSampleWork {
  double mlm = 0.0;
  std::map<KDObjective, double> kd;
  Vector crd_teacher_vector;
};

std::map<std::string, double> student_step(const TrainRunConfig& cfg, const TeacherModel* teacher,
                                           const std::vector<TokenSequence>& texts, StudentState& st,
                                           const VokenBank* bank) {
  const long step = st.step;
  const int m = static_cast<int>(texts.size());
  const auto idx = batch_indices(m, cfg.batch_size, cfg.seed, step);
  const int n = static_cast<int>(idx.size());
  const KDConfig& kd = cfg.kd;
  const bool use_kd = teacher != nullptr && !kd.objectives.empty();
  const bool use_crd = use_kd && kd.enabled(KDObjective::kCrd);
  auto& student = st.model.text;

  std::vector<MaskedSequence> masked(n);
  {
    Rng mask_rng = make_rng(cfg.seed, stream(Stage::kStudent, kStreamMask), static_cast<std::uint64_t>(step));
    MaskingOptions mo = cfg.masking;
    mo.vocab_size = st.model.vocab.size();
    for (int b = 0; b < n; ++b) masked[b] = apply_mlm_mask(texts[idx[b]], mask_rng, mo);
  }
  std::vector<std::vector<int>> negatives(n);
  const int n_neg = kd.negatives > 0 ? kd.negatives : cfg.batch_size;
  if (use_crd) {
    Rng neg_rng = make_rng(cfg.seed, stream(Stage::kStudent, kStreamNegatives), static_cast<std::uint64_t>(step));
    for (int b = 0; b < n; ++b) negatives[b] = sample_crd_negatives(neg_rng, m, n_neg, idx[b]);
  }

  const double inv_n = 1.0 / n;
  const int workers = worker_count(cfg.threads, n);
  std::vector<EncoderWeights> g_student(workers, student.weights.zeros_like());
  std::vector<CrdProjections> g_crd;
  if (use_crd) g_crd.assign(workers, st.model.crd->proj.zeros_like());
  std::vector<StudentSampleWork> work(n);

  parallel_chunks(n, cfg.threads, [&](int begin, int end, int worker) {
    for (int b = begin; b < end; ++b) {
      auto& w = work[b];
      auto& grads = g_student[worker];
      EncoderTrace trace;
      const HiddenStates hs = encode_text(student, masked[b].seq, &trace);
      Matrix d_states = Matrix::Zero(hs.rows(), hs.states.cols());

      const Matrix mlm_rows = gather_rows(hs.states, masked[b].mask_positions);
      auto ce = cross_entropy(lm_head(student, mlm_rows), masked[b].original_ids);
      w.mlm = ce.value;
      const Matrix d_mlm_rows = lm_head_backward(student, mlm_rows, ce.d_logits * inv_n, grads);
      d_states += scatter_rows(masked[b].mask_positions, d_mlm_rows, hs.rows());

      if (use_kd) {
        const auto content = hs.content_positions();
        const Matrix s = gather_rows(hs.states, content);
        const Matrix t = encode_text(teacher->text, masked[b].seq).content_rows();
        Matrix d_s = Matrix::Zero(s.rows(), s.cols());

        const bool feature_kd = kd.enabled(KDObjective::kL2Regression) || kd.enabled(KDObjective::kNst) ||
                                kd.enabled(KDObjective::kCrd);
        DistillHeadOutput head;
        Matrix features;
        if (feature_kd) {
          if (student.config.distill_head) {
            head = distill_head(student, s);
            features = head.out;
          } else {
            features = s;
          }
        }
        Matrix d_features = Matrix::Zero(features.rows(), features.cols());

        if (kd.enabled(KDObjective::kSoftLabel)) {
          const Matrix s_logits = lm_head(student, s);
          auto sl = soft_label_loss(lm_head(teacher->text, t), s_logits, kd.tau, kd.reduction);
          w.kd[KDObjective::kSoftLabel] = sl.value;
          d_s += lm_head_backward(student, s, sl.d_student_logits * (kd.weight(KDObjective::kSoftLabel) * inv_n), grads);
        }
        if (kd.enabled(KDObjective::kL2Regression)) {
          auto l2 = l2_regression_loss(features, t, kd.reduction);
          w.kd[KDObjective::kL2Regression] = l2.value;
          d_features += l2.d_s * (kd.weight(KDObjective::kL2Regression) * inv_n);
        }
        if (kd.enabled(KDObjective::kNst)) {
          auto nst = nst_mmd2(features, t, kd.sigma, kd.nst_normalize);
          w.kd[KDObjective::kNst] = nst.value;
          d_features += nst.d_s * (kd.weight(KDObjective::kNst) * inv_n);
        }
        if (use_crd) {
          const Matrix t_crd = kd.crd_teacher_input == CrdTeacherInput::kUnmasked
                                   ? encode_text(teacher->text, texts[idx[b]]).content_rows()
                                   : t;
          auto crd = crd_loss(features, t_crd, negatives[b], idx[b], *st.model.crd, kd.crd_temperature, kd.reduction);
          w.kd[KDObjective::kCrd] = crd.value;
          const double g = kd.weight(KDObjective::kCrd) * inv_n;
          d_features += crd.d_s * g;
          auto mine = g_crd[worker].named();
          auto theirs = crd.d_proj.named();
          for (std::size_t i = 0; i < mine.size(); ++i) *mine[i].second += *theirs[i].second * g;
          w.crd_teacher_vector = t_crd.colwise().mean().transpose();
        }
        if (kd.enabled(KDObjective::kVoken)) {
          const auto assignment = assign_vokens(t, *bank);
          const Matrix s_logits = voken_head(student, s);
          auto vk = voken_loss(s_logits, assignment, kd.reduction);
          w.kd[KDObjective::kVoken] = vk.value;
          d_s += voken_head_backward(student, s, vk.d_logits * (kd.weight(KDObjective::kVoken) * inv_n), grads);
        }
        if (feature_kd) {
          if (student.config.distill_head) d_s += distill_head_backward(student, s, head, d_features, grads);
          else d_s += d_features;
        }
        d_states += scatter_rows(content, d_s, hs.rows());
      }
      encoder_backward(student, trace, d_states, grads);
    }
  });

  std::map<std::string, double> losses;
  double mlm_total = 0.0;
  std::map<KDObjective, double> kd_totals;
  for (int b = 0; b < n; ++b) {
    mlm_total += work[b].mlm * inv_n;
    for (auto& [o, v] : work[b].kd) kd_totals[o] += v * inv_n;
  }
  losses["mlm"] = mlm_total;
  for (auto& [o, v] : kd_totals) losses[to_string(o)] = v;
  KDConfig effective = kd;
  if (!use_kd) effective.objectives.clear();
  losses["total"] = combined_student_loss(mlm_total, kd_totals, effective);
  check_finite_losses(losses, step);

  for (int k = 1; k < workers; ++k) {
    g_student[0].add(g_student[k]);
    if (use_crd) {
      auto a = g_crd[0].named();
      auto bb = g_crd[k].named();
      for (std::size_t i = 0; i < a.size(); ++i) *a[i].second += *bb[i].second;
    }
  }
  auto refs = param_refs("student.", student.weights, g_student[0]);
  if (use_crd) {
    auto crefs = param_refs(st.model.crd->proj, g_crd[0]);
    refs.insert(refs.end(), crefs.begin(), crefs.end());
  }
  clip(refs, cfg.optim.clip_norm);
  adamw_step(refs, st.optim, cfg.optim.lr_at(step));

  if (use_crd)
    for (int b = 0; b < n; ++b) crd_buffer_update(*st.model.crd, idx[b], work[b].crd_teacher_vector);
  ++st.step;
  return losses;
}

}  // namespace

void distill_student(const TrainRunConfig& cfg, const TeacherModel* teacher, const std::vector<TokenSequence>& texts,
                     StudentState& state, const VokenBank* bank, const StepLogger& log) {
  cfg.validate();
  if (texts.size() < 2) throw Error("distillation needs at least 2 sentences");
  KDConfig kd = cfg.kd;
  kd.dataset_size = static_cast<int>(texts.size());
  const bool use_kd = teacher != nullptr && !kd.objectives.empty();
  if (use_kd) {
    kd.validate(cfg.batch_size);
    if (kd.enabled(KDObjective::kVoken)) {
      if (bank == nullptr) throw Error("voken KD enabled but no voken bank configured");
      if (bank->size() != state.model.text.config.voken_classes)
        throw Error("voken bank size does not match the student's voken head");
    }
    if (kd.enabled(KDObjective::kCrd) && !state.model.crd) throw Error("CRD enabled but student has no CRD state");
    if (kd.enabled(KDObjective::kCrd) && state.model.crd->dataset_size() != kd.dataset_size)
      throw Error("CRD buffer size does not match the text dataset");
    if (teacher->text.config.d_hidden != state.model.text.config.d_hidden)
      throw Error("teacher and student hidden sizes differ");
    if (teacher->vocab.size() != state.model.vocab.size()) throw Error("teacher and student vocabularies differ");
  }
  TrainRunConfig run = cfg;
  run.kd = kd;
  run.stage = Stage::kStudent;
  for (auto& seq : texts)
    if (seq.length < 1) throw Error("distillation text with no content tokens");
  while (state.step < run.steps) {
    const long step = state.step;
    auto losses = student_step(run, teacher, texts, state, bank);
    if (log) log({step, Stage::kStudent, std::move(losses), run.optim.lr_at(step), run.seed});
  }
}

VokenBank build_voken_bank(const TeacherModel& teacher, const std::vector<PairedSample>& data, int k,
                           std::uint64_t seed) {
  Matrix pooled(static_cast<Eigen::Index>(data.size()), teacher.video.config.d_hidden);
  std::vector<std::string> ids;
  std::vector<int> clusters;
  for (std::size_t i = 0; i < data.size(); ++i) {
    pooled.row(static_cast<Eigen::Index>(i)) = pool_video(encode_video(teacher.video, data[i].video)).transpose();
    ids.push_back(data[i].video.source_id.empty() ? std::to_string(data[i].sample_index) : data[i].video.source_id);
    clusters.push_back(data[i].cluster);
  }
  Rng rng = make_rng(seed, kStreamVokens);
  return select_voken_bank(pooled, ids, clusters, k, rng);
}

// ---------------------------------------------------------------------------
// Checkpoints

void put_encoder(Checkpoint& ck, const std::string& prefix, const EncoderModel& model) {
  for (auto& [name, m] : model.weights.named()) ck.put(prefix + name, *m);
}

EncoderModel get_encoder(const Checkpoint& ck, const std::string& prefix, const EncoderConfig& config) {
  Rng unused(0);
  EncoderModel model = init_encoder(config, unused);
  for (auto& [name, m] : model.weights.named()) {
    const Matrix& stored = ck.get(prefix + name);
    if (stored.rows() != m->rows() || stored.cols() != m->cols())
      throw Error("checkpoint tensor " + prefix + name + " has the wrong shape");
    *m = stored;
  }
  return model;
}

namespace {

void put_optim(Checkpoint& ck, const OptimState& optim) {
  for (auto& [name, m] : optim.first_moment) ck.put("optim.m." + name, m);
  for (auto& [name, v] : optim.second_moment) ck.put("optim.v." + name, v);
  ck.config["optim_step"] = optim.step;
}

OptimState get_optim(const Checkpoint& ck, const AdamWOptions& options) {
  OptimState optim;
  optim.options = options;
  optim.step = ck.config.at("optim_step").get<long>();
  for (auto& name : ck.names()) {
    if (name.rfind("optim.m.", 0) == 0) optim.first_moment[name.substr(8)] = ck.get(name);
    else if (name.rfind("optim.v.", 0) == 0) optim.second_moment[name.substr(8)] = ck.get(name);
  }
  return optim;
}

}  // namespace

Checkpoint teacher_checkpoint(const TeacherState& state, const TrainRunConfig& cfg) {
  Checkpoint ck;
  ck.config["kind"] = "teacher";
  ck.config["vocab"] = state.model.vocab.content_tokens();
  ck.config["text"] = state.model.text.config;
  ck.config["video"] = state.model.video.config;
  ck.config["step"] = state.step;
  ck.config["run"] = cfg;
  put_encoder(ck, "text.", state.model.text);
  put_encoder(ck, "video.", state.model.video);
  put_optim(ck, state.optim);
  return ck;
}

TeacherState teacher_from_checkpoint(const Checkpoint& ck) {
  if (checkpoint_kind(ck) != "teacher") throw Error("checkpoint is not a teacher checkpoint");
  TeacherState st;
  st.model.vocab = Vocabulary(ck.config.at("vocab").get<std::vector<std::string>>());
  st.model.text = get_encoder(ck, "text.", ck.config.at("text").get<EncoderConfig>());
  st.model.video = get_encoder(ck, "video.", ck.config.at("video").get<EncoderConfig>());
  st.step = ck.config.at("step").get<long>();
  TrainRunConfig run;
  from_json(ck.config.at("run"), run);
  st.optim = get_optim(ck, run.optim.adamw);
  return st;
}

Checkpoint student_checkpoint(const StudentState& state, const TrainRunConfig& cfg) {
  Checkpoint ck;
  ck.config["kind"] = "student";
  ck.config["vocab"] = state.model.vocab.content_tokens();
  ck.config["text"] = state.model.text.config;
  ck.config["step"] = state.step;
  ck.config["run"] = cfg;
  put_encoder(ck, "student.", state.model.text);
  if (state.model.crd) {
    ck.config["crd_momentum"] = state.model.crd->momentum;
    for (auto& [name, m] : state.model.crd->proj.named()) ck.put(name, *m);
    ck.put("crd.buffer", state.model.crd->buffer);
  }
  put_optim(ck, state.optim);
  return ck;
}

StudentState student_from_checkpoint(const Checkpoint& ck) {
  if (checkpoint_kind(ck) != "student") throw Error("checkpoint is not a student checkpoint");
  StudentState st;
  st.model.vocab = Vocabulary(ck.config.at("vocab").get<std::vector<std::string>>());
  st.model.text = get_encoder(ck, "student.", ck.config.at("text").get<EncoderConfig>());
  if (ck.has("crd.buffer")) {
    CRDState crd;
    for (auto& [name, m] : crd.proj.named()) *m = ck.get(name);
    crd.buffer = ck.get("crd.buffer");
    crd.momentum = ck.config.at("crd_momentum").get<double>();
    st.model.crd = std::move(crd);
  }
  st.step = ck.config.at("step").get<long>();
  TrainRunConfig run;
  from_json(ck.config.at("run"), run);
  st.optim = get_optim(ck, run.optim.adamw);
  return st;
}

void save_checkpoint(const TeacherState& state, const TrainRunConfig& cfg, const std::filesystem::path& path) {
  teacher_checkpoint(state, cfg).save(path);
}

void save_checkpoint(const StudentState& state, const TrainRunConfig& cfg, const std::filesystem::path& path) {
  student_checkpoint(state, cfg).save(path);
}

std::string checkpoint_kind(const Checkpoint& ck) {
  auto it = ck.config.find("kind");
  if (it == ck.config.end() || !it->is_string()) throw Error("checkpoint config lacks a kind");
  return it->get<std::string>();
}

std::string parameter_hash(const EncoderModel& model) {
  std::string bytes;
  for (auto& [name, m] : model.weights.named()) {
    bytes += name;
    bytes.append(reinterpret_cast<const char*>(m->data()), static_cast<std::size_t>(m->size()) * sizeof(double));
  }
  return sha256_hex(bytes);
}

}  // namespace vlkd
