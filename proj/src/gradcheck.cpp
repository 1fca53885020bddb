#include "vlkd/gradcheck.hpp"

#include "vlkd/encoder.hpp"
#include "vlkd/kd_objectives.hpp"
#include "vlkd/teacher_objectives.hpp"

#include <algorithm>
#include <cmath>

namespace vlkd {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace {

double check_raw(double* x, const double* analytic, Eigen::Index size, const std::function<double()>& f,
                 double step) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < size; ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f();
    x[i] = saved - step;
    const double down = f();
    x[i] = saved;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * step)));
  }
  return worst;
}

}  // namespace

double check_gradient(Matrix& x, const std::function<double()>& f, const Matrix& analytic, double step) {
  if (x.rows() != analytic.rows() || x.cols() != analytic.cols()) throw Error("gradient shape mismatch");
  return check_raw(x.data(), analytic.data(), x.size(), f, step);
}

double check_gradient(Vector& x, const std::function<double()>& f, const Vector& analytic, double step) {
  if (x.size() != analytic.size()) throw Error("gradient shape mismatch");
  return check_raw(x.data(), analytic.data(), x.size(), f, step);
}

namespace {

Matrix gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

int uniform(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

GradcheckReport check_contrastive(const GradcheckOptions& o) {
  GradcheckReport rep{"contrastive_hinge"};
  for (int attempt = 0; rep.instances < o.instances; ++attempt) {
    if (attempt > 100 * o.instances) throw Error("gradcheck: too many kink-adjacent hinge instances");
    Rng rng = make_rng(o.seed, 701, static_cast<std::uint64_t>(attempt));
    const int d = uniform(rng, 3, 8);
    ContrastiveBatch b;
    b.h_x = gaussian(rng, uniform(rng, 1, 5), d);
    b.h_x_neg = gaussian(rng, uniform(rng, 1, 5), d);
    b.v_bar = gaussian(rng, d, 1);
    b.v_bar_neg = gaussian(rng, d, 1);
    b.alpha = std::uniform_real_distribution<double>(0.2, 1.5)(rng);
    const auto ref = contrastive_hinge_loss(b);
    if (ref.min_abs_margin < o.kink_margin) {
      ++rep.skipped;
      continue;
    }
    auto f = [&] { return contrastive_hinge_loss(b).value; };
    double e = std::max(check_gradient(b.h_x, f, ref.d_h_x, o.step), check_gradient(b.h_x_neg, f, ref.d_h_x_neg, o.step));
    e = std::max(e, check_gradient(b.v_bar, f, ref.d_v_bar, o.step));
    e = std::max(e, check_gradient(b.v_bar_neg, f, ref.d_v_bar_neg, o.step));
    rep.max_rel_err = std::max(rep.max_rel_err, e);
    ++rep.instances;
  }
  return rep;
}

GradcheckReport check_mlm(const GradcheckOptions& o) {
  GradcheckReport rep{"mlm"};
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = make_rng(o.seed, 702, static_cast<std::uint64_t>(k));
    const int vocab = uniform(rng, 6, 12);
    const int len = uniform(rng, 2, 7);
    TokenSequence seq;
    seq.ids.push_back(Vocabulary::kCls);
    for (int i = 0; i < len; ++i) seq.ids.push_back(uniform(rng, 4, vocab - 1));
    seq.pad_mask.assign(seq.ids.size(), false);
    seq.length = len;
    MaskingOptions mo;
    mo.rate = 0.4;
    mo.vocab_size = vocab;
    const auto masked = apply_mlm_mask(seq, rng, mo);
    Matrix logits = gaussian(rng, seq.positions(), vocab, 2.0);
    const auto ref = mlm_loss(logits, masked);
    rep.max_rel_err = std::max(
        rep.max_rel_err, check_gradient(logits, [&] { return mlm_loss(logits, masked).value; }, ref.d_logits, o.step));
    ++rep.instances;
  }
  return rep;
}

GradcheckReport check_soft_label(const GradcheckOptions& o) {
  GradcheckReport rep{"soft_label"};
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = make_rng(o.seed, 703, static_cast<std::uint64_t>(k));
    const int n = uniform(rng, 1, 5), vocab = uniform(rng, 4, 10);
    const Matrix t = gaussian(rng, n, vocab, 2.0);
    Matrix s = gaussian(rng, n, vocab, 2.0);
    const double tau = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
    const auto ref = soft_label_loss(t, s, tau);
    rep.max_rel_err = std::max(rep.max_rel_err, check_gradient(s, [&] { return soft_label_loss(t, s, tau).value; },
                                                               ref.d_student_logits, o.step));
    ++rep.instances;
  }
  return rep;
}

GradcheckReport check_l2(const GradcheckOptions& o) {
  GradcheckReport rep{"l2_regression"};
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = make_rng(o.seed, 704, static_cast<std::uint64_t>(k));
    const int n = uniform(rng, 1, 6), d = uniform(rng, 2, 8);
    const Matrix t = gaussian(rng, n, d);
    Matrix s = gaussian(rng, n, d);
    const auto ref = l2_regression_loss(s, t);
    rep.max_rel_err = std::max(rep.max_rel_err,
                               check_gradient(s, [&] { return l2_regression_loss(s, t).value; }, ref.d_s, o.step));
    ++rep.instances;
  }
  return rep;
}

GradcheckReport check_nst(const GradcheckOptions& o) {
  GradcheckReport rep{"nst"};
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = make_rng(o.seed, 705, static_cast<std::uint64_t>(k));
    const int n = uniform(rng, 2, 8), d = uniform(rng, 2, 10);
    const Matrix t = gaussian(rng, n, d);
    Matrix s = gaussian(rng, n, d);
    const double sigma = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    const bool normalize = k % 2 == 0;
    const auto ref = nst_mmd2(s, t, sigma, normalize);
    rep.max_rel_err = std::max(
        rep.max_rel_err, check_gradient(s, [&] { return nst_mmd2(s, t, sigma, normalize).value; }, ref.d_s, o.step));
    ++rep.instances;
  }
  return rep;
}

GradcheckReport check_crd(const GradcheckOptions& o) {
  GradcheckReport rep{"crd"};
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = make_rng(o.seed, 706, static_cast<std::uint64_t>(k));
    const int n = uniform(rng, 1, 4), ds = uniform(rng, 2, 6), dt = uniform(rng, 2, 6), dp = uniform(rng, 2, 5);
    const int m = uniform(rng, 4, 16), negs = uniform(rng, 1, std::min(4, m - 1));
    const int own = uniform(rng, 0, m - 1);
    CRDState state = init_crd_state(ds, dt, dp, m, 0.0, rng);
    state.proj.f1_b = gaussian(rng, 1, dp, 0.3);
    state.proj.f2_b = gaussian(rng, 1, dp, 0.3);
    const auto negatives = sample_crd_negatives(rng, m, negs, own);
    const double temperature = k % 3 == 0 ? 0.5 : 1.0;
    Matrix s = gaussian(rng, n, ds);
    Matrix t = gaussian(rng, n, dt);
    const auto ref = crd_loss(s, t, negatives, own, state, temperature);
    auto f = [&] { return crd_loss(s, t, negatives, own, state, temperature).value; };
    double e = check_gradient(s, f, ref.d_s, o.step);
    auto params = state.proj.named();
    auto grads = ref.d_proj.named();
    for (std::size_t i = 0; i < params.size(); ++i)
      e = std::max(e, check_gradient(*params[i].second, f, *grads[i].second, o.step));
    rep.max_rel_err = std::max(rep.max_rel_err, e);
    ++rep.instances;
  }
  return rep;
}

EncoderModel tiny_text_encoder(Rng& rng, int voken_classes) {
  EncoderConfig c;
  c.kind = EncoderKind::kText;
  c.n_layers = 1;
  c.d_hidden = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.vocab_size = 9;
  c.max_positions = 8;
  c.distill_head = true;
  c.voken_classes = voken_classes;
  c.init_std = 0.5;
  EncoderModel m = init_encoder(c, rng);
  // Non-trivial norms so LayerNorm gain and bias gradients are exercised.
  for (auto& [name, p] : m.weights.named())
    if (name.find("ln") != std::string::npos || name.find("bias") != std::string::npos ||
        name.find(".b") != std::string::npos)
      *p += gaussian(rng, p->rows(), p->cols(), 0.3);
  return m;
}

TokenSequence random_sequence(Rng& rng, int vocab, int len, int pad) {
  TokenSequence seq;
  seq.ids.push_back(Vocabulary::kCls);
  for (int i = 0; i < len; ++i) seq.ids.push_back(uniform(rng, 4, vocab - 1));
  for (int i = 0; i < pad; ++i) seq.ids.push_back(Vocabulary::kPad);
  seq.pad_mask.assign(seq.ids.size(), false);
  for (int i = 0; i < pad; ++i) seq.pad_mask[1 + len + i] = true;
  seq.length = len;
  return seq;
}

GradcheckReport check_voken(const GradcheckOptions& o) {
  GradcheckReport rep{"voken"};
  for (int k = 0; k < o.instances; ++k) {
    Rng rng = make_rng(o.seed, 707, static_cast<std::uint64_t>(k));
    const int classes = uniform(rng, 2, 6);
    EncoderModel model = tiny_text_encoder(rng, classes);
    const int n = uniform(rng, 1, 5);
    VokenBank bank;
    bank.rows = gaussian(rng, classes, model.config.d_hidden);
    for (int i = 0; i < classes; ++i) bank.ids.push_back("b" + std::to_string(i));
    const auto assignment = assign_vokens(gaussian(rng, n, model.config.d_hidden), bank);
    Matrix rows = gaussian(rng, n, model.config.d_hidden);
    auto f = [&] { return voken_loss(voken_head(model, rows), assignment).value; };
    const auto ce = voken_loss(voken_head(model, rows), assignment);
    EncoderWeights grads = model.weights.zeros_like();
    const Matrix d_rows = voken_head_backward(model, rows, ce.d_logits, grads);
    double e = check_gradient(rows, f, d_rows, o.step);
    e = std::max(e, check_gradient(model.weights.voken_w, f, grads.voken_w, o.step));
    e = std::max(e, check_gradient(model.weights.voken_b, f, grads.voken_b, o.step));
    rep.max_rel_err = std::max(rep.max_rel_err, e);
    ++rep.instances;
  }
  return rep;
}

double check_encoder_params(EncoderModel& model, const std::function<HiddenStates()>& forward_traced,
                            const std::function<void(EncoderTrace&)>& fill_trace, const Matrix& probe,
                            const GradcheckOptions& o) {
  auto f = [&] {
    const HiddenStates h = forward_traced();
    return (h.states.array() * probe.array()).sum();
  };
  EncoderTrace trace;
  fill_trace(trace);
  EncoderWeights grads = model.weights.zeros_like();
  encoder_backward(model, trace, probe, grads);
  double e = 0.0;
  auto params = model.weights.named();
  auto g = grads.named();
  for (std::size_t i = 0; i < params.size(); ++i)
    e = std::max(e, check_gradient(*params[i].second, f, *g[i].second, o.step));
  return e;
}

GradcheckReport check_encoder(const GradcheckOptions& o) {
  GradcheckReport rep{"encoder"};
  const int instances = std::max(1, o.instances / 4);
  for (int k = 0; k < instances; ++k) {
    Rng rng = make_rng(o.seed, 708, static_cast<std::uint64_t>(k));
    EncoderModel text = tiny_text_encoder(rng, 0);
    const int len = uniform(rng, 1, 4);
    const auto seq = random_sequence(rng, text.config.vocab_size, len, uniform(rng, 0, 2));
    const Matrix probe = gaussian(rng, seq.positions(), text.config.d_hidden);
    double e = check_encoder_params(
        text, [&] { return encode_text(text, seq); }, [&](EncoderTrace& t) { encode_text(text, seq, &t); }, probe, o);

    // Heads on top of the final states.
    Matrix rows = gaussian(rng, len, text.config.d_hidden);
    const Matrix lm_probe = gaussian(rng, len, text.config.vocab_size);
    EncoderWeights grads = text.weights.zeros_like();
    const Matrix d_rows = lm_head_backward(text, rows, lm_probe, grads);
    auto f_lm = [&] { return (lm_head(text, rows).array() * lm_probe.array()).sum(); };
    e = std::max(e, check_gradient(rows, f_lm, d_rows, o.step));
    e = std::max(e, check_gradient(text.weights.token_embedding, f_lm, grads.token_embedding, o.step));
    e = std::max(e, check_gradient(text.weights.lm_bias, f_lm, grads.lm_bias, o.step));

    const DistillHeadOutput fwd = distill_head(text, rows);
    const Matrix head_probe = gaussian(rng, fwd.out.rows(), fwd.out.cols());
    grads = text.weights.zeros_like();
    const Matrix d_head_rows = distill_head_backward(text, rows, fwd, head_probe, grads);
    auto f_head = [&] { return (distill_head(text, rows).out.array() * head_probe.array()).sum(); };
    e = std::max(e, check_gradient(rows, f_head, d_head_rows, o.step));
    e = std::max(e, check_gradient(text.weights.head_w1, f_head, grads.head_w1, o.step));
    e = std::max(e, check_gradient(text.weights.head_b1, f_head, grads.head_b1, o.step));
    e = std::max(e, check_gradient(text.weights.head_w2, f_head, grads.head_w2, o.step));
    e = std::max(e, check_gradient(text.weights.head_b2, f_head, grads.head_b2, o.step));

    EncoderConfig vc = text.config;
    vc.kind = EncoderKind::kVideo;
    vc.vocab_size = 0;
    vc.d_v = 5;
    vc.distill_head = false;
    EncoderModel video = init_encoder(vc, rng);
    VideoFeatures vf{gaussian(rng, uniform(rng, 1, 4), vc.d_v), "v"};
    const Matrix v_probe = gaussian(rng, vf.frames.rows(), vc.d_hidden);
    e = std::max(e, check_encoder_params(
                        video, [&] { return encode_video(video, vf); },
                        [&](EncoderTrace& t) { encode_video(video, vf, &t); }, v_probe, o));
    rep.max_rel_err = std::max(rep.max_rel_err, e);
    ++rep.instances;
  }
  return rep;
}

}  // namespace

std::vector<GradcheckReport> run_gradcheck_suite(const GradcheckOptions& opts) {
  std::vector<GradcheckReport> out{check_contrastive(opts), check_mlm(opts), check_soft_label(opts),
                                   check_l2(opts),          check_nst(opts), check_crd(opts),
                                   check_voken(opts)};
  if (opts.include_encoder) out.push_back(check_encoder(opts));
  return out;
}

}  // namespace vlkd
