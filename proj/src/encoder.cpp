#include "vlkd/encoder.hpp"

#include <cmath>
#include <numbers>

namespace vlkd {

void EncoderConfig::validate() const {
  if (n_layers < 0 || d_hidden < 1 || n_heads < 1 || d_ff < 1 || max_positions < 1)
    throw Error("encoder config: non-positive dimension");
  if (d_hidden % n_heads != 0) throw Error("encoder config: d_hidden must be divisible by n_heads");
  if (kind == EncoderKind::kText && vocab_size <= Vocabulary::kNumSpecial)
    throw Error("encoder config: text encoder needs a vocabulary");
  if (kind == EncoderKind::kVideo && d_v < 1) throw Error("encoder config: video encoder needs d_v");
  if (voken_classes == 1 || voken_classes < 0) throw Error("encoder config: voken head needs K >= 2");
}

EncoderConfig encoder_preset(const std::string& name) {
  EncoderConfig c;
  if (name == "toy-2L-64H") {
    c.n_layers = 2, c.d_hidden = 64, c.n_heads = 4, c.d_ff = 256;
  } else if (name == "bert-6L-512H") {
    c.n_layers = 6, c.d_hidden = 512, c.n_heads = 8, c.d_ff = 2048;
  } else if (name == "bert-12L-768H") {
    c.n_layers = 12, c.d_hidden = 768, c.n_heads = 12, c.d_ff = 3072;
  } else {
    throw Error("unknown encoder preset: " + name);
  }
  return c;
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"kind", c.kind == EncoderKind::kText ? "text" : "video"},
                     {"n_layers", c.n_layers},
                     {"d_hidden", c.d_hidden},
                     {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},
                     {"vocab_size", c.vocab_size},
                     {"max_positions", c.max_positions},
                     {"d_v", c.d_v},
                     {"tie_lm_head", c.tie_lm_head},
                     {"distill_head", c.distill_head},
                     {"voken_classes", c.voken_classes},
                     {"layer_norm_eps", c.layer_norm_eps},
                     {"init_std", c.init_std}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.kind = j.at("kind").get<std::string>() == "video" ? EncoderKind::kVideo : EncoderKind::kText;
  j.at("n_layers").get_to(c.n_layers);
  j.at("d_hidden").get_to(c.d_hidden);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_ff").get_to(c.d_ff);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_positions").get_to(c.max_positions);
  j.at("d_v").get_to(c.d_v);
  j.at("tie_lm_head").get_to(c.tie_lm_head);
  j.at("distill_head").get_to(c.distill_head);
  j.at("voken_classes").get_to(c.voken_classes);
  j.at("layer_norm_eps").get_to(c.layer_norm_eps);
  j.at("init_std").get_to(c.init_std);
}

// ---------------------------------------------------------------------------
// Weights bookkeeping

std::vector<std::pair<std::string, Matrix*>> EncoderWeights::named() {
  std::vector<std::pair<std::string, Matrix*>> out;
  auto add = [&out](std::string name, Matrix& m) {
    if (m.size() > 0) out.emplace_back(std::move(name), &m);
  };
  add("token_embedding", token_embedding);
  add("input_proj", input_proj);
  add("input_bias", input_bias);
  add("position_embedding", position_embedding);
  add("emb_ln.gain", emb_ln_g);
  add("emb_ln.bias", emb_ln_b);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    add(p + "attn.wq", b.wq);
    add(p + "attn.bq", b.bq);
    add(p + "attn.wk", b.wk);
    add(p + "attn.bk", b.bk);
    add(p + "attn.wv", b.wv);
    add(p + "attn.bv", b.bv);
    add(p + "attn.wo", b.wo);
    add(p + "attn.bo", b.bo);
    add(p + "ln1.gain", b.ln1_g);
    add(p + "ln1.bias", b.ln1_b);
    add(p + "ff.w1", b.w1);
    add(p + "ff.b1", b.b1);
    add(p + "ff.w2", b.w2);
    add(p + "ff.b2", b.b2);
    add(p + "ln2.gain", b.ln2_g);
    add(p + "ln2.bias", b.ln2_b);
  }
  add("lm_head.weight", lm_weight);
  add("lm_head.bias", lm_bias);
  add("distill_head.w1", head_w1);
  add("distill_head.b1", head_b1);
  add("distill_head.w2", head_w2);
  add("distill_head.b2", head_b2);
  add("voken_head.weight", voken_w);
  add("voken_head.bias", voken_b);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> EncoderWeights::named() const {
  auto mutable_view = const_cast<EncoderWeights*>(this)->named();
  return {mutable_view.begin(), mutable_view.end()};
}

EncoderWeights EncoderWeights::zeros_like() const {
  EncoderWeights z = *this;
  z.set_zero();
  return z;
}

void EncoderWeights::set_zero() {
  for (auto& [name, m] : named()) m->setZero();
}

void EncoderWeights::add(const EncoderWeights& other) {
  auto mine = named();
  auto theirs = other.named();
  if (mine.size() != theirs.size()) throw Error("gradient structure mismatch");
  for (std::size_t i = 0; i < mine.size(); ++i) *mine[i].second += *theirs[i].second;
}

std::size_t EncoderWeights::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, m] : named()) n += static_cast<std::size_t>(m->size());
  return n;
}

namespace {

Matrix random_matrix(int rows, int cols, double std, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = truncated_normal(rng, std);
  return m;
}

Matrix zeros(int rows, int cols) { return Matrix::Zero(rows, cols); }
Matrix ones(int rows, int cols) { return Matrix::Ones(rows, cols); }

}  // namespace

EncoderModel init_encoder(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderModel model;
  model.config = config;
  auto& w = model.weights;
  const int d = config.d_hidden;
  const double s = config.init_std;
  if (config.kind == EncoderKind::kText) {
    w.token_embedding = random_matrix(config.vocab_size, d, s, rng);
  } else {
    w.input_proj = random_matrix(config.d_v, d, s, rng);
    w.input_bias = zeros(1, d);
  }
  w.position_embedding = random_matrix(config.max_positions, d, s, rng);
  w.emb_ln_g = ones(1, d);
  w.emb_ln_b = zeros(1, d);
  for (int l = 0; l < config.n_layers; ++l) {
    BlockWeights b;
    b.wq = random_matrix(d, d, s, rng), b.bq = zeros(1, d);
    b.wk = random_matrix(d, d, s, rng), b.bk = zeros(1, d);
    b.wv = random_matrix(d, d, s, rng), b.bv = zeros(1, d);
    b.wo = random_matrix(d, d, s, rng), b.bo = zeros(1, d);
    b.ln1_g = ones(1, d), b.ln1_b = zeros(1, d);
    b.w1 = random_matrix(d, config.d_ff, s, rng), b.b1 = zeros(1, config.d_ff);
    b.w2 = random_matrix(config.d_ff, d, s, rng), b.b2 = zeros(1, d);
    b.ln2_g = ones(1, d), b.ln2_b = zeros(1, d);
    w.blocks.push_back(std::move(b));
  }
  if (config.kind == EncoderKind::kText) {
    if (!config.tie_lm_head) w.lm_weight = random_matrix(d, config.vocab_size, s, rng);
    w.lm_bias = zeros(1, config.vocab_size);
  }
  if (config.distill_head) {
    w.head_w1 = random_matrix(d, d, s, rng), w.head_b1 = zeros(1, d);
    w.head_w2 = random_matrix(d, d, s, rng), w.head_b2 = zeros(1, d);
  }
  if (config.voken_classes > 0) {
    w.voken_w = random_matrix(d, config.voken_classes, s, rng);
    w.voken_b = zeros(1, config.voken_classes);
  }
  return model;
}

std::vector<int> HiddenStates::content_positions() const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(content.size()); ++i)
    if (content[i]) out.push_back(i);
  return out;
}

Matrix HiddenStates::content_rows() const {
  const auto pos = content_positions();
  Matrix out(static_cast<Eigen::Index>(pos.size()), states.cols());
  for (std::size_t i = 0; i < pos.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = states.row(pos[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Primitive layers

namespace detail {

LayerNormTrace layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps, Matrix& y) {
  LayerNormTrace t;
  const Eigen::Index n = x.cols();
  t.xhat.resize(x.rows(), n);
  t.rstd.resize(x.rows());
  y.resize(x.rows(), n);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    t.rstd(r) = rstd;
    t.xhat.row(r) = (x.row(r).array() - mean) * rstd;
    y.row(r) = t.xhat.row(r).cwiseProduct(gain.row(0)) + bias.row(0);
  }
  return t;
}

Matrix layer_norm_backward(const LayerNormTrace& t, const Matrix& gain, const Matrix& dy, Matrix& d_gain,
                           Matrix& d_bias) {
  const double n = static_cast<double>(dy.cols());
  d_gain.row(0) += dy.cwiseProduct(t.xhat).colwise().sum();
  d_bias.row(0) += dy.colwise().sum();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const RowVector dxhat = dy.row(r).cwiseProduct(gain.row(0));
    const double mean_d = dxhat.sum() / n;
    const double mean_dx = dxhat.dot(t.xhat.row(r)) / n;
    dx.row(r) = t.rstd(r) * (dxhat.array() - mean_d - t.xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

}  // namespace detail

namespace {

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

Matrix block_forward(const EncoderConfig& cfg, const BlockWeights& w, const Matrix& x,
                     const std::vector<bool>& key_valid, BlockTrace* trace) {
  const int heads = cfg.n_heads;
  const int dh = cfg.d_hidden / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index len = x.rows();

  Matrix q = affine(x, w.wq, w.bq);
  Matrix k = affine(x, w.wk, w.bk);
  Matrix v = affine(x, w.wv, w.bv);
  Matrix context(len, cfg.d_hidden);
  std::vector<Matrix> probs;
  if (trace) probs.reserve(heads);

  for (int h = 0; h < heads; ++h) {
    Matrix p = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
    for (Eigen::Index r = 0; r < len; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index c = 0; c < len; ++c)
        if (key_valid[c]) mx = std::max(mx, p(r, c));
      double sum = 0.0;
      for (Eigen::Index c = 0; c < len; ++c) {
        p(r, c) = key_valid[c] ? std::exp(p(r, c) - mx) : 0.0;
        sum += p(r, c);
      }
      p.row(r) /= sum;
    }
    context.middleCols(h * dh, dh).noalias() = p * v.middleCols(h * dh, dh);
    if (trace) probs.push_back(std::move(p));
  }

  Matrix r1 = x + affine(context, w.wo, w.bo);
  Matrix x1;
  LayerNormTrace ln1 = detail::layer_norm(r1, w.ln1_g, w.ln1_b, cfg.layer_norm_eps, x1);
  Matrix ff_pre = affine(x1, w.w1, w.b1);
  Matrix ff_act = ff_pre.unaryExpr([](double z) { return detail::gelu(z); });
  Matrix r2 = x1 + affine(ff_act, w.w2, w.b2);
  Matrix out;
  LayerNormTrace ln2 = detail::layer_norm(r2, w.ln2_g, w.ln2_b, cfg.layer_norm_eps, out);

  if (trace) {
    trace->x_in = x;
    trace->q = std::move(q);
    trace->k = std::move(k);
    trace->v = std::move(v);
    trace->probs = std::move(probs);
    trace->context = std::move(context);
    trace->ln1 = std::move(ln1);
    trace->x1 = std::move(x1);
    trace->ff_pre = std::move(ff_pre);
    trace->ff_act = std::move(ff_act);
    trace->ln2 = std::move(ln2);
  }
  return out;
}

Matrix block_backward(const EncoderConfig& cfg, const BlockWeights& w, const BlockTrace& t, const Matrix& d_out,
                      BlockWeights& g) {
  const int heads = cfg.n_heads;
  const int dh = cfg.d_hidden / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix d_r2 = detail::layer_norm_backward(t.ln2, w.ln2_g, d_out, g.ln2_g, g.ln2_b);
  g.w2.noalias() += t.ff_act.transpose() * d_r2;
  g.b2.row(0) += d_r2.colwise().sum();
  Matrix d_ff = (d_r2 * w.w2.transpose()).cwiseProduct(t.ff_pre.unaryExpr([](double z) { return detail::gelu_grad(z); }));
  g.w1.noalias() += t.x1.transpose() * d_ff;
  g.b1.row(0) += d_ff.colwise().sum();
  Matrix d_x1 = d_r2 + d_ff * w.w1.transpose();

  Matrix d_r1 = detail::layer_norm_backward(t.ln1, w.ln1_g, d_x1, g.ln1_g, g.ln1_b);
  g.wo.noalias() += t.context.transpose() * d_r1;
  g.bo.row(0) += d_r1.colwise().sum();
  Matrix d_context = d_r1 * w.wo.transpose();

  const Eigen::Index len = t.x_in.rows();
  Matrix d_q(len, cfg.d_hidden), d_k(len, cfg.d_hidden), d_v(len, cfg.d_hidden);
  for (int h = 0; h < heads; ++h) {
    const Matrix& p = t.probs[h];
    const Matrix d_ctx_h = d_context.middleCols(h * dh, dh);
    Matrix d_p = d_ctx_h * t.v.middleCols(h * dh, dh).transpose();
    d_v.middleCols(h * dh, dh).noalias() = p.transpose() * d_ctx_h;
    const Vector row_dot = d_p.cwiseProduct(p).rowwise().sum();
    Matrix d_s = p.cwiseProduct(d_p.colwise() - row_dot) * scale;
    d_q.middleCols(h * dh, dh).noalias() = d_s * t.k.middleCols(h * dh, dh);
    d_k.middleCols(h * dh, dh).noalias() = d_s.transpose() * t.q.middleCols(h * dh, dh);
  }

  Matrix d_x = d_r1;
  g.wq.noalias() += t.x_in.transpose() * d_q;
  g.bq.row(0) += d_q.colwise().sum();
  g.wk.noalias() += t.x_in.transpose() * d_k;
  g.bk.row(0) += d_k.colwise().sum();
  g.wv.noalias() += t.x_in.transpose() * d_v;
  g.bv.row(0) += d_v.colwise().sum();
  d_x.noalias() += d_q * w.wq.transpose();
  d_x.noalias() += d_k * w.wk.transpose();
  d_x.noalias() += d_v * w.wv.transpose();
  return d_x;
}

HiddenStates run_blocks(const EncoderModel& model, const Matrix& embedded, const std::vector<bool>& key_valid,
                        EncoderTrace* trace) {
  const auto& cfg = model.config;
  const auto& w = model.weights;
  Matrix x;
  LayerNormTrace emb_ln = detail::layer_norm(embedded, w.emb_ln_g, w.emb_ln_b, cfg.layer_norm_eps, x);
  if (trace) {
    trace->emb_ln = std::move(emb_ln);
    trace->key_valid = key_valid;
    trace->blocks.assign(w.blocks.size(), {});
  }
  for (std::size_t l = 0; l < w.blocks.size(); ++l)
    x = block_forward(cfg, w.blocks[l], x, key_valid, trace ? &trace->blocks[l] : nullptr);
  HiddenStates h;
  h.states = std::move(x);
  return h;
}

}  // namespace

HiddenStates encode_text(const EncoderModel& model, const TokenSequence& seq, EncoderTrace* trace) {
  const auto& cfg = model.config;
  if (cfg.kind != EncoderKind::kText) throw Error("encode_text on a video encoder");
  const int len = seq.positions();
  if (len < 1) throw Error("empty token sequence");
  if (len > cfg.max_positions) throw Error("sequence longer than max_positions");
  Matrix emb(len, cfg.d_hidden);
  std::vector<bool> key_valid(len);
  for (int p = 0; p < len; ++p) {
    const int id = seq.ids[p];
    if (id < 0 || id >= cfg.vocab_size) throw Error("token id " + std::to_string(id) + " outside vocabulary");
    emb.row(p) = model.weights.token_embedding.row(id) + model.weights.position_embedding.row(p);
    key_valid[p] = seq.pad_mask.empty() || !seq.pad_mask[p];
  }
  if (trace) trace->ids = seq.ids;
  HiddenStates h = run_blocks(model, emb, key_valid, trace);
  h.content.assign(len, false);
  for (int p = 1; p <= seq.length; ++p) h.content[p] = true;
  return h;
}

HiddenStates encode_video(const EncoderModel& model, const VideoFeatures& vf, EncoderTrace* trace) {
  const auto& cfg = model.config;
  if (cfg.kind != EncoderKind::kVideo) throw Error("encode_video on a text encoder");
  if (vf.frames.cols() != cfg.d_v)
    throw Error("video feature dimension " + std::to_string(vf.frames.cols()) + " != d_v " +
                std::to_string(cfg.d_v));
  const int len = vf.num_frames();
  if (len < 1) throw Error("empty video");
  if (len > cfg.max_positions) throw Error("video longer than max_positions");
  Matrix emb = affine(vf.frames, model.weights.input_proj, model.weights.input_bias);
  emb += model.weights.position_embedding.topRows(len);
  if (trace) trace->frames = vf.frames;
  HiddenStates h = run_blocks(model, emb, std::vector<bool>(len, true), trace);
  h.content.assign(len, true);
  return h;
}

void encoder_backward(const EncoderModel& model, const EncoderTrace& trace, const Matrix& d_states,
                      EncoderWeights& grads) {
  const auto& cfg = model.config;
  const auto& w = model.weights;
  Matrix d = d_states;
  for (std::size_t l = w.blocks.size(); l-- > 0;)
    d = block_backward(cfg, w.blocks[l], trace.blocks[l], d, grads.blocks[l]);
  Matrix d_emb = detail::layer_norm_backward(trace.emb_ln, w.emb_ln_g, d, grads.emb_ln_g, grads.emb_ln_b);
  const Eigen::Index len = d_emb.rows();
  grads.position_embedding.topRows(len) += d_emb;
  if (cfg.kind == EncoderKind::kText) {
    for (Eigen::Index p = 0; p < len; ++p) grads.token_embedding.row(trace.ids[p]) += d_emb.row(p);
  } else {
    grads.input_proj.noalias() += trace.frames.transpose() * d_emb;
    grads.input_bias.row(0) += d_emb.colwise().sum();
  }
}

Vector pool_video(const HiddenStates& h_v) {
  if (h_v.rows() < 1) throw Error("cannot pool an empty video");
  return h_v.states.colwise().mean().transpose();
}

Matrix lm_head(const EncoderModel& model, const Matrix& rows) {
  const auto& w = model.weights;
  Matrix logits = model.config.tie_lm_head ? Matrix(rows * w.token_embedding.transpose()) : Matrix(rows * w.lm_weight);
  logits.rowwise() += w.lm_bias.row(0);
  return logits;
}

Matrix lm_head_backward(const EncoderModel& model, const Matrix& rows, const Matrix& d_logits,
                        EncoderWeights& grads) {
  const auto& w = model.weights;
  grads.lm_bias.row(0) += d_logits.colwise().sum();
  if (model.config.tie_lm_head) {
    grads.token_embedding.noalias() += d_logits.transpose() * rows;
    return d_logits * w.token_embedding;
  }
  grads.lm_weight.noalias() += rows.transpose() * d_logits;
  return d_logits * w.lm_weight.transpose();
}

DistillHeadOutput distill_head(const EncoderModel& model, const Matrix& rows) {
  if (!model.config.distill_head) throw Error("model has no distillation head");
  const auto& w = model.weights;
  DistillHeadOutput o;
  o.pre_relu = affine(rows, w.head_w1, w.head_b1);
  o.out = affine(o.pre_relu.cwiseMax(0.0), w.head_w2, w.head_b2);
  return o;
}

Matrix distill_head_backward(const EncoderModel& model, const Matrix& rows, const DistillHeadOutput& fwd,
                             const Matrix& d_out, EncoderWeights& grads) {
  const auto& w = model.weights;
  const Matrix hidden = fwd.pre_relu.cwiseMax(0.0);
  grads.head_w2.noalias() += hidden.transpose() * d_out;
  grads.head_b2.row(0) += d_out.colwise().sum();
  Matrix d_pre = (d_out * w.head_w2.transpose()).cwiseProduct(
      fwd.pre_relu.unaryExpr([](double z) { return z > 0.0 ? 1.0 : 0.0; }));
  grads.head_w1.noalias() += rows.transpose() * d_pre;
  grads.head_b1.row(0) += d_pre.colwise().sum();
  return d_pre * w.head_w1.transpose();
}

Matrix voken_head(const EncoderModel& model, const Matrix& rows) {
  if (model.config.voken_classes < 2) throw Error("model has no voken head");
  return affine(rows, model.weights.voken_w, model.weights.voken_b);
}

Matrix voken_head_backward(const EncoderModel& model, const Matrix& rows, const Matrix& d_logits,
                           EncoderWeights& grads) {
  grads.voken_w.noalias() += rows.transpose() * d_logits;
  grads.voken_b.row(0) += d_logits.colwise().sum();
  return d_logits * model.weights.voken_w.transpose();
}

}  // namespace vlkd
