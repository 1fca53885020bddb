#pragma once

#include "vlkd/common.hpp"
#include "vlkd/corpus.hpp"

#include "json.hpp"

#include <string>
#include <utility>
#include <vector>

namespace vlkd {

enum class EncoderKind { kText, kVideo };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::kText;
  int n_layers = 2;
  int d_hidden = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;       // text only
  int max_positions = 129;  // 1 [CLS] + 128 content for text, 512 frames for video
  int d_v = 0;              // video only
  bool tie_lm_head = true;
  bool distill_head = false;
  int voken_classes = 0;  // 0: no voken head
  double layer_norm_eps = 1e-12;
  double init_std = 0.02;

  void validate() const;
};

/// "toy-2L-64H", "bert-6L-512H" or "bert-12L-768H". Sets the transformer
/// shape only; kind, vocabulary and heads are left to the caller.
EncoderConfig encoder_preset(const std::string& name);

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct BlockWeights {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix ln1_g, ln1_b;
  Matrix w1, b1, w2, b2;
  Matrix ln2_g, ln2_b;
};

/// Every trainable tensor of one encoder. Gradients use the same struct.
/// Biases and layer-norm parameters are 1 x n matrices; absent components
/// are empty.
struct EncoderWeights {
  Matrix token_embedding;  // |Z| x d (text)
  Matrix input_proj;       // d_v x d (video)
  Matrix input_bias;       // 1 x d (video)
  Matrix position_embedding;
  Matrix emb_ln_g, emb_ln_b;
  std::vector<BlockWeights> blocks;
  Matrix lm_weight;  // d x |Z|, only when the head is untied
  Matrix lm_bias;    // 1 x |Z|
  Matrix head_w1, head_b1, head_w2, head_b2;
  Matrix voken_w, voken_b;

  /// Non-empty tensors in a fixed order with stable dotted names.
  std::vector<std::pair<std::string, Matrix*>> named();
  std::vector<std::pair<std::string, const Matrix*>> named() const;

  EncoderWeights zeros_like() const;
  void set_zero();
  void add(const EncoderWeights& other);
  std::size_t parameter_count() const;
};

struct EncoderModel {
  EncoderConfig config;
  EncoderWeights weights;
};

/// Truncated-normal (std init_std) weights, zero biases, unit layer-norm gains.
EncoderModel init_encoder(const EncoderConfig& config, Rng& rng);

struct HiddenStates {
  Matrix states;             // positions x d
  std::vector<bool> content; // true at positions that feed losses

  int rows() const { return static_cast<int>(states.rows()); }
  std::vector<int> content_positions() const;
  Matrix content_rows() const;
};

struct LayerNormTrace {
  Matrix xhat;
  Vector rstd;
};

struct BlockTrace {
  Matrix x_in;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, positions x positions
  Matrix context;
  LayerNormTrace ln1;
  Matrix x1;
  Matrix ff_pre;
  Matrix ff_act;
  LayerNormTrace ln2;
};

/// Activations retained by a forward pass for the backward pass.
struct EncoderTrace {
  std::vector<int> ids;  // text
  Matrix frames;         // video
  std::vector<bool> key_valid;
  LayerNormTrace emb_ln;
  std::vector<BlockTrace> blocks;
};

/// Content = non-[CLS], non-padding positions. Pass a trace to enable backward.
HiddenStates encode_text(const EncoderModel& model, const TokenSequence& seq, EncoderTrace* trace = nullptr);
HiddenStates encode_video(const EncoderModel& model, const VideoFeatures& vf, EncoderTrace* trace = nullptr);

/// Accumulates parameter gradients for d(loss)/d(states) into `grads`.
void encoder_backward(const EncoderModel& model, const EncoderTrace& trace, const Matrix& d_states,
                      EncoderWeights& grads);

/// Temporal mean of frame states.
Vector pool_video(const HiddenStates& h_v);

/// logits = rows * W + b, W tied to the token embedding unless configured otherwise.
Matrix lm_head(const EncoderModel& model, const Matrix& rows);
/// Returns d(rows); accumulates head gradients.
Matrix lm_head_backward(const EncoderModel& model, const Matrix& rows, const Matrix& d_logits,
                        EncoderWeights& grads);

struct DistillHeadOutput {
  Matrix out;
  Matrix pre_relu;
};
/// out = relu(rows * W1 + b1) * W2 + b2, applied per position.
DistillHeadOutput distill_head(const EncoderModel& model, const Matrix& rows);
Matrix distill_head_backward(const EncoderModel& model, const Matrix& rows, const DistillHeadOutput& fwd,
                             const Matrix& d_out, EncoderWeights& grads);

Matrix voken_head(const EncoderModel& model, const Matrix& rows);
Matrix voken_head_backward(const EncoderModel& model, const Matrix& rows, const Matrix& d_logits,
                           EncoderWeights& grads);

namespace detail {
LayerNormTrace layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps, Matrix& y);
Matrix layer_norm_backward(const LayerNormTrace& t, const Matrix& gain, const Matrix& dy, Matrix& d_gain,
                           Matrix& d_bias);
double gelu(double x);
double gelu_grad(double x);
}  // namespace detail

}  // namespace vlkd
