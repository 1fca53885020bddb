#pragma once

#include "vlkd/common.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace vlkd {

/// A trainable tensor paired with its gradient buffer.
struct ParamRef {
  std::string name;
  Matrix* value;
  const Matrix* grad;
};

struct AdamWOptions {
  double lr = 2e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  AdamWOptions options;
  std::map<std::string, Matrix> first_moment;
  std::map<std::string, Matrix> second_moment;
  long step = 0;
};

/// One decoupled-weight-decay Adam update:
///   p <- p - lr * wd * p;  p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// Throws before touching any parameter if a gradient is non-finite.
/// `lr` overrides options.lr for this step (schedules); pass < 0 to use options.lr.
void adamw_step(const std::vector<ParamRef>& params, OptimState& state, double lr = -1.0);

/// Global L2 norm over all gradients.
double global_grad_norm(const std::vector<ParamRef>& params);

/// Scales gradients in place so the global norm is at most max_norm. Returns the pre-clip norm.
double clip_grad_norm(const std::vector<std::pair<std::string, Matrix*>>& grads, double max_norm);

}  // namespace vlkd
