#include "vlkd/optim.hpp"

#include <cmath>

namespace vlkd {

void adamw_step(const std::vector<ParamRef>& params, OptimState& state, double lr) {
  for (const auto& p : params) {
    if (p.value->rows() != p.grad->rows() || p.value->cols() != p.grad->cols())
      throw Error("adamw: gradient shape mismatch for " + p.name);
    if (!p.grad->allFinite()) throw Error("adamw: non-finite gradient in parameter " + p.name);
  }
  const auto& o = state.options;
  const double step_lr = lr >= 0.0 ? lr : o.lr;
  ++state.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));

  for (const auto& p : params) {
    auto [m_it, m_new] = state.first_moment.try_emplace(p.name, Matrix::Zero(p.value->rows(), p.value->cols()));
    auto [v_it, v_new] = state.second_moment.try_emplace(p.name, Matrix::Zero(p.value->rows(), p.value->cols()));
    Matrix& m = m_it->second;
    Matrix& v = v_it->second;
    const Matrix& g = *p.grad;
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g.cwiseProduct(g);

    Matrix& w = *p.value;
    if (o.weight_decay != 0.0) w -= (step_lr * o.weight_decay) * w;
    w.array() -= step_lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + o.eps);
  }
}

double global_grad_norm(const std::vector<ParamRef>& params) {
  double sq = 0.0;
  for (const auto& p : params) sq += p.grad->squaredNorm();
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<std::pair<std::string, Matrix*>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g->squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& [name, g] : grads) *g *= scale;
  }
  return norm;
}

}  // namespace vlkd
