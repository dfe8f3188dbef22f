#include "xdr/optim.hpp"

#include <cmath>
#include <string>

namespace xdr {

double cosine_lr(long step, long total_steps, double lr_max, double lr_min) {
  if (step < 0 || total_steps < 0 || step > total_steps)
    numeric_error("cosine_lr: step outside [0, total_steps]");
  if (total_steps == 0) return lr_max;  // degenerate schedule: flat at the peak
  double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

OptimizerState OptimizerState::make(const std::vector<Tensor>& params, AdamWConfig cfg) {
  OptimizerState st;
  st.cfg = cfg;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& p : params) {
    st.m.emplace_back(p.size(), 0.0);
    st.v.emplace_back(p.size(), 0.0);
  }
  return st;
}

void adamw_step(std::vector<Tensor>& params, OptimizerState& st) {
  if (params.size() != st.m.size()) numeric_error("adamw_step: state/parameter count mismatch");
  double lr = cosine_lr(st.step, st.cfg.total_steps, st.cfg.lr_max, st.cfg.lr_min);
  st.step += 1;
  double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    if (static_cast<int64_t>(st.m[pi].size()) != p.size())
      numeric_error("adamw_step: moment buffer shape mismatch");
    p.node()->ensure_grad();
    auto& data = p.data();
    auto& grad = p.grad();
    auto& m = st.m[pi];
    auto& v = st.v[pi];
    for (size_t i = 0; i < data.size(); ++i) {
      double g = grad[i];
      if (!std::isfinite(g)) numeric_error("adamw_step: non-finite gradient");
      m[i] = st.cfg.beta1 * m[i] + (1.0 - st.cfg.beta1) * g;
      v[i] = st.cfg.beta2 * v[i] + (1.0 - st.cfg.beta2) * g * g;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      // Decoupled decay: applied to the weight directly, not through the moments.
      data[i] -= lr * (mhat / (std::sqrt(vhat) + st.cfg.eps) + st.cfg.weight_decay * data[i]);
    }
  }
}

double clip_global_norm(std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    p.node()->ensure_grad();
    for (double g : p.grad()) {
      if (!std::isfinite(g)) numeric_error("clip_global_norm: non-finite gradient");
      sq += g * g;
    }
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (auto& p : params)
      for (double& g : p.grad()) g *= s;
  }
  return norm;
}

void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace xdr
