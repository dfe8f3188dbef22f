#pragma once

#include <vector>

#include "xdr/tensor.hpp"

namespace xdr {

// Cosine annealing from lr_max down to lr_min over total_steps.
// step == 0 yields lr_max; step == total_steps yields lr_min.
double cosine_lr(long step, long total_steps, double lr_max, double lr_min);

struct AdamWConfig {
  double lr_max = 1e-3;
  double lr_min = 0.0;
  long total_steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Moment buffers are index-aligned with the parameter list handed to make().
struct OptimizerState {
  AdamWConfig cfg;
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static OptimizerState make(const std::vector<Tensor>& params, AdamWConfig cfg);
};

// One decoupled-weight-decay Adam update. Reads the current gradients; the
// learning rate comes from cosine_lr at the state's step counter.
void adamw_step(std::vector<Tensor>& params, OptimizerState& st);

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::vector<Tensor>& params, double max_norm);

void zero_grads(std::vector<Tensor>& params);

}  // namespace xdr
