#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "iir/tensor.hpp"

namespace iir {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// One moment pair per parameter, in parameter order.
struct AdamState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::int64_t step = 0;
};

// Decoupled weight decay (AdamW). Parameters without a gradient buffer are
// treated as having a zero gradient. An empty state is sized on first use.
void adamw_step(std::span<Tensor> params, AdamState& state, const AdamWConfig& config);

enum class LrSchedule { constant, cosine };

// Learning rate for 0-based `step` of `total`: constant, or cosine-annealed
// from `base` towards 0.
double scheduled_lr(double base, LrSchedule schedule, std::int64_t step, std::int64_t total);

void sgd_step(std::span<Tensor> params, double lr);

void zero_grads(std::span<Tensor> params);

// Rescales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace iir
