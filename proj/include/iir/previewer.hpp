#pragma once

// One-step preview generator: the denoiser with its low-rank adapter enabled,
// fed only the compact LQ tokens (class branch pinned to the null class),
// plus the consistency distillation that trains the adapter.

#include <span>
#include <utility>
#include <vector>

#include "iir/diffusion.hpp"
#include "iir/nets.hpp"

namespace iir {

// x0 estimate of the adapted model, clamped to [-1, 1]. Throws if the adapter
// is disabled or missing.
Tensor preview(const DenoiserNet& net, const Tensor& z_t, std::span<const int> t, const Tensor& c_lq,
               const NoiseSchedule& schedule);

// One teacher step and its inputs.
struct DistillBatch {
  Tensor z_s;
  std::vector<int> s;
  Tensor c_lq_s;
  Tensor z_t;
  std::vector<int> t;
  Tensor c_lq_t;
};

// Next grid step strictly below `s`. Throws if `s` is not on the grid or is
// its last entry.
int grid_successor(std::span<const int> grid, int s);

// Base model (adapter off) with class and LQ conditioning, one DDIM step from
// each s to its grid successor. `clip_x0` clamps the x0 estimate to the data
// range as the sampler does.
std::pair<Tensor, std::vector<int>> teacher_step(DenoiserNet& net, const Tensor& z_s,
                                                 std::span<const int> s, const Tensor& c_lq,
                                                 std::span<const int> class_ids,
                                                 const NoiseSchedule& schedule,
                                                 std::span<const int> grid, bool clip_x0 = true);

// Mean squared gap between the student preview at (z_s, s) and the
// stop-gradient preview at (z_t, t). Gradients reach only the student branch.
Tensor distill_loss(const DenoiserNet& net, const DistillBatch& batch, const NoiseSchedule& schedule);

// Mean over images and adjacent grid pairs of the squared preview gap along
// teacher trajectories started from noise. `seed` picks the starting noise.
double self_consistency(DenoiserNet& net, const CompactEncoder& dcp, const Tensor& lq,
                        std::span<const int> class_ids, const NoiseSchedule& schedule,
                        std::span<const int> grid, std::uint64_t seed, bool clip_x0 = true);

}  // namespace iir
