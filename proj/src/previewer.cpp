#include "iir/previewer.hpp"

#include <algorithm>
#include <string>

#include "iir/error.hpp"
#include "iir/ops.hpp"

namespace iir {

Tensor preview(const DenoiserNet& net, const Tensor& z_t, std::span<const int> t, const Tensor& c_lq,
               const NoiseSchedule& schedule) {
  if (!net.adapter_enabled()) throw Error("preview: adapter is not enabled");
  Conditioning cond;
  cond.class_ids.assign(t.size(), net.cfg.null_class());
  cond.c_lq = c_lq;
  const Tensor eps = net.forward(z_t, t, cond);
  return ops::clamp(x0_from_eps(z_t, eps, t, schedule), Real(-1), Real(1));
}

int grid_successor(std::span<const int> grid, int s) {
  auto it = std::find(grid.begin(), grid.end(), s);
  if (it == grid.end()) throw Error("teacher step: s=" + std::to_string(s) + " is not on the grid");
  if (it + 1 == grid.end()) {
    throw Error("teacher step: s=" + std::to_string(s) + " is the bottom of the grid");
  }
  return *(it + 1);
}

std::pair<Tensor, std::vector<int>> teacher_step(DenoiserNet& net, const Tensor& z_s,
                                                 std::span<const int> s, const Tensor& c_lq,
                                                 std::span<const int> class_ids,
                                                 const NoiseSchedule& schedule,
                                                 std::span<const int> grid, bool clip_x0) {
  std::vector<int> t(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) t[i] = grid_successor(grid, s[i]);
  NoGradGuard no_grad;
  std::optional<AdapterScope> scope;
  if (net.has_adapter) scope.emplace(net, false);
  Conditioning cond;
  cond.class_ids.assign(class_ids.begin(), class_ids.end());
  cond.c_lq = c_lq;
  Tensor x0 = x0_from_eps(z_s, net.forward(z_s, s, cond), s, schedule);
  if (clip_x0) x0 = ops::clamp(x0, Real(-1), Real(1));
  return {ddim_step(z_s, x0, s, t, schedule), std::move(t)};
}

Tensor distill_loss(const DenoiserNet& net, const DistillBatch& batch, const NoiseSchedule& schedule) {
  if (batch.s.size() != batch.t.size()) throw ShapeError("distill: s and t batch sizes differ");
  for (std::size_t i = 0; i < batch.s.size(); ++i) {
    if (batch.t[i] > batch.s[i]) {
      throw Error("distill: t=" + std::to_string(batch.t[i]) + " is above s=" +
                  std::to_string(batch.s[i]));
    }
  }
  Tensor target;
  {
    NoGradGuard no_grad;
    target = preview(net, batch.z_t, batch.t, batch.c_lq_t, schedule).detach();
  }
  return ops::mse(preview(net, batch.z_s, batch.s, batch.c_lq_s, schedule), target);
}

double self_consistency(DenoiserNet& net, const CompactEncoder& dcp, const Tensor& lq,
                        std::span<const int> class_ids, const NoiseSchedule& schedule,
                        std::span<const int> grid, std::uint64_t seed, bool clip_x0) {
  NoGradGuard no_grad;
  AdapterScope on(net, true);
  const std::int64_t n = lq.dim(0);
  Rng rng(seed);
  Tensor z = rng.normal_tensor(lq.shape(), schedule.beta(grid.front()));
  std::vector<int> s(static_cast<std::size_t>(n), grid.front());
  Tensor psi_s = preview(net, z, s, dcp.forward(lq, s), schedule);
  double total = 0.0;
  int pairs = 0;
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const Tensor c_lq = dcp.forward(lq, s);
    auto [z_t, t] = teacher_step(net, z, s, c_lq, class_ids, schedule, grid, clip_x0);
    Tensor psi_t = preview(net, z_t, t, dcp.forward(lq, t), schedule);
    total += ops::mse(psi_s, psi_t).item();
    ++pairs;
    z = z_t;
    s = t;
    psi_s = psi_t;
  }
  return pairs > 0 ? total / pairs : 0.0;
}

}  // namespace iir
