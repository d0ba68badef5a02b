#pragma once

// Variance-preserving forward process, the epsilon-parameterized loss, the
// x0 re-parameterization and the deterministic DDIM update.
//
// Batched tensors carry one time-step per leading-axis sample.

#include <iosfwd>
#include <span>
#include <vector>

#include "iir/rng.hpp"
#include "iir/tensor.hpp"

namespace iir {

// alpha_t = cos((t/T) * pi/2), beta_t = sqrt(1 - alpha_t^2), t in [0, T].
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int steps = 256);

  int steps() const { return steps_; }
  double alpha(int t) const;
  double beta(int t) const;

  // `count` uniformly spaced steps from T-1 down to the bottom of the grid,
  // strictly decreasing. The sampler finishes with a step to t = 0.
  std::vector<int> inference_grid(int count) const;

  // Columns t, alpha, beta.
  void write_csv(std::ostream& out) const;

 private:
  void check(int t) const;

  int steps_;
  std::vector<double> alpha_;
  std::vector<double> beta_;
};

struct DiffusionSample {
  Tensor z_t;
  std::vector<int> t;
  Tensor eps;
};

// z_t = alpha_t * x + beta_t * eps with eps drawn from `rng`.
DiffusionSample add_noise(const Tensor& x, std::span<const int> t, const NoiseSchedule& schedule,
                          Rng& rng);
// Deterministic form with a caller-supplied eps.
Tensor diffuse(const Tensor& x, const Tensor& eps, std::span<const int> t,
               const NoiseSchedule& schedule);

// Mean squared error between predicted and true noise.
Tensor diffusion_loss(const Tensor& eps_pred, const Tensor& eps);

// (z - beta * eps) / alpha per sample. Rows with beta = 0 return z untouched.
Tensor eps_to_x0(const Tensor& z, const Tensor& eps_pred, std::span<const double> alpha,
                 std::span<const double> beta);
Tensor x0_from_eps(const Tensor& z, const Tensor& eps_pred, std::span<const int> t,
                   const NoiseSchedule& schedule);

// alpha_prev * x0 + (beta_prev / beta_t) * (z - alpha_t * x0).
Tensor ddim_update(const Tensor& z, const Tensor& x0, std::span<const double> alpha_t,
                   std::span<const double> beta_t, std::span<const double> alpha_prev,
                   std::span<const double> beta_prev);
Tensor ddim_step(const Tensor& z, const Tensor& x0, std::span<const int> t,
                 std::span<const int> t_prev, const NoiseSchedule& schedule);

// Sinusoidal embedding of integer time-steps: [N, dim].
Tensor timestep_features(std::span<const int> t, int dim);

}  // namespace iir
