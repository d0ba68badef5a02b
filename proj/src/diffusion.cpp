#include "iir/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <ostream>
#include <string>

#include "iir/error.hpp"
#include "iir/ops.hpp"

namespace iir {

NoiseSchedule::NoiseSchedule(int steps) : steps_(steps) {
  if (steps < 2) throw ConfigError("NoiseSchedule: need at least 2 steps");
  alpha_.resize(static_cast<std::size_t>(steps) + 1);
  beta_.resize(alpha_.size());
  for (int t = 0; t <= steps; ++t) {
    const double a = std::cos(static_cast<double>(t) / steps * std::numbers::pi / 2.0);
    alpha_[static_cast<std::size_t>(t)] = t == steps ? 0.0 : a;
    beta_[static_cast<std::size_t>(t)] = std::sqrt(std::max(0.0, 1.0 - a * a));
  }
  alpha_[0] = 1.0;
  beta_[0] = 0.0;
  beta_.back() = 1.0;
}

void NoiseSchedule::check(int t) const {
  if (t < 0 || t > steps_) {
    throw Error("time-step " + std::to_string(t) + " outside [0, " + std::to_string(steps_) + "]");
  }
}

double NoiseSchedule::alpha(int t) const {
  check(t);
  return alpha_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::beta(int t) const {
  check(t);
  return beta_[static_cast<std::size_t>(t)];
}

std::vector<int> NoiseSchedule::inference_grid(int count) const {
  if (count < 1 || count > steps_ - 1) {
    throw ConfigError("inference_grid: " + std::to_string(count) + " steps on a grid of " +
                      std::to_string(steps_));
  }
  std::vector<int> grid;
  for (int k = 0; k < count; ++k) {
    grid.push_back(static_cast<int>(
        std::lround(static_cast<double>(count - k) * (steps_ - 1) / count)));
  }
  return grid;
}

void NoiseSchedule::write_csv(std::ostream& out) const {
  out << "t,alpha,beta\n";
  out.precision(17);
  for (int t = 0; t <= steps_; ++t) out << t << ',' << alpha(t) << ',' << beta(t) << '\n';
}

namespace {

void require_batch(const char* op, const Tensor& x, std::size_t count) {
  if (x.rank() < 1 || static_cast<std::size_t>(x.dim(0)) != count) {
    throw ShapeError(std::string(op) + ": " + std::to_string(count) + " time-steps for batch " +
                     shape_str(x.shape()));
  }
}

std::vector<Real> to_real(std::span<const double> v) { return {v.begin(), v.end()}; }

}  // namespace

DiffusionSample add_noise(const Tensor& x, std::span<const int> t, const NoiseSchedule& schedule,
                          Rng& rng) {
  require_batch("add_noise", x, t.size());
  for (int ti : t) (void)schedule.alpha(ti);
  Tensor eps = rng.normal_tensor(x.shape());
  return {diffuse(x, eps, t, schedule), {t.begin(), t.end()}, eps};
}

Tensor diffuse(const Tensor& x, const Tensor& eps, std::span<const int> t,
               const NoiseSchedule& schedule) {
  require_batch("diffuse", x, t.size());
  std::vector<Real> a, b;
  for (int ti : t) {
    a.push_back(static_cast<Real>(schedule.alpha(ti)));
    b.push_back(static_cast<Real>(schedule.beta(ti)));
  }
  return ops::add_scaled_per_sample(ops::scale_per_sample(x, a), eps, b);
}

Tensor diffusion_loss(const Tensor& eps_pred, const Tensor& eps) { return ops::mse(eps_pred, eps); }

Tensor eps_to_x0(const Tensor& z, const Tensor& eps_pred, std::span<const double> alpha,
                 std::span<const double> beta) {
  require_batch("eps_to_x0", z, alpha.size());
  std::vector<double> neg_beta, inv_alpha;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    if (alpha[i] < 1e-6) {
      throw NumericError("eps_to_x0: alpha " + std::to_string(alpha[i]) + " too small to invert");
    }
    neg_beta.push_back(-beta[i]);
    inv_alpha.push_back(1.0 / alpha[i]);
  }
  return ops::scale_per_sample(ops::add_scaled_per_sample(z, eps_pred, to_real(neg_beta)),
                               to_real(inv_alpha));
}

Tensor x0_from_eps(const Tensor& z, const Tensor& eps_pred, std::span<const int> t,
                   const NoiseSchedule& schedule) {
  std::vector<double> a, b;
  for (int ti : t) {
    a.push_back(schedule.alpha(ti));
    b.push_back(schedule.beta(ti));
  }
  return eps_to_x0(z, eps_pred, a, b);
}

Tensor ddim_update(const Tensor& z, const Tensor& x0, std::span<const double> alpha_t,
                   std::span<const double> beta_t, std::span<const double> alpha_prev,
                   std::span<const double> beta_prev) {
  require_batch("ddim_update", z, alpha_t.size());
  std::vector<double> zc, xc;
  for (std::size_t i = 0; i < alpha_t.size(); ++i) {
    if (beta_t[i] <= 0.0) throw NumericError("ddim_update: source beta is zero");
    const double ratio = beta_prev[i] / beta_t[i];
    zc.push_back(ratio);
    xc.push_back(alpha_prev[i] - alpha_t[i] * ratio);
  }
  return ops::add_scaled_per_sample(ops::scale_per_sample(z, to_real(zc)), x0, to_real(xc));
}

Tensor ddim_step(const Tensor& z, const Tensor& x0, std::span<const int> t,
                 std::span<const int> t_prev, const NoiseSchedule& schedule) {
  if (t.size() != t_prev.size()) throw ShapeError("ddim_step: t and t_prev differ in length");
  std::vector<double> at, bt, ap, bp;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t_prev[i] < 0 || t_prev[i] > t[i]) {
      throw Error("ddim_step: need 0 <= t_prev <= t, got " + std::to_string(t_prev[i]) + " and " +
                  std::to_string(t[i]));
    }
    at.push_back(schedule.alpha(t[i]));
    bt.push_back(schedule.beta(t[i]));
    ap.push_back(schedule.alpha(t_prev[i]));
    bp.push_back(schedule.beta(t_prev[i]));
  }
  return ddim_update(z, x0, at, bt, ap, bp);
}

Tensor timestep_features(std::span<const int> t, int dim) {
  if (dim < 2 || dim % 2) throw ConfigError("timestep_features: dim must be even");
  const int half = dim / 2;
  std::vector<Real> v;
  v.reserve(t.size() * static_cast<std::size_t>(dim));
  for (int ti : t) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      v.push_back(static_cast<Real>(std::sin(ti * freq)));
    }
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      v.push_back(static_cast<Real>(std::cos(ti * freq)));
    }
  }
  return Tensor::from({static_cast<std::int64_t>(t.size()), dim}, std::move(v));
}

}  // namespace iir
