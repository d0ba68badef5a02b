#include "iir/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "iir/error.hpp"

namespace iir {

double scheduled_lr(double base, LrSchedule schedule, std::int64_t step, std::int64_t total) {
  if (schedule == LrSchedule::constant || total <= 0) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

void adamw_step(std::span<Tensor> params, AdamState& state, const AdamWConfig& config) {
  if (state.m.empty() && state.v.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.numel()), Real(0));
      state.v.emplace_back(static_cast<std::size_t>(p.numel()), Real(0));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error("adamw_step: state holds " + std::to_string(state.m.size()) + " slots for " +
                std::to_string(params.size()) + " parameters");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != static_cast<std::size_t>(p.numel()) || v.size() != m.size()) {
      throw Error("adamw_step: state slot " + std::to_string(i) + " has wrong size");
    }
    auto data = p.mutable_data();
    const bool has = p.has_grad();
    std::span<const Real> g = has ? p.grad() : std::span<const Real>{};
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double gj = has ? g[j] : 0.0;
      double w = data[j];
      w -= config.lr * config.weight_decay * w;
      const double mj = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
      const double vj = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
      m[j] = static_cast<Real>(mj);
      v[j] = static_cast<Real>(vj);
      w -= config.lr * (mj / c1) / (std::sqrt(vj / c2) + config.eps);
      data[j] = static_cast<Real>(w);
    }
  }
}

void sgd_step(std::span<Tensor> params, double lr) {
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    auto g = p.grad();
    for (std::size_t j = 0; j < data.size(); ++j) data[j] = static_cast<Real>(data[j] - lr * g[j]);
  }
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad()) total += double(g) * g;
  }
  const double norm = std::sqrt(total);
  if (!std::isfinite(norm)) throw NumericError("clip_grad_norm: non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g = static_cast<Real>(g * k);
    }
  }
  return norm;
}

}  // namespace iir
