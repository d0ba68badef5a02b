#include "iir/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "iir/error.hpp"
#include "iir/ops.hpp"
#include "iir/previewer.hpp"

namespace iir {

namespace {

std::vector<std::uint64_t> default_streams(std::span<const std::uint64_t> ids, std::int64_t n) {
  if (!ids.empty()) {
    if (static_cast<std::int64_t>(ids.size()) != n) throw ShapeError("sampler: one stream id per image");
    return {ids.begin(), ids.end()};
  }
  std::vector<std::uint64_t> out(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

Tensor initial_noise(const std::vector<std::uint64_t>& streams, std::int64_t size, double stddev,
                     std::uint64_t seed) {
  const Rng root(seed);
  std::vector<Real> v;
  v.reserve(streams.size() * static_cast<std::size_t>(size * size));
  for (auto id : streams) {
    Rng rng = root.fork(id);
    for (std::int64_t p = 0; p < size * size; ++p) v.push_back(static_cast<Real>(rng.normal() * stddev));
  }
  return Tensor::from({static_cast<std::int64_t>(streams.size()), 1, size, size}, std::move(v));
}

Tensor row(const Tensor& x, std::int64_t i) {
  const std::int64_t per = x.numel() / x.dim(0);
  auto d = x.data().subspan(static_cast<std::size_t>(i * per), static_cast<std::size_t>(per));
  Shape s = x.shape();
  s[0] = 1;
  return Tensor::from(s, {d.begin(), d.end()});
}

double mean_sq_gap(std::span<const Real> a, std::span<const Real> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return a.empty() ? 0.0 : acc / static_cast<double>(a.size());
}

void check_pipeline(const Pipeline& pipe, const Tensor& lq, std::size_t classes, bool previews,
                    bool aggregator) {
  if (!pipe.dcp.patch_embed.weight.defined() || !pipe.denoiser.conv_in.weight.defined()) {
    throw Error("sampler: networks are not loaded");
  }
  if (previews && !pipe.has_previewer()) throw Error("sampler: previewer adapter is not loaded");
  if (aggregator && !pipe.aggregator) throw Error("sampler: aggregator is not loaded");
  const int s = pipe.cfg.image_size;
  if (lq.rank() != 4 || lq.dim(1) != 1 || lq.dim(2) != s || lq.dim(3) != s) {
    throw ShapeError("sampler: LQ input " + shape_str(lq.shape()) + " does not match model resolution " +
                     std::to_string(s));
  }
  if (classes != static_cast<std::size_t>(lq.dim(0))) throw ShapeError("sampler: one class id per image");
}

Tensor guided_eps(const DenoiserNet& net, const Tensor& z, std::span<const int> t,
                  std::span<const int> class_ids, const Tensor& c_lq, const std::vector<Tensor>& residuals,
                  const std::vector<Real>& delta, const SamplerConfig& config) {
  Conditioning cond{{class_ids.begin(), class_ids.end()}, c_lq, residuals, delta};
  const Tensor eps_c = net.forward(z, t, cond);
  Conditioning uncond{std::vector<int>(class_ids.size(), net.cfg.null_class()),
                      Tensor::zeros(c_lq.shape()), config.uncond_drops_residuals ? std::vector<Tensor>{}
                                                                                 : residuals,
                      delta};
  const Tensor eps_u = net.forward(z, t, uncond);
  return cfg_eps(eps_c, eps_u, config.cfg_scale);
}

template <class Body>
void run_step(int step, Body&& body) {
  try {
    body();
  } catch (const NumericError& e) {
    throw NumericError("sampler aborted at step " + std::to_string(step) + ": " + e.what());
  }
}

}  // namespace

std::string mode_name(SamplerMode mode) {
  switch (mode) {
    case SamplerMode::adares: return "adares";
    case SamplerMode::fixed: return "fixed";
    case SamplerMode::no_reference: return "no_reference";
    case SamplerMode::noisy_preview: return "noisy_preview";
  }
  return "?";
}

SamplerMode parse_mode(const std::string& name) {
  for (auto m : {SamplerMode::adares, SamplerMode::fixed, SamplerMode::no_reference, SamplerMode::noisy_preview}) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown sampler mode '" + name + "'");
}

void SamplerConfig::validate() const {
  if (steps < 2) throw ConfigError("sampler.steps must be at least 2");
  if (eta < 0 || eta >= steps) throw ConfigError("sampler.eta must lie in [0, steps)");
  if (delta_max <= 0) throw ConfigError("sampler.delta_max must be positive");
  if (creative && (creative->cutoff < 0 || creative->cutoff > steps)) {
    throw ConfigError("creative cutoff must lie in [0, steps]");
  }
}

void TrajectoryLog::write_csv(std::ostream& out) const {
  out << "step,t,dist_preview_mean,dist_temporal,delta\n";
  out.precision(9);
  for (const auto& r : records) {
    out << r.step << ',' << r.t << ',' << r.dist_preview_mean << ',' << r.dist_temporal << ',' << r.delta
        << '\n';
  }
}

Tensor cfg_eps(const Tensor& eps_cond, const Tensor& eps_uncond, double scale) {
  return ops::add(eps_uncond, ops::scale(ops::sub(eps_cond, eps_uncond), static_cast<Real>(scale)));
}

double delta_indicator(const Tensor& psi_hat, const Tensor& z_hat, const Tensor& psi_prev, double delta_max) {
  if (psi_hat.shape() != z_hat.shape() || psi_hat.shape() != psi_prev.shape()) {
    throw ShapeError("delta_indicator: operand shapes differ");
  }
  double num = 0.0, den = 0.0;
  auto p = psi_hat.data(), z = z_hat.data(), q = psi_prev.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = static_cast<double>(p[i]) - z[i];
    const double b = static_cast<double>(p[i]) - q[i];
    num += a * a;
    den += b * b;
  }
  if (den < 1e-12) return delta_max;
  return std::clamp(num / den, 0.0, delta_max);
}

SampleResult adares_sample(Pipeline& pipe, const Tensor& lq, std::span<const int> class_ids,
                           const SamplerConfig& config, const SamplerHooks& hooks,
                           std::span<const std::uint64_t> stream_ids) {
  config.validate();
  const bool references = config.mode != SamplerMode::no_reference;
  check_pipeline(pipe, lq, class_ids.size(), references, references);
  NoGradGuard no_grad;
  const std::int64_t n = lq.dim(0);
  const auto streams = default_streams(stream_ids, n);
  const auto& sched = pipe.schedule;
  const auto grid = sched.inference_grid(config.steps);
  const int k_total = config.steps;

  std::vector<int> classes(class_ids.begin(), class_ids.end());
  if (config.creative) classes.assign(static_cast<std::size_t>(n), config.creative->target_class);

  Tensor z = initial_noise(streams, pipe.cfg.image_size, sched.beta(grid.front()), config.seed);
  std::vector<Real> delta(static_cast<std::size_t>(n), Real(1));
  Tensor psi_prev = Tensor::zeros(lq.shape());
  SampleResult result;
  result.logs.resize(static_cast<std::size_t>(n));
  const Rng root(config.seed);

  // Base-model passes run with the previewer adapter off.
  std::optional<AdapterScope> base;
  if (pipe.denoiser.has_adapter) base.emplace(pipe.denoiser, false);
  for (int k = 0; k < k_total; ++k) run_step(k, [&] {
    const std::vector<int> t(static_cast<std::size_t>(n), grid[static_cast<std::size_t>(k)]);
    const std::vector<int> t_prev(static_cast<std::size_t>(n),
                                  k + 1 < k_total ? grid[static_cast<std::size_t>(k + 1)] : 0);
    const Tensor c_lq = pipe.dcp.forward(lq, t);

    Tensor psi;
    std::vector<Tensor> residuals;
    if (references) {
      AdapterScope on(pipe.denoiser, true);
      psi = preview(pipe.denoiser, z, t, c_lq, sched);
    }
    const bool cut = config.creative && config.creative->cutoff > 0 && k > config.creative->cutoff;
    if (references && !cut) {
      Tensor reference = psi;
      if (config.mode == SamplerMode::noisy_preview) {
        std::vector<Tensor> noisy;
        for (std::int64_t i = 0; i < n; ++i) {
          Rng rng = root.fork(streams[static_cast<std::size_t>(i)]).fork(static_cast<std::uint64_t>(k) + 1);
          const int ti[] = {t[0]};
          noisy.push_back(noisy_preview_variant(row(psi, i), ti, sched, rng));
        }
        reference = ops::concat(noisy, 0);
      }
      residuals = pipe.aggregator->forward(reference, lq, t);
    }

    const Tensor eps = guided_eps(pipe.denoiser, z, t, classes, c_lq, residuals, delta, config);
    Tensor z_hat = x0_from_eps(z, eps, t, sched);
    if (config.clip_x0) z_hat = ops::clamp(z_hat, Real(-1), Real(1));

    const bool gate_open = k_total - k > config.eta;
    for (std::int64_t i = 0; i < n; ++i) {
      TrajectoryRecord rec;
      rec.step = k;
      rec.t = t[0];
      double d = 0.0;
      if (references) {
        const Tensor p = row(psi, i), zh = row(z_hat, i), q = row(psi_prev, i);
        rec.dist_preview_mean = mean_sq_gap(p.data(), zh.data());
        rec.dist_temporal = mean_sq_gap(p.data(), q.data());
        if (gate_open) {
          if (config.mode == SamplerMode::fixed) {
            d = 1.0;
          } else if (hooks.delta) {
            d = hooks.delta(p, zh, q);
          } else {
            d = delta_indicator(p, zh, q, config.delta_max);
          }
        }
        if (config.snapshots) {
          rec.preview = ops::reshape(p, {1, p.dim(2), p.dim(3)});
          rec.z_hat = ops::reshape(zh, {1, zh.dim(2), zh.dim(3)});
        }
      }
      rec.delta = d;
      delta[static_cast<std::size_t>(i)] = static_cast<Real>(d);
      result.logs[static_cast<std::size_t>(i)].records.push_back(std::move(rec));
    }
    if (references) psi_prev = psi;
    z = ddim_step(z, z_hat, t, t_prev, sched);
  });
  result.images = ops::clamp(z, Real(-1), Real(1));
  return result;
}

SampleResult creative_sample(Pipeline& pipe, const Tensor& lq, int target_class, int cutoff,
                             SamplerConfig config, std::span<const std::uint64_t> stream_ids) {
  config.creative = CreativeSpec{target_class, cutoff};
  const std::vector<int> classes(static_cast<std::size_t>(lq.dim(0)), target_class);
  return adares_sample(pipe, lq, classes, config, {}, stream_ids);
}

Tensor plain_cfg_sample(Pipeline& pipe, const Tensor& lq, std::span<const int> class_ids,
                        const SamplerConfig& config, std::span<const std::uint64_t> stream_ids) {
  config.validate();
  check_pipeline(pipe, lq, class_ids.size(), false, false);
  NoGradGuard no_grad;
  const std::int64_t n = lq.dim(0);
  const auto streams = default_streams(stream_ids, n);
  const auto& sched = pipe.schedule;
  const auto grid = sched.inference_grid(config.steps);
  Tensor z = initial_noise(streams, pipe.cfg.image_size, sched.beta(grid.front()), config.seed);
  std::optional<AdapterScope> base;
  if (pipe.denoiser.has_adapter) base.emplace(pipe.denoiser, false);
  for (int k = 0; k < config.steps; ++k) run_step(k, [&] {
    const std::vector<int> t(static_cast<std::size_t>(n), grid[static_cast<std::size_t>(k)]);
    const std::vector<int> t_prev(static_cast<std::size_t>(n),
                                  k + 1 < config.steps ? grid[static_cast<std::size_t>(k + 1)] : 0);
    const Tensor c_lq = pipe.dcp.forward(lq, t);
    const Tensor eps = guided_eps(pipe.denoiser, z, t, class_ids, c_lq, {}, {}, config);
    Tensor z_hat = x0_from_eps(z, eps, t, sched);
    if (config.clip_x0) z_hat = ops::clamp(z_hat, Real(-1), Real(1));
    z = ddim_step(z, z_hat, t, t_prev, sched);
  });
  return ops::clamp(z, Real(-1), Real(1));
}

Tensor unconditional_sample(Pipeline& pipe, std::int64_t count, const SamplerConfig& config,
                            std::span<const std::uint64_t> stream_ids) {
  config.validate();
  NoGradGuard no_grad;
  const auto streams = default_streams(stream_ids, count);
  const auto& sched = pipe.schedule;
  const auto grid = sched.inference_grid(config.steps);
  const int s = pipe.cfg.image_size;
  Tensor z = initial_noise(streams, s, sched.beta(grid.front()), config.seed);
  Conditioning cond{std::vector<int>(static_cast<std::size_t>(count), pipe.cfg.null_class()),
                    Tensor::zeros({count, pipe.cfg.tokens, pipe.cfg.token_dim}), {}, {}};
  std::optional<AdapterScope> base;
  if (pipe.denoiser.has_adapter) base.emplace(pipe.denoiser, false);
  for (int k = 0; k < config.steps; ++k) run_step(k, [&] {
    const std::vector<int> t(static_cast<std::size_t>(count), grid[static_cast<std::size_t>(k)]);
    const std::vector<int> t_prev(static_cast<std::size_t>(count),
                                  k + 1 < config.steps ? grid[static_cast<std::size_t>(k + 1)] : 0);
    Tensor z_hat = x0_from_eps(z, pipe.denoiser.forward(z, t, cond), t, sched);
    if (config.clip_x0) z_hat = ops::clamp(z_hat, Real(-1), Real(1));
    z = ddim_step(z, z_hat, t, t_prev, sched);
  });
  return ops::clamp(z, Real(-1), Real(1));
}

}  // namespace iir
