#pragma once

// Guided DDIM sampling with previews, aggregator residuals and the
// adaptive quality gate, plus the ablation and creative variants.

#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iir/aggregator.hpp"
#include "iir/diffusion.hpp"
#include "iir/nets.hpp"

namespace iir {

// Every network the sampler touches.
struct Pipeline {
  NetConfig cfg;
  NoiseSchedule schedule;
  DenoiserNet denoiser;
  CompactEncoder dcp;
  std::optional<AggregatorNet> aggregator;

  bool has_previewer() const { return denoiser.has_adapter; }
};

enum class SamplerMode { adares, fixed, no_reference, noisy_preview };

std::string mode_name(SamplerMode mode);
SamplerMode parse_mode(const std::string& name);

struct CreativeSpec {
  int target_class = 0;
  // Residuals are dropped at grid indices k > cutoff; 0 disables the cutoff.
  int cutoff = 0;
};

struct SamplerConfig {
  int steps = 30;
  double cfg_scale = 7.0;
  // The gate is evaluated while more than `eta` steps remain, else zero.
  int eta = 4;
  SamplerMode mode = SamplerMode::adares;
  std::optional<CreativeSpec> creative;
  double delta_max = 5.0;
  std::uint64_t seed = 0;
  // Also drop the residuals in the unconditional guidance branch.
  bool uncond_drops_residuals = false;
  bool clip_x0 = true;
  bool snapshots = false;

  void validate() const;
};

struct TrajectoryRecord {
  int step = 0;
  int t = 0;
  double dist_preview_mean = 0.0;  // mean squared gap, preview vs x0 estimate
  double dist_temporal = 0.0;      // mean squared gap, preview vs previous preview
  double delta = 0.0;              // gate for the next step
  Tensor preview;                  // [1,H,W] snapshots when requested
  Tensor z_hat;
};

struct TrajectoryLog {
  std::vector<TrajectoryRecord> records;

  void write_csv(std::ostream& out) const;
};

struct SampleResult {
  Tensor images;  // [N,1,H,W] in [-1,1]
  std::vector<TrajectoryLog> logs;
};

// Replaces the quality gate; receives (preview, x0 estimate, previous preview)
// for one image.
using DeltaFn = std::function<double(const Tensor&, const Tensor&, const Tensor&)>;

struct SamplerHooks {
  DeltaFn delta;
};

Tensor cfg_eps(const Tensor& eps_cond, const Tensor& eps_uncond, double scale);

// ||psi - z_hat||^2 / ||psi - psi_prev||^2 clamped to [0, delta_max];
// a denominator below 1e-12 yields delta_max.
double delta_indicator(const Tensor& psi_hat, const Tensor& z_hat, const Tensor& psi_prev,
                       double delta_max);

// Batched: row i of `lq` is restored with class_ids[i] and its own noise
// stream Rng(seed).fork(stream_ids[i]); stream ids default to 0..N-1.
SampleResult adares_sample(Pipeline& pipe, const Tensor& lq, std::span<const int> class_ids,
                           const SamplerConfig& config, const SamplerHooks& hooks = {},
                           std::span<const std::uint64_t> stream_ids = {});

// Class-swap restoration: target class throughout, aggregator cut off late.
SampleResult creative_sample(Pipeline& pipe, const Tensor& lq, int target_class, int cutoff,
                             SamplerConfig config, std::span<const std::uint64_t> stream_ids = {});

// Classifier-free guided DDIM with the compact LQ tokens only: no previews,
// no aggregator.
Tensor plain_cfg_sample(Pipeline& pipe, const Tensor& lq, std::span<const int> class_ids,
                        const SamplerConfig& config, std::span<const std::uint64_t> stream_ids = {});

// Null class, zero LQ tokens, no guidance.
Tensor unconditional_sample(Pipeline& pipe, std::int64_t count, const SamplerConfig& config,
                            std::span<const std::uint64_t> stream_ids = {});

}  // namespace iir
