#pragma once

// Parameterized building blocks shared by the denoiser, the compact encoder
// and the aggregator. Parameters are Tensor leaves; `collect` appends them
// under a dotted name for optimizers and checkpoints.

#include <optional>
#include <string>

#include "iir/checkpoint.hpp"
#include "iir/rng.hpp"
#include "iir/tensor.hpp"

namespace iir::nn {

using ParamList = NamedTensors;

// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_init(const Shape& shape, std::int64_t fan_in, Rng& rng);

// Rank-r additive weight delta: W_eff = W + scale * down @ up.
struct LowRankAdapter {
  Tensor down;  // [in, r]
  Tensor up;    // [r, out], zero at attach time
  Real scale = 1;
  bool enabled = false;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
  std::optional<LowRankAdapter> adapter;

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias = true);

  Tensor forward(const Tensor& x) const;
  Tensor effective_weight() const;
  void attach_adapter(int rank, Real scale, Rng& rng);
  void collect(ParamList& out, const std::string& prefix) const;
  void collect_adapter(ParamList& out, const std::string& prefix) const;
};

struct Conv3x3 {
  Tensor weight;  // [Co, Ci, 3, 3]
  Tensor bias;    // [Co]
  int stride = 1;

  Conv3x3() = default;
  Conv3x3(std::int64_t in, std::int64_t out, Rng& rng, int stride = 1);
  static Conv3x3 zero(std::int64_t in, std::int64_t out);

  Tensor forward(const Tensor& x, int bands = 1) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::int64_t dim);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Pre-norm multi-head attention returning only the attention branch (no
// residual). Self-attention when `context` is undefined.
struct Attention {
  LayerNorm norm;
  Linear q, k, v, o;
  int heads = 1;

  Attention() = default;
  Attention(std::int64_t dim, std::int64_t context_dim, int heads, Rng& rng);

  Tensor forward(const Tensor& x, const Tensor& context = {}) const;
  void attach_adapters(int rank, Real scale, Rng& rng);
  void set_adapter_enabled(bool enabled);
  void collect(ParamList& out, const std::string& prefix) const;
  void collect_adapters(ParamList& out, const std::string& prefix) const;
};

struct Mlp {
  Linear in, out;

  Mlp() = default;
  Mlp(std::int64_t dim, std::int64_t hidden, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Sinusoidal features -> Linear -> SiLU -> Linear.
struct TimeEmbedding {
  int features = 0;
  Linear fc1, fc2;

  TimeEmbedding() = default;
  TimeEmbedding(int features, std::int64_t dim, Rng& rng);
  Tensor forward(std::span<const int> t) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// conv(silu(x)) + time shift -> conv(silu(.)) plus identity skip.
struct ResBlock {
  Conv3x3 conv1, conv2;
  Linear time_proj;

  ResBlock() = default;
  ResBlock(std::int64_t channels, std::int64_t time_dim, Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& temb, int bands = 1) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Overwrites every tensor in `dst` with the same-named tensor from `src`.
void copy_params(const ParamList& src, const ParamList& dst);

std::int64_t count_params(const ParamList& params);

}  // namespace iir::nn
