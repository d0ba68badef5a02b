#pragma once

// Trainable copy of the denoiser's compression path that reads the preview
// and the LQ image side by side, fuses the two streams with a spatial feature
// transform at each level and emits one zero-initialized residual per
// decoder level.

#include <array>
#include <span>
#include <utility>
#include <vector>

#include "iir/diffusion.hpp"
#include "iir/nets.hpp"

namespace iir {

// [N,C,H,W] x2 -> [N,C,2H,W], preview on top.
Tensor spatial_concat(const Tensor& preview, const Tensor& lq);
// Inverse of spatial_concat: (top half, bottom half).
std::pair<Tensor, Tensor> spatial_split(const Tensor& joint);

// Predicts per-pixel, per-channel (alpha, beta) from the LQ stream.
struct SftHead {
  nn::Conv3x3 conv1;
  nn::Conv3x3 conv2;  // c -> 2c, alpha then beta

  SftHead() = default;
  SftHead(std::int64_t channels, Rng& rng);
  std::pair<Tensor, Tensor> forward(const Tensor& h_o) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;
};

// (1 + alpha) * h_p + beta.
Tensor sft_modulate(const Tensor& h_p, const Tensor& alpha, const Tensor& beta);
Tensor sft_fuse(const Tensor& h_p, const Tensor& h_o, const SftHead& head);

struct AggregatorNet {
  NetConfig cfg;
  nn::TimeEmbedding time;
  nn::Conv3x3 conv_in;
  nn::ResBlock enc0;
  nn::Conv3x3 down0;
  nn::ResBlock enc1;
  nn::Attention attn1;
  nn::Conv3x3 down1;
  nn::ResBlock enc2;
  nn::Attention attn2;
  std::array<SftHead, kInjectionLevels> sft;
  std::array<nn::Conv3x3, kInjectionLevels> proj;  // zero-initialized

  AggregatorNet() = default;
  // Encoder weights copied from `base`; SFT heads random; projections zero.
  AggregatorNet(const DenoiserNet& base, Rng& rng);

  // Joint-map features per level before the split: [N,c,2h,w].
  std::vector<Tensor> encode(const Tensor& preview, const Tensor& lq, std::span<const int> t) const;
  // One residual per injection level, matching DenoiserNet::residual_shapes.
  std::vector<Tensor> forward(const Tensor& preview, const Tensor& lq, std::span<const int> t) const;

  void collect(nn::ParamList& out, const std::string& prefix) const;
};

// alpha_t * preview + beta_t * fresh noise.
Tensor noisy_preview_variant(const Tensor& preview, std::span<const int> t, const NoiseSchedule& schedule,
                             Rng& rng);

}  // namespace iir
