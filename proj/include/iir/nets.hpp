#pragma once

// The denoiser UNet, the compact LQ encoder and the dual cross-attention
// conditioning block.
//
// Images are [N,1,24,24] in [-1,1]. The UNet runs three levels (24, 12, 6)
// with widths C, 2C, 4C. Conditioning blocks sit at the 12 and 6 levels plus
// the bottleneck and the mirrored decoder levels (five blocks in total; the
// 24-pixel level is convolution-only, as in SDXL's first stage).

#include <array>
#include <span>
#include <vector>

#include "iir/layers.hpp"

namespace iir {

struct NetConfig {
  int image_size = 24;
  int channels = 32;      // C
  int tokens = 8;         // M, compact encoder output tokens
  int token_dim = 64;     // D
  int class_tokens = 4;   // tokens per class label
  int num_classes = 4;    // class id num_classes is the null class
  int heads = 4;
  int patch = 4;
  int encoder_layers = 2;
  int lora_rank = 4;
  double lora_scale = 1.0;
  // LQ cross-attention weight per conditioning block, encoder to decoder.
  std::array<double, 5> w_lq{1.0, 1.0, 1.0, 1.0, 1.0};

  int time_dim() const { return 4 * channels; }
  int null_class() const { return num_classes; }
};

inline constexpr int kConditioningBlocks = 5;
inline constexpr int kInjectionLevels = 3;

// Learned token sequence per class, plus the null class used for guidance.
struct ClassEmbedding {
  Tensor table;  // [num_classes + 1, class_tokens * D]
  int num_classes = 0;
  int class_tokens = 0;
  int dim = 0;

  ClassEmbedding() = default;
  ClassEmbedding(const NetConfig& cfg, Rng& rng);
  // [N, class_tokens, D]
  Tensor forward(std::span<const int> class_ids) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;
};

// T_scale ⊙ LayerNorm(tokens) + T_shift; tokens [N,M,D], scale/shift [N,D].
Tensor adaptive_layer_norm(const Tensor& tokens, const Tensor& scale, const Tensor& shift);

// Degradation-robust compact encoder: 4x4 patches, self-attention layers,
// a learnable-query resampler and a time-modulated LayerNorm head.
struct CompactEncoder {
  NetConfig cfg;
  nn::Linear patch_embed;
  Tensor pos_embed;  // [L, D]
  std::vector<nn::Attention> layers_attn;
  std::vector<nn::LayerNorm> layers_norm;
  std::vector<nn::Mlp> layers_mlp;
  Tensor queries;  // [M, D]
  nn::Attention resampler;
  nn::LayerNorm context_norm;
  nn::LayerNorm resampler_norm;
  nn::Mlp resampler_mlp;
  nn::Linear time_fc;
  nn::Linear to_scale;
  nn::Linear to_shift;

  CompactEncoder() = default;
  CompactEncoder(const NetConfig& cfg, Rng& rng);

  // Resampled tokens before time modulation: [N, M, D].
  Tensor resample(const Tensor& lq) const;
  // Time modulation (scale, shift), each [N, D]; scale = 1 + linear(.).
  std::pair<Tensor, Tensor> modulation(std::span<const int> t) const;
  // Full encoder output c_lq: [N, M, D].
  Tensor forward(const Tensor& lq, std::span<const int> t) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;
};

// f_out = f_in + CrossAttn(f_in, c_txt) + w * CrossAttn(f_in, c_lq).
// The LQ branch is skipped entirely when w == 0; the text branch when
// `text` is null.
Tensor dual_cross_attn(const Tensor& f_in, const nn::Attention* text, const Tensor& c_txt,
                       const nn::Attention& lq, const Tensor& c_lq, double w);

// Self-attention over spatial tokens followed by the dual cross-attention.
struct DualCrossAttnBlock {
  nn::Attention self_attn;
  std::optional<nn::Attention> text_attn;
  std::optional<nn::Attention> lq_attn;
  double w_lq = 1.0;

  DualCrossAttnBlock() = default;
  DualCrossAttnBlock(std::int64_t dim, const NetConfig& cfg, double w_lq, Rng& rng,
                     bool with_text = true, bool with_lq = true);

  // x [N,C,H,W]; contexts [N,*,D].
  Tensor forward(const Tensor& x, const Tensor& c_txt, const Tensor& c_lq) const;
  void attach_adapters(int rank, Real scale, Rng& rng);
  void set_adapter_enabled(bool enabled);
  void collect(nn::ParamList& out, const std::string& prefix) const;
  void collect_adapters(nn::ParamList& out, const std::string& prefix) const;
};

// Everything the denoiser consumes beyond (z_t, t).
struct Conditioning {
  std::vector<int> class_ids;
  Tensor c_lq;  // [N, M, D]
  // One residual per injection level (24, 12, 6), or empty.
  std::vector<Tensor> residuals;
  // Per-sample gate on the residuals.
  std::vector<Real> delta;
};

struct DenoiserNet {
  NetConfig cfg;
  ClassEmbedding classes;
  nn::TimeEmbedding time;
  nn::Conv3x3 conv_in;
  nn::ResBlock enc0;
  nn::Conv3x3 down0;
  nn::ResBlock enc1;
  DualCrossAttnBlock attn_enc1;
  nn::Conv3x3 down1;
  nn::ResBlock enc2;
  DualCrossAttnBlock attn_enc2;
  nn::ResBlock mid;
  DualCrossAttnBlock attn_mid;
  nn::ResBlock dec2;
  DualCrossAttnBlock attn_dec2;
  nn::Conv3x3 up2;
  nn::ResBlock dec1;
  DualCrossAttnBlock attn_dec1;
  nn::Conv3x3 up1;
  nn::ResBlock dec0;
  nn::Conv3x3 conv_out;
  bool has_adapter = false;

  DenoiserNet() = default;
  DenoiserNet(const NetConfig& cfg, Rng& rng);

  // epsilon prediction, same shape as z.
  Tensor forward(const Tensor& z, std::span<const int> t, const Conditioning& cond) const;

  // Shapes the aggregator residuals must match, per injection level.
  std::array<Shape, kInjectionLevels> residual_shapes(std::int64_t batch) const;

  void attach_adapter(Rng& rng);
  void set_adapter_enabled(bool enabled);
  bool adapter_enabled() const;

  std::array<DualCrossAttnBlock*, kConditioningBlocks> blocks();
  std::array<const DualCrossAttnBlock*, kConditioningBlocks> blocks() const;

  // Base weights (everything except adapters).
  void collect(nn::ParamList& out, const std::string& prefix) const;
  void collect_adapter(nn::ParamList& out, const std::string& prefix) const;
};

// Scoped adapter toggle; restores the previous state.
class AdapterScope {
 public:
  AdapterScope(DenoiserNet& net, bool enabled);
  ~AdapterScope();
  AdapterScope(const AdapterScope&) = delete;
  AdapterScope& operator=(const AdapterScope&) = delete;

 private:
  DenoiserNet& net_;
  bool previous_;
};

void adapter_toggle(DenoiserNet& net, bool enabled);

}  // namespace iir
