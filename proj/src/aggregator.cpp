#include "iir/aggregator.hpp"

#include "iir/error.hpp"
#include "iir/ops.hpp"

namespace iir {

namespace {

// Names under which the copied modules live in the denoiser's parameter list.
void collect_copied(const AggregatorNet& a, nn::ParamList& out, const std::string& prefix,
                    const std::string& attn1, const std::string& attn2) {
  a.time.collect(out, prefix + ".time");
  a.conv_in.collect(out, prefix + ".conv_in");
  a.enc0.collect(out, prefix + ".enc0");
  a.down0.collect(out, prefix + ".down0");
  a.enc1.collect(out, prefix + ".enc1");
  a.attn1.collect(out, prefix + attn1);
  a.down1.collect(out, prefix + ".down1");
  a.enc2.collect(out, prefix + ".enc2");
  a.attn2.collect(out, prefix + attn2);
}

Tensor self_attend(const nn::Attention& attn, const Tensor& x) {
  Tensor tok = ops::nchw_to_tokens(x);
  return ops::tokens_to_nchw(ops::add(tok, attn.forward(tok)), x.dim(2), x.dim(3));
}

}  // namespace

Tensor spatial_concat(const Tensor& preview, const Tensor& lq) {
  if (preview.shape() != lq.shape() || preview.rank() != 4) {
    throw ShapeError("spatial_concat: preview " + shape_str(preview.shape()) + " vs lq " +
                     shape_str(lq.shape()));
  }
  const Tensor parts[] = {preview, lq};
  return ops::concat(parts, 2);
}

std::pair<Tensor, Tensor> spatial_split(const Tensor& joint) {
  if (joint.rank() != 4 || joint.dim(2) % 2 != 0) {
    throw ShapeError("spatial_split: cannot halve " + shape_str(joint.shape()));
  }
  const std::int64_t half = joint.dim(2) / 2;
  const std::int64_t sizes[] = {half, half};
  auto parts = ops::split(joint, 2, sizes);
  return {parts[0], parts[1]};
}

SftHead::SftHead(std::int64_t channels, Rng& rng)
    : conv1(channels, channels, rng), conv2(channels, 2 * channels, rng) {}

std::pair<Tensor, Tensor> SftHead::forward(const Tensor& h_o) const {
  const std::int64_t c = h_o.dim(1);
  const std::int64_t sizes[] = {c, c};
  auto ab = ops::split(conv2.forward(ops::silu(conv1.forward(h_o))), 1, sizes);
  return {ab[0], ab[1]};
}

void SftHead::collect(nn::ParamList& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".conv1");
  conv2.collect(out, prefix + ".conv2");
}

Tensor sft_modulate(const Tensor& h_p, const Tensor& alpha, const Tensor& beta) {
  return ops::add(ops::add(h_p, ops::mul(alpha, h_p)), beta);
}

Tensor sft_fuse(const Tensor& h_p, const Tensor& h_o, const SftHead& head) {
  if (h_p.shape() != h_o.shape()) {
    throw ShapeError("sft_fuse: h_p " + shape_str(h_p.shape()) + " vs h_o " + shape_str(h_o.shape()));
  }
  auto [alpha, beta] = head.forward(h_o);
  return sft_modulate(h_p, alpha, beta);
}

AggregatorNet::AggregatorNet(const DenoiserNet& base, Rng& rng) : cfg(base.cfg) {
  const std::int64_t ch = cfg.channels, td = cfg.time_dim();
  time = nn::TimeEmbedding(cfg.channels, td, rng);
  conv_in = nn::Conv3x3(1, ch, rng);
  enc0 = nn::ResBlock(ch, td, rng);
  down0 = nn::Conv3x3(ch, 2 * ch, rng, 2);
  enc1 = nn::ResBlock(2 * ch, td, rng);
  attn1 = nn::Attention(2 * ch, 2 * ch, cfg.heads, rng);
  down1 = nn::Conv3x3(2 * ch, 4 * ch, rng, 2);
  enc2 = nn::ResBlock(4 * ch, td, rng);
  attn2 = nn::Attention(4 * ch, 4 * ch, cfg.heads, rng);
  const std::int64_t widths[] = {ch, 2 * ch, 4 * ch};
  for (int l = 0; l < kInjectionLevels; ++l) {
    sft[static_cast<std::size_t>(l)] = SftHead(widths[l], rng);
    proj[static_cast<std::size_t>(l)] = nn::Conv3x3::zero(widths[l], widths[l]);
  }
  nn::ParamList src, dst;
  base.collect(src, "unet");
  collect_copied(*this, dst, "unet", ".attn_enc1.self", ".attn_enc2.self");
  nn::copy_params(src, dst);
}

std::vector<Tensor> AggregatorNet::encode(const Tensor& preview, const Tensor& lq,
                                          std::span<const int> t) const {
  const Tensor x = spatial_concat(preview, lq);
  if (x.dim(1) != 1 || x.dim(3) != cfg.image_size || x.dim(2) != 2 * cfg.image_size) {
    throw ShapeError("aggregator: input " + shape_str(preview.shape()));
  }
  if (static_cast<std::int64_t>(t.size()) != x.dim(0)) {
    throw ShapeError("aggregator: " + std::to_string(t.size()) + " time-steps for batch " +
                     std::to_string(x.dim(0)));
  }
  const Tensor temb = time.forward(t);
  std::vector<Tensor> levels;
  Tensor h = enc0.forward(conv_in.forward(x, 2), temb, 2);
  levels.push_back(h);
  h = self_attend(attn1, enc1.forward(down0.forward(h, 2), temb, 2));
  levels.push_back(h);
  h = self_attend(attn2, enc2.forward(down1.forward(h, 2), temb, 2));
  levels.push_back(h);
  return levels;
}

std::vector<Tensor> AggregatorNet::forward(const Tensor& preview, const Tensor& lq,
                                           std::span<const int> t) const {
  auto levels = encode(preview, lq, t);
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    auto [h_p, h_o] = spatial_split(levels[l]);
    out.push_back(proj[l].forward(sft_fuse(h_p, h_o, sft[l])));
  }
  return out;
}

void AggregatorNet::collect(nn::ParamList& out, const std::string& prefix) const {
  collect_copied(*this, out, prefix, ".attn1", ".attn2");
  for (std::size_t l = 0; l < sft.size(); ++l) {
    sft[l].collect(out, prefix + ".sft" + std::to_string(l));
    proj[l].collect(out, prefix + ".proj" + std::to_string(l));
  }
}

Tensor noisy_preview_variant(const Tensor& preview, std::span<const int> t, const NoiseSchedule& schedule,
                             Rng& rng) {
  return add_noise(preview, t, schedule, rng).z_t;
}

}  // namespace iir
