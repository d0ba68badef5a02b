#include "iir/nets.hpp"

#include <string>

#include "iir/diffusion.hpp"
#include "iir/error.hpp"
#include "iir/ops.hpp"

namespace iir {

ClassEmbedding::ClassEmbedding(const NetConfig& cfg, Rng& rng)
    : num_classes(cfg.num_classes), class_tokens(cfg.class_tokens), dim(cfg.token_dim) {
  table = rng.normal_tensor({cfg.num_classes + 1, std::int64_t{cfg.class_tokens} * cfg.token_dim});
  table.set_requires_grad(true);
}

Tensor ClassEmbedding::forward(std::span<const int> class_ids) const {
  for (int id : class_ids) {
    if (id < 0 || id > num_classes) {
      throw Error("class id " + std::to_string(id) + " outside [0, " + std::to_string(num_classes) + "]");
    }
  }
  return ops::reshape(ops::embedding(table, class_ids),
                      {static_cast<std::int64_t>(class_ids.size()), class_tokens, dim});
}

void ClassEmbedding::collect(nn::ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".table", table);
}

Tensor adaptive_layer_norm(const Tensor& tokens, const Tensor& scale, const Tensor& shift) {
  return ops::modulate(ops::layer_norm(tokens), scale, shift);
}

CompactEncoder::CompactEncoder(const NetConfig& c, Rng& rng)
    : cfg(c),
      patch_embed(std::int64_t{c.patch} * c.patch, c.token_dim, rng),
      resampler(c.token_dim, c.token_dim, c.heads, rng),
      context_norm(c.token_dim),
      resampler_norm(c.token_dim),
      resampler_mlp(c.token_dim, 2 * c.token_dim, rng),
      time_fc(c.token_dim, c.token_dim, rng),
      to_scale(c.token_dim, c.token_dim, rng),
      to_shift(c.token_dim, c.token_dim, rng) {
  const std::int64_t grid = c.image_size / c.patch;
  pos_embed = rng.normal_tensor({grid * grid, c.token_dim}, 0.02);
  pos_embed.set_requires_grad(true);
  queries = rng.normal_tensor({c.tokens, c.token_dim}, 1.0);
  queries.set_requires_grad(true);
  for (int i = 0; i < c.encoder_layers; ++i) {
    layers_attn.emplace_back(c.token_dim, c.token_dim, c.heads, rng);
    layers_norm.emplace_back(c.token_dim);
    layers_mlp.emplace_back(c.token_dim, 2 * c.token_dim, rng);
  }
}

Tensor CompactEncoder::resample(const Tensor& lq) const {
  if (lq.rank() != 4 || lq.dim(1) != 1 || lq.dim(2) != cfg.image_size || lq.dim(3) != cfg.image_size) {
    throw ShapeError("CompactEncoder: expected [N,1," + std::to_string(cfg.image_size) + "," +
                     std::to_string(cfg.image_size) + "], got " + shape_str(lq.shape()));
  }
  Tensor x = ops::add_bias(patch_embed.forward(ops::patchify(lq, cfg.patch)), pos_embed);
  for (std::size_t i = 0; i < layers_attn.size(); ++i) {
    x = ops::add(x, layers_attn[i].forward(x));
    x = ops::add(x, layers_mlp[i].forward(layers_norm[i].forward(x)));
  }
  const std::int64_t n = lq.dim(0);
  Tensor q = ops::add_bias(Tensor::zeros({n, cfg.tokens, cfg.token_dim}), queries);
  q = ops::add(q, resampler.forward(q, context_norm.forward(x)));
  return ops::add(q, resampler_mlp.forward(resampler_norm.forward(q)));
}

std::pair<Tensor, Tensor> CompactEncoder::modulation(std::span<const int> t) const {
  Tensor h = ops::silu(time_fc.forward(timestep_features(t, cfg.token_dim)));
  const auto n = static_cast<std::int64_t>(t.size());
  Tensor scale = ops::add(Tensor::full({n, cfg.token_dim}, Real(1)), to_scale.forward(h));
  return {scale, to_shift.forward(h)};
}

Tensor CompactEncoder::forward(const Tensor& lq, std::span<const int> t) const {
  if (static_cast<std::int64_t>(t.size()) != lq.dim(0)) {
    throw ShapeError("CompactEncoder: " + std::to_string(t.size()) + " time-steps for batch " +
                     shape_str(lq.shape()));
  }
  auto [scale, shift] = modulation(t);
  return adaptive_layer_norm(resample(lq), scale, shift);
}

void CompactEncoder::collect(nn::ParamList& out, const std::string& prefix) const {
  patch_embed.collect(out, prefix + ".patch_embed");
  out.emplace_back(prefix + ".pos_embed", pos_embed);
  for (std::size_t i = 0; i < layers_attn.size(); ++i) {
    const auto p = prefix + ".layer" + std::to_string(i);
    layers_attn[i].collect(out, p + ".attn");
    layers_norm[i].collect(out, p + ".norm");
    layers_mlp[i].collect(out, p + ".mlp");
  }
  out.emplace_back(prefix + ".queries", queries);
  resampler.collect(out, prefix + ".resampler");
  context_norm.collect(out, prefix + ".context_norm");
  resampler_norm.collect(out, prefix + ".resampler_norm");
  resampler_mlp.collect(out, prefix + ".resampler_mlp");
  time_fc.collect(out, prefix + ".time_fc");
  to_scale.collect(out, prefix + ".to_scale");
  to_shift.collect(out, prefix + ".to_shift");
}

Tensor dual_cross_attn(const Tensor& f_in, const nn::Attention* text, const Tensor& c_txt,
                       const nn::Attention& lq, const Tensor& c_lq, double w) {
  Tensor out = f_in;
  if (text != nullptr) out = ops::add(out, text->forward(f_in, c_txt));
  if (w != 0.0) out = ops::add(out, ops::scale(lq.forward(f_in, c_lq), static_cast<Real>(w)));
  return out;
}

DualCrossAttnBlock::DualCrossAttnBlock(std::int64_t dim, const NetConfig& cfg, double w, Rng& rng,
                                       bool with_text, bool with_lq)
    : self_attn(dim, dim, cfg.heads, rng), w_lq(w) {
  if (with_text) text_attn.emplace(dim, cfg.token_dim, cfg.heads, rng);
  if (with_lq) lq_attn.emplace(dim, cfg.token_dim, cfg.heads, rng);
}

Tensor DualCrossAttnBlock::forward(const Tensor& x, const Tensor& c_txt, const Tensor& c_lq) const {
  const std::int64_t h = x.dim(2), w = x.dim(3);
  Tensor tok = ops::nchw_to_tokens(x);
  tok = ops::add(tok, self_attn.forward(tok));
  if (lq_attn) {
    tok = dual_cross_attn(tok, text_attn ? &*text_attn : nullptr, c_txt, *lq_attn, c_lq, w_lq);
  } else if (text_attn) {
    tok = ops::add(tok, text_attn->forward(tok, c_txt));
  }
  return ops::tokens_to_nchw(tok, h, w);
}

void DualCrossAttnBlock::attach_adapters(int rank, Real scale, Rng& rng) {
  self_attn.attach_adapters(rank, scale, rng);
  if (text_attn) text_attn->attach_adapters(rank, scale, rng);
  if (lq_attn) lq_attn->attach_adapters(rank, scale, rng);
}

void DualCrossAttnBlock::set_adapter_enabled(bool enabled) {
  self_attn.set_adapter_enabled(enabled);
  if (text_attn) text_attn->set_adapter_enabled(enabled);
  if (lq_attn) lq_attn->set_adapter_enabled(enabled);
}

void DualCrossAttnBlock::collect(nn::ParamList& out, const std::string& prefix) const {
  self_attn.collect(out, prefix + ".self");
  if (text_attn) text_attn->collect(out, prefix + ".text");
  if (lq_attn) lq_attn->collect(out, prefix + ".lq");
}

void DualCrossAttnBlock::collect_adapters(nn::ParamList& out, const std::string& prefix) const {
  self_attn.collect_adapters(out, prefix + ".self");
  if (text_attn) text_attn->collect_adapters(out, prefix + ".text");
  if (lq_attn) lq_attn->collect_adapters(out, prefix + ".lq");
}

DenoiserNet::DenoiserNet(const NetConfig& c, Rng& rng) : cfg(c) {
  const std::int64_t ch = c.channels, td = c.time_dim();
  classes = ClassEmbedding(c, rng);
  time = nn::TimeEmbedding(c.channels, td, rng);
  conv_in = nn::Conv3x3(1, ch, rng);
  enc0 = nn::ResBlock(ch, td, rng);
  down0 = nn::Conv3x3(ch, 2 * ch, rng, 2);
  enc1 = nn::ResBlock(2 * ch, td, rng);
  attn_enc1 = DualCrossAttnBlock(2 * ch, c, c.w_lq[0], rng);
  down1 = nn::Conv3x3(2 * ch, 4 * ch, rng, 2);
  enc2 = nn::ResBlock(4 * ch, td, rng);
  attn_enc2 = DualCrossAttnBlock(4 * ch, c, c.w_lq[1], rng);
  mid = nn::ResBlock(4 * ch, td, rng);
  attn_mid = DualCrossAttnBlock(4 * ch, c, c.w_lq[2], rng);
  dec2 = nn::ResBlock(4 * ch, td, rng);
  attn_dec2 = DualCrossAttnBlock(4 * ch, c, c.w_lq[3], rng);
  up2 = nn::Conv3x3(4 * ch, 2 * ch, rng);
  dec1 = nn::ResBlock(2 * ch, td, rng);
  attn_dec1 = DualCrossAttnBlock(2 * ch, c, c.w_lq[4], rng);
  up1 = nn::Conv3x3(2 * ch, ch, rng);
  dec0 = nn::ResBlock(ch, td, rng);
  conv_out = nn::Conv3x3::zero(ch, 1);
}

std::array<Shape, kInjectionLevels> DenoiserNet::residual_shapes(std::int64_t batch) const {
  const std::int64_t ch = cfg.channels, s = cfg.image_size;
  return {Shape{batch, ch, s, s}, Shape{batch, 2 * ch, s / 2, s / 2},
          Shape{batch, 4 * ch, s / 4, s / 4}};
}

Tensor DenoiserNet::forward(const Tensor& z, std::span<const int> t, const Conditioning& cond) const {
  const std::int64_t n = z.dim(0);
  if (z.shape() != Shape{n, 1, cfg.image_size, cfg.image_size}) {
    throw ShapeError("denoiser: input " + shape_str(z.shape()));
  }
  if (static_cast<std::int64_t>(t.size()) != n ||
      static_cast<std::int64_t>(cond.class_ids.size()) != n) {
    throw ShapeError("denoiser: batch " + std::to_string(n) + " with " + std::to_string(t.size()) +
                     " time-steps and " + std::to_string(cond.class_ids.size()) + " class ids");
  }
  if (cond.c_lq.shape() != Shape{n, cfg.tokens, cfg.token_dim}) {
    throw ShapeError("denoiser: c_lq " + shape_str(cond.c_lq.shape()));
  }
  const bool inject = !cond.residuals.empty();
  if (inject) {
    const auto shapes = residual_shapes(n);
    if (cond.residuals.size() != kInjectionLevels) {
      throw ShapeError("denoiser: expected 3 residuals, got " + std::to_string(cond.residuals.size()));
    }
    for (int l = 0; l < kInjectionLevels; ++l) {
      if (cond.residuals[static_cast<std::size_t>(l)].shape() != shapes[static_cast<std::size_t>(l)]) {
        throw ShapeError("denoiser: residual " + std::to_string(l) + " is " +
                         shape_str(cond.residuals[static_cast<std::size_t>(l)].shape()) +
                         ", decoder expects " + shape_str(shapes[static_cast<std::size_t>(l)]));
      }
    }
    if (static_cast<std::int64_t>(cond.delta.size()) != n) {
      throw ShapeError("denoiser: delta needs one value per sample");
    }
  }
  auto injected = [&](const Tensor& skip, int level) {
    if (!inject) return skip;
    return ops::add_scaled_per_sample(skip, cond.residuals[static_cast<std::size_t>(level)], cond.delta);
  };

  const Tensor temb = time.forward(t);
  const Tensor c_txt = classes.forward(cond.class_ids);
  const Tensor& c_lq = cond.c_lq;

  Tensor h = enc0.forward(conv_in.forward(z), temb);
  const Tensor skip0 = h;
  h = attn_enc1.forward(enc1.forward(down0.forward(h), temb), c_txt, c_lq);
  const Tensor skip1 = h;
  h = attn_enc2.forward(enc2.forward(down1.forward(h), temb), c_txt, c_lq);
  const Tensor skip2 = h;
  h = attn_mid.forward(mid.forward(h, temb), c_txt, c_lq);

  h = ops::add(h, injected(skip2, 2));
  h = attn_dec2.forward(dec2.forward(h, temb), c_txt, c_lq);
  h = ops::upsample_nearest2x(up2.forward(h));
  h = ops::add(h, injected(skip1, 1));
  h = attn_dec1.forward(dec1.forward(h, temb), c_txt, c_lq);
  h = ops::upsample_nearest2x(up1.forward(h));
  h = ops::add(h, injected(skip0, 0));
  h = dec0.forward(h, temb);
  return conv_out.forward(ops::silu(h));
}

std::array<DualCrossAttnBlock*, kConditioningBlocks> DenoiserNet::blocks() {
  return {&attn_enc1, &attn_enc2, &attn_mid, &attn_dec2, &attn_dec1};
}

std::array<const DualCrossAttnBlock*, kConditioningBlocks> DenoiserNet::blocks() const {
  return {&attn_enc1, &attn_enc2, &attn_mid, &attn_dec2, &attn_dec1};
}

void DenoiserNet::attach_adapter(Rng& rng) {
  for (auto* b : blocks()) b->attach_adapters(cfg.lora_rank, static_cast<Real>(cfg.lora_scale), rng);
  has_adapter = true;
}

void DenoiserNet::set_adapter_enabled(bool enabled) {
  if (!has_adapter) throw Error("adapter toggle: no adapter attached to the denoiser");
  for (auto* b : blocks()) b->set_adapter_enabled(enabled);
}

bool DenoiserNet::adapter_enabled() const {
  return has_adapter && attn_enc1.self_attn.q.adapter && attn_enc1.self_attn.q.adapter->enabled;
}

void DenoiserNet::collect(nn::ParamList& out, const std::string& prefix) const {
  classes.collect(out, prefix + ".classes");
  time.collect(out, prefix + ".time");
  conv_in.collect(out, prefix + ".conv_in");
  enc0.collect(out, prefix + ".enc0");
  down0.collect(out, prefix + ".down0");
  enc1.collect(out, prefix + ".enc1");
  attn_enc1.collect(out, prefix + ".attn_enc1");
  down1.collect(out, prefix + ".down1");
  enc2.collect(out, prefix + ".enc2");
  attn_enc2.collect(out, prefix + ".attn_enc2");
  mid.collect(out, prefix + ".mid");
  attn_mid.collect(out, prefix + ".attn_mid");
  dec2.collect(out, prefix + ".dec2");
  attn_dec2.collect(out, prefix + ".attn_dec2");
  up2.collect(out, prefix + ".up2");
  dec1.collect(out, prefix + ".dec1");
  attn_dec1.collect(out, prefix + ".attn_dec1");
  up1.collect(out, prefix + ".up1");
  dec0.collect(out, prefix + ".dec0");
  conv_out.collect(out, prefix + ".conv_out");
}

void DenoiserNet::collect_adapter(nn::ParamList& out, const std::string& prefix) const {
  static constexpr const char* kNames[] = {"attn_enc1", "attn_enc2", "attn_mid", "attn_dec2", "attn_dec1"};
  const auto bs = blocks();
  for (std::size_t i = 0; i < bs.size(); ++i) bs[i]->collect_adapters(out, prefix + "." + kNames[i]);
}

AdapterScope::AdapterScope(DenoiserNet& net, bool enabled) : net_(net), previous_(net.adapter_enabled()) {
  net_.set_adapter_enabled(enabled);
}

AdapterScope::~AdapterScope() { net_.set_adapter_enabled(previous_); }

void adapter_toggle(DenoiserNet& net, bool enabled) { net.set_adapter_enabled(enabled); }

}  // namespace iir
