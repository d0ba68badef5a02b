#include "iir/layers.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "iir/diffusion.hpp"
#include "iir/error.hpp"
#include "iir/ops.hpp"

namespace iir::nn {

Tensor uniform_init(const Shape& shape, std::int64_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<Real> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return Tensor::from(shape, std::move(v), true);
}

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool with_bias)
    : weight(uniform_init({in, out}, in, rng)) {
  if (with_bias) bias = uniform_init({out}, in, rng);
}

Tensor Linear::effective_weight() const {
  if (adapter && adapter->enabled) {
    return ops::add(weight, ops::scale(ops::matmul(adapter->down, adapter->up), adapter->scale));
  }
  return weight;
}

Tensor Linear::forward(const Tensor& x) const { return ops::linear(x, effective_weight(), bias); }

void Linear::attach_adapter(int rank, Real scale, Rng& rng) {
  LowRankAdapter a;
  a.down = uniform_init({weight.dim(0), rank}, weight.dim(0), rng);
  a.up = Tensor::zeros({rank, weight.dim(1)}, true);
  a.scale = scale;
  adapter = std::move(a);
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

void Linear::collect_adapter(ParamList& out, const std::string& prefix) const {
  if (!adapter) return;
  out.emplace_back(prefix + ".lora_down", adapter->down);
  out.emplace_back(prefix + ".lora_up", adapter->up);
}

Conv3x3::Conv3x3(std::int64_t in, std::int64_t out, Rng& rng, int stride_)
    : weight(uniform_init({out, in, 3, 3}, in * 9, rng)),
      bias(uniform_init({out}, in * 9, rng)),
      stride(stride_) {}

Conv3x3 Conv3x3::zero(std::int64_t in, std::int64_t out) {
  Conv3x3 c;
  c.weight = Tensor::zeros({out, in, 3, 3}, true);
  c.bias = Tensor::zeros({out}, true);
  return c;
}

Tensor Conv3x3::forward(const Tensor& x, int bands) const {
  return ops::conv2d(x, weight, bias, stride, bands);
}

void Conv3x3::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::int64_t dim)
    : gamma(Tensor::full({dim}, Real(1), true)), beta(Tensor::zeros({dim}, true)) {}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

Attention::Attention(std::int64_t dim, std::int64_t context_dim, int heads_, Rng& rng)
    : norm(dim),
      q(dim, dim, rng, false),
      k(context_dim, dim, rng, false),
      v(context_dim, dim, rng, false),
      o(dim, dim, rng),
      heads(heads_) {}

Tensor Attention::forward(const Tensor& x, const Tensor& context) const {
  Tensor h = norm.forward(x);
  const Tensor& ctx = context.defined() ? context : h;
  return o.forward(ops::attention(q.forward(h), k.forward(ctx), v.forward(ctx), heads));
}

void Attention::attach_adapters(int rank, Real scale, Rng& rng) {
  for (Linear* l : {&q, &k, &v, &o}) l->attach_adapter(rank, scale, rng);
}

void Attention::set_adapter_enabled(bool enabled) {
  for (Linear* l : {&q, &k, &v, &o}) {
    if (!l->adapter) throw Error("adapter toggle: no adapter attached");
    l->adapter->enabled = enabled;
  }
}

void Attention::collect(ParamList& out, const std::string& prefix) const {
  norm.collect(out, prefix + ".norm");
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

void Attention::collect_adapters(ParamList& out, const std::string& prefix) const {
  q.collect_adapter(out, prefix + ".q");
  k.collect_adapter(out, prefix + ".k");
  v.collect_adapter(out, prefix + ".v");
  o.collect_adapter(out, prefix + ".o");
}

Mlp::Mlp(std::int64_t dim, std::int64_t hidden, Rng& rng) : in(dim, hidden, rng), out(hidden, dim, rng) {}

Tensor Mlp::forward(const Tensor& x) const { return out.forward(ops::silu(in.forward(x))); }

void Mlp::collect(ParamList& params, const std::string& prefix) const {
  in.collect(params, prefix + ".in");
  out.collect(params, prefix + ".out");
}

TimeEmbedding::TimeEmbedding(int features_, std::int64_t dim, Rng& rng)
    : features(features_), fc1(features_, dim, rng), fc2(dim, dim, rng) {}

Tensor TimeEmbedding::forward(std::span<const int> t) const {
  return fc2.forward(ops::silu(fc1.forward(timestep_features(t, features))));
}

void TimeEmbedding::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

ResBlock::ResBlock(std::int64_t channels, std::int64_t time_dim, Rng& rng)
    : conv1(channels, channels, rng), conv2(channels, channels, rng), time_proj(time_dim, channels, rng) {}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb, int bands) const {
  Tensor h = conv1.forward(ops::silu(x), bands);
  h = ops::add_channel(h, time_proj.forward(ops::silu(temb)));
  h = conv2.forward(ops::silu(h), bands);
  return ops::add(x, h);
}

void ResBlock::collect(ParamList& out, const std::string& prefix) const {
  conv1.collect(out, prefix + ".conv1");
  conv2.collect(out, prefix + ".conv2");
  time_proj.collect(out, prefix + ".time_proj");
}

void copy_params(const ParamList& src, const ParamList& dst) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : src) by_name[name] = &t;
  for (const auto& [name, t] : dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("copy_params: missing source tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw ShapeError("copy_params: " + name + " is " + shape_str(it->second->shape()) +
                       " in source, " + shape_str(t.shape()) + " in destination");
    }
    Tensor target = t;
    auto values = it->second->data();
    std::copy(values.begin(), values.end(), target.mutable_data().begin());
  }
}

std::int64_t count_params(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace iir::nn
