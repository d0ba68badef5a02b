#include "fixtures.hpp"

#include <cstring>

namespace iir::testing {

NetConfig micro_net() {
  NetConfig cfg;
  cfg.channels = 4;
  cfg.tokens = 2;
  cfg.token_dim = 8;
  cfg.class_tokens = 2;
  cfg.heads = 2;
  cfg.encoder_layers = 1;
  cfg.lora_rank = 2;
  return cfg;
}

RunConfig micro_config(const std::filesystem::path& out_dir) {
  RunConfig c;
  c.schedule_steps = 64;
  c.net = micro_net();
  c.train.batch = 4;
  c.train.lr = c.train.distill_lr = c.train.stage2_lr = 1e-3;
  c.train.stage1_steps = 6;
  c.train.distill_steps = 4;
  c.train.stage2_steps = 4;
  c.train.log_every = 0;
  c.sampler.steps = 6;
  c.sampler.eta = 2;
  c.data.train_size = 32;
  c.data.val_size = 4;
  c.data.eval_size = 3;
  c.out_dir = out_dir;
  return c;
}

void randomize(const nn::ParamList& params, Rng& rng, double stddev) {
  for (const auto& [name, t] : params) {
    Tensor p = t;
    for (auto& v : p.mutable_data()) v += static_cast<Real>(stddev * rng.normal());
  }
}

Pipeline micro_pipeline(std::uint64_t seed) {
  RunConfig c = micro_config("unused");
  c.train.seed = seed;
  Pipeline p = init_pipeline(c);
  Rng rng(seed);
  Rng r3 = rng.fork(3);
  p.denoiser.attach_adapter(r3);
  Rng r4 = rng.fork(4);
  p.aggregator.emplace(p.denoiser, r4);
  Rng noise = rng.fork(5);
  randomize(base_params(p), noise, 0.05);
  randomize(adapter_params(p), noise, 0.05);
  randomize(aggregator_params(p), noise, 0.05);
  return p;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("iir_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

double sq_dist(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.at(i)) - static_cast<double>(b.at(i));
    s += d * d;
  }
  return s;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0;
}

}  // namespace iir::testing
