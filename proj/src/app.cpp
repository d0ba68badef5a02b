#include "iir/app.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <unordered_map>

#include "iir/error.hpp"
#include "iir/ops.hpp"
#include "iir/previewer.hpp"

#ifndef IIR_BUILD_ID
#define IIR_BUILD_ID "unknown"
#endif

namespace iir {

namespace {

constexpr const char* kMeta = "meta:";

// Network-shape keys a checkpoint must carry to be rebuilt.
const char* const kNetKeys[] = {"schedule.steps", "nets.channels", "nets.tokens", "nets.token_dim",
                                "nets.class_tokens", "nets.heads", "nets.encoder_layers", "nets.lora_rank",
                                "nets.lora_scale", "nets.w_lq"};

void add_meta(NamedTensors& out, const std::string& key, const std::string& value) {
  out.emplace_back(std::string(kMeta) + key + "=" + value, Tensor::zeros({0}));
}

// Temporarily excludes parameters from gradient tracking.
class FreezeScope {
 public:
  explicit FreezeScope(const nn::ParamList& params) {
    for (const auto& [name, t] : params) {
      Tensor p = t;
      if (p.requires_grad()) {
        p.set_requires_grad(false);
        frozen_.push_back(p);
      }
    }
  }
  ~FreezeScope() {
    for (auto& p : frozen_) p.set_requires_grad(true);
  }
  FreezeScope(const FreezeScope&) = delete;
  FreezeScope& operator=(const FreezeScope&) = delete;

 private:
  std::vector<Tensor> frozen_;
};

std::vector<Tensor> tensors_of(const nn::ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& [n, t] : params) out.push_back(t);
  return out;
}

std::uint64_t split_seed(std::uint64_t seed, const std::string& split) {
  std::uint64_t h = seed;
  for (char c : split) h = splitmix64(h ^ static_cast<unsigned char>(c));
  return h;
}

struct Dropout {
  std::vector<int> classes;
  std::vector<Real> lq_keep;
};

Dropout draw_dropout(const PairBatch& b, const RunConfig& c, Rng& rng) {
  Dropout d;
  for (int cls : b.class_ids) {
    d.classes.push_back(rng.bernoulli(c.train.class_dropout) ? c.net.null_class() : cls);
    d.lq_keep.push_back(rng.bernoulli(c.train.lq_dropout) ? Real(0) : Real(1));
  }
  return d;
}

PairBatch train_batch(const std::vector<ManifestEntry>& train, const RunConfig& c, Phase phase, std::int64_t step) {
  if (train.empty()) throw Error("training split is empty");
  Rng rng = Rng(c.train.seed).fork(100 + static_cast<std::uint64_t>(phase)).fork(static_cast<std::uint64_t>(step));
  std::vector<ImagePair> pairs;
  for (std::int64_t i = 0; i < c.train.batch; ++i) pairs.push_back(regenerate(train[rng.below(train.size())], c.data.p2));
  return stack_pairs(pairs);
}

using LossFn = std::function<Tensor(std::int64_t, const PairBatch&)>;

PhaseReport run_phase(Phase phase, const nn::ParamList& trainable, std::int64_t total, double lr,
                      const RunConfig& c, const std::vector<ManifestEntry>& train, ResumeState* resume,
                      const TrainHooks& hooks, const LossFn& loss_fn) {
  ResumeState local{phase, 0, {}, {}};
  ResumeState& st = resume ? *resume : local;
  if (resume && st.step > 0 && st.training != phase) {
    throw PhaseError("cannot resume " + phase_name(st.training) + " training as " + phase_name(phase));
  }
  st.training = phase;
  auto params = tensors_of(trainable);
  AdamWConfig opt;
  opt.lr = lr;
  opt.weight_decay = c.train.weight_decay;
  const auto start = std::chrono::steady_clock::now();
  const std::int64_t first = st.step;
  {
    BatchQueue queue([&](std::int64_t s) { return train_batch(train, c, phase, s); }, st.step, 3);
    while (st.step < total) {
      if (hooks.stop_after && st.step - first >= *hooks.stop_after) break;
      const PairBatch batch = queue.next();
      zero_grads(params);
      Tensor loss = loss_fn(st.step, batch);
      loss.backward();
      if (c.train.grad_clip > 0) clip_grad_norm(params, c.train.grad_clip);
      opt.lr = scheduled_lr(lr, c.train.lr_schedule, st.step, total);
      adamw_step(params, st.adam, opt);
      const double v = loss.item();
      st.losses.push_back(v);
      ++st.step;
      if (hooks.on_step) hooks.on_step(st.step, v);
      if (c.train.checkpoint_every > 0 && st.step % c.train.checkpoint_every == 0 && hooks.on_checkpoint) {
        hooks.on_checkpoint(st);
      }
    }
  }
  zero_grads(params);
  PhaseReport r;
  r.losses = st.losses;
  const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(50, r.losses.size() / 5));
  std::tie(r.initial_smoothed, r.final_smoothed) = smoothed_ends(r.losses, window);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<int> grid_of(const Pipeline& pipe, const RunConfig& c) { return pipe.schedule.inference_grid(c.sampler.steps); }

}  // namespace

std::string phase_name(Phase phase) {
  switch (phase) {
    case Phase::base_dcp: return "base+dcp";
    case Phase::previewer: return "previewer";
    case Phase::aggregator: return "aggregator";
  }
  return "?";
}

Phase parse_phase(const std::string& name) {
  for (auto p : {Phase::base_dcp, Phase::previewer, Phase::aggregator}) {
    if (phase_name(p) == name) return p;
  }
  throw PhaseError("unknown phase tag '" + name + "'");
}

Pipeline init_pipeline(const RunConfig& config) {
  config.validate();
  Pipeline p;
  p.cfg = config.net;
  p.schedule = NoiseSchedule(config.schedule_steps);
  const Rng root(config.train.seed);
  Rng r1 = root.fork(1), r2 = root.fork(2);
  p.denoiser = DenoiserNet(p.cfg, r1);
  p.dcp = CompactEncoder(p.cfg, r2);
  return p;
}

nn::ParamList base_params(const Pipeline& pipe) {
  nn::ParamList out;
  pipe.denoiser.collect(out, "unet");
  pipe.dcp.collect(out, "dcp");
  return out;
}

nn::ParamList adapter_params(const Pipeline& pipe) {
  nn::ParamList out;
  pipe.denoiser.collect_adapter(out, "lora");
  return out;
}

nn::ParamList aggregator_params(const Pipeline& pipe) {
  nn::ParamList out;
  if (pipe.aggregator) pipe.aggregator->collect(out, "agg");
  return out;
}

std::string params_hash(const nn::ParamList& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params) {
    feed(name.data(), name.size());
    for (auto d : t.shape()) feed(&d, sizeof d);
    feed(t.data().data(), t.data().size_bytes());
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

NamedTensors checkpoint_records(const Pipeline& pipe, Phase phase, const std::string& config_hash,
                                const ResumeState* resume) {
  NamedTensors out;
  add_meta(out, "phase", phase_name(phase));
  add_meta(out, "config_hash", config_hash);
  RunConfig shape;
  shape.schedule_steps = pipe.schedule.steps();
  shape.net = pipe.cfg;
  for (const char* k : kNetKeys) add_meta(out, k, shape.get(k));
  for (auto& r : base_params(pipe)) out.push_back(r);
  for (auto& r : adapter_params(pipe)) out.push_back(r);
  for (auto& r : aggregator_params(pipe)) out.push_back(r);
  if (resume) {
    add_meta(out, "resume_phase", phase_name(resume->training));
    add_meta(out, "resume_step", std::to_string(resume->step));
    add_meta(out, "adam_step", std::to_string(resume->adam.step));
    for (std::size_t i = 0; i < resume->adam.m.size(); ++i) {
      const auto n = static_cast<std::int64_t>(resume->adam.m[i].size());
      out.emplace_back("adam.m." + std::to_string(i), Tensor::from({n}, resume->adam.m[i]));
      out.emplace_back("adam.v." + std::to_string(i), Tensor::from({n}, resume->adam.v[i]));
    }
    std::vector<Real> losses(resume->losses.begin(), resume->losses.end());
    const Shape shape{static_cast<std::int64_t>(losses.size())};
    out.emplace_back("resume.losses", Tensor::from(shape, std::move(losses)));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Pipeline& pipe, Phase phase,
                     const std::string& config_hash, const ResumeState* resume) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  save_archive(tmp, checkpoint_records(pipe, phase, config_hash, resume));
  std::filesystem::rename(tmp, path);
}

Checkpoint checkpoint_from_records(const NamedTensors& records) {
  std::map<std::string, std::string> meta;
  std::unordered_map<std::string, Tensor> tensors;
  for (const auto& [name, t] : records) {
    if (name.rfind(kMeta, 0) == 0) {
      const auto eq = name.find('=');
      if (eq == std::string::npos) throw IoError("checkpoint: malformed metadata record " + name);
      meta[name.substr(5, eq - 5)] = name.substr(eq + 1);
    } else {
      tensors[name] = t;
    }
  }
  for (const char* k : {"phase", "config_hash"}) {
    if (!meta.count(k)) throw IoError(std::string("checkpoint: missing metadata '") + k + "'");
  }
  RunConfig shape;
  for (const char* k : kNetKeys) {
    if (!meta.count(k)) throw IoError(std::string("checkpoint: missing metadata '") + k + "'");
    shape.set(k, meta[k]);
  }
  Checkpoint ck;
  ck.phase = parse_phase(meta["phase"]);
  ck.config_hash = meta["config_hash"];
  Pipeline& p = ck.pipeline;
  p.cfg = shape.net;
  p.schedule = NoiseSchedule(shape.schedule_steps);
  Rng scratch(0);
  p.denoiser = DenoiserNet(p.cfg, scratch);
  p.dcp = CompactEncoder(p.cfg, scratch);
  const bool has_lora = tensors.count("lora.attn_enc1.self.q.lora_down") > 0;
  if (has_lora) p.denoiser.attach_adapter(scratch);
  const bool has_agg = tensors.count("agg.conv_in.weight") > 0;
  if (has_agg) p.aggregator.emplace(p.denoiser, scratch);

  nn::ParamList expected = base_params(p);
  for (auto& r : adapter_params(p)) expected.push_back(r);
  for (auto& r : aggregator_params(p)) expected.push_back(r);
  nn::ParamList src;
  for (const auto& [name, t] : expected) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("checkpoint: missing tensor " + name);
    src.emplace_back(name, it->second);
  }
  nn::copy_params(src, expected);

  if (ck.phase >= Phase::previewer && !has_lora) {
    throw PhaseError("checkpoint tagged " + phase_name(ck.phase) + " has no previewer adapter");
  }
  if (ck.phase >= Phase::aggregator && !has_agg) {
    throw PhaseError("checkpoint tagged aggregator has no aggregator weights");
  }
  if (meta.count("resume_phase")) {
    ResumeState r;
    r.training = parse_phase(meta["resume_phase"]);
    r.step = std::stoll(meta["resume_step"]);
    r.adam.step = std::stoll(meta["adam_step"]);
    for (std::size_t i = 0; tensors.count("adam.m." + std::to_string(i)); ++i) {
      const auto m = tensors["adam.m." + std::to_string(i)].data();
      const auto v = tensors["adam.v." + std::to_string(i)].data();
      r.adam.m.emplace_back(m.begin(), m.end());
      r.adam.v.emplace_back(v.begin(), v.end());
    }
    if (tensors.count("resume.losses")) {
      const auto l = tensors["resume.losses"].data();
      r.losses.assign(l.begin(), l.end());
    }
    ck.resume = std::move(r);
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_records(load_archive(path)); }

void require_phase(const Checkpoint& ckpt, Phase required, const std::string& command) {
  if (ckpt.resume) {
    throw PhaseError(command + " cannot start from a mid-run " + phase_name(ckpt.resume->training) +
                     " checkpoint; continue that phase with --resume");
  }
  if (ckpt.phase == required) return;
  throw PhaseError(command + " needs a '" + phase_name(required) + "' checkpoint, got '" + phase_name(ckpt.phase) +
                   "' (phases run base+dcp -> previewer -> aggregator)");
}

std::vector<ManifestEntry> build_manifest(const DataConfig& data) {
  std::vector<ManifestEntry> out;
  auto add = [&](const std::string& split, std::int64_t index, DegradeLevel level) {
    const std::uint64_t seed = split_seed(data.seed, split);
    ImagePair p = make_pair(seed, index, level, data.p2);
    out.push_back({split, index, p.class_id, seed, level, p.spec});
  };
  const Rng pick(split_seed(data.seed, "levels"));
  for (std::int64_t i = 0; i < data.train_size; ++i) {
    Rng r = pick.fork(static_cast<std::uint64_t>(i));
    add("train", i, kAllLevels[r.below(std::size(kAllLevels))]);
  }
  for (std::int64_t i = 0; i < data.val_size; ++i) {
    Rng r = pick.fork(static_cast<std::uint64_t>(i) + (1ULL << 40));
    add("val", i, kAllLevels[r.below(std::size(kAllLevels))]);
  }
  for (auto level : kAllLevels) {
    for (std::int64_t i = 0; i < data.eval_size; ++i) add("test_" + level_name(level), i, level);
  }
  return out;
}

std::vector<ManifestEntry> select_split(const std::vector<ManifestEntry>& entries, const std::string& split,
                                        std::optional<DegradeLevel> level) {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    const bool split_ok = e.split == split || (split == "test" && e.split.rfind("test_", 0) == 0);
    if (split_ok && (!level || e.level == *level)) out.push_back(e);
  }
  return out;
}

ImagePair regenerate(const ManifestEntry& entry, double p2) {
  return make_pair(entry.seed, entry.index, entry.level, p2, entry.class_id);
}

PairBatch manifest_batch(const std::vector<ManifestEntry>& entries, double p2) {
  std::vector<ImagePair> pairs;
  for (const auto& e : entries) pairs.push_back(regenerate(e, p2));
  return stack_pairs(pairs);
}

std::pair<double, double> smoothed_ends(const std::vector<double>& losses, std::size_t window) {
  if (losses.empty()) return {0.0, 0.0};
  window = std::max<std::size_t>(1, std::min(window, losses.size()));
  double a = 0, b = 0;
  for (std::size_t i = 0; i < window; ++i) {
    a += losses[i];
    b += losses[losses.size() - 1 - i];
  }
  return {a / static_cast<double>(window), b / static_cast<double>(window)};
}

PhaseReport train_stage1(Pipeline& pipe, const RunConfig& c, const std::vector<ManifestEntry>& train,
                         ResumeState* resume, const TrainHooks& hooks) {
  nn::ParamList trainable = base_params(pipe);
  nn::ParamList frozen = adapter_params(pipe);
  for (auto& r : aggregator_params(pipe)) frozen.push_back(r);
  FreezeScope freeze(frozen);
  std::optional<AdapterScope> off;
  if (pipe.denoiser.has_adapter) off.emplace(pipe.denoiser, false);
  const int T = pipe.schedule.steps();
  return run_phase(Phase::base_dcp, trainable, c.train.stage1_steps, c.train.lr, c, train, resume, hooks,
                   [&](std::int64_t step, const PairBatch& b) {
                     Rng rng = Rng(c.train.seed).fork(10).fork(static_cast<std::uint64_t>(step));
                     std::vector<int> t;
                     for (std::size_t i = 0; i < b.class_ids.size(); ++i) t.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(T))));
                     const Dropout d = draw_dropout(b, c, rng);
                     const DiffusionSample s = add_noise(b.hq, t, pipe.schedule, rng);
                     Conditioning cond;
                     cond.class_ids = d.classes;
                     cond.c_lq = ops::scale_per_sample(pipe.dcp.forward(b.lq, t), d.lq_keep);
                     return diffusion_loss(pipe.denoiser.forward(s.z_t, t, cond), s.eps);
                   });
}

PhaseReport distill_previewer(Pipeline& pipe, const RunConfig& c, const std::vector<ManifestEntry>& train,
                              ResumeState* resume, const TrainHooks& hooks) {
  if (!pipe.denoiser.has_adapter) {
    Rng r = Rng(c.train.seed).fork(3);
    pipe.denoiser.attach_adapter(r);
  }
  nn::ParamList frozen = base_params(pipe);
  for (auto& r : aggregator_params(pipe)) frozen.push_back(r);
  FreezeScope freeze(frozen);
  const auto grid = grid_of(pipe, c);
  return run_phase(Phase::previewer, adapter_params(pipe), c.train.distill_steps, c.train.distill_lr, c, train,
                   resume, hooks, [&](std::int64_t step, const PairBatch& b) {
                     Rng rng = Rng(c.train.seed).fork(20).fork(static_cast<std::uint64_t>(step));
                     DistillBatch db;
                     for (std::size_t i = 0; i < b.class_ids.size(); ++i) {
                       db.s.push_back(grid[rng.below(grid.size() - 1)]);
                     }
                     {
                       NoGradGuard no_grad;
                       db.z_s = add_noise(b.hq, db.s, pipe.schedule, rng).z_t;
                       db.c_lq_s = pipe.dcp.forward(b.lq, db.s);
                       auto [z_t, t] = teacher_step(pipe.denoiser, db.z_s, db.s, db.c_lq_s, b.class_ids, pipe.schedule,
                                                    grid, c.sampler.clip_x0);
                       db.z_t = z_t;
                       db.t = t;
                       db.c_lq_t = pipe.dcp.forward(b.lq, db.t);
                     }
                     AdapterScope on(pipe.denoiser, true);
                     return distill_loss(pipe.denoiser, db, pipe.schedule);
                   });
}

namespace {

Tensor stage2_loss(Pipeline& pipe, const RunConfig& c, const PairBatch& b, Rng& rng, bool dropout,
                   std::span<const int> grid) {
  std::vector<int> t;
  for (std::size_t i = 0; i < b.class_ids.size(); ++i) t.push_back(grid[rng.below(grid.size())]);
  Dropout d{b.class_ids, std::vector<Real>(b.class_ids.size(), Real(1))};
  if (dropout) d = draw_dropout(b, c, rng);
  const DiffusionSample s = add_noise(b.hq, t, pipe.schedule, rng);
  Tensor reference, c_lq;
  {
    NoGradGuard no_grad;
    const Tensor c_full = pipe.dcp.forward(b.lq, t);
    {
      AdapterScope on(pipe.denoiser, true);
      reference = preview(pipe.denoiser, s.z_t, t, c_full, pipe.schedule);
    }
    if (c.train.noisy_preview) reference = noisy_preview_variant(reference, t, pipe.schedule, rng);
    c_lq = ops::scale_per_sample(c_full, d.lq_keep);
  }
  AdapterScope off(pipe.denoiser, false);
  Conditioning cond;
  cond.class_ids = d.classes;
  cond.c_lq = c_lq;
  if (pipe.aggregator) {
    cond.residuals = pipe.aggregator->forward(reference, b.lq, t);
    cond.delta.assign(b.class_ids.size(), Real(1));
  }
  return diffusion_loss(pipe.denoiser.forward(s.z_t, t, cond), s.eps);
}

}  // namespace

PhaseReport train_stage2(Pipeline& pipe, const RunConfig& c, const std::vector<ManifestEntry>& train,
                         ResumeState* resume, const TrainHooks& hooks) {
  if (!pipe.has_previewer()) throw PhaseError("Stage II needs the distilled previewer");
  if (!pipe.aggregator) {
    Rng r = Rng(c.train.seed).fork(4);
    pipe.aggregator.emplace(pipe.denoiser, r);
  }
  nn::ParamList frozen = base_params(pipe);
  for (auto& r : adapter_params(pipe)) frozen.push_back(r);
  FreezeScope freeze(frozen);
  const auto grid = grid_of(pipe, c);
  return run_phase(Phase::aggregator, aggregator_params(pipe), c.train.stage2_steps, c.train.stage2_lr, c, train,
                   resume, hooks, [&](std::int64_t step, const PairBatch& b) {
                     Rng rng = Rng(c.train.seed).fork(c.train.noisy_preview ? 31 : 30).fork(static_cast<std::uint64_t>(step));
                     return stage2_loss(pipe, c, b, rng, true, grid);
                   });
}

double stage2_validation_loss(Pipeline& pipe, const RunConfig& c, const PairBatch& val, std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(seed);
  const auto grid = grid_of(pipe, c);
  return stage2_loss(pipe, c, val, rng, false, grid).item();
}

double previewer_consistency(Pipeline& pipe, const RunConfig& c, const PairBatch& val) {
  if (!pipe.has_previewer()) throw PhaseError("self-consistency needs the previewer adapter");
  return self_consistency(pipe.denoiser, pipe.dcp, val.lq, val.class_ids, pipe.schedule, grid_of(pipe, c),
                          splitmix64(c.data.seed ^ 0x5e1f), c.sampler.clip_x0);
}

RestoreOutput restore_batch(Pipeline& pipe, const PairBatch& batch, const SamplerConfig& sampler, std::int64_t chunk) {
  const std::int64_t n = batch.lq.dim(0);
  std::vector<Tensor> images;
  RestoreOutput out;
  for (std::int64_t lo = 0; lo < n; lo += chunk) {
    const std::int64_t hi = std::min(n, lo + chunk);
    std::vector<std::uint64_t> ids;
    for (std::int64_t i = lo; i < hi; ++i) ids.push_back(static_cast<std::uint64_t>(i));
    const std::int64_t sizes[] = {lo, hi - lo, n - hi};
    const Tensor lq = ops::split(batch.lq, 0, sizes)[1];
    const std::vector<int> classes(batch.class_ids.begin() + lo, batch.class_ids.begin() + hi);
    SampleResult r = adares_sample(pipe, lq, classes, sampler, {}, ids);
    images.push_back(r.images);
    for (auto& l : r.logs) out.logs.push_back(std::move(l));
  }
  out.images = ops::concat(images, 0);
  return out;
}

TrajectoryStats analyze_levels(Pipeline& pipe, const RunConfig& c, const std::vector<ManifestEntry>& test,
                               const SamplerConfig& sampler) {
  std::map<DegradeLevel, std::vector<TrajectoryLog>> logs;
  for (auto level : kTrajectoryLevels) {
    const auto entries = select_split(test, "test", level);
    if (entries.empty()) throw Error("analyze: no test images for level " + level_name(level));
    logs[level] = restore_batch(pipe, manifest_batch(entries, c.data.p2), sampler).logs;
  }
  return trajectory_report(logs);
}

void append_run_log(const std::filesystem::path& path, const RunConfig& config, const std::string& command) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to run log " + path.string());
  const std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  out << stamp << " config=" << config.hash() << " train_seed=" << config.train.seed
      << " sampler_seed=" << config.sampler.seed << " data_seed=" << config.data.seed << " build=" << IIR_BUILD_ID
      << " command=" << command << '\n';
}

}  // namespace iir
