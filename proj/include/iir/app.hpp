#pragma once

// Run configuration, phase-tagged checkpoints, the three training phases and
// the evaluation drivers behind the command-line tool.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "iir/data.hpp"
#include "iir/metrics.hpp"
#include "iir/optim.hpp"
#include "iir/sampler.hpp"

namespace iir {

struct TrainConfig {
  double lr = 1e-4;
  double distill_lr = 1e-4;
  double stage2_lr = 1e-4;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // 0 disables
  LrSchedule lr_schedule = LrSchedule::constant;
  std::int64_t batch = 32;
  double lq_dropout = 0.15;
  double class_dropout = 0.15;
  std::int64_t stage1_steps = 2000;
  std::int64_t distill_steps = 600;
  std::int64_t stage2_steps = 1000;
  std::int64_t checkpoint_every = 0;  // 0 disables mid-run checkpoints
  std::int64_t log_every = 50;
  bool noisy_preview = false;         // Stage II trains on noised previews
  std::uint64_t seed = 1;
};

struct DataConfig {
  std::uint64_t seed = 2024;
  std::int64_t train_size = 10000;
  std::int64_t val_size = 64;
  std::int64_t eval_size = 64;  // test images per degradation level
  double p2 = 0.5;
};

struct RunConfig {
  int schedule_steps = 256;
  NetConfig net;
  TrainConfig train;
  SamplerConfig sampler;
  DataConfig data;
  std::filesystem::path out_dir = "run";
  std::vector<int> eta_sweep;  // analyze: extra panel-c curves

  // Applies one "section.key" assignment; unknown keys and bad values throw
  // ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  // Sorted "key = value" lines for every key.
  std::string canonical() const;
  // FNV-1a over canonical(), 16 hex digits.
  std::string hash() const;
  void validate() const;

  struct KeyDoc {
    std::string key;
    std::string description;
  };
  static const std::vector<KeyDoc>& documented_keys();
};

// INI-style text: "[section]" headers, "key = value" lines, '#' comments.
RunConfig parse_config(std::istream& in, const std::vector<std::pair<std::string, std::string>>& overrides = {});
RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::pair<std::string, std::string>>& overrides = {});

enum class Phase { base_dcp = 0, previewer = 1, aggregator = 2 };
std::string phase_name(Phase phase);
Phase parse_phase(const std::string& name);

// Optimizer and loop position of an interrupted phase.
struct ResumeState {
  Phase training;  // phase being trained
  std::int64_t step = 0;
  AdamState adam;
  std::vector<double> losses;
};

struct Checkpoint {
  Phase phase = Phase::base_dcp;  // last completed phase
  std::string config_hash;
  Pipeline pipeline;
  std::optional<ResumeState> resume;
};

Pipeline init_pipeline(const RunConfig& config);
NamedTensors checkpoint_records(const Pipeline& pipe, Phase phase, const std::string& config_hash,
                                const ResumeState* resume = nullptr);
void save_checkpoint(const std::filesystem::path& path, const Pipeline& pipe, Phase phase,
                     const std::string& config_hash, const ResumeState* resume = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint checkpoint_from_records(const NamedTensors& records);
// Throws PhaseError unless `required` is the last phase `ckpt` completed.
// A mid-run checkpoint is tagged with its last completed phase and carries
// the phase in progress in its resume state; it is never a valid start.
void require_phase(const Checkpoint& ckpt, Phase required, const std::string& command);

// FNV-1a over names, shapes and raw values.
std::string params_hash(const nn::ParamList& params);
nn::ParamList base_params(const Pipeline& pipe);     // denoiser + encoder
nn::ParamList adapter_params(const Pipeline& pipe);
nn::ParamList aggregator_params(const Pipeline& pipe);

// Manifest for train/val/test; test holds eval_size rows per level.
std::vector<ManifestEntry> build_manifest(const DataConfig& data);
std::vector<ManifestEntry> select_split(const std::vector<ManifestEntry>& entries, const std::string& split,
                                        std::optional<DegradeLevel> level = std::nullopt);
ImagePair regenerate(const ManifestEntry& entry, double p2);
PairBatch manifest_batch(const std::vector<ManifestEntry>& entries, double p2);

struct PhaseReport {
  std::vector<double> losses;  // per step
  double initial_smoothed = 0;
  double final_smoothed = 0;
  double seconds = 0;
};

// Mean of the first and last `window` losses.
std::pair<double, double> smoothed_ends(const std::vector<double>& losses, std::size_t window);

struct TrainHooks {
  // Called after every step with (step, loss).
  std::function<void(std::int64_t, double)> on_step;
  // Called when checkpoint_every divides the step count.
  std::function<void(const ResumeState&)> on_checkpoint;
  // Stop after this many steps of the phase (interruption harness).
  std::optional<std::int64_t> stop_after;
};

// Denoiser, encoder and class tokens, jointly, on the diffusion loss.
PhaseReport train_stage1(Pipeline& pipe, const RunConfig& config, const std::vector<ManifestEntry>& train,
                         ResumeState* resume = nullptr, const TrainHooks& hooks = {});
// Attaches the adapter if missing and distills it; base weights frozen.
PhaseReport distill_previewer(Pipeline& pipe, const RunConfig& config, const std::vector<ManifestEntry>& train,
                              ResumeState* resume = nullptr, const TrainHooks& hooks = {});
// Creates the aggregator if missing and trains it; everything else frozen.
PhaseReport train_stage2(Pipeline& pipe, const RunConfig& config, const std::vector<ManifestEntry>& train,
                         ResumeState* resume = nullptr, const TrainHooks& hooks = {});

// Diffusion loss with δ = 1 injection on a fixed draw of (t, noise) per image.
double stage2_validation_loss(Pipeline& pipe, const RunConfig& config, const PairBatch& val, std::uint64_t seed);
// Self-consistency of the previewer on `val`.
double previewer_consistency(Pipeline& pipe, const RunConfig& config, const PairBatch& val);

struct RestoreOutput {
  Tensor images;
  std::vector<TrajectoryLog> logs;
};

// Samples in chunks of `chunk` images; image i uses noise stream i.
RestoreOutput restore_batch(Pipeline& pipe, const PairBatch& batch, const SamplerConfig& sampler,
                            std::int64_t chunk = 64);

// Panels for the four trajectory levels; returns the stats.
TrajectoryStats analyze_levels(Pipeline& pipe, const RunConfig& config, const std::vector<ManifestEntry>& test,
                               const SamplerConfig& sampler);

// Appends "time config_hash seed command build" to `path`.
void append_run_log(const std::filesystem::path& path, const RunConfig& config, const std::string& command);

}  // namespace iir
