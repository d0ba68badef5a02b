#pragma once

// Procedural shape images and the synthetic degradation pipeline.
//
// Images are single-channel planes in [-1, 1]; a batch is a [N,1,H,W]
// Tensor. Every pair is a pure function of (dataset seed, index, level).

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <span>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "iir/rng.hpp"
#include "iir/tensor.hpp"

namespace iir {

inline constexpr int kImageSize = 24;
inline constexpr int kNumShapeClasses = 4;

enum class ShapeClass { circle = 0, square = 1, triangle = 2, cross = 3 };
std::string class_name(int class_id);
int parse_class(const std::string& name);

struct ShapeSpec {
  int class_id = 0;
  double cx = 12.0, cy = 12.0;  // pixel units, pixel (x, y) spans [x, x+1)
  double size = 6.0;            // radius / half-extent
  double fg = 1.0, bg = -1.0;
  double texture_amp = 0.0;     // value-noise amplitude
  std::uint64_t texture_seed = 0;

  void validate() const;
};

ShapeSpec random_shape(int class_id, Rng& rng);
// [1,1,24,24], 4x4 supersampled edges.
Tensor render_shape(const ShapeSpec& spec);

struct DegradePass {
  double blur_sigma = 0.0;
  int down_factor = 1;   // 1, 2 or 4
  double noise_sigma = 0.0;
  int quant_levels = 0;  // 0 = no quantization, else 32, 16 or 8

  bool is_identity() const;
  void validate() const;
};

// Blur -> down/up resize -> noise -> quantize, optionally twice.
struct DegradeSpec {
  DegradePass first;
  std::optional<DegradePass> second;

  bool is_identity() const { return first.is_identity() && !second; }
};

// Applies `spec` to every plane of `hq`; the noise comes from `rng`.
Tensor degrade(const Tensor& hq, const DegradeSpec& spec, Rng& rng);

enum class DegradeLevel { hq, down4, down8_analog, multi, mild };
inline constexpr DegradeLevel kTrajectoryLevels[] = {DegradeLevel::hq, DegradeLevel::down4,
                                                     DegradeLevel::down8_analog, DegradeLevel::multi};
inline constexpr DegradeLevel kAllLevels[] = {DegradeLevel::hq, DegradeLevel::down4, DegradeLevel::down8_analog,
                                              DegradeLevel::multi, DegradeLevel::mild};
std::string level_name(DegradeLevel level);
DegradeLevel parse_level(const std::string& name);

// `p2` is the probability of a second pass for the multi level.
DegradeSpec sample_level(DegradeLevel level, Rng& rng, double p2 = 0.5);

struct ImagePair {
  Tensor hq;  // [1,1,24,24]
  Tensor lq;
  ShapeSpec shape;
  DegradeSpec spec;
  DegradeLevel level = DegradeLevel::hq;
  int class_id = 0;
  std::uint64_t seed = 0;
  std::int64_t index = 0;
};

// Pair `index` of the stream keyed by `seed`. The class cycles through the
// index unless given.
ImagePair make_pair(std::uint64_t seed, std::int64_t index, DegradeLevel level, double p2 = 0.5,
                    std::optional<int> class_id = std::nullopt);

struct PairBatch {
  Tensor hq;  // [N,1,24,24]
  Tensor lq;
  std::vector<int> class_ids;
  std::vector<DegradeLevel> levels;
};

PairBatch stack_pairs(const std::vector<ImagePair>& pairs);
// Fixed-level evaluation set: indices 0..count-1 of `seed`.
PairBatch make_eval_set(std::uint64_t seed, std::int64_t count, DegradeLevel level, double p2 = 0.5);
// Training batch `step`: levels drawn uniformly from kAllLevels.
PairBatch make_train_batch(std::uint64_t seed, std::int64_t step, std::int64_t batch, double p2 = 0.5);

// Produces batches 0, 1, 2, ... on a worker thread into a bounded queue.
// Batch content depends only on its index, so the worker changes timing,
// never results.
class BatchQueue {
 public:
  using Producer = std::function<PairBatch(std::int64_t)>;
  BatchQueue(Producer producer, std::int64_t first, std::size_t capacity = 4);
  ~BatchQueue();
  BatchQueue(const BatchQueue&) = delete;
  BatchQueue& operator=(const BatchQueue&) = delete;

  PairBatch next();

 private:
  void run();

  Producer producer_;
  std::int64_t next_index_;
  std::size_t capacity_;
  std::deque<PairBatch> ready_;
  std::exception_ptr failure_;
  bool stop_ = false;
  std::mutex mu_;
  std::condition_variable cv_;
  std::thread worker_;
};

// Dataset manifest: one row per pair, images regenerated on demand.
struct ManifestEntry {
  std::string split;
  std::int64_t index = 0;
  int class_id = 0;
  std::uint64_t seed = 0;
  DegradeLevel level = DegradeLevel::hq;
  DegradeSpec spec;
};

void write_manifest(std::ostream& out, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(std::istream& in);

// Gaussian blur of every plane, reflect padding, radius ceil(3 sigma).
std::vector<Real> gaussian_blur(std::span<const Real> planes, std::int64_t height, std::int64_t width,
                                double sigma);

// 8-bit binary PGM, [-1,1] mapped to [0,255].
void write_pgm(const std::filesystem::path& path, const Tensor& image);
Tensor read_pgm(const std::filesystem::path& path);

}  // namespace iir
