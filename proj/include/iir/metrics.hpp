#pragma once

// Full-reference image metrics and the trajectory diagnostics.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <vector>

#include "iir/data.hpp"
#include "iir/sampler.hpp"
#include "iir/tensor.hpp"

namespace iir {

inline constexpr double kPsnrCap = 99.0;

// 10 log10(range^2 / MSE) over all elements; identical inputs give 99.
double psnr(const Tensor& a, const Tensor& b, double data_range = 2.0);
// Mean local SSIM over every valid 7x7 window (Gaussian, sigma 1.5) of every
// plane; C1 = (0.01 range)^2, C2 = (0.03 range)^2.
double ssim(const Tensor& a, const Tensor& b, double data_range = 2.0);
// SSIM of the high-frequency bands x - blur(x, sigma=1).
double band_ssim(const Tensor& a, const Tensor& b, double data_range = 2.0);

struct MetricReport {
  std::vector<double> psnr;
  std::vector<double> ssim;
  std::vector<double> band_ssim;

  std::size_t size() const { return psnr.size(); }
  static double mean(const std::vector<double>& v);
  static double stddev(const std::vector<double>& v);
  // Per-image rows followed by mean and std rows.
  void write_csv(std::ostream& out) const;
};

// Row i of `images` against row i of `reference`.
MetricReport evaluate(const Tensor& images, const Tensor& reference);

struct LevelCurves {
  std::vector<int> t;
  std::vector<double> dist_preview_mean;
  std::vector<double> dist_temporal;
  std::vector<double> delta;
};

struct TrajectoryStats {
  std::map<DegradeLevel, LevelCurves> levels;
  std::size_t steps() const;
};

// Per-step, per-level means. Every group must be non-empty and all logs must
// have the same number of steps.
TrajectoryStats trajectory_report(const std::map<DegradeLevel, std::vector<TrajectoryLog>>& logs);

// Writes panel_a.csv (preview vs x0 estimate), panel_b.csv (temporal
// difference) and panel_c.csv (delta), one column per level. `suffix` is
// inserted before the extension.
std::vector<std::filesystem::path> write_panels(const TrajectoryStats& stats, const std::filesystem::path& dir,
                                                const std::string& suffix = "");

// Only the delta curves, for sweeps.
void write_delta_panel(const TrajectoryStats& stats, const std::filesystem::path& path);

// Steps whose gate was evaluated after the first step: 1 .. K-eta-1.
std::vector<int> post_warmup_steps(int steps, int eta);
// Fraction of post-warmup steps at which the mean delta is strictly
// decreasing along kTrajectoryLevels.
double delta_ordering_fraction(const TrajectoryStats& stats, int eta);

}  // namespace iir
