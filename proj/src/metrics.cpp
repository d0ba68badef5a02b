#include "iir/metrics.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "iir/error.hpp"

namespace iir {

namespace {

constexpr int kWindow = 7;
constexpr double kWindowSigma = 1.5;

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::vector<double> window_weights() {
  std::vector<double> w(kWindow * kWindow);
  double total = 0;
  for (int y = 0; y < kWindow; ++y) {
    for (int x = 0; x < kWindow; ++x) {
      const double dy = y - kWindow / 2, dx = x - kWindow / 2;
      total += w[static_cast<std::size_t>(y * kWindow + x)] = std::exp(-(dx * dx + dy * dy) / (2 * kWindowSigma * kWindowSigma));
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

double ssim_planes(std::span<const Real> a, std::span<const Real> b, std::int64_t h, std::int64_t w, double range) {
  if (h < kWindow || w < kWindow) throw ShapeError("ssim: image smaller than the 7x7 window");
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  static const std::vector<double> weights = window_weights();
  double total = 0;
  std::int64_t count = 0;
  for (std::size_t base = 0; base < a.size(); base += static_cast<std::size_t>(h * w)) {
    for (std::int64_t y = 0; y + kWindow <= h; ++y) {
      for (std::int64_t x = 0; x + kWindow <= w; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < kWindow; ++dy) {
          for (int dx = 0; dx < kWindow; ++dx) {
            const double g = weights[static_cast<std::size_t>(dy * kWindow + dx)];
            const auto i = base + static_cast<std::size_t>((y + dy) * w + x + dx);
            ma += g * a[i];
            mb += g * b[i];
            saa += g * a[i] * a[i];
            sbb += g * b[i] * b[i];
            sab += g * a[i] * b[i];
          }
        }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

void write_panel(const std::filesystem::path& path, const TrajectoryStats& stats,
                 std::vector<double> LevelCurves::*field) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,t";
  for (const auto& [level, c] : stats.levels) out << ',' << level_name(level);
  out << '\n';
  out.precision(9);
  const auto& first = stats.levels.begin()->second;
  for (std::size_t k = 0; k < stats.steps(); ++k) {
    out << k << ',' << first.t[k];
    for (const auto& [level, c] : stats.levels) out << ',' << (c.*field)[k];
    out << '\n';
  }
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b, double data_range) {
  require_same("psnr", a, b);
  double acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.at(i)) - b.at(i);
    acc += d * d;
  }
  const double m = acc / static_cast<double>(a.numel());
  if (m == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / m));
}

double ssim(const Tensor& a, const Tensor& b, double data_range) {
  require_same("ssim", a, b);
  if (a.rank() < 2) throw ShapeError("ssim: expected [...,H,W], got " + shape_str(a.shape()));
  return ssim_planes(a.data(), b.data(), a.dim(-2), a.dim(-1), data_range);
}

double band_ssim(const Tensor& a, const Tensor& b, double data_range) {
  require_same("band_ssim", a, b);
  if (a.rank() < 2) throw ShapeError("band_ssim: expected [...,H,W], got " + shape_str(a.shape()));
  const std::int64_t h = a.dim(-2), w = a.dim(-1);
  auto band = [&](const Tensor& x) {
    auto low = gaussian_blur(x.data(), h, w, 1.0);
    for (std::size_t i = 0; i < low.size(); ++i) low[i] = x.data()[i] - low[i];
    return low;
  };
  const auto ba = band(a), bb = band(b);
  return ssim_planes(ba, bb, h, w, data_range);
}

double MetricReport::mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double MetricReport::stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double acc = 0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

void MetricReport::write_csv(std::ostream& out) const {
  out << "image,psnr,ssim,band_ssim\n";
  out.precision(9);
  for (std::size_t i = 0; i < size(); ++i) out << i << ',' << psnr[i] << ',' << ssim[i] << ',' << band_ssim[i] << '\n';
  out << "mean," << mean(psnr) << ',' << mean(ssim) << ',' << mean(band_ssim) << '\n';
  out << "std," << stddev(psnr) << ',' << stddev(ssim) << ',' << stddev(band_ssim) << '\n';
}

MetricReport evaluate(const Tensor& images, const Tensor& reference) {
  require_same("evaluate", images, reference);
  MetricReport r;
  const std::int64_t n = images.dim(0), per = images.numel() / n;
  Shape one = images.shape();
  one[0] = 1;
  for (std::int64_t i = 0; i < n; ++i) {
    auto slice = [&](const Tensor& x) {
      auto d = x.data().subspan(static_cast<std::size_t>(i * per), static_cast<std::size_t>(per));
      return Tensor::from(one, {d.begin(), d.end()});
    };
    const Tensor a = slice(images), b = slice(reference);
    r.psnr.push_back(psnr(a, b));
    r.ssim.push_back(ssim(a, b));
    r.band_ssim.push_back(band_ssim(a, b));
  }
  return r;
}

std::size_t TrajectoryStats::steps() const { return levels.empty() ? 0 : levels.begin()->second.t.size(); }

TrajectoryStats trajectory_report(const std::map<DegradeLevel, std::vector<TrajectoryLog>>& logs) {
  if (logs.empty()) throw Error("trajectory report: no groups");
  TrajectoryStats stats;
  std::size_t steps = 0;
  for (const auto& [level, group] : logs) {
    if (group.empty()) throw Error("trajectory report: empty group for level " + level_name(level));
    if (steps == 0) steps = group.front().records.size();
    LevelCurves c;
    c.t.assign(steps, 0);
    c.dist_preview_mean.assign(steps, 0.0);
    c.dist_temporal.assign(steps, 0.0);
    c.delta.assign(steps, 0.0);
    for (const auto& log : group) {
      if (log.records.size() != steps) throw Error("trajectory report: logs differ in length");
      for (std::size_t k = 0; k < steps; ++k) {
        const auto& r = log.records[k];
        c.t[k] = r.t;
        c.dist_preview_mean[k] += r.dist_preview_mean;
        c.dist_temporal[k] += r.dist_temporal;
        c.delta[k] += r.delta;
      }
    }
    const double n = static_cast<double>(group.size());
    for (std::size_t k = 0; k < steps; ++k) {
      c.dist_preview_mean[k] /= n;
      c.dist_temporal[k] /= n;
      c.delta[k] /= n;
    }
    stats.levels[level] = std::move(c);
  }
  return stats;
}

std::vector<std::filesystem::path> write_panels(const TrajectoryStats& stats, const std::filesystem::path& dir,
                                                const std::string& suffix) {
  if (stats.levels.empty()) throw Error("write_panels: no levels");
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out{dir / ("panel_a" + suffix + ".csv"), dir / ("panel_b" + suffix + ".csv"),
                                         dir / ("panel_c" + suffix + ".csv")};
  write_panel(out[0], stats, &LevelCurves::dist_preview_mean);
  write_panel(out[1], stats, &LevelCurves::dist_temporal);
  write_panel(out[2], stats, &LevelCurves::delta);
  return out;
}

void write_delta_panel(const TrajectoryStats& stats, const std::filesystem::path& path) {
  if (stats.levels.empty()) throw Error("write_delta_panel: no levels");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_panel(path, stats, &LevelCurves::delta);
}

std::vector<int> post_warmup_steps(int steps, int eta) {
  std::vector<int> out;
  for (int k = 1; steps - k > eta; ++k) out.push_back(k);
  return out;
}

double delta_ordering_fraction(const TrajectoryStats& stats, int eta) {
  for (auto l : kTrajectoryLevels) {
    if (!stats.levels.count(l)) throw Error("delta ordering: missing level " + level_name(l));
  }
  const auto ks = post_warmup_steps(static_cast<int>(stats.steps()), eta);
  if (ks.empty()) return 0.0;
  int ordered = 0;
  for (int k : ks) {
    bool ok = true;
    for (std::size_t i = 0; i + 1 < std::size(kTrajectoryLevels); ++i) {
      ok = ok && stats.levels.at(kTrajectoryLevels[i]).delta[static_cast<std::size_t>(k)] >
                     stats.levels.at(kTrajectoryLevels[i + 1]).delta[static_cast<std::size_t>(k)];
    }
    ordered += ok;
  }
  return static_cast<double>(ordered) / static_cast<double>(ks.size());
}

}  // namespace iir
