#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "iir/error.hpp"
#include "iir/metrics.hpp"
#include "iir/ops.hpp"

namespace iir {
namespace {

// Direct per-window SSIM with two-pass moments, written independently of
// the library's one-pass accumulation.
double naive_ssim(const Tensor& a, const Tensor& b, int h, int w) {
  double g[7][7], total = 0;
  for (int y = 0; y < 7; ++y) {
    for (int x = 0; x < 7; ++x) total += g[y][x] = std::exp(-((y - 3) * (y - 3) + (x - 3) * (x - 3)) / 4.5);
  }
  const double c1 = 0.02 * 0.02, c2 = 0.06 * 0.06;
  double sum = 0;
  int n = 0;
  for (int y0 = 0; y0 + 7 <= h; ++y0) {
    for (int x0 = 0; x0 + 7 <= w; ++x0) {
      auto pa = [&](int y, int x) { return static_cast<double>(a.at((y0 + y) * w + x0 + x)); };
      auto pb = [&](int y, int x) { return static_cast<double>(b.at((y0 + y) * w + x0 + x)); };
      double ma = 0, mb = 0;
      for (int y = 0; y < 7; ++y) {
        for (int x = 0; x < 7; ++x) {
          ma += g[y][x] / total * pa(y, x);
          mb += g[y][x] / total * pb(y, x);
        }
      }
      double va = 0, vb = 0, cv = 0;
      for (int y = 0; y < 7; ++y) {
        for (int x = 0; x < 7; ++x) {
          const double wt = g[y][x] / total;
          va += wt * (pa(y, x) - ma) * (pa(y, x) - ma);
          vb += wt * (pb(y, x) - mb) * (pb(y, x) - mb);
          cv += wt * (pa(y, x) - ma) * (pb(y, x) - mb);
        }
      }
      sum += (2 * ma * mb + c1) * (2 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++n;
    }
  }
  return sum / n;
}

TEST(Psnr, IdenticalImagesHitTheCap) {
  Rng rng(1);
  Tensor a = rng.normal_tensor({1, 1, 8, 8});
  EXPECT_EQ(psnr(a, a), 99.0);
}

TEST(Psnr, FullRangeDifferenceIsZeroDb) {
  EXPECT_NEAR(psnr(Tensor::full({1, 1, 4, 4}, 1), Tensor::full({1, 1, 4, 4}, -1)), 0.0, 1e-9);
}

TEST(Psnr, HandArithmetic) {
  // Offset 0.1 everywhere gives MSE 0.01.
  Tensor a = Tensor::full({1, 1, 4, 4}, Real(0.3)), b = Tensor::full({1, 1, 4, 4}, Real(0.2));
  EXPECT_NEAR(psnr(a, b), 26.0206, 1e-3);
  EXPECT_THROW(psnr(a, Tensor::zeros({1, 1, 4, 5})), ShapeError);
}

TEST(Ssim, IdenticalIsOne) {
  const Tensor a = make_pair(1, 0, DegradeLevel::hq).hq;
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, AntiCorrelatedStructureIsNegative) {
  // Same local means, mirrored detail: luminance term 1, structure term < 0.
  Rng rng(2);
  const Tensor n = rng.normal_tensor({1, 1, 16, 16}, 0.2);
  const Tensor grey = Tensor::full(n.shape(), Real(0.3));
  EXPECT_LT(ssim(ops::add(grey, n), ops::sub(grey, n)), 0);
}

TEST(Ssim, MatchesNaivePerWindowComputation) {
  const ImagePair p = make_pair(3, 5, DegradeLevel::multi);
  EXPECT_NEAR(ssim(p.lq, p.hq), naive_ssim(p.lq, p.hq, 24, 24), 1e-9);
  Rng rng(3);
  Tensor a = rng.normal_tensor({1, 1, 9, 11}, 0.5), b = rng.normal_tensor({1, 1, 9, 11}, 0.5);
  EXPECT_NEAR(ssim(a, b), naive_ssim(a, b, 9, 11), 1e-9);
}

TEST(Ssim, AveragesOverPlanes) {
  const PairBatch b = make_eval_set(4, 2, DegradeLevel::down8_analog);
  const std::int64_t sizes[] = {1, 1};
  auto lq = ops::split(b.lq, 0, sizes), hq = ops::split(b.hq, 0, sizes);
  EXPECT_NEAR(ssim(b.lq, b.hq), (ssim(lq[0], hq[0]) + ssim(lq[1], hq[1])) / 2, 1e-12);
}

TEST(BandSsim, SeesDetailLossThatPlainSsimUnderweights) {
  const ImagePair p = make_pair(6, 1, DegradeLevel::hq);
  EXPECT_NEAR(band_ssim(p.hq, p.hq), 1.0, 1e-12);
  DegradeSpec blur;
  blur.first.blur_sigma = 1.0;
  Rng rng(5);
  const Tensor soft = degrade(p.hq, blur, rng);
  EXPECT_LT(band_ssim(soft, p.hq), ssim(soft, p.hq));
}

TEST(Report, MeansAndCsv) {
  const PairBatch b = make_eval_set(7, 3, DegradeLevel::mild);
  const MetricReport r = evaluate(b.lq, b.hq);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_NEAR(r.psnr[1], psnr(ops::split(b.lq, 0, std::vector<std::int64_t>{1, 1, 1})[1],
                              ops::split(b.hq, 0, std::vector<std::int64_t>{1, 1, 1})[1]),
              1e-12);
  EXPECT_DOUBLE_EQ(MetricReport::mean({1, 2, 3}), 2.0);
  EXPECT_NEAR(MetricReport::stddev({1, 2, 3}), 1.0, 1e-12);
  std::ostringstream out;
  r.write_csv(out);
  const std::string s = out.str();
  EXPECT_EQ(s.rfind("image,psnr,ssim,band_ssim\n", 0), 0u);
  EXPECT_NE(s.find("\nmean,"), std::string::npos);
  EXPECT_NE(s.find("\nstd,"), std::string::npos);
}

TrajectoryLog make_log(std::vector<double> delta, double preview_gap = 0.0) {
  TrajectoryLog log;
  for (std::size_t k = 0; k < delta.size(); ++k) {
    log.records.push_back({static_cast<int>(k), 100 - static_cast<int>(k) * 10, preview_gap, 0.5, delta[k], {}, {}});
  }
  return log;
}

TEST(Trajectory, SingleLogIsReportedVerbatim) {
  std::map<DegradeLevel, std::vector<TrajectoryLog>> logs;
  logs[DegradeLevel::hq] = {make_log({0.5, 1.5, 0.0}, 0.25)};
  const auto stats = trajectory_report(logs);
  const auto& c = stats.levels.at(DegradeLevel::hq);
  EXPECT_EQ(c.delta, (std::vector<double>{0.5, 1.5, 0.0}));
  EXPECT_EQ(c.dist_preview_mean, (std::vector<double>{0.25, 0.25, 0.25}));
  EXPECT_EQ(c.t, (std::vector<int>{100, 90, 80}));
}

TEST(Trajectory, MeansAcrossLogsAndRejectsRaggedInput) {
  std::map<DegradeLevel, std::vector<TrajectoryLog>> logs;
  logs[DegradeLevel::multi] = {make_log({1, 2}), make_log({3, 4})};
  EXPECT_EQ(trajectory_report(logs).levels.at(DegradeLevel::multi).delta, (std::vector<double>{2, 3}));
  logs[DegradeLevel::multi].push_back(make_log({1}));
  EXPECT_THROW(trajectory_report(logs), Error);
  logs[DegradeLevel::multi].clear();
  EXPECT_THROW(trajectory_report(logs), Error);
}

TEST(Trajectory, EqualPreviewsGiveZeroPanelA) {
  // A real sampler run whose previews are identical to the x0 estimates is
  // emulated by logs with zero preview gap.
  std::map<DegradeLevel, std::vector<TrajectoryLog>> logs;
  for (auto l : kTrajectoryLevels) logs[l] = {make_log({1, 1, 1, 0})};
  const auto stats = trajectory_report(logs);
  const auto dir = testing::scratch_dir("panels");
  const auto paths = write_panels(stats, dir);
  ASSERT_EQ(paths.size(), 3u);
  std::ifstream a(dir / "panel_a.csv");
  std::string line;
  std::getline(a, line);
  EXPECT_EQ(line, "step,t,hq,down4,down8_analog,multi");
  while (std::getline(a, line)) EXPECT_EQ(line.substr(line.find(',', line.find(',') + 1)), ",0,0,0,0");
  EXPECT_TRUE(std::filesystem::exists(dir / "panel_b.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "panel_c.csv"));
}

TEST(Trajectory, PostWarmupSteps) {
  EXPECT_EQ(post_warmup_steps(30, 4), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16,
                                                        17, 18, 19, 20, 21, 22, 23, 24, 25}));
  EXPECT_TRUE(post_warmup_steps(3, 2).empty());
}

TEST(Trajectory, OrderingFraction) {
  std::map<DegradeLevel, std::vector<TrajectoryLog>> logs;
  // Steps 1..3 are post-warmup for K=6, eta=2; step 2 ties two levels.
  logs[DegradeLevel::hq] = {make_log({9, 4, 4, 4, 0, 0})};
  logs[DegradeLevel::down4] = {make_log({0, 3, 2, 3, 0, 0})};
  logs[DegradeLevel::down8_analog] = {make_log({0, 2, 2, 2, 0, 0})};
  logs[DegradeLevel::multi] = {make_log({0, 1, 1, 1, 0, 0})};
  EXPECT_NEAR(delta_ordering_fraction(trajectory_report(logs), 2), 2.0 / 3.0, 1e-12);
  logs.erase(DegradeLevel::multi);
  EXPECT_THROW(delta_ordering_fraction(trajectory_report(logs), 2), Error);
}

}  // namespace
}  // namespace iir
