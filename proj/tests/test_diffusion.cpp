#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "iir/diffusion.hpp"
#include "iir/error.hpp"
#include "iir/ops.hpp"

namespace iir {
namespace {

using testing::bit_equal;

TEST(Schedule, VariancePreservingIdentity) {
  NoiseSchedule s(256);
  for (int t = 0; t <= 256; ++t) {
    EXPECT_NEAR(s.alpha(t) * s.alpha(t) + s.beta(t) * s.beta(t), 1.0, 1e-6) << t;
    if (t > 0) {
      EXPECT_LT(s.alpha(t), s.alpha(t - 1));
      EXPECT_GT(s.beta(t), s.beta(t - 1));
    }
  }
  EXPECT_EQ(s.alpha(0), 1.0);
  EXPECT_EQ(s.beta(0), 0.0);
  EXPECT_EQ(s.alpha(256), 0.0);
  EXPECT_THROW(s.alpha(257), Error);
}

TEST(Schedule, InferenceGridStartsBelowTheTopAndDecreases) {
  NoiseSchedule s(256);
  const auto g = s.inference_grid(30);
  ASSERT_EQ(g.size(), 30u);
  EXPECT_EQ(g.front(), 255);
  EXPECT_GT(g.back(), 0);
  for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(g[i], g[i - 1]);
  EXPECT_THROW(s.inference_grid(0), ConfigError);
}

TEST(Schedule, CsvHasOneRowPerStep) {
  NoiseSchedule s(8);
  std::ostringstream out;
  s.write_csv(out);
  std::string text = out.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 10);
  EXPECT_EQ(text.rfind("t,alpha,beta\n", 0), 0u);
}

TEST(ForwardProcess, TimeZeroIsIdentity) {
  NoiseSchedule s(64);
  Rng rng(1);
  Tensor x = rng.normal_tensor({2, 1, 4, 4});
  const std::vector<int> t{0, 0};
  const auto d = add_noise(x, t, s, rng);
  EXPECT_TRUE(bit_equal(d.z_t, x));
  EXPECT_EQ(d.eps.shape(), x.shape());
}

TEST(ForwardProcess, ZeroImageGivesScaledNoise) {
  NoiseSchedule s(64);
  Rng rng(2);
  const std::vector<int> t{10, 50};
  const auto d = add_noise(Tensor::zeros({2, 1, 3, 3}), t, s, rng);
  for (int n = 0; n < 2; ++n) {
    for (int i = 0; i < 9; ++i) {
      EXPECT_NEAR(d.z_t.at(n * 9 + i), s.beta(t[static_cast<std::size_t>(n)]) * d.eps.at(n * 9 + i), 1e-6);
    }
  }
}

TEST(ForwardProcess, MonteCarloMeanMatchesScaledSignal) {
  NoiseSchedule s(256);
  Rng rng(7);
  const int draws = 10000, t = 128;
  Tensor x = Tensor::full({draws, 1, 8, 8}, Real(0.5));
  const std::vector<int> ts(draws, t);
  const auto d = add_noise(x, ts, s, rng);
  const double expect = s.alpha(t) * 0.5, sigma = s.beta(t) / std::sqrt(draws);
  double grand = 0;
  for (int p = 0; p < 64; ++p) {
    double m = 0;
    for (int n = 0; n < draws; ++n) m += d.z_t.at(n * 64 + p);
    m /= draws;
    grand += m / 64;
    // 64 simultaneous checks: 4 sigma keeps the family-wise false alarm rate
    // near 3 sigma's single-test rate.
    EXPECT_NEAR(m, expect, 4 * sigma) << "pixel " << p;
  }
  EXPECT_NEAR(grand, expect, 3 * sigma / 8);
}

TEST(Loss, ZeroForExactPrediction) {
  Rng rng(3);
  Tensor e = rng.normal_tensor({2, 1, 4, 4});
  EXPECT_EQ(diffusion_loss(e, e).item(), 0);
}

TEST(Loss, ConstantOffsetGivesItsSquare) {
  Rng rng(4);
  Tensor e = rng.normal_tensor({1, 1, 4, 4});
  Tensor pred = ops::add(e, Tensor::full(e.shape(), Real(0.3)));
  EXPECT_NEAR(diffusion_loss(pred, e).item(), 0.09, 1e-6);
}

TEST(Loss, MatchesDirectEvaluation) {
  Rng rng(5);
  Tensor a = rng.normal_tensor({4}), b = rng.normal_tensor({4});
  double oracle = 0;
  for (int i = 0; i < 4; ++i) oracle += std::pow(static_cast<double>(a.at(i)) - b.at(i), 2) / 4;
  EXPECT_NEAR(diffusion_loss(a, b).item(), oracle, 1e-6);
}

TEST(X0, InvertsTheForwardProcess) {
  NoiseSchedule s(256);
  Rng rng(6);
  Tensor x = rng.normal_tensor({3, 1, 4, 4}, 0.5);
  const std::vector<int> t{5, 100, 250};
  const auto d = add_noise(x, t, s, rng);
  Tensor back = x0_from_eps(d.z_t, d.eps, t, s);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(back.at(i), x.at(i), 2e-5);
}

TEST(X0, RoundTripOnTheEvaluationGrid) {
  NoiseSchedule s(256);
  Rng rng(8);
  for (int t : s.inference_grid(30)) {
    Tensor x = rng.normal_tensor({1, 1, 6, 6}, 0.5);
    Tensor e = rng.normal_tensor({1, 1, 6, 6});
    const std::vector<int> ts{t};
    Tensor back = x0_from_eps(diffuse(x, e, ts, s), e, ts, s);
    for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(back.at(i), x.at(i), 1e-5) << "t=" << t;
  }
}

TEST(X0, NoiselessStepLeavesInputUnchanged) {
  Tensor z = Tensor::from({1, 1, 1, 2}, {0.25, -0.5});
  const double a[] = {1.0}, b[] = {0.0};
  EXPECT_TRUE(bit_equal(eps_to_x0(z, Tensor::from({1, 1, 1, 2}, {3, 3}), a, b), z));
}

TEST(X0, HandArithmetic) {
  const double a[] = {0.8}, b[] = {0.6};
  Tensor x0 = eps_to_x0(Tensor::from({1}, {1.0}), Tensor::from({1}, {0.5}), a, b);
  EXPECT_NEAR(x0.item(), 0.875, 1e-7);
}

TEST(Ddim, SameStepReturnsInput) {
  NoiseSchedule s(64);
  Rng rng(9);
  Tensor z = rng.normal_tensor({2, 1, 3, 3}), x0 = rng.normal_tensor({2, 1, 3, 3});
  const std::vector<int> t{20, 40};
  Tensor out = ddim_step(z, x0, t, t, s);
  for (std::int64_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(out.at(i), z.at(i), 1e-6);
}

TEST(Ddim, KeepsTheNoiseDirection) {
  NoiseSchedule s(64);
  Rng rng(10);
  Tensor x = rng.normal_tensor({1, 1, 3, 3}), e = rng.normal_tensor({1, 1, 3, 3});
  const std::vector<int> t{40}, tp{17};
  Tensor out = ddim_step(diffuse(x, e, t, s), x, t, tp, s);
  Tensor expect = diffuse(x, e, tp, s);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(out.at(i), expect.at(i), 1e-5);
}

TEST(Ddim, HandArithmetic) {
  const double at[] = {0.8}, bt[] = {0.6}, ap[] = {0.9}, bp[] = {0.436};
  Tensor out = ddim_update(Tensor::from({1}, {1.0}), Tensor::from({1}, {0.875}), at, bt, ap, bp);
  EXPECT_NEAR(out.item(), 0.9 * 0.875 + (0.436 / 0.6) * (1 - 0.7), 1e-6);
  EXPECT_NEAR(out.item(), 1.0055, 1e-4);
}

TEST(Ddim, TwoStepsComposeIntoOne) {
  NoiseSchedule s(256);
  Rng rng(11);
  Tensor z = rng.normal_tensor({2, 1, 4, 4}), x0 = rng.normal_tensor({2, 1, 4, 4}, 0.5);
  const std::vector<int> t{200, 150}, mid{120, 90}, end{40, 0};
  Tensor two = ddim_step(ddim_step(z, x0, t, mid, s), x0, mid, end, s);
  Tensor one = ddim_step(z, x0, t, end, s);
  for (std::int64_t i = 0; i < z.numel(); ++i) EXPECT_NEAR(two.at(i), one.at(i), 1e-5);
}

TEST(Ddim, StepToZeroReturnsTheEstimate) {
  NoiseSchedule s(64);
  Rng rng(12);
  Tensor z = rng.normal_tensor({1, 1, 3, 3}), x0 = rng.normal_tensor({1, 1, 3, 3});
  const std::vector<int> t{30}, zero{0};
  EXPECT_TRUE(bit_equal(ddim_step(z, x0, t, zero, s), x0));
}

TEST(TimestepFeatures, DistinctPerStep) {
  const std::vector<int> t{0, 1, 100};
  Tensor f = timestep_features(t, 8);
  EXPECT_EQ(f.shape(), (Shape{3, 8}));
  EXPECT_GT(testing::sq_dist(ops::split(f, 0, std::vector<std::int64_t>{1, 2})[0],
                             ops::split(f, 0, std::vector<std::int64_t>{1, 1, 1})[1]),
            0);
}

}  // namespace
}  // namespace iir
