#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "aam/error.hpp"
#include "aam/schedule.hpp"
#include "support.hpp"

using namespace aam;

TEST(Schedule, ConstantBetaCumulativeProduct) {
  const NoiseSchedule s = build_schedule(2, ScheduleKind::linear, 0.5, 0.5);
  EXPECT_EQ(s.betas, (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(s.alpha_bars, (std::vector<double>{0.5, 0.25}));
}

TEST(Schedule, DefaultLinearIsStrictlyDecreasing) {
  const NoiseSchedule s = build_schedule(1000, ScheduleKind::linear, 1e-4, 0.02);
  for (int t = 1; t < 1000; ++t) EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
  EXPECT_GT(s.alpha_bars.back(), 0.0);
  EXPECT_LT(s.alpha_bars.back(), 1.0);
  EXPECT_NEAR(s.alpha_bars[0], 1.0 - s.betas[0], 1e-12);
  for (int t = 0; t < 1000; ++t) {
    EXPECT_EQ(s.alphas[t], 1.0 - s.betas[t]);
    EXPECT_GT(s.betas[t], 0.0);
    EXPECT_LT(s.betas[t], 1.0);
  }
}

TEST(Schedule, FinalAlphaBarMatchesIndependentProduct) {
  const NoiseSchedule s = build_schedule(10, ScheduleKind::linear, 0.1, 0.2);
  double prod = 1.0;
  for (int t = 0; t < 10; ++t) prod *= 1.0 - (0.1 + 0.1 * t / 9.0);
  EXPECT_NEAR(s.alpha_bars[9], prod, 1e-15);
}

TEST(Schedule, CosineKindSatisfiesInvariants) {
  const NoiseSchedule s = build_schedule(100, ScheduleKind::cosine, 1e-4, 0.5);
  for (int t = 1; t < 100; ++t) EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
  EXPECT_GT(s.alpha_bars.back(), 0.0);
}

TEST(Schedule, InvalidRangesNameTheField) {
  auto message = [](auto fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message([] { build_schedule(1); }).find("schedule.T"), std::string::npos);
  EXPECT_NE(message([] { build_schedule(10, ScheduleKind::linear, 0.0, 0.1); }).find("beta_min"), std::string::npos);
  EXPECT_NE(message([] { build_schedule(10, ScheduleKind::linear, 0.1, 1.0); }).find("beta_max"), std::string::npos);
  EXPECT_NE(message([] { build_schedule(10, ScheduleKind::linear, 0.3, 0.2); }).find("beta_min"), std::string::npos);
  EXPECT_THROW(parse_schedule_kind("quadratic"), ConfigError);
}

namespace {

NoiseSchedule unit_schedule() {
  NoiseSchedule s;
  s.total_steps = 3;
  s.betas = {0.0, 0.1, 0.2};
  s.alphas = {1.0, 0.9, 0.8};
  s.alpha_bars = {1.0, 0.9, 0.72};
  return s;
}

}  // namespace

TEST(ForwardDiffuse, UnitAlphaBarReturnsInput) {
  const ImageBatch x0 = test::random_batch(2, 1, 8, 8, 1);
  const ImageBatch eps = test::random_batch(2, 1, 8, 8, 2);
  EXPECT_EQ(forward_diffuse(x0, 0, eps, unit_schedule()), x0);
}

TEST(ForwardDiffuse, ZeroImageGivesScaledNoise) {
  const NoiseSchedule s = build_schedule(10, ScheduleKind::linear, 0.1, 0.2);
  const ImageBatch x0(1, 1, 8, 8);
  const ImageBatch eps = test::random_batch(1, 1, 8, 8, 3);
  const ImageBatch out = forward_diffuse(x0, 4, eps, s);
  for (std::size_t i = 0; i < out.size(); ++i)
    EXPECT_EQ(out.values()[i], std::sqrt(1.0 - s.alpha_bars[4]) * eps.values()[i]);
}

TEST(ForwardDiffuse, MatchesScalarReference) {
  const NoiseSchedule s = build_schedule(10, ScheduleKind::linear, 0.1, 0.2);
  double ab = 1.0;
  for (int t = 0; t <= 5; ++t) ab *= 1.0 - (0.1 + 0.1 * t / 9.0);
  const ImageBatch x0 = test::random_batch(2, 1, 8, 8, 4);
  const ImageBatch eps = test::random_batch(2, 1, 8, 8, 5);
  const ImageBatch out = forward_diffuse(x0, 5, eps, s);
  for (std::size_t i = 0; i < out.size(); ++i)
    EXPECT_NEAR(out.values()[i], std::sqrt(ab) * x0.values()[i] + std::sqrt(1 - ab) * eps.values()[i], 1e-12);
}

TEST(ForwardDiffuse, ShapeMismatchThrows) {
  const NoiseSchedule s = build_schedule(10);
  EXPECT_THROW(forward_diffuse(ImageBatch(1, 1, 8, 8), 1, ImageBatch(1, 1, 16, 16), s), ShapeError);
}

TEST(PredictX0, InvertsForwardProcess) {
  const NoiseSchedule s = build_schedule(1000);
  const ImageBatch x0 = test::random_batch(3, 1, 8, 8, 6);
  const ImageBatch eps = test::random_batch(3, 1, 8, 8, 7);
  for (int t = 0; t < 1000; t += 37) {
    const ImageBatch back = predict_x0(forward_diffuse(x0, t, eps, s), eps, t, s);
    for (std::size_t i = 0; i < back.size(); ++i) ASSERT_NEAR(back.values()[i], x0.values()[i], 1e-6) << "t=" << t;
  }
  const ImageBatch back = predict_x0(forward_diffuse(x0, 999, eps, s), eps, 999, s);
  for (std::size_t i = 0; i < back.size(); ++i) ASSERT_NEAR(back.values()[i], x0.values()[i], 1e-6);
}

TEST(PredictX0, UnitAlphaBarIsIdentity) {
  const ImageBatch x = test::random_batch(1, 1, 8, 8, 8);
  EXPECT_EQ(predict_x0(x, test::random_batch(1, 1, 8, 8, 9), 0, unit_schedule()), x);
}

TEST(PredictX0, MatchesScalarReference) {
  const NoiseSchedule s = build_schedule(10, ScheduleKind::linear, 0.1, 0.2);
  const ImageBatch x = test::random_batch(1, 1, 8, 8, 10);
  const ImageBatch e = test::random_batch(1, 1, 8, 8, 11);
  const double ab = s.alpha_bars[5];
  const ImageBatch out = predict_x0(x, e, 5, s);
  for (std::size_t i = 0; i < out.size(); ++i)
    EXPECT_NEAR(out.values()[i], (x.values()[i] - std::sqrt(1 - ab) * e.values()[i]) / std::sqrt(ab), 1e-12);
}

TEST(PredictX0, TinyAlphaBarIsNumericalError) {
  NoiseSchedule s = unit_schedule();
  s.alpha_bars[2] = 1e-13;
  EXPECT_THROW(predict_x0(ImageBatch(1, 1, 8, 8), ImageBatch(1, 1, 8, 8), 2, s), NumericalError);
}

TEST(DdimStep, CleanTargetReturnsPrediction) {
  const NoiseSchedule s = build_schedule(100);
  const ImageBatch x = test::random_batch(1, 1, 8, 8, 12);
  const ImageBatch e = test::random_batch(1, 1, 8, 8, 13);
  EXPECT_EQ(ddim_step(x, e, 40, kCleanStep, s), predict_x0(x, e, 40, s));
}

TEST(DdimStep, TrueNoiseGivesForwardDiffusionAtPreviousStep) {
  const NoiseSchedule s = build_schedule(100);
  const ImageBatch x0 = test::random_batch(1, 1, 8, 8, 14);
  const ImageBatch eps = test::random_batch(1, 1, 8, 8, 15);
  const ImageBatch out = ddim_step(forward_diffuse(x0, 60, eps, s), eps, 60, 30, s);
  const ImageBatch ref = forward_diffuse(x0, 30, eps, s);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.values()[i], ref.values()[i], 1e-9);
}

TEST(DdimStep, ClippedPredictionMatchesScalarReference) {
  const NoiseSchedule s = build_schedule(100);
  const ImageBatch x = test::random_batch(1, 1, 8, 8, 16, 2.0);
  const ImageBatch e = test::random_batch(1, 1, 8, 8, 17);
  const ImageBatch out = ddim_step(x, e, 90, 50, s, 1.0);
  const double ab = s.alpha_bars[90], ab_prev = s.alpha_bars[50];
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = std::clamp((x.values()[i] - std::sqrt(1 - ab) * e.values()[i]) / std::sqrt(ab), -1.0, 1.0);
    EXPECT_NEAR(out.values()[i], std::sqrt(ab_prev) * x0 + std::sqrt(1 - ab_prev) * e.values()[i], 1e-12);
  }
  const ImageBatch last = ddim_step(x, e, 90, kCleanStep, s, 1.0);
  for (double v : last.values()) EXPECT_LE(std::abs(v), 1.0);
  EXPECT_EQ(ddim_step(x, e, 90, 50, s, 0.0), ddim_step(x, e, 90, 50, s));
}

TEST(DdimStep, OrderingError) {
  const NoiseSchedule s = build_schedule(100);
  EXPECT_THROW(ddim_step(ImageBatch(1, 1, 8, 8), ImageBatch(1, 1, 8, 8), 10, 10, s), OrderingError);
  EXPECT_THROW(ddim_step(ImageBatch(1, 1, 8, 8), ImageBatch(1, 1, 8, 8), 10, 20, s), OrderingError);
}

TEST(DdimStep, TenStepChainIsBitIdentical) {
  const NoiseSchedule s = build_schedule(100);
  auto chain = [&](std::uint64_t seed) {
    ImageBatch x = test::random_batch(2, 1, 8, 8, seed);
    const auto steps = ddim_timesteps(100, 10);
    for (std::size_t k = 0; k < steps.size(); ++k) {
      ImageBatch eps = x;
      for (double& v : eps.values()) v = std::tanh(v);
      x = ddim_step(x, eps, steps[k], k + 1 < steps.size() ? steps[k + 1] : kCleanStep, s);
    }
    return x;
  };
  for (std::uint64_t seed = 0; seed < 5; ++seed) EXPECT_EQ(chain(seed), chain(seed));
}

TEST(DdimTimesteps, UniformStrideDescending) {
  const auto t = ddim_timesteps(1000, 250);
  ASSERT_EQ(t.size(), 250u);
  EXPECT_EQ(t.front(), 996);
  EXPECT_EQ(t.back(), 0);
  for (std::size_t k = 1; k < t.size(); ++k) EXPECT_EQ(t[k - 1] - t[k], 4);
  EXPECT_EQ(ddim_timesteps(100, 50).front(), 98);
  EXPECT_THROW(ddim_timesteps(100, 0), ConfigError);
  EXPECT_THROW(ddim_timesteps(100, 101), ConfigError);
}
