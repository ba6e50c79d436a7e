#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "aam/attention.hpp"
#include "aam/rng.hpp"

using namespace aam;

namespace {

RowMatrix<double> random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  RowMatrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

RowMatrix<double> softmax_row(const RowMatrix<double>& z, double tau) {
  RowMatrix<double> p = z;
  scaled_row_softmax<double>(p, 1.0 / tau, "test");
  return p;
}

}  // namespace

TEST(Temperature, ZeroLogitIsExactlyOne) { EXPECT_EQ(temperature_from_logit(0.0, 2.0), 1.0); }

TEST(Temperature, SaturatesAtTheRangeEnds) {
  EXPECT_NEAR(temperature_from_logit(50.0, 2.0), 100.0, 1e-9);
  EXPECT_NEAR(temperature_from_logit(-50.0, 2.0), 0.01, 1e-12);
}

TEST(Temperature, MatchesScalarEvaluation) {
  // tanh(0.5) = 0.46211715726000975850...
  const double expected = std::pow(10.0L, 2.0L * 0.46211715726000975850L);
  EXPECT_NEAR(temperature_from_logit(0.5, 2.0), expected, 1e-12);
}

TEST(Temperature, StrictlyIncreasingAndBounded) {
  double prev = 0.0;
  for (double x = -5.0; x <= 5.0; x += 0.05) {
    const double tau = temperature_from_logit(x, 2.0);
    EXPECT_GT(tau, prev);
    EXPECT_GE(tau, 0.01);
    EXPECT_LE(tau, 100.0);
    prev = tau;
  }
}

TEST(AttentionForward, UnitTemperatureMatchesUnscaledReference) {
  Rng rng(1);
  const auto q = random_matrix(16, 8, rng), k = random_matrix(16, 8, rng), v = random_matrix(16, 8, rng);
  RowMatrix<double> a, u;
  attention_forward<double>(q, k, v, 1.0, a, u);

  RowMatrix<double> ref = q * k.transpose();
  const double scale = 1.0 / std::sqrt(8.0);
  for (Eigen::Index i = 0; i < ref.rows(); ++i) {
    auto row = ref.row(i);
    row *= scale;
    const double mx = row.maxCoeff();
    row.array() = (row.array() - mx).exp();
    row /= row.sum();
  }
  const RowMatrix<double> ref_update = ref * v;
  EXPECT_TRUE(a == ref);
  EXPECT_TRUE(u == ref_update);
}

TEST(AttentionForward, HighTemperatureIsUniform) {
  RowMatrix<double> k(2, 1), v(2, 2);
  k << 1.0, 0.0;
  v << 1.0, 2.0, 3.0, 6.0;
  RowMatrix<double> q2(2, 1);
  q2 << 1.0, 1.0;
  RowMatrix<double> a, u;
  attention_forward<double>(q2, k, v, 1e6, a, u);
  EXPECT_NEAR(a(0, 0), 0.5, 1e-6);
  EXPECT_NEAR(a(0, 1), 0.5, 1e-6);
  EXPECT_NEAR(u(0, 0), 2.0, 1e-5);
  EXPECT_NEAR(u(0, 1), 4.0, 1e-5);
}

TEST(AttentionForward, TwoTokenClosedForm) {
  RowMatrix<double> q(2, 1), k(2, 1), v(2, 1);
  q << 1.0, 1.0;
  k << 1.0, 0.0;
  v << 5.0, -1.0;
  RowMatrix<double> a, u;
  attention_forward<double>(q, k, v, 0.5, a, u);
  const double e1 = std::exp(2.0 * 1.0), e0 = std::exp(2.0 * 0.0);
  EXPECT_NEAR(a(0, 0), e1 / (e1 + e0), 1e-9);
  EXPECT_NEAR(a(0, 1), e0 / (e1 + e0), 1e-9);
  EXPECT_NEAR(u(0, 0), (5.0 * e1 - e0) / (e1 + e0), 1e-9);
}

TEST(AttentionForward, NonFiniteLogitsNameTheLayer) {
  RowMatrix<double> q(2, 1), k(2, 1), v(2, 1);
  q << std::numeric_limits<double>::quiet_NaN(), 1.0;
  k << 1.0, 0.0;
  v << 1.0, 1.0;
  RowMatrix<double> a, u;
  try {
    attention_forward<double>(q, k, v, 1.0, a, u, "enc.attn16");
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("enc.attn16"), std::string::npos);
  }
}

TEST(AttentionForward, ContextOverloadAgrees) {
  Rng rng(2);
  AttentionContext<double> ctx{random_matrix(5, 3, rng), random_matrix(5, 3, rng), random_matrix(5, 3, rng), {}, {}};
  attention_forward(ctx, 0.3);
  RowMatrix<double> a, u;
  attention_forward<double>(ctx.q, ctx.k, ctx.v, 0.3, a, u);
  EXPECT_TRUE(ctx.attention == a);
  EXPECT_TRUE(ctx.update == u);
}

TEST(SoftmaxProperty, RowStochasticAcrossTemperatureLadder) {
  Rng rng(3);
  for (double tau : {0.01, 0.1, 1.0, 10.0, 100.0}) {
    const RowMatrix<double> z = random_matrix(1000, 16, rng, 3.0);
    const RowMatrix<double> p = softmax_row(z, tau);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      ASSERT_NEAR(p.row(i).sum(), 1.0, 1e-6);
      ASSERT_GE(p.row(i).minCoeff(), 0.0);
      ASSERT_LE(p.row(i).maxCoeff(), 1.0);
    }
  }
}

TEST(SoftmaxProperty, FloatRowsStochasticAcrossContinuousRange) {
  Rng rng(4);
  std::uniform_real_distribution<double> log_tau(-2.0, 2.0);
  std::normal_distribution<float> normal(0.0f, 4.0f);
  for (int trial = 0; trial < 200; ++trial) {
    RowMatrix<float> z(8, 32);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = normal(rng);
    const double tau = std::pow(10.0, log_tau(rng));
    scaled_row_softmax<float>(z, static_cast<float>(1.0 / tau), "test");
    for (Eigen::Index i = 0; i < z.rows(); ++i) ASSERT_NEAR(z.row(i).sum(), 1.0f, 1e-6f);
  }
}

TEST(SoftmaxProperty, EntropyNonDecreasingInTemperature) {
  Rng rng(5);
  const RowMatrix<double> z = random_matrix(1000, 16, rng, 2.0);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    double prev = -1.0;
    for (double tau : {0.01, 0.1, 1.0, 10.0, 100.0}) {
      const double h = entropy(softmax_row(z.row(i), tau).row(0));
      ASSERT_GE(h, prev - 1e-12) << "row " << i << " tau " << tau;
      prev = h;
    }
  }
}

TEST(SoftmaxProperty, SharpLimit) {
  Rng rng(6);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int trial = 0; trial < 500; ++trial) {
    RowMatrix<double> z(1, 10);
    for (Eigen::Index j = 0; j < 10; ++j) z(0, j) = u(rng);
    Eigen::Index top;
    z.row(0).maxCoeff(&top);
    for (Eigen::Index j = 0; j < 10; ++j)
      if (j != top) z(0, j) = std::min(z(0, j), z(0, top) - 1.0);
    EXPECT_GT(softmax_row(z, 0.01).maxCoeff(), 0.999);
  }
}
