#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "aam/anomaly.hpp"
#include "aam/io.hpp"
#include "support.hpp"

using namespace aam;
namespace fs = std::filesystem;

namespace {

FeatureMatrix random_features(int rows, int dim, Rng& rng, float scale = 1.0f) {
  std::normal_distribution<float> normal(0.0f, scale);
  FeatureMatrix f(rows, dim);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = normal(rng);
  return f;
}

// Exhaustive nearest-neighbour scan in double, coordinates summed in order.
std::vector<double> brute_force(const FeatureMatrix& bank, const FeatureMatrix& q) {
  std::vector<double> out;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < bank.rows(); ++j) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < bank.cols(); ++k) {
        const double d = static_cast<double>(q(i, k)) - static_cast<double>(bank(j, k));
        s += d * d;
      }
      best = std::min(best, s);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

MemoryBank bank_of(FeatureMatrix f) {
  MemoryBank b;
  b.coreset_indices.resize(static_cast<std::size_t>(f.rows()));
  std::iota(b.coreset_indices.begin(), b.coreset_indices.end(), 0);
  b.features = std::move(f);
  return b;
}

// Each pixel of a single-channel image becomes a 1-D feature row.
class PixelExtractor final : public FeatureExtractor {
 public:
  PatchFeatures extract(const ImageBatch& image, int) const override {
    PatchFeatures p;
    p.grid = image.height();
    p.rows.resize(image.plane(), 1);
    for (int i = 0; i < image.plane(); ++i) p.rows(i, 0) = static_cast<float>(image.values()[i]);
    return p;
  }
  int feature_dim() const override { return 1; }
  std::string descriptor() const override { return "pixels"; }
};

ImageBatch constant_image(double v, int side = 8) { return ImageBatch(1, 1, side, side, v); }

}  // namespace

TEST(PatchFeatures, ShapeForDefaultTaps) {
  const Denoiser d(ArchSpec{}, 1);
  const PatchFeatures f = extract_patch_features(test::random_batch(1, 1, 32, 32, 1), d, 10);
  EXPECT_EQ(f.grid, 8);
  EXPECT_EQ(f.rows.rows(), 64);
  EXPECT_EQ(f.rows.cols(), 128);
  EXPECT_EQ(DenoiserFeatureExtractor(d).feature_dim(), 128);
}

TEST(PatchFeatures, ConstantNetworkGivesIdenticalRows) {
  Denoiser d(test::tiny_arch(), 1);
  d.weights().fill(0.0f);
  const PatchFeatures f = extract_patch_features(test::random_batch(1, 1, 8, 8, 2), d, 3);
  for (Eigen::Index i = 1; i < f.rows.rows(); ++i) EXPECT_TRUE(f.rows.row(i) == f.rows.row(0));
}

TEST(PatchFeatures, IdenticalImagesIdenticalFeatures) {
  const Denoiser d = test::busy_denoiser(test::tiny_arch(), 2);
  const ImageBatch x = test::random_batch(1, 1, 8, 8, 3);
  EXPECT_TRUE(extract_patch_features(x, d, 5).rows == extract_patch_features(x, d, 5).rows);
}

TEST(PatchFeatures, NanWeightsAreNumericalErrors) {
  Denoiser d(test::tiny_arch(), 1);
  for (float& v : d.weights()[0]) v = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(extract_patch_features(test::random_batch(1, 1, 8, 8, 1), d, 1), NumericalError);
}

TEST(Coreset, FullFractionSelectsEverything) {
  Rng rng(1);
  const FeatureMatrix f = random_features(30, 4, rng);
  std::vector<int> idx = coreset_subsample(f, 1.0, 5);
  std::sort(idx.begin(), idx.end());
  std::vector<int> all(30);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(idx, all);
}

TEST(Coreset, HandTracedCollinearPoints) {
  FeatureMatrix f(3, 1);
  f << 0.0f, 1.0f, 10.0f;
  EXPECT_EQ(coreset_subsample_from(f, 2.0 / 3.0, 0), (std::vector<int>{0, 2}));
}

TEST(Coreset, InvalidFractionIsConfigError) {
  FeatureMatrix f(3, 1);
  f << 0.0f, 1.0f, 10.0f;
  EXPECT_THROW(coreset_subsample(f, 0.0, 1), ConfigError);
  EXPECT_THROW(coreset_subsample(f, -0.5, 1), ConfigError);
  EXPECT_THROW(coreset_subsample(FeatureMatrix(0, 3), 0.5, 1), ConfigError);
}

TEST(Coreset, SelectionHasNoDuplicates) {
  FeatureMatrix f(6, 2);
  f << 0, 0, 0, 0, 1, 1, 1, 1, 5, 5, 5, 5;
  const auto idx = coreset_subsample(f, 0.9, 3);
  EXPECT_EQ(idx.size(), 3u);
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = i + 1; j < idx.size(); ++j)
      EXPECT_GT((f.row(idx[i]) - f.row(idx[j])).norm(), 1e-9);
}

TEST(Coreset, GreedyBeatsRandomCoverage) {
  int wins = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(77, trial));
    const FeatureMatrix f = random_features(500, 8, rng);
    const auto greedy = coreset_subsample(f, 0.1, trial);
    std::vector<int> perm(500);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    perm.resize(greedy.size());
    if (coverage_radius(f, greedy) <= coverage_radius(f, perm)) ++wins;
  }
  EXPECT_GE(wins, 90);
}

TEST(Score, VerbatimFeaturesScoreZero) {
  const Denoiser d = test::busy_denoiser(test::tiny_arch(), 4);
  const ImageBatch x = test::random_batch(1, 1, 8, 8, 5);
  const MemoryBank bank = bank_of(extract_patch_features(x, d, 7).rows);
  const AnomalyResult r = score(bank, x, d, 7);
  EXPECT_EQ(r.score, 0.0);
  for (double v : r.heatmap.values()) EXPECT_EQ(v, 0.0);
}

TEST(Score, SingleRowBankIsEuclideanDistance) {
  FeatureMatrix b(1, 3), q(1, 3);
  b << 1, 2, 3;
  q << 4, 6, 3;
  EXPECT_DOUBLE_EQ(nearest_distances(b, q)[0], 5.0);
}

TEST(Score, MatchesBruteForceOnSmallSets) {
  Rng rng(6);
  const FeatureMatrix bank = random_features(20, 16, rng), q = random_features(5, 16, rng);
  EXPECT_EQ(nearest_distances(bank, q), brute_force(bank, q));
}

TEST(Score, MatchesBruteForceOnHundredRandomSets) {
  std::uniform_int_distribution<int> rows(1, 400), dims(1, 64), queries(1, 80);
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(9, trial));
    const int d = dims(rng);
    const FeatureMatrix bank = random_features(rows(rng), d, rng, 2.0f);
    const FeatureMatrix q = random_features(queries(rng), d, rng, 2.0f);
    ASSERT_EQ(nearest_distances(bank, q), brute_force(bank, q)) << "trial " << trial;
  }
}

TEST(Score, MatchesBruteForceOnLargeBank) {
  Rng rng(10);
  const FeatureMatrix bank = random_features(10000, 32, rng), q = random_features(64, 32, rng);
  const auto fast = nearest_distances(bank, q);
  EXPECT_EQ(fast, brute_force(bank, q));
  const MemoryBank mb = bank_of(bank);
  PatchFeatures pf{q, 8};
  EXPECT_EQ(score_features(mb, pf, 32).score, *std::max_element(fast.begin(), fast.end()));
}

TEST(Score, NearDuplicateRowsResolveExactly) {
  FeatureMatrix bank(3, 2), q(1, 2);
  bank << 1000.0f, 1000.0f, 1000.0f, 1000.0001f, 1000.0001f, 1000.0f;
  q << 1000.00005f, 1000.0f;
  EXPECT_EQ(nearest_distances(bank, q), brute_force(bank, q));
}

TEST(Score, PermutationInvariantInBankOrder) {
  Rng rng(11);
  const FeatureMatrix bank = random_features(50, 8, rng), q = random_features(16, 8, rng);
  FeatureMatrix shuffled = bank;
  std::vector<int> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (int i = 0; i < 50; ++i) shuffled.row(i) = bank.row(perm[i]);
  EXPECT_EQ(nearest_distances(bank, q), nearest_distances(shuffled, q));
}

TEST(Score, AddingRowsNeverIncreasesDistance) {
  Rng rng(12);
  const FeatureMatrix q = random_features(16, 8, rng);
  FeatureMatrix bank = random_features(5, 8, rng);
  auto prev = nearest_distances(bank, q);
  for (int grow = 0; grow < 10; ++grow) {
    FeatureMatrix bigger(bank.rows() + 7, 8);
    bigger << bank, random_features(7, 8, rng);
    const auto now = nearest_distances(bigger, q);
    for (std::size_t i = 0; i < now.size(); ++i) EXPECT_LE(now[i], prev[i]);
    bank = bigger;
    prev = now;
  }
}

TEST(Score, HeatmapNonNegativeAndScoreIsMaxCell) {
  Rng rng(13);
  const MemoryBank bank = bank_of(random_features(30, 4, rng));
  const PatchFeatures pf{random_features(16, 4, rng), 4};
  const AnomalyResult r = score_features(bank, pf, 16);
  EXPECT_EQ(r.score, *std::max_element(r.cell_distances.begin(), r.cell_distances.end()));
  EXPECT_EQ(r.heatmap.height(), 16);
  for (double v : r.heatmap.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, r.score + 1e-12);
  }
  const AnomalyResult mean = score_features(bank, pf, 16, ScoreAggregation::mean);
  EXPECT_NEAR(mean.score, std::accumulate(r.cell_distances.begin(), r.cell_distances.end(), 0.0) / 16.0, 1e-12);
}

TEST(Score, DimensionMismatchIsConfigError) {
  Rng rng(14);
  const MemoryBank bank = bank_of(random_features(5, 3, rng));
  const Denoiser d(test::tiny_arch(), 1);
  EXPECT_THROW(score(bank, test::random_batch(1, 1, 8, 8, 1), d, 2), ConfigError);
  EXPECT_THROW(nearest_distances(bank.features, random_features(2, 4, rng)), ConfigError);
}

TEST(Upsample, ConstantGridStaysConstantAndCornersInterpolate) {
  const std::vector<double> flat(4, 2.5);
  for (double v : upsample_bilinear(flat, 2, 8).values()) EXPECT_DOUBLE_EQ(v, 2.5);
  const std::vector<double> g{0.0, 1.0, 2.0, 3.0};
  const ImageBatch h = upsample_bilinear(g, 2, 4);
  EXPECT_DOUBLE_EQ(h.at(0, 0, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(h.at(0, 0, 3, 3), 3.0);
  EXPECT_DOUBLE_EQ(h.at(0, 0, 0, 1), 0.25);
}

TEST(Calibrate, ConstantScoresGiveZeroSpread) {
  MemoryBank bank = bank_of(FeatureMatrix::Zero(1, 1));
  AugmentedSet hold{stack<double>(std::vector<ImageBatch>{constant_image(0.7), constant_image(0.7)}), {0, 0}};
  calibrate(bank, hold, PixelExtractor{});
  EXPECT_NEAR(bank.mu, 0.7, 1e-7);
  EXPECT_EQ(bank.sigma, 0.0);
  EXPECT_EQ(bank.calibration_count, 2);
}

TEST(Calibrate, PopulationStatisticsAndThreshold) {
  MemoryBank bank = bank_of(FeatureMatrix::Zero(1, 1));
  AugmentedSet hold{
      stack<double>(std::vector<ImageBatch>{constant_image(1.0), constant_image(2.0), constant_image(3.0)}),
      {0, 0, 0}};
  calibrate(bank, hold, PixelExtractor{});
  EXPECT_DOUBLE_EQ(bank.mu, 2.0);
  EXPECT_DOUBLE_EQ(bank.sigma, std::sqrt(2.0 / 3.0));
  EXPECT_DOUBLE_EQ(bank.threshold(1.5), 2.0 + 1.5 * std::sqrt(2.0 / 3.0));
  EXPECT_TRUE(bank.calibrated());
}

TEST(Calibrate, EmptyHoldoutIsConfigError) {
  MemoryBank bank = bank_of(FeatureMatrix::Zero(1, 1));
  EXPECT_THROW(calibrate(bank, AugmentedSet{}, PixelExtractor{}), ConfigError);
  const Denoiser d(test::tiny_arch(), 1);
  const std::vector<int> grid{90};
  EXPECT_THROW(calibrate(bank, ImageBatch(0, 1, 8, 8), d, build_schedule(100), grid, {92, 60}, 1), ConfigError);
}

TEST(Calibrate, DenoiserConvenienceUsesHoldoutTimesGrid) {
  const Denoiser d = test::busy_denoiser(test::tiny_arch(), 6);
  const NoiseSchedule s = build_schedule(100);
  const ImageBatch imgs = test::random_batch(4, 1, 8, 8, 7);
  const std::vector<int> grid{90, 70};
  AugmentedSet src{imgs, {0, 0, 0, 0}};
  MemoryBank bank = build_memory_bank(src, DenoiserFeatureExtractor(d), 0.5, 1);
  calibrate(bank, test::random_batch(3, 1, 8, 8, 8), d, s, grid, {92, 60}, 2);
  EXPECT_EQ(bank.calibration_count, 6);
  EXPECT_GT(bank.mu, 0.0);
  EXPECT_GE(bank.sigma, 0.0);
}

TEST(MemoryBankBuild, FullFractionKeepsEveryFeatureRow) {
  const Denoiser d = test::busy_denoiser(test::tiny_arch(), 9);
  AugmentedSet set{test::random_batch(3, 1, 8, 8, 10), {0, 5, 9}};
  const MemoryBank bank = build_memory_bank(set, DenoiserFeatureExtractor(d), 1.0, 1);
  const int rows_per_image = static_cast<int>(extract_patch_features(set.images.slice(0, 1), d, 0).rows.rows());
  EXPECT_EQ(bank.features.rows(), 3 * rows_per_image);
  EXPECT_EQ(bank.dim(), DenoiserFeatureExtractor(d).feature_dim());
  EXPECT_FALSE(bank.source.empty());
}

TEST(MemoryBankBuild, SameSeedSameBank) {
  const Denoiser d = test::busy_denoiser(test::tiny_arch(), 9);
  AugmentedSet set{test::random_batch(6, 1, 8, 8, 11), {0, 0, 0, 0, 0, 0}};
  const MemoryBank a = build_memory_bank(set, DenoiserFeatureExtractor(d), 0.2, 4);
  const MemoryBank b = build_memory_bank(set, DenoiserFeatureExtractor(d), 0.2, 4);
  EXPECT_EQ(a.coreset_indices, b.coreset_indices);
  EXPECT_TRUE(a.features == b.features);
}

TEST(BankFile, RoundTripIsIdentity) {
  Rng rng(15);
  MemoryBank bank = bank_of(random_features(40, 12, rng));
  bank.coreset_indices = {5, 3, 9};
  bank.mu = 0.125;
  bank.sigma = 1.0 / 3.0;
  bank.calibration_count = 17;
  bank.source = "denoiser-encoder taps=5,7";
  const fs::path path = fs::temp_directory_path() / "aam_test_bank.aamb";
  save_bank(path, bank);
  const MemoryBank back = load_bank(path);
  EXPECT_TRUE(back.features == bank.features);
  EXPECT_EQ(back.coreset_indices, bank.coreset_indices);
  EXPECT_EQ(back.mu, bank.mu);
  EXPECT_EQ(back.sigma, bank.sigma);
  EXPECT_EQ(back.calibration_count, bank.calibration_count);
  EXPECT_EQ(back.source, bank.source);
  const std::string bytes = io::read_file(path);
  save_bank(path, back);
  EXPECT_EQ(io::read_file(path), bytes);
  io::write_file_atomic(path, bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_bank(path), IoError);
  fs::remove(path);
}
