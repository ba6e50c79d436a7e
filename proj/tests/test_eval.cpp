#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <Eigen/Geometry>

#include "aam/eval.hpp"
#include "aam/io.hpp"
#include "aam/shapes.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace aam;
namespace fs = std::filesystem;

namespace {

void fill_rect(ImageBatch& img, int y0, int x0, int h, int w) {
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) img.at(0, 0, y, x) = 1.0;
}

Eigen::MatrixXd gaussian_rows(int n, const Eigen::VectorXd& mu, const Eigen::VectorXd& sd, const Eigen::MatrixXd& rot,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd out(n, mu.size());
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd z(mu.size());
    for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = normal(rng) * sd(k);
    out.row(i) = (rot * (mu + z)).transpose();
  }
  return out;
}

}  // namespace

TEST(Detector, BlankImageHasNoShapes) {
  const ImageBatch blank(1, 1, 32, 32, -1.0);
  const HallucinationVerdict v = detect_shape_hallucination(blank);
  EXPECT_FALSE(v.is_hallucinated);
  EXPECT_EQ(v.column_counts, (std::array<int, 3>{0, 0, 0}));
}

TEST(Detector, TwoSquaresInMiddleColumn) {
  ImageBatch img(1, 1, 32, 32, -1.0);
  fill_rect(img, 3, 12, 4, 4);
  fill_rect(img, 20, 13, 4, 4);
  const HallucinationVerdict v = detect_shape_hallucination(img);
  EXPECT_TRUE(v.is_hallucinated);
  EXPECT_EQ(v.column_counts, (std::array<int, 3>{0, 2, 0}));
}

TEST(Detector, OneShapePerColumnIsClean) {
  ImageBatch img(1, 1, 32, 32, -1.0);
  fill_rect(img, 5, 2, 5, 5);
  fill_rect(img, 14, 13, 5, 5);
  fill_rect(img, 24, 25, 5, 5);
  const HallucinationVerdict v = detect_shape_hallucination(img);
  EXPECT_FALSE(v.is_hallucinated);
  EXPECT_EQ(v.column_counts, (std::array<int, 3>{1, 1, 1}));
}

TEST(Detector, ComponentsAreFourConnectedAndAreaFiltered) {
  ImageBatch img(1, 1, 32, 32, -1.0);
  fill_rect(img, 4, 12, 2, 2);
  fill_rect(img, 6, 14, 2, 2);
  EXPECT_EQ(detect_shape_hallucination(img).column_counts[1], 2);
  ImageBatch specks(1, 1, 32, 32, -1.0);
  fill_rect(specks, 2, 2, 1, 3);
  fill_rect(specks, 20, 2, 4, 4);
  EXPECT_FALSE(detect_shape_hallucination(specks).is_hallucinated);
  EXPECT_TRUE(detect_shape_hallucination(specks, DetectorConfig{0.0, 1}).is_hallucinated);
}

TEST(Detector, ComponentsDoNotCrossColumnBoundaries) {
  ImageBatch img(1, 1, 32, 32, -1.0);
  fill_rect(img, 10, 8, 4, 6);
  const HallucinationVerdict v = detect_shape_hallucination(img);
  EXPECT_EQ(v.column_counts, (std::array<int, 3>{1, 1, 0}));
}

TEST(Detector, RobustToSmallNoise) {
  std::vector<ShapesLayout> layouts;
  ShapesDatasetSpec spec;
  spec.count = 200;
  spec.seed = 3;
  const ImageBatch clean = generate_shapes_dataset(spec, &layouts);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> noise(-0.099, 0.099);
  for (int i = 0; i < clean.batch(); ++i) {
    ImageBatch img = clean.slice(i, 1);
    const auto before = detect_shape_hallucination(img).column_counts;
    for (double& v : img.values()) v += noise(rng);
    EXPECT_EQ(detect_shape_hallucination(img).column_counts, before);
  }
}

TEST(Detector, CleanDatasetMatchesLayouts) {
  std::vector<ShapesLayout> layouts;
  ShapesDatasetSpec spec;
  spec.count = 300;
  spec.seed = 5;
  const ImageBatch clean = generate_shapes_dataset(spec, &layouts);
  for (int i = 0; i < clean.batch(); ++i) {
    const HallucinationVerdict v = detect_shape_hallucination(clean.slice(i, 1));
    EXPECT_FALSE(v.is_hallucinated);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(v.column_counts[c], layouts[i].columns[c] ? 1 : 0);
  }
}

TEST(Detector, RejectsBadShapes) {
  EXPECT_THROW(detect_shape_hallucination(ImageBatch(1, 1, 8, 16)), InputError);
  EXPECT_THROW(detect_shape_hallucination(ImageBatch(1, 2, 8, 8)), InputError);
  EXPECT_THROW(detect_shape_hallucination(ImageBatch(2, 1, 8, 8)), InputError);
}

TEST(Frechet, SelfDistanceIsZero) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd x(500, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  EXPECT_LE(frechet_feature_distance(x, x), 1e-6);
  EXPECT_GE(frechet_feature_distance(x, x), 0.0);
}

TEST(Frechet, Symmetric) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd a(300, 5), b(400, 5);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = 2.0 * normal(rng) + 0.5;
  EXPECT_NEAR(frechet_feature_distance(a, b), frechet_feature_distance(b, a), 1e-8);
}

TEST(Frechet, PointMassesGiveSquaredMeanGap) {
  const Eigen::VectorXd m1 = Eigen::Vector3d(1, 2, 3), m2 = Eigen::Vector3d(4, 6, 3);
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(3, 3);
  EXPECT_NEAR(frechet_distance(m1, zero, m2, zero), 25.0, 1e-12);
  Eigen::MatrixXd a(4, 3), b(4, 3);
  a.rowwise() = m1.transpose();
  b.rowwise() = m2.transpose();
  EXPECT_NEAR(frechet_feature_distance(a, b), 25.0, 1e-9);
}

TEST(Frechet, ClosedFormDiagonalAndRotated) {
  const Eigen::Vector3d m1(0, 0, 0), m2(1, -1, 0.5);
  const Eigen::Vector3d s1(1.0, 2.0, 0.5), s2(1.5, 0.7, 0.5);
  double expect = (m1 - m2).squaredNorm();
  for (int k = 0; k < 3; ++k) expect += std::pow(s1(k) - s2(k), 2);
  const Eigen::MatrixXd c1 = s1.array().square().matrix().asDiagonal(), c2 = s2.array().square().matrix().asDiagonal();
  EXPECT_NEAR(frechet_distance(m1, c1, m2, c2), expect, 1e-10);

  const Eigen::MatrixXd rot =
      Eigen::AngleAxisd(0.7, Eigen::Vector3d(1, 2, 3).normalized()).toRotationMatrix();
  EXPECT_NEAR(frechet_distance(rot * m1, rot * c1 * rot.transpose(), rot * m2, rot * c2 * rot.transpose()), expect,
              1e-9);
  const Eigen::MatrixXd a = gaussian_rows(10000, m1, s1, rot, 8), b = gaussian_rows(10000, m2, s2, rot, 9);
  EXPECT_NEAR(frechet_feature_distance(a, b), expect, 0.05 * expect);
}

TEST(Frechet, IndefiniteCovarianceIsNumericalError) {
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(2, 2);
  bad(1, 1) = -0.5;
  EXPECT_THROW(sqrt_psd(bad), NumericalError);
  Eigen::MatrixXd tiny = Eigen::MatrixXd::Identity(2, 2);
  tiny(1, 1) = -1e-12;
  const Eigen::MatrixXd r = sqrt_psd(tiny);
  EXPECT_NEAR(r(0, 0), 1.0, 1e-12);
  EXPECT_EQ(r(1, 1), 0.0);
}

TEST(Frechet, SqrtPsdSquaresBack) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(5, 5);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
  const Eigen::MatrixXd m = g * g.transpose();
  const Eigen::MatrixXd r = sqrt_psd(m);
  EXPECT_LE((r * r - m).norm(), 1e-9 * m.norm());
}

TEST(Metrics, CsvAndJsonFormats) {
  MetricsReport r;
  r.label = "aam";
  r.config_hash = "abcd";
  r.sample_count = 200;
  r.hallucinated = 3;
  r.hallucination_rate = 0.015;
  r.frechet = 1.25;
  EXPECT_EQ(MetricsReport::csv_header(), "label,config_hash,n,hal_rate,frechet");
  EXPECT_EQ(r.csv_row(), "aam,abcd,200,0.015000,1.250000");
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_EQ(j["label"], "aam");
  EXPECT_EQ(j["n"], 200);
  EXPECT_DOUBLE_EQ(j["hal_rate"].get<double>(), 0.015);
  EXPECT_DOUBLE_EQ(j["frechet"].get<double>(), 1.25);

  const fs::path path = fs::temp_directory_path() / "aam_test_metrics.csv";
  fs::remove(path);
  append_metrics_csv(path, r);
  append_metrics_csv(path, r);
  EXPECT_EQ(io::read_file(path), MetricsReport::csv_header() + "\n" + r.csv_row() + "\n" + r.csv_row() + "\n");
  fs::remove(path);
}

TEST(Metrics, CleanImagesAgainstThemselves) {
  ShapesDatasetSpec spec;
  spec.count = 30;
  spec.image_size = 8;
  spec.min_area = 1;
  spec.seed = 11;
  const ImageBatch clean = generate_shapes_dataset(spec);
  const Denoiser d = test::busy_denoiser(test::tiny_arch(), 12);
  const MetricsReport r = evaluate_arm(clean, clean, d, "self", DetectorConfig{0.0, 1});
  EXPECT_EQ(r.hallucination_rate, 0.0);
  EXPECT_EQ(r.sample_count, 30);
  EXPECT_LE(r.frechet, 1e-6);
  EXPECT_THROW(evaluate_arm(ImageBatch(0, 1, 8, 8), clean, d, "x"), ConfigError);
}
