#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>

#include "aam/anomaly.hpp"

namespace aam {

struct DetectorConfig {
  double threshold = 0.0;
  int min_area = 4;
};

struct HallucinationVerdict {
  bool is_hallucinated = false;
  std::array<int, 3> column_counts{0, 0, 0};
  double threshold = 0.0;
};

/// 4-connected components of pixels > threshold, counted separately in each
/// vertical third; components smaller than min_area are ignored.
HallucinationVerdict detect_shape_hallucination(const ImageBatch& image, const DetectorConfig& config = {});

/// Frechet distance between Gaussian fits (unbiased covariance) of two
/// feature sets.
double frechet_feature_distance(const Eigen::MatrixXd& real_features, const Eigen::MatrixXd& gen_features);
/// Closed form for given moments.
double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& sigma1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& sigma2);
/// Symmetric PSD square root; eigenvalues in [-1e-8, 0) are clamped to 0.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m);

struct MetricsReport {
  std::string label;
  double hallucination_rate = 0.0;
  double frechet = 0.0;
  long sample_count = 0;
  long hallucinated = 0;
  std::string config_hash;

  std::string to_json() const;
  std::string csv_row() const;
  static std::string csv_header();
};

/// One row per image: patch features averaged over locations (t = 0).
Eigen::MatrixXd pooled_features(const ImageBatch& images, const FeatureExtractor& extractor);

MetricsReport evaluate_arm(const ImageBatch& images, const ImageBatch& real_reference, const Denoiser& params,
                           const std::string& label, const DetectorConfig& detector = {},
                           const std::string& config_hash = "");

void append_metrics_csv(const std::filesystem::path& path, const MetricsReport& report);

}  // namespace aam
