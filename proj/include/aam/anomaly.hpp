#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "aam/denoiser.hpp"
#include "aam/trainer.hpp"

namespace aam {

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-location patch features of one image: rows are grid cells
/// (row-major over the coarse grid), columns are feature channels.
struct PatchFeatures {
  FeatureMatrix rows;
  int grid = 0;  // coarse grid side; rows() == grid * grid
};

/// Anything that turns a single image at timestep t into patch features.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual PatchFeatures extract(const ImageBatch& image, int t) const = 0;
  virtual int feature_dim() const = 0;
  virtual std::string descriptor() const = 0;
};

/// Denoiser-encoder backbone: taps are 3x3 average-pooled, finer taps are
/// average-pooled down to the coarsest tap grid, then concatenated.
class DenoiserFeatureExtractor final : public FeatureExtractor {
 public:
  explicit DenoiserFeatureExtractor(const Denoiser& params) : params_(params) {}
  PatchFeatures extract(const ImageBatch& image, int t) const override;
  int feature_dim() const override;
  std::string descriptor() const override;

 private:
  const Denoiser& params_;
};

PatchFeatures extract_patch_features(const ImageBatch& image, const Denoiser& params, int t);

/// Greedy farthest-point (k-center) selection of ceil(fraction * n) rows,
/// starting from a seeded random row. Indices are in selection order; stops
/// early once every remaining row duplicates a selected one.
std::vector<int> coreset_subsample(const FeatureMatrix& features, double fraction, std::uint64_t seed);
/// Same selection from a fixed first row.
std::vector<int> coreset_subsample_from(const FeatureMatrix& features, double fraction, int start);

/// Largest distance from any row to its nearest selected row.
double coverage_radius(const FeatureMatrix& features, std::span<const int> selected);

enum class ScoreAggregation { max, mean };

/// Timestep fed to the extractor when scoring an intermediate prediction:
/// the current denoising step, or always 0.
enum class FeatureTimestep { current, zero };

struct MemoryBank {
  FeatureMatrix features;
  std::vector<int> coreset_indices;
  std::string source;  // extractor descriptor
  double mu = 0.0;
  double sigma = 0.0;
  long calibration_count = 0;

  bool calibrated() const noexcept { return calibration_count > 0; }
  int dim() const noexcept { return static_cast<int>(features.cols()); }
  double threshold(double multiplier) const { return mu + multiplier * sigma; }
};

struct AnomalyResult {
  double score = 0.0;
  ImageBatch heatmap;  // [1, 1, H, W]
  std::vector<double> cell_distances;  // coarse grid, row-major
  int grid = 0;
};

/// Exact nearest-neighbor distance from each query row to the bank.
std::vector<double> nearest_distances(const FeatureMatrix& bank, const FeatureMatrix& queries);

AnomalyResult score_features(const MemoryBank& bank, const PatchFeatures& features, int image_size,
                             ScoreAggregation aggregation = ScoreAggregation::max);
AnomalyResult score(const MemoryBank& bank, const ImageBatch& image, const FeatureExtractor& extractor, int t,
                    ScoreAggregation aggregation = ScoreAggregation::max);
AnomalyResult score(const MemoryBank& bank, const ImageBatch& image, const Denoiser& params, int t);

/// Bilinear (align-corners=false) resize of a square grid.
ImageBatch upsample_bilinear(std::span<const double> grid, int side, int out_side);

/// Builds the bank from every row of every augmented entry, then keeps a
/// greedy coreset.
MemoryBank build_memory_bank(const AugmentedSet& set, const FeatureExtractor& extractor, double coreset_fraction,
                             std::uint64_t seed);

struct ScoreStats {
  double mean = 0.0;
  double stddev = 0.0;  // population (divisor n)
  long count = 0;
};
ScoreStats score_statistics(std::span<const double> scores);

/// Sets mu/sigma from the scores of a held-out augmented set.
void calibrate(MemoryBank& bank, const AugmentedSet& holdout, const FeatureExtractor& extractor,
               ScoreAggregation aggregation = ScoreAggregation::max);
/// Convenience: augments `holdout_images` over t_grid with the denoiser, then calibrates.
void calibrate(MemoryBank& bank, const ImageBatch& holdout_images, const Denoiser& params,
               const NoiseSchedule& schedule, std::span<const int> t_grid, StageBounds bounds, std::uint64_t seed);

/// Bank file: "AAMB", version, D, rows, coreset indices, mu, sigma, count,
/// source descriptor, then row-major float32 features.
void save_bank(const std::filesystem::path& path, const MemoryBank& bank);
MemoryBank load_bank(const std::filesystem::path& path);

}  // namespace aam
