#include "aam/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "aam/error.hpp"
#include "aam/io.hpp"
#include "aam/rng.hpp"

namespace aam {

namespace {

// 3x3 mean over the in-bounds neighbourhood of each cell.
std::vector<float> smooth3(const float* plane, int side) {
  std::vector<float> out(static_cast<std::size_t>(side) * side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      float sum = 0.0f;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= side || xx < 0 || xx >= side) continue;
          sum += plane[yy * side + xx];
          ++n;
        }
      out[y * side + x] = sum / static_cast<float>(n);
    }
  return out;
}

double exact_sq(const float* a, const float* b, int d) {
  double s = 0.0;
  for (int k = 0; k < d; ++k) {
    const double diff = static_cast<double>(a[k]) - static_cast<double>(b[k]);
    s += diff * diff;
  }
  return s;
}

int selection_size(std::size_t n, double fraction) {
  const double raw = fraction * static_cast<double>(n);
  int k = static_cast<int>(std::ceil(raw - 1e-9));
  return std::clamp(k, 1, static_cast<int>(n));
}

}  // namespace

PatchFeatures DenoiserFeatureExtractor::extract(const ImageBatch& image, int t) const {
  return extract_patch_features(image, params_, t);
}

int DenoiserFeatureExtractor::feature_dim() const {
  auto ch = params_.tap_channels();
  return std::accumulate(ch.begin(), ch.end(), 0);
}

std::string DenoiserFeatureExtractor::descriptor() const {
  std::string taps;
  for (int t : params_.arch().feature_taps) taps += (taps.empty() ? "" : ",") + std::to_string(t);
  return "denoiser-encoder taps=" + taps + " pool=3x3 dim=" + std::to_string(feature_dim());
}

PatchFeatures extract_patch_features(const ImageBatch& image, const Denoiser& params, int t) {
  if (image.batch() != 1) throw InputError("extract_patch_features: expects a single image, got " + image.shape_string());
  const auto& taps_idx = params.arch().feature_taps;
  const int last = *std::max_element(taps_idx.begin(), taps_idx.end());
  std::vector<Tensor> taps;
  const int ts[1] = {t};
  params.forward(cast<float>(image), ts, AttentionTemperature{}, nullptr, &taps, last);

  int grid = std::numeric_limits<int>::max();
  int dim = 0;
  for (const auto& m : taps) {
    grid = std::min(grid, m.height());
    dim += m.channels();
  }
  for (const auto& m : taps)
    if (!all_finite(m)) throw NumericalError("extract_patch_features: non-finite activations at t=" + std::to_string(t));
  PatchFeatures out;
  out.grid = grid;
  out.rows = FeatureMatrix::Zero(grid * grid, dim);
  int col = 0;
  for (const auto& m : taps) {
    const int side = m.height();
    const int f = side / grid;
    const float inv = 1.0f / static_cast<float>(f * f);
    for (int c = 0; c < m.channels(); ++c, ++col) {
      const std::vector<float> s = smooth3(m.channel_ptr(0, c), side);
      for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
          float sum = 0.0f;
          for (int y = 0; y < f; ++y)
            for (int x = 0; x < f; ++x) sum += s[(gy * f + y) * side + gx * f + x];
          out.rows(gy * grid + gx, col) = sum * inv;
        }
    }
  }
  return out;
}

std::vector<int> coreset_subsample_from(const FeatureMatrix& features, double fraction, int start) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (n == 0) throw ConfigError("coreset: no feature rows");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("bank.coreset_fraction: must lie in (0, 1]");
  if (start < 0 || static_cast<std::size_t>(start) >= n) throw InputError("coreset: start row out of range");
  const int k = selection_size(n, fraction);
  std::vector<int> selected;
  selected.reserve(k);
  if (static_cast<std::size_t>(k) == n && fraction >= 1.0) {
    selected.resize(n);
    std::iota(selected.begin(), selected.end(), 0);
    std::swap(selected[0], selected[start]);
    return selected;
  }
  Eigen::VectorXf best = Eigen::VectorXf::Constant(features.rows(), std::numeric_limits<float>::infinity());
  int next = start;
  for (int i = 0; i < k; ++i) {
    selected.push_back(next);
    const Eigen::VectorXf d = (features.rowwise() - features.row(next)).rowwise().squaredNorm();
    best = best.cwiseMin(d);
    Eigen::Index arg = 0;
    if (best.maxCoeff(&arg) <= 0.0f) break;  // only duplicates of selected rows remain
    next = static_cast<int>(arg);
  }
  return selected;
}

std::vector<int> coreset_subsample(const FeatureMatrix& features, double fraction, std::uint64_t seed) {
  if (features.rows() == 0) throw ConfigError("coreset: no feature rows");
  Rng rng(derive_seed(seed, 0x636f7265ULL));
  std::uniform_int_distribution<int> pick(0, static_cast<int>(features.rows()) - 1);
  return coreset_subsample_from(features, fraction, pick(rng));
}

double coverage_radius(const FeatureMatrix& features, std::span<const int> selected) {
  if (selected.empty()) throw InputError("coverage_radius: empty selection");
  FeatureMatrix centers(static_cast<Eigen::Index>(selected.size()), features.cols());
  for (std::size_t i = 0; i < selected.size(); ++i) centers.row(static_cast<Eigen::Index>(i)) = features.row(selected[i]);
  const auto d = nearest_distances(centers, features);
  return *std::max_element(d.begin(), d.end());
}

std::vector<double> nearest_distances(const FeatureMatrix& bank, const FeatureMatrix& queries) {
  if (bank.rows() == 0) throw ConfigError("nearest_distances: bank is empty");
  if (bank.cols() != queries.cols())
    throw ConfigError("feature dimension mismatch: bank " + std::to_string(bank.cols()) + ", query " +
                      std::to_string(queries.cols()));
  const int d = static_cast<int>(bank.cols());
  const Eigen::VectorXf bn = bank.rowwise().squaredNorm();
  const float bmax = bn.maxCoeff();
  std::vector<double> out(static_cast<std::size_t>(queries.rows()));
  constexpr Eigen::Index kBlock = 256;
  for (Eigen::Index q0 = 0; q0 < queries.rows(); q0 += kBlock) {
    const Eigen::Index qn = std::min(kBlock, queries.rows() - q0);
    const auto qb = queries.middleRows(q0, qn);
    // Approximate squared distances; exact values are recomputed in double
    // for every row that could be the nearest.
    Eigen::MatrixXf approx = -2.0f * (qb * bank.transpose());
    approx.colwise() += qb.rowwise().squaredNorm();
    approx.rowwise() += bn.transpose();
    for (Eigen::Index i = 0; i < qn; ++i) {
      const float qnorm = qb.row(i).squaredNorm();
      const float lo = approx.row(i).minCoeff();
      const float slack = 1e-4f * (qnorm + bmax) + 1e-30f;
      double best = std::numeric_limits<double>::infinity();
      const float* qrow = queries.row(q0 + i).data();
      for (Eigen::Index j = 0; j < bank.rows(); ++j)
        if (approx(i, j) <= lo + slack) best = std::min(best, exact_sq(qrow, bank.row(j).data(), d));
      out[static_cast<std::size_t>(q0 + i)] = std::sqrt(best);
    }
  }
  return out;
}

ImageBatch upsample_bilinear(std::span<const double> grid, int side, int out_side) {
  if (static_cast<std::size_t>(side) * side != grid.size()) throw ShapeError("upsample_bilinear: grid size mismatch");
  ImageBatch out(1, 1, out_side, out_side);
  const double scale = static_cast<double>(side) / out_side;
  auto coord = [&](int o, int& i0, int& i1, double& w) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(side - 1));
    i0 = static_cast<int>(std::floor(src));
    i1 = std::min(i0 + 1, side - 1);
    w = src - i0;
  };
  for (int y = 0; y < out_side; ++y) {
    int y0, y1;
    double wy;
    coord(y, y0, y1, wy);
    for (int x = 0; x < out_side; ++x) {
      int x0, x1;
      double wx;
      coord(x, x0, x1, wx);
      const double top = (1 - wx) * grid[y0 * side + x0] + wx * grid[y0 * side + x1];
      const double bot = (1 - wx) * grid[y1 * side + x0] + wx * grid[y1 * side + x1];
      out.at(0, 0, y, x) = (1 - wy) * top + wy * bot;
    }
  }
  return out;
}

AnomalyResult score_features(const MemoryBank& bank, const PatchFeatures& features, int image_size,
                             ScoreAggregation aggregation) {
  AnomalyResult r;
  r.grid = features.grid;
  r.cell_distances = nearest_distances(bank.features, features.rows);
  if (aggregation == ScoreAggregation::max)
    r.score = *std::max_element(r.cell_distances.begin(), r.cell_distances.end());
  else
    r.score = std::accumulate(r.cell_distances.begin(), r.cell_distances.end(), 0.0) /
              static_cast<double>(r.cell_distances.size());
  r.heatmap = upsample_bilinear(r.cell_distances, features.grid, image_size);
  return r;
}

AnomalyResult score(const MemoryBank& bank, const ImageBatch& image, const FeatureExtractor& extractor, int t,
                    ScoreAggregation aggregation) {
  if (bank.features.rows() == 0) throw ConfigError("score: memory bank is empty");
  if (bank.dim() != extractor.feature_dim())
    throw ConfigError("score: bank dimension " + std::to_string(bank.dim()) + " does not match extractor dimension " +
                      std::to_string(extractor.feature_dim()));
  return score_features(bank, extractor.extract(image, t), image.height(), aggregation);
}

AnomalyResult score(const MemoryBank& bank, const ImageBatch& image, const Denoiser& params, int t) {
  return score(bank, image, DenoiserFeatureExtractor(params), t);
}

MemoryBank build_memory_bank(const AugmentedSet& set, const FeatureExtractor& extractor, double coreset_fraction,
                             std::uint64_t seed) {
  const int n = set.images.batch();
  if (n == 0) throw ConfigError("build_memory_bank: augmented set is empty");
  if (set.timesteps.size() != static_cast<std::size_t>(n))
    throw InputError("build_memory_bank: timesteps do not match images");
  std::vector<PatchFeatures> parts;
  parts.reserve(n);
  Eigen::Index rows = 0;
  for (int i = 0; i < n; ++i) {
    parts.push_back(extractor.extract(set.images.slice(i, 1), set.timesteps[i]));
    rows += parts.back().rows.rows();
  }
  FeatureMatrix all(rows, extractor.feature_dim());
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    all.middleRows(at, p.rows.rows()) = p.rows;
    at += p.rows.rows();
  }
  MemoryBank bank;
  bank.coreset_indices = coreset_subsample(all, coreset_fraction, seed);
  bank.features.resize(static_cast<Eigen::Index>(bank.coreset_indices.size()), all.cols());
  for (std::size_t i = 0; i < bank.coreset_indices.size(); ++i)
    bank.features.row(static_cast<Eigen::Index>(i)) = all.row(bank.coreset_indices[i]);
  bank.source = extractor.descriptor();
  return bank;
}

ScoreStats score_statistics(std::span<const double> scores) {
  ScoreStats s;
  s.count = static_cast<long>(scores.size());
  if (scores.empty()) return s;
  s.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  double ss = 0.0;
  for (double v : scores) ss += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(ss / static_cast<double>(scores.size()));
  return s;
}

void calibrate(MemoryBank& bank, const AugmentedSet& holdout, const FeatureExtractor& extractor,
               ScoreAggregation aggregation) {
  const int n = holdout.images.batch();
  if (n == 0) throw ConfigError("calibrate: holdout set is empty");
  std::vector<double> scores;
  scores.reserve(n);
  for (int i = 0; i < n; ++i)
    scores.push_back(score(bank, holdout.images.slice(i, 1), extractor, holdout.timesteps[i], aggregation).score);
  const ScoreStats s = score_statistics(scores);
  bank.mu = s.mean;
  bank.sigma = s.stddev;
  bank.calibration_count = s.count;
}

void calibrate(MemoryBank& bank, const ImageBatch& holdout_images, const Denoiser& params,
               const NoiseSchedule& schedule, std::span<const int> t_grid, StageBounds bounds, std::uint64_t seed) {
  if (holdout_images.batch() == 0) throw ConfigError("calibrate: holdout set is empty");
  if (t_grid.empty()) throw ConfigError("calibrate: t_grid is empty");
  AugmentedSet aug =
      make_noise_augmented_set(holdout_images, schedule, predictor_for(params), t_grid, 1, seed, bounds);
  const int n = holdout_images.batch();
  AugmentedSet noisy;
  noisy.images = aug.images.slice(n, aug.images.batch() - n);
  noisy.timesteps.assign(aug.timesteps.begin() + n, aug.timesteps.end());
  calibrate(bank, noisy, DenoiserFeatureExtractor(params));
}

void save_bank(const std::filesystem::path& path, const MemoryBank& bank) {
  io::ByteWriter w;
  w.bytes("AAMB");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(bank.features.cols()));
  w.u32(static_cast<std::uint32_t>(bank.features.rows()));
  w.u32(static_cast<std::uint32_t>(bank.coreset_indices.size()));
  for (int i : bank.coreset_indices) w.u32(static_cast<std::uint32_t>(i));
  w.f64(bank.mu);
  w.f64(bank.sigma);
  w.u64(static_cast<std::uint64_t>(bank.calibration_count));
  w.text(bank.source);
  w.f32_array(std::span<const float>(bank.features.data(), static_cast<std::size_t>(bank.features.size())));
  io::write_file_atomic(path, w.buffer());
}

MemoryBank load_bank(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path), path.string());
  r.expect_magic("AAMB");
  const std::uint32_t version = r.u32();
  if (version != 1) throw IoError(path.string() + ": unsupported bank version " + std::to_string(version));
  MemoryBank bank;
  const std::uint32_t dim = r.u32();
  const std::uint32_t rows = r.u32();
  const std::uint32_t nidx = r.u32();
  if (nidx > r.remaining() / 4) throw IoError(path.string() + ": truncated file");
  bank.coreset_indices.resize(nidx);
  for (auto& i : bank.coreset_indices) i = static_cast<int>(r.u32());
  bank.mu = r.f64();
  bank.sigma = r.f64();
  bank.calibration_count = static_cast<long>(r.u64());
  bank.source = r.text();
  if (static_cast<std::uint64_t>(rows) * dim * 4 != r.remaining())
    throw IoError(path.string() + ": feature block size does not match header");
  bank.features.resize(rows, dim);
  r.f32_array(std::span<float>(bank.features.data(), static_cast<std::size_t>(bank.features.size())));
  r.expect_end();
  return bank;
}

}  // namespace aam
