#include "aam/eval.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "aam/error.hpp"
#include "aam/io.hpp"
#include "aam/shapes.hpp"
#include "json.hpp"

namespace aam {

HallucinationVerdict detect_shape_hallucination(const ImageBatch& image, const DetectorConfig& config) {
  if (image.batch() != 1 || image.channels() != 1)
    throw InputError("detect_shape_hallucination: expects one single-channel image, got " + image.shape_string());
  if (image.height() != image.width())
    throw InputError("detect_shape_hallucination: image is not square: " + image.shape_string());
  const int side = image.height();
  HallucinationVerdict v;
  v.threshold = config.threshold;
  std::vector<int> label(static_cast<std::size_t>(side) * side, 0);
  std::vector<int> stack;
  for (int c = 0; c < 3; ++c) {
    const ColumnRange cols = column_range(side, c);
    int next = 0;
    for (int y = 0; y < side; ++y)
      for (int x = cols.begin; x < cols.end; ++x) {
        const std::size_t idx = static_cast<std::size_t>(y) * side + x;
        if (label[idx] || !(image.at(0, 0, y, x) > config.threshold)) continue;
        label[idx] = ++next;
        int area = 0;
        stack.assign(1, static_cast<int>(idx));
        while (!stack.empty()) {
          const int p = stack.back();
          stack.pop_back();
          ++area;
          const int py = p / side, px = p % side;
          const int ny[4] = {py - 1, py + 1, py, py};
          const int nx[4] = {px, px, px - 1, px + 1};
          for (int k = 0; k < 4; ++k) {
            if (ny[k] < 0 || ny[k] >= side || nx[k] < cols.begin || nx[k] >= cols.end) continue;
            const std::size_t q = static_cast<std::size_t>(ny[k]) * side + nx[k];
            if (label[q] || !(image.at(0, 0, ny[k], nx[k]) > config.threshold)) continue;
            label[q] = next;
            stack.push_back(static_cast<int>(q));
          }
        }
        if (area >= config.min_area) ++v.column_counts[c];
      }
  }
  for (int n : v.column_counts) v.is_hallucinated = v.is_hallucinated || n >= 2;
  return v;
}

Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd sym = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
  if (es.info() != Eigen::Success) throw NumericalError("sqrt_psd: eigendecomposition failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (!std::isfinite(ev(i))) throw NumericalError("sqrt_psd: non-finite eigenvalue");
    if (ev(i) < 0.0) {
      if (ev(i) < -1e-8 * scale) throw NumericalError("sqrt_psd: matrix is not positive semi-definite");
      ev(i) = 0.0;
    }
  }
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

double frechet_distance(const Eigen::VectorXd& mu1, const Eigen::MatrixXd& sigma1, const Eigen::VectorXd& mu2,
                        const Eigen::MatrixXd& sigma2) {
  if (mu1.size() != mu2.size() || sigma1.rows() != mu1.size() || sigma2.rows() != mu2.size())
    throw InputError("frechet_distance: dimension mismatch");
  if (!sigma1.allFinite() || !sigma2.allFinite()) throw NumericalError("frechet_distance: non-finite covariance");
  const Eigen::MatrixXd a = sqrt_psd(sigma1);
  const Eigen::MatrixXd cross = sqrt_psd(a * sigma2 * a);
  const double d = (mu1 - mu2).squaredNorm() + sigma1.trace() + sigma2.trace() - 2.0 * cross.trace();
  return std::max(0.0, d);
}

double frechet_feature_distance(const Eigen::MatrixXd& real_features, const Eigen::MatrixXd& gen_features) {
  if (real_features.rows() < 2 || gen_features.rows() < 2)
    throw InputError("frechet_feature_distance: need at least 2 rows per set");
  if (real_features.cols() != gen_features.cols()) throw InputError("frechet_feature_distance: dimension mismatch");
  auto moments = [](const Eigen::MatrixXd& f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = f.colwise().mean().transpose();
    const Eigen::MatrixXd centered = f.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / static_cast<double>(f.rows() - 1);
  };
  Eigen::VectorXd mu1, mu2;
  Eigen::MatrixXd s1, s2;
  moments(real_features, mu1, s1);
  moments(gen_features, mu2, s2);
  return frechet_distance(mu1, s1, mu2, s2);
}

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["label"] = label;
  j["config_hash"] = config_hash;
  j["n"] = sample_count;
  j["hallucinated"] = hallucinated;
  j["hal_rate"] = hallucination_rate;
  j["frechet"] = frechet;
  return j.dump();
}

std::string MetricsReport::csv_header() { return "label,config_hash,n,hal_rate,frechet"; }

std::string MetricsReport::csv_row() const {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%s,%ld,%.6f,%.6f", label.c_str(), config_hash.c_str(), sample_count,
                hallucination_rate, frechet);
  return buf;
}

Eigen::MatrixXd pooled_features(const ImageBatch& images, const FeatureExtractor& extractor) {
  Eigen::MatrixXd out(images.batch(), extractor.feature_dim());
  for (int i = 0; i < images.batch(); ++i) {
    const PatchFeatures f = extractor.extract(images.slice(i, 1), 0);
    out.row(i) = f.rows.cast<double>().colwise().mean();
  }
  return out;
}

MetricsReport evaluate_arm(const ImageBatch& images, const ImageBatch& real_reference, const Denoiser& params,
                           const std::string& label, const DetectorConfig& detector, const std::string& config_hash) {
  if (images.batch() == 0 || real_reference.batch() == 0) throw ConfigError("evaluate_arm: empty image set");
  MetricsReport r;
  r.label = label;
  r.config_hash = config_hash;
  r.sample_count = images.batch();
  for (int i = 0; i < images.batch(); ++i)
    if (detect_shape_hallucination(images.slice(i, 1), detector).is_hallucinated) ++r.hallucinated;
  r.hallucination_rate = static_cast<double>(r.hallucinated) / static_cast<double>(r.sample_count);
  const DenoiserFeatureExtractor extractor(params);
  r.frechet = frechet_feature_distance(pooled_features(real_reference, extractor), pooled_features(images, extractor));
  return r;
}

void append_metrics_csv(const std::filesystem::path& path, const MetricsReport& report) {
  if (!std::filesystem::exists(path)) io::append_line(path, MetricsReport::csv_header());
  io::append_line(path, report.csv_row());
}

}  // namespace aam
