#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "aam/tensor.hpp"

namespace aam {

/// Procedural "Simple Shapes" images: three equal vertical regions holding
/// (left to right) a triangle, a square and a pentagon, each present with
/// probability shape_probability.
struct ShapesDatasetSpec {
  int count = 5000;
  int image_size = 32;
  double shape_probability = 0.5;
  std::uint64_t seed = 0;
  /// Smallest acceptable rasterized shape, in pixels (matches the detector).
  int min_area = 4;

  void validate() const;
  std::string to_json() const;
};

enum class ShapeKind { triangle, square, pentagon };

/// Half-open pixel column range [begin, end) of vertical third `column`.
struct ColumnRange {
  int begin = 0;
  int end = 0;
};
ColumnRange column_range(int image_size, int column);

struct PlacedShape {
  ShapeKind kind;
  double cx, cy, radius;
};

/// Per-image layout, recorded so tests can inspect what was drawn.
struct ShapesLayout {
  std::array<std::optional<PlacedShape>, 3> columns;
};

/// Images in {-1, +1}, shape [count, 1, image_size, image_size].
ImageBatch generate_shapes_dataset(const ShapesDatasetSpec& spec, std::vector<ShapesLayout>* layouts = nullptr);

/// Rasterizes a filled regular polygon into a single-channel image in place
/// (pixels whose centers fall inside are set to +1).
void draw_shape(ImageBatch& image, int n, const PlacedShape& shape);

/// Dataset cache: "AAMS", version, count, size, then packed bytes (0/255);
/// a JSON sidecar "<path>.json" records the spec.
void save_dataset_cache(const std::filesystem::path& path, const ShapesDatasetSpec& spec, const ImageBatch& images);
/// Returns the cached images if the sidecar matches `spec`.
std::optional<ImageBatch> load_dataset_cache(const std::filesystem::path& path, const ShapesDatasetSpec& spec);

}  // namespace aam
