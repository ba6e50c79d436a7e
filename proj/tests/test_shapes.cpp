#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "aam/eval.hpp"
#include "aam/io.hpp"
#include "aam/shapes.hpp"

using namespace aam;
namespace fs = std::filesystem;

namespace {

ShapesDatasetSpec spec_of(int count, std::uint64_t seed, int size = 32) {
  ShapesDatasetSpec s;
  s.count = count;
  s.seed = seed;
  s.image_size = size;
  return s;
}

}  // namespace

TEST(Shapes, SameSeedSameDataset) {
  EXPECT_EQ(generate_shapes_dataset(spec_of(50, 7)), generate_shapes_dataset(spec_of(50, 7)));
  EXPECT_FALSE(generate_shapes_dataset(spec_of(50, 7)) == generate_shapes_dataset(spec_of(50, 8)));
}

TEST(Shapes, DefaultScale) {
  const ShapesDatasetSpec s;
  EXPECT_EQ(s.count, 5000);
  EXPECT_EQ(s.image_size, 32);
  EXPECT_EQ(s.shape_probability, 0.5);
}

TEST(Shapes, ImagesAreBinary) {
  const ImageBatch d = generate_shapes_dataset(spec_of(100, 1));
  for (double v : d.values()) ASSERT_TRUE(v == -1.0 || v == 1.0);
}

TEST(Shapes, ShapesStayInsideTheirColumn) {
  std::vector<ShapesLayout> layouts;
  const ImageBatch d = generate_shapes_dataset(spec_of(300, 2), &layouts);
  for (int n = 0; n < d.batch(); ++n)
    for (int c = 0; c < 3; ++c) {
      const ColumnRange col = column_range(32, c);
      bool any = false;
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
          if (d.at(n, 0, y, x) <= 0.0) continue;
          if (x >= col.begin && x < col.end) any = true;
        }
      EXPECT_EQ(any, layouts[n].columns[c].has_value()) << "image " << n << " column " << c;
      if (layouts[n].columns[c]) EXPECT_EQ(static_cast<int>(layouts[n].columns[c]->kind), c);
    }
}

TEST(Shapes, ColumnOccupancyNearHalf) {
  std::vector<ShapesLayout> layouts;
  generate_shapes_dataset(spec_of(2000, 3), &layouts);
  for (int c = 0; c < 3; ++c) {
    int hits = 0;
    for (const auto& l : layouts) hits += l.columns[c].has_value();
    EXPECT_NEAR(hits / 2000.0, 0.5, 0.05) << "column " << c;
  }
}

TEST(Shapes, DetectorSeesNoHallucinationsInGeneratedData) {
  for (std::uint64_t seed : {11u, 12u}) {
    const ImageBatch d = generate_shapes_dataset(spec_of(1000, seed));
    for (int n = 0; n < d.batch(); ++n) ASSERT_FALSE(detect_shape_hallucination(d.slice(n, 1)).is_hallucinated);
  }
}

TEST(Shapes, SmallImagesStayConsistentWithDetector) {
  ShapesDatasetSpec s = spec_of(500, 4, 8);
  s.min_area = 1;
  const ImageBatch d = generate_shapes_dataset(s);
  DetectorConfig det;
  det.min_area = 1;
  for (int n = 0; n < d.batch(); ++n) ASSERT_FALSE(detect_shape_hallucination(d.slice(n, 1), det).is_hallucinated);
}

TEST(Shapes, InvalidSpecsAreConfigErrors) {
  EXPECT_THROW(generate_shapes_dataset(spec_of(0, 1)), ConfigError);
  EXPECT_THROW(generate_shapes_dataset(spec_of(5, 1, 12)), ConfigError);
  ShapesDatasetSpec s = spec_of(5, 1);
  s.shape_probability = 1.5;
  EXPECT_THROW(generate_shapes_dataset(s), ConfigError);
}

TEST(Shapes, DrawShapeFillsPolygonInterior) {
  ImageBatch img(1, 1, 32, 32, -1.0);
  draw_shape(img, 0, PlacedShape{ShapeKind::square, 16.0, 16.0, 5.0});
  EXPECT_EQ(img.at(0, 0, 16, 16), 1.0);
  EXPECT_EQ(img.at(0, 0, 0, 0), -1.0);
  // Axis-aligned square of circumradius 5: half side 5/sqrt(2), sampled at pixel centers.
  const double half = 5.0 / std::sqrt(2.0);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      const bool inside = std::abs(x + 0.5 - 16.0) < half && std::abs(y + 0.5 - 16.0) < half;
      EXPECT_EQ(img.at(0, 0, y, x) > 0, inside) << y << "," << x;
    }
}

TEST(DatasetCache, RoundTripAndSpecCheck) {
  const ShapesDatasetSpec s = spec_of(40, 9);
  const ImageBatch d = generate_shapes_dataset(s);
  const fs::path path = fs::temp_directory_path() / "aam_test_dataset.aams";
  save_dataset_cache(path, s, d);
  auto back = load_dataset_cache(path, s);
  ASSERT_TRUE(back.has_value());
  EXPECT_EQ(*back, d);
  EXPECT_FALSE(load_dataset_cache(path, spec_of(40, 10)).has_value());
  fs::remove(path);
  fs::remove(path.string() + ".json");
  EXPECT_FALSE(load_dataset_cache(path, s).has_value());
}
