#include "aam/shapes.hpp"

#include <json.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "aam/io.hpp"
#include "aam/rng.hpp"

namespace aam {

namespace {

constexpr int kMaxPlacementAttempts = 64;

int vertex_count(ShapeKind k) {
  switch (k) {
    case ShapeKind::triangle:
      return 3;
    case ShapeKind::square:
      return 4;
    case ShapeKind::pentagon:
      return 5;
  }
  return 0;
}

// Pixel mask of a placed shape in image coordinates.
std::vector<std::uint8_t> rasterize(const PlacedShape& s, int size) {
  const int nv = vertex_count(s.kind);
  const double start = s.kind == ShapeKind::square ? -std::numbers::pi / 4 : -std::numbers::pi / 2;
  std::vector<double> vx(nv), vy(nv);
  for (int i = 0; i < nv; ++i) {
    const double a = start + 2.0 * std::numbers::pi * i / nv;
    vx[i] = s.cx + s.radius * std::cos(a);
    vy[i] = s.cy + s.radius * std::sin(a);
  }
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(size) * size, 0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      bool inside = true;
      for (int i = 0; i < nv && inside; ++i) {
        const int j = (i + 1) % nv;
        const double cross = (vx[j] - vx[i]) * (py - vy[i]) - (vy[j] - vy[i]) * (px - vx[i]);
        inside = cross >= 0.0;  // vertices wind clockwise in screen space
      }
      if (inside) mask[static_cast<std::size_t>(y) * size + x] = 1;
    }
  }
  return mask;
}

// Single 4-connected blob of at least min_area pixels inside [begin, end).
bool acceptable(const std::vector<std::uint8_t>& mask, int size, ColumnRange col, int min_area) {
  int area = 0, first = -1;
  for (int i = 0; i < size * size; ++i) {
    if (!mask[i]) continue;
    const int x = i % size;
    if (x < col.begin || x >= col.end) return false;
    ++area;
    if (first < 0) first = i;
  }
  if (area < min_area || first < 0) return false;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::vector<int> stack{first};
  seen[first] = 1;
  int reached = 0;
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    ++reached;
    const int x = i % size, y = i / size;
    const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
    for (auto& p : nb) {
      if (p[0] < 0 || p[0] >= size || p[1] < 0 || p[1] >= size) continue;
      const int j = p[1] * size + p[0];
      if (mask[j] && !seen[j]) {
        seen[j] = 1;
        stack.push_back(j);
      }
    }
  }
  return reached == area;
}

}  // namespace

void ShapesDatasetSpec::validate() const {
  if (count <= 0) throw ConfigError("dataset.count: must be positive");
  if (image_size < 8 || image_size % 4 != 0 || !is_power_of_two(image_size))
    throw ConfigError("dataset.image_size: must be a power of two >= 8 (divisible by 4)");
  if (!(shape_probability >= 0.0 && shape_probability <= 1.0))
    throw ConfigError("dataset.shape_probability: must lie in [0, 1]");
  if (min_area < 1) throw ConfigError("dataset.min_area: must be >= 1");
}

std::string ShapesDatasetSpec::to_json() const {
  nlohmann::json j{{"count", count},
                   {"image_size", image_size},
                   {"shape_probability", shape_probability},
                   {"seed", seed},
                   {"min_area", min_area}};
  return j.dump();
}

ColumnRange column_range(int image_size, int column) {
  return {column * image_size / 3, (column + 1) * image_size / 3};
}

void draw_shape(ImageBatch& image, int n, const PlacedShape& shape) {
  const int size = image.width();
  const auto mask = rasterize(shape, size);
  for (int i = 0; i < size * size; ++i)
    if (mask[i]) image.at(n, 0, i / size, i % size) = 1.0;
}

ImageBatch generate_shapes_dataset(const ShapesDatasetSpec& spec, std::vector<ShapesLayout>* layouts) {
  spec.validate();
  const int size = spec.image_size;
  ImageBatch out(spec.count, 1, size, size, -1.0);
  if (layouts) layouts->assign(spec.count, ShapesLayout{});
  const ShapeKind kinds[3] = {ShapeKind::triangle, ShapeKind::square, ShapeKind::pentagon};
  for (int n = 0; n < spec.count; ++n) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(n)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int c = 0; c < 3; ++c) {
      if (!(u01(rng) < spec.shape_probability)) continue;
      const ColumnRange col = column_range(size, c);
      const double width = col.end - col.begin;
      const double base_radius = 0.32 * width;
      for (int attempt = 0; attempt < kMaxPlacementAttempts; ++attempt) {
        PlacedShape s;
        s.kind = kinds[c];
        s.radius = base_radius * (0.8 + 0.4 * u01(rng));
        s.cx = 0.5 * (col.begin + col.end) + width * 0.1 * (2.0 * u01(rng) - 1.0);
        const double margin = s.radius + 0.5;
        s.cy = margin + (size - 2.0 * margin) * u01(rng);
        const auto mask = rasterize(s, size);
        if (!acceptable(mask, size, col, spec.min_area)) continue;
        for (int i = 0; i < size * size; ++i)
          if (mask[i]) out.at(n, 0, i / size, i % size) = 1.0;
        if (layouts) (*layouts)[n].columns[c] = s;
        break;
      }
    }
  }
  out.seed_tag = spec.seed;
  return out;
}

void save_dataset_cache(const std::filesystem::path& path, const ShapesDatasetSpec& spec, const ImageBatch& images) {
  io::ByteWriter w;
  w.bytes("AAMS");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(images.batch()));
  w.u32(static_cast<std::uint32_t>(images.width()));
  std::string packed(images.size(), '\0');
  auto v = images.values();
  for (std::size_t i = 0; i < v.size(); ++i) packed[i] = static_cast<char>(v[i] > 0.0 ? 255 : 0);
  w.bytes(packed);
  io::write_file_atomic(path, w.buffer());
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  io::write_file_atomic(sidecar, spec.to_json() + "\n");
}

std::optional<ImageBatch> load_dataset_cache(const std::filesystem::path& path, const ShapesDatasetSpec& spec) {
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  if (!std::filesystem::exists(path) || !std::filesystem::exists(sidecar)) return std::nullopt;
  if (nlohmann::json::parse(io::read_file(sidecar)) != nlohmann::json::parse(spec.to_json())) return std::nullopt;
  io::ByteReader r(io::read_file(path), path.string());
  r.expect_magic("AAMS");
  if (r.u32() != 1) throw IoError(path.string() + ": unsupported dataset cache version");
  const int count = static_cast<int>(r.u32()), size = static_cast<int>(r.u32());
  ImageBatch out(count, 1, size, size);
  const std::string packed = r.bytes(out.size());
  r.expect_end();
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<unsigned char>(packed[i]) ? 1.0 : -1.0;
  out.seed_tag = spec.seed;
  return out;
}

}  // namespace aam
