#include "aam/io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace aam::io {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

void append_line(const std::filesystem::path& path, std::string_view line) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << line << '\n';
}

namespace {

void put_be32(std::string& s, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_chunk(std::string& png, const char* type, const std::string& data) {
  put_be32(png, static_cast<std::uint32_t>(data.size()));
  std::string body = std::string(type, 4) + data;
  png += body;
  put_be32(png, static_cast<std::uint32_t>(
                    crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace

std::uint8_t to_u8(double v) {
  const double s = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(s);
}

std::string encode_png_gray(std::span<const std::uint8_t> pixels, int width, int height) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) throw ShapeError("png: pixel count mismatch");
  std::string raw;
  raw.reserve(static_cast<std::size_t>(height) * (width + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(pixels.data()) + static_cast<std::size_t>(y) * width, width);
  }
  uLongf cap = compressBound(static_cast<uLong>(raw.size()));
  std::string z(cap, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &cap, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw IoError("png: zlib compression failed");
  z.resize(cap);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(width));
  put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit, grayscale, deflate, no filter, no interlace
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", z);
  put_chunk(png, "IEND", "");
  return png;
}

void write_contact_sheet(const std::filesystem::path& path, const ImageBatch& images, int max_images, int columns) {
  const int count = std::min(images.batch(), max_images);
  if (count <= 0) throw InputError("contact sheet: no images");
  const int cols = std::min(columns, count);
  const int rows = (count + cols - 1) / cols;
  const int h = images.height(), w = images.width();
  const int sheet_w = cols * (w + 1) + 1, sheet_h = rows * (h + 1) + 1;
  std::vector<std::uint8_t> px(static_cast<std::size_t>(sheet_w) * sheet_h, 128);
  for (int i = 0; i < count; ++i) {
    const int ox = 1 + (i % cols) * (w + 1), oy = 1 + (i / cols) * (h + 1);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) px[static_cast<std::size_t>(oy + y) * sheet_w + ox + x] = to_u8(images.at(i, 0, y, x));
  }
  write_file_atomic(path, encode_png_gray(px, sheet_w, sheet_h));
}

void save_images(const std::filesystem::path& path, const ImageBatch& images) {
  ByteWriter w;
  w.bytes("AAMI");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(images.batch()));
  w.u32(static_cast<std::uint32_t>(images.channels()));
  w.u32(static_cast<std::uint32_t>(images.height()));
  w.u32(static_cast<std::uint32_t>(images.width()));
  for (double v : images.values()) w.f32(static_cast<float>(v));
  write_file_atomic(path, w.buffer());
}

ImageBatch load_images(const std::filesystem::path& path) {
  ByteReader r(read_file(path), path.string());
  r.expect_magic("AAMI");
  if (r.u32() != 1) throw IoError(path.string() + ": unsupported image file version");
  const int n = static_cast<int>(r.u32()), c = static_cast<int>(r.u32()), h = static_cast<int>(r.u32()),
            w = static_cast<int>(r.u32());
  ImageBatch out(n, c, h, w);
  for (auto& v : out.values()) v = r.f32();
  r.expect_end();
  return out;
}

}  // namespace aam::io
