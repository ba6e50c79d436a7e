#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aam/error.hpp"
#include "aam/tensor.hpp"

namespace aam::io {

/// Little-endian byte buffer builder.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u32(std::uint32_t v) { put_le(v); }
  void u64(std::uint64_t v) { put_le(v); }
  void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
  void text(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  void f32_array(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  const std::string& buffer() const noexcept { return buf_; }

 private:
  template <typename U>
  void put_le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string data, std::string origin) : data_(std::move(data)), origin_(std::move(origin)) {}

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() { return get_le<std::uint32_t>(); }
  std::uint64_t u64() { return get_le<std::uint64_t>(); }
  double f64() { return std::bit_cast<double>(get_le<std::uint64_t>()); }
  float f32() { return std::bit_cast<float>(get_le<std::uint32_t>()); }
  std::string text() { return bytes(u32()); }
  void f32_array(std::span<float> out) {
    for (auto& v : out) v = f32();
  }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  void expect_magic(std::string_view magic) {
    if (bytes(magic.size()) != magic) throw IoError(origin_ + ": bad magic, expected '" + std::string(magic) + "'");
  }
  void expect_end() const {
    if (remaining() != 0) throw IoError(origin_ + ": " + std::to_string(remaining()) + " trailing bytes");
  }
  const std::string& origin() const noexcept { return origin_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IoError(origin_ + ": truncated file");
  }
  template <typename U>
  U get_le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  std::string data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);

/// Writes to "<path>.tmp" then renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

void append_line(const std::filesystem::path& path, std::string_view line);

/// 8-bit grayscale PNG. Pixel values in [-1, 1] map to [0, 255].
std::string encode_png_gray(std::span<const std::uint8_t> pixels, int width, int height);
std::uint8_t to_u8(double v);

/// Tiles the first `max_images` single-channel images of a batch into a grid
/// with a one-pixel separator.
void write_contact_sheet(const std::filesystem::path& path, const ImageBatch& images, int max_images = 8,
                         int columns = 8);

/// Image batch container: "AAMI", version, N, C, H, W, then float32 values.
void save_images(const std::filesystem::path& path, const ImageBatch& images);
ImageBatch load_images(const std::filesystem::path& path);

}  // namespace aam::io
