#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mcd::util {

// Little-endian encoder into a byte buffer.
class ByteWriter {
 public:
  void bytes(std::string_view raw);
  void u32(std::uint32_t v);
  void i32(std::int32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f32(float v);
  void f32s(std::span<const float> values);
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

// Little-endian decoder over a byte buffer. Reading past the end throws
// TruncatedError naming `what`.
class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}
  std::string bytes(std::size_t n, std::string_view what);
  std::uint32_t u32(std::string_view what);
  std::int32_t i32(std::string_view what);
  std::uint64_t u64(std::string_view what);
  double f64(std::string_view what);
  float f32(std::string_view what);
  std::vector<float> f32s(std::size_t n, std::string_view what);
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, std::string_view what) const;
  std::string data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view data);

}  // namespace mcd::util
