#include "mcd/util/binary_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mcd/error.hpp"

namespace mcd::util {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

void ByteWriter::bytes(std::string_view raw) { buf_.append(raw); }

void ByteWriter::u32(std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf_.append(b, 4);
}

void ByteWriter::i32(std::int32_t v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::u64(std::uint64_t v) {
  u32(static_cast<std::uint32_t>(v));
  u32(static_cast<std::uint32_t>(v >> 32));
}

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::f32s(std::span<const float> values) {
  buf_.append(reinterpret_cast<const char*>(values.data()), values.size_bytes());
}

void ByteReader::need(std::size_t n, std::string_view what) const {
  if (remaining() < n) {
    throw TruncatedError("truncated " + std::string(what) + ": need " + std::to_string(n) +
                         " bytes, " + std::to_string(remaining()) + " left");
  }
}

std::string ByteReader::bytes(std::size_t n, std::string_view what) {
  need(n, what);
  std::string out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t ByteReader::u32(std::string_view what) {
  need(4, what);
  std::uint32_t v;
  std::memcpy(&v, data_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::int32_t ByteReader::i32(std::string_view what) {
  return std::bit_cast<std::int32_t>(u32(what));
}

std::uint64_t ByteReader::u64(std::string_view what) {
  need(8, what);
  const std::uint64_t lo = u32(what);
  const std::uint64_t hi = u32(what);
  return lo | (hi << 32);
}

double ByteReader::f64(std::string_view what) { return std::bit_cast<double>(u64(what)); }

float ByteReader::f32(std::string_view what) { return std::bit_cast<float>(u32(what)); }

std::vector<float> ByteReader::f32s(std::size_t n, std::string_view what) {
  if (n > remaining() / 4) need(n * 4, what);
  std::vector<float> out(n);
  std::memcpy(out.data(), data_.data() + pos_, n * 4);
  pos_ += n * 4;
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::string_view data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

}  // namespace mcd::util
