#include "mcd/flow/io.hpp"

#include <cmath>

#include "mcd/error.hpp"
#include "mcd/util/binary_io.hpp"

namespace mcd::flow {

FlowField::FlowField(std::size_t h, std::size_t w, std::vector<float> data)
    : height(h), width(w), uv(std::move(data)) {
  if (uv.size() != h * w * 2) throw PreconditionError("FlowField: expected H*W*2 values");
}

const char* to_string(Direction d) {
  switch (d) {
    case Direction::Forward: return "forward";
    case Direction::Backward: return "backward";
    case Direction::LongRange: return "long-range";
  }
  return "?";
}

void save_flo(const FlowField& flow, const std::filesystem::path& path) {
  util::ByteWriter w;
  w.f32(kFloMagic);
  w.i32(static_cast<std::int32_t>(flow.width));
  w.i32(static_cast<std::int32_t>(flow.height));
  w.f32s(flow.uv);
  util::write_file_atomic(path, w.data());
}

FlowField load_flo(const std::filesystem::path& path) {
  util::ByteReader r(util::read_file(path));
  if (r.remaining() < 4 || r.f32("magic") != kFloMagic) {
    throw BadMagicError(path.string() + ": not a .flo file");
  }
  const std::int32_t width = r.i32("header");
  const std::int32_t height = r.i32("header");
  if (width <= 0 || height <= 0) {
    throw GeometryError(path.string() + ": invalid .flo size " + std::to_string(width) + "x" +
                        std::to_string(height));
  }
  const auto h = static_cast<std::size_t>(height);
  const auto w = static_cast<std::size_t>(width);
  auto uv = r.f32s(h * w * 2, "payload");
  for (float f : uv) {
    if (!std::isfinite(f)) throw ValueRangeError(path.string() + ": non-finite flow value");
  }
  return FlowField(h, w, std::move(uv));
}

}  // namespace mcd::flow
