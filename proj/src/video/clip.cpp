#include "mcd/video/clip.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <fstream>

#include "mcd/error.hpp"
#include "mcd/util/binary_io.hpp"

namespace mcd::video {

namespace {

constexpr std::string_view kClipMagic = "VCLP";

void check_range(std::span<const float> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float v = values[i];
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw ValueRangeError("clip value " + std::to_string(v) + " at index " + std::to_string(i) +
                            " outside [0,1]");
    }
  }
}

std::string encode(const ClipGeometry& g, std::span<const float> values) {
  util::ByteWriter w;
  w.bytes(kClipMagic);
  w.u32(kClipFormatVersion);
  w.u32(static_cast<std::uint32_t>(g.frames));
  w.u32(static_cast<std::uint32_t>(g.height));
  w.u32(static_cast<std::uint32_t>(g.width));
  w.u32(static_cast<std::uint32_t>(g.channels));
  w.f32s(values);
  return w.data();
}

}  // namespace

std::string to_string(const ClipGeometry& g) {
  return std::to_string(g.frames) + "x" + std::to_string(g.height) + "x" +
         std::to_string(g.width) + "x" + std::to_string(g.channels);
}

VideoClip::VideoClip(ClipGeometry geometry, std::vector<float> values, std::string id,
                     std::optional<int> label, double frame_rate)
    : geometry_(geometry),
      values_(std::move(values)),
      id_(std::move(id)),
      label_(label),
      frame_rate_(frame_rate) {
  if (geometry_.frames < 2) throw PreconditionError("clip needs T >= 2");
  if (geometry_.height == 0 || geometry_.width == 0 || geometry_.channels == 0) {
    throw PreconditionError("clip geometry " + to_string(geometry_) + " is empty");
  }
  if (values_.size() != geometry_.size()) {
    throw PreconditionError("clip " + to_string(geometry_) + " expects " +
                            std::to_string(geometry_.size()) + " values, got " +
                            std::to_string(values_.size()));
  }
  check_range(values_);
}

template <typename Real>
std::vector<Real> to_planar(const VideoClip& clip) {
  const auto& g = clip.geometry();
  const std::size_t hw = g.height * g.width;
  std::vector<Real> out(g.size());
  auto v = clip.values();
  for (std::size_t t = 0; t < g.frames; ++t)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < g.channels; ++c)
        out[(t * g.channels + c) * hw + p] = static_cast<Real>(v[(t * hw + p) * g.channels + c]);
  return out;
}

template <typename Real>
VideoClip from_planar(const VideoClip& like, std::span<const Real> planar) {
  const auto& g = like.geometry();
  if (planar.size() != g.size()) throw PreconditionError("from_planar: size mismatch");
  const std::size_t hw = g.height * g.width;
  std::vector<float> values(g.size());
  for (std::size_t t = 0; t < g.frames; ++t)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < g.channels; ++c)
        values[(t * hw + p) * g.channels + c] =
            static_cast<float>(planar[(t * g.channels + c) * hw + p]);
  return VideoClip(g, std::move(values), like.id(), like.label(), like.frame_rate());
}

template std::vector<float> to_planar<float>(const VideoClip&);
template std::vector<double> to_planar<double>(const VideoClip&);
template VideoClip from_planar<float>(const VideoClip&, std::span<const float>);
template VideoClip from_planar<double>(const VideoClip&, std::span<const double>);

void save_clip(const VideoClip& clip, const std::filesystem::path& path) {
  util::write_file_atomic(path, encode(clip.geometry(), clip.values()));
}

void save_array(const ClipGeometry& geometry, std::span<const float> values,
                const std::filesystem::path& path) {
  if (values.size() != geometry.size()) throw PreconditionError("save_array: size mismatch");
  util::write_file_atomic(path, encode(geometry, values));
}

namespace {

struct Decoded {
  ClipGeometry geometry;
  std::vector<float> values;
};

Decoded decode(const std::filesystem::path& path) {
  util::ByteReader r(util::read_file(path));
  if (r.remaining() < kClipMagic.size() || r.bytes(kClipMagic.size(), "magic") != kClipMagic) {
    throw BadMagicError(path.string() + ": not a .vclip file");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kClipFormatVersion) {
    throw VersionError(path.string() + ": unsupported .vclip version " + std::to_string(version));
  }
  ClipGeometry g;
  g.frames = r.u32("header");
  g.height = r.u32("header");
  g.width = r.u32("header");
  g.channels = r.u32("header");
  if (g.frames < 2 || g.height == 0 || g.width == 0 || g.channels == 0) {
    throw GeometryError(path.string() + ": invalid geometry " + to_string(g));
  }
  return {g, r.f32s(g.size(), "payload")};
}

}  // namespace

VideoClip load_clip(const std::filesystem::path& path) {
  auto d = decode(path);
  check_range(d.values);
  return VideoClip(d.geometry, std::move(d.values), path.stem().string());
}

std::pair<ClipGeometry, std::vector<float>> load_array(const std::filesystem::path& path) {
  auto d = decode(path);
  for (float v : d.values) {
    if (!std::isfinite(v)) throw ValueRangeError(path.string() + ": non-finite value");
  }
  return {d.geometry, std::move(d.values)};
}

std::uint8_t to_byte(float v) {
  const double scaled = std::floor(static_cast<double>(v) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const float> rgb) {
  if (rgb.size() != height * width * 3) throw PreconditionError("write_ppm: size mismatch");
  std::string data = fmt::format("P6\n{} {}\n255\n", width, height);
  data.reserve(data.size() + rgb.size());
  for (float v : rgb) data.push_back(static_cast<char>(to_byte(v)));
  util::write_file_atomic(path, data);
}

void export_frames(const VideoClip& clip, const std::filesystem::path& directory) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());
  const auto& g = clip.geometry();
  const std::size_t hw = g.height * g.width;
  std::vector<float> rgb(hw * 3);
  for (std::size_t t = 0; t < g.frames; ++t) {
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < 3; ++c)
        rgb[p * 3 + c] = clip.values()[(t * hw + p) * g.channels + std::min(c, g.channels - 1)];
    write_ppm(directory / fmt::format("frame_{:04d}.ppm", t), g.height, g.width, rgb);
  }
}

}  // namespace mcd::video
