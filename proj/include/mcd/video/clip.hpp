#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mcd::video {

struct ClipGeometry {
  std::size_t frames = 0;    // T
  std::size_t height = 0;    // H
  std::size_t width = 0;     // W
  std::size_t channels = 0;  // C

  std::size_t frame_size() const { return height * width * channels; }
  std::size_t size() const { return frames * frame_size(); }
  bool operator==(const ClipGeometry&) const = default;
};

std::string to_string(const ClipGeometry& g);

// T x H x W x C values in [0,1], frame-major and channel-last.
class VideoClip {
 public:
  VideoClip() = default;
  // Throws ValueRangeError if a value is outside [0,1] or not finite, and
  // PreconditionError if T < 2 or the value count does not match.
  VideoClip(ClipGeometry geometry, std::vector<float> values, std::string id = {},
            std::optional<int> label = std::nullopt, double frame_rate = 25.0);

  const ClipGeometry& geometry() const { return geometry_; }
  std::span<const float> values() const { return values_; }
  float at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return values_[((t * geometry_.height + y) * geometry_.width + x) * geometry_.channels + c];
  }
  const std::string& id() const { return id_; }
  const std::optional<int>& label() const { return label_; }
  double frame_rate() const { return frame_rate_; }

  void set_id(std::string id) { id_ = std::move(id); }
  void set_label(std::optional<int> label) { label_ = label; }

  bool operator==(const VideoClip&) const = default;

 private:
  ClipGeometry geometry_;
  std::vector<float> values_;
  std::string id_;
  std::optional<int> label_;
  double frame_rate_ = 25.0;
};

// Channel-last [T,H,W,C] <-> planar [T,C,H,W], the layout used by the
// numeric modules.
template <typename Real>
std::vector<Real> to_planar(const VideoClip& clip);
// Copies planar values back into a clip carrying the metadata of `like`.
// Values must already lie in [0,1].
template <typename Real>
VideoClip from_planar(const VideoClip& like, std::span<const Real> planar);

// .vclip: "VCLP", u32 version, T, H, W, C, then T*H*W*C float32, all LE.
inline constexpr std::uint32_t kClipFormatVersion = 1;
void save_clip(const VideoClip& clip, const std::filesystem::path& path);
// Unlabeled, with the file stem as id.
VideoClip load_clip(const std::filesystem::path& path);

// Serializes an arbitrary real-valued array with clip geometry (for signed
// perturbations) using the same container format.
void save_array(const ClipGeometry& geometry, std::span<const float> values,
                const std::filesystem::path& path);
// Reads a save_array file; values must be finite.
std::pair<ClipGeometry, std::vector<float>> load_array(const std::filesystem::path& path);

// Binary PPM (P6, maxval 255); byte = floor(v*255 + 0.5).
std::uint8_t to_byte(float v);
void write_ppm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const float> rgb);
// One frame_<4-digit index>.ppm per frame. Single-channel clips are written
// as gray RGB.
void export_frames(const VideoClip& clip, const std::filesystem::path& directory);

}  // namespace mcd::video
