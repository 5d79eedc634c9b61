#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mcd/flow/field.hpp"
#include "mcd/video/clip.hpp"

namespace mcd::video {

enum class MotionClass : int {
  TranslateE = 0,
  TranslateN,
  TranslateW,
  TranslateS,
  RotateCW,
  RotateCCW,
  ZoomIn,
  ZoomOut,
};
inline constexpr int kNumClasses = 8;
const std::array<std::string, kNumClasses>& class_names();

// Per-frame motion applied to the whole frame. magnitude is pixels/frame
// for translations, degrees/frame for rotations and a fractional scale
// change for zooms.
struct Motion {
  MotionClass cls = MotionClass::TranslateE;
  double magnitude = 0.0;

  // Position at time t+k of the scene point shown at `p` at time t, about
  // the frame center (W-1)/2, (H-1)/2. Image y points down, so north is -y
  // and clockwise is as seen on screen.
  std::array<double, 2> advance(double x, double y, int k, std::size_t height,
                                std::size_t width) const;
};

struct DatasetSpec {
  ClipGeometry geometry{16, 64, 64, 3};
  int clips_per_class = 50;
  std::uint64_t texture_seed = 0;
  std::array<double, 2> shift_range{1.0, 2.0};     // pixels/frame
  std::array<double, 2> angle_range{1.0, 2.0};     // degrees/frame
  std::array<double, 2> scale_range{0.01, 0.02};   // fractional scale/frame
  double texture_sigma = 3.0;     // Gaussian low-pass width, canvas pixels
  double texture_contrast = 0.2;  // target standard deviation around 0.5
  std::size_t margin = 32;        // canvas border around the frame

  void validate() const;
  std::size_t num_clips() const { return static_cast<std::size_t>(clips_per_class) * kNumClasses; }
};

struct ClipRecord {
  VideoClip clip;
  Motion motion;
  std::uint64_t seed = 0;
  // Ground truth for every adjacent pair; identical across pairs because
  // each class applies one fixed per-frame transform.
  flow::FlowField ground_truth;
};

struct Dataset {
  DatasetSpec spec;
  std::uint64_t seed = 0;
  std::vector<ClipRecord> records;
};

// Smooth random texture canvas [C, H+2m, W+2m] in [0,1].
std::vector<float> render_texture(const DatasetSpec& spec, std::uint64_t seed);

// Renders one clip: frame t samples the canvas bilinearly at the inverse
// motion applied t times. Throws PreconditionError when the motion moves
// frame content further than the canvas margin.
ClipRecord render_clip(const DatasetSpec& spec, const Motion& motion, std::uint64_t texture_seed,
                       std::string id);

flow::FlowField ground_truth_flow(const Motion& motion, std::size_t height, std::size_t width);

// Clip i has label i mod 8 and draws its texture and magnitude from child
// seeds of (seed, i), so results do not depend on generation order.
Dataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed, unsigned workers = 1);
ClipRecord generate_clip(const DatasetSpec& spec, std::uint64_t seed, std::size_t index);

// Writes <id>.vclip and <id>.gt.flo per clip and manifest.json.
void save_dataset(const Dataset& dataset, const std::filesystem::path& directory);
// Reads manifest.json and the referenced clips and ground-truth flows.
Dataset load_dataset(const std::filesystem::path& directory);

}  // namespace mcd::video
