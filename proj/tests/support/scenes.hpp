#pragma once

// Synthetic scenes with analytic ground truth.

#include <vector>

#include "mcd/flow/estimator.hpp"
#include "mcd/video/dataset.hpp"

namespace mcd::test {

// Two planar [C,H,W] frames of one texture; the second shows the content
// moved by the integer shift (dx, dy), so the true flow is (dx, dy).
struct ShiftedPair {
  std::vector<float> first, second;
  std::size_t channels = 3, height = 64, width = 64;
  flow::FrameView first_view() const { return {first, channels, height, width}; }
  flow::FrameView second_view() const { return {second, channels, height, width}; }
};

inline ShiftedPair shifted_pair(std::uint64_t seed, int dx, int dy, std::size_t size = 64,
                                const video::DatasetSpec& base = {}) {
  auto spec = base;
  spec.geometry = {2, size, size, 3};
  spec.margin = 8;
  const auto canvas = video::render_texture(spec, seed);
  const std::size_t cw = size + 2 * spec.margin, ch = cw;
  ShiftedPair p;
  p.height = p.width = size;
  p.first.resize(3 * size * size);
  p.second.resize(3 * size * size);
  const long m = static_cast<long>(spec.margin);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const std::size_t o = (c * size + y) * size + x;
        p.first[o] = canvas[(c * ch + y + m) * cw + x + m];
        p.second[o] = canvas[(c * ch + y + m - dy) * cw + x + m - dx];
      }
  return p;
}

// The 20 integer shifts with magnitude <= 2.5 used by the flow benchmark.
inline std::vector<std::pair<int, int>> benchmark_shifts() {
  return {{1, 0},  {-1, 0}, {0, 1},  {0, -1}, {1, 1},   {-1, 1},  {1, -1},
          {-1, -1}, {2, 0},  {-2, 0}, {0, 2},  {0, -2},  {2, 1},   {-2, 1},
          {2, -1}, {-2, -1}, {1, 2},  {-1, 2}, {1, -2},  {-1, -2}};
}

inline double constant_flow_epe(const flow::FlowField& f, double u, double v, std::size_t margin) {
  flow::FlowField truth(f.height, f.width);
  for (std::size_t i = 0; i < f.height * f.width; ++i) {
    truth.uv[2 * i] = static_cast<float>(u);
    truth.uv[2 * i + 1] = static_cast<float>(v);
  }
  return flow::endpoint_error(f, truth, margin);
}

}  // namespace mcd::test
