#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace mcd::flow {

// H x W x 2 displacements in pixels, interleaved (u, v) = (dx, dy). A flow
// at pixel p of the first frame points to p + f in the second frame.
struct FlowField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> uv;

  FlowField() = default;
  FlowField(std::size_t h, std::size_t w) : height(h), width(w), uv(h * w * 2, 0.0f) {}
  FlowField(std::size_t h, std::size_t w, std::vector<float> data);

  float u(std::size_t y, std::size_t x) const { return uv[(y * width + x) * 2]; }
  float v(std::size_t y, std::size_t x) const { return uv[(y * width + x) * 2 + 1]; }
  bool operator==(const FlowField&) const = default;
};

enum class Direction { Forward, Backward, LongRange };
const char* to_string(Direction d);

// Flow fields of one clip under one pairing: forward pairs (t, t+1),
// backward pairs (t+1, t), long-range pairs (i, i + T/2).
struct FlowStack {
  Direction direction = Direction::Forward;
  std::size_t stride = 1;  // temporal distance between paired frames
  std::vector<FlowField> fields;

  std::size_t count() const { return fields.size(); }
  bool operator==(const FlowStack&) const = default;
};

}  // namespace mcd::flow
