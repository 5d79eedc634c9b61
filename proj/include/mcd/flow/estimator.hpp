#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mcd/flow/field.hpp"
#include "mcd/grad/graph.hpp"
#include "mcd/video/clip.hpp"

namespace mcd::flow {

struct FlowConfig {
  double alpha = 0.1;
  int iters_inference = 64;
  int iters_gradient = 2;
  std::array<double, 3> luma{0.299, 0.587, 0.114};

  // Throws PreconditionError unless 1 <= iters_gradient <= iters_inference
  // and alpha > 0.
  void validate() const;
};

// Planar frame [C, H, W].
struct FrameView {
  std::span<const float> values;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
};

// Horn-Schunck from zero flow:
//   (u, v) <- avg4(u, v) - (Ix, Iy) * (Ix*ubar + Iy*vbar + It) / (alpha^2 + Ix^2 + Iy^2)
// with Ix, Iy central differences of the mean luminance and It the
// luminance difference, replicate boundary throughout.
FlowField estimate_pair(const FrameView& first, const FrameView& second, const FlowConfig& config);

// Untraced solver over P stacked pairs. first/second are [P, C, H, W]; out
// is [P, 2, H, W] and holds the starting flow on entry (zero for a cold
// start). Runs exactly `iters` updates.
template <typename Real>
void solve_pairs(std::span<const Real> first, std::span<const Real> second, std::size_t pairs,
                 std::size_t channels, std::size_t height, std::size_t width,
                 const FlowConfig& config, int iters, std::span<Real> out);

// Frame index pairs (first, second) for a pairing over T frames. Long-range
// pairing needs even T.
std::vector<std::pair<std::size_t, std::size_t>> pair_indices(std::size_t frames, Direction d);

// Full-quality estimate (iters_inference updates) of every pair.
FlowStack estimate_clip(const video::VideoClip& clip, Direction direction, const FlowConfig& config);
// Same, for a planar clip [T, C, H, W].
FlowStack estimate_clip(std::span<const float> planar, const video::ClipGeometry& geometry,
                        Direction direction, const FlowConfig& config);

// Differentiable estimate of stacked pairs [P, C, H, W] -> [P, 2, H, W].
// The first iters_inference - iters_gradient updates run off the graph on the
// current values and enter as a constant warm start; the last iters_gradient
// updates are traced. The value therefore equals the full-quality estimate
// bit-for-bit while gradients see only the truncated unroll.
template <typename Real>
grad::DiffTensor<Real> estimate_pairs(const grad::DiffTensor<Real>& first,
                                      const grad::DiffTensor<Real>& second,
                                      const FlowConfig& config);

// Differentiable estimate for a planar clip tensor [T, C, H, W].
template <typename Real>
grad::DiffTensor<Real> estimate_clip(const grad::DiffTensor<Real>& clip, Direction direction,
                                     const FlowConfig& config);

// First and second frames of every pair, each stacked as [P, C, H, W].
template <typename Real>
std::pair<grad::DiffTensor<Real>, grad::DiffTensor<Real>> split_pairs(
    const grad::DiffTensor<Real>& clip, Direction direction);

// [P, 2, H, W] values -> FlowStack.
template <typename Real>
FlowStack to_stack(std::span<const Real> planar, std::size_t pairs, std::size_t height,
                   std::size_t width, Direction direction, std::size_t stride);

// Mean Euclidean distance over pixels at least `margin` away from every
// border. Throws PreconditionError if the shapes differ or 2*margin >= H or W.
double endpoint_error(const FlowField& flow, const FlowField& truth, std::size_t margin = 0);
// Mean over fields of endpoint_error.
double endpoint_error(const FlowStack& flow, const FlowStack& truth, std::size_t margin = 0);
// Against one field shared by every pair.
double endpoint_error(const FlowStack& flow, const FlowField& truth, std::size_t margin = 0);

// Color wheel: hue = atan2(v, u), saturation = |f| / max_magnitude (clamped
// to 1), value 1, so zero flow is white. max_magnitude defaults to the
// largest magnitude in the field. Output H x W x 3 in [0,1].
std::vector<float> flow_to_color(const FlowField& flow,
                                 std::optional<double> max_magnitude = std::nullopt);

}  // namespace mcd::flow
