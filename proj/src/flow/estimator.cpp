#include "mcd/flow/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mcd/error.hpp"
#include "mcd/grad/kernels.hpp"
#include "mcd/grad/ops.hpp"

namespace mcd::flow {

namespace {

using grad::DiffTensor;
namespace kernel = grad::kernel;

template <typename Real>
void luminance(const Real* frame, std::size_t channels, std::size_t n, const FlowConfig& cfg,
               Real* out) {
  if (channels == 1) {
    std::copy_n(frame, n, out);
    return;
  }
  const Real w0 = static_cast<Real>(cfg.luma[0]);
  const Real w1 = static_cast<Real>(cfg.luma[1]);
  const Real w2 = static_cast<Real>(cfg.luma[2]);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = (frame[i] * w0 + frame[n + i] * w1) + frame[2 * n + i] * w2;
}

void check_channels(std::size_t channels) {
  if (channels != 1 && channels != 3) {
    throw PreconditionError("flow: luminance needs C = 1 or 3, got " + std::to_string(channels));
  }
}

template <typename Real>
DiffTensor<Real> luminance(const DiffTensor<Real>& frames, const FlowConfig& cfg) {
  const auto& s = frames.shape();
  const grad::Shape plane{s[0], s[2], s[3]};
  if (s[1] == 1) return grad::reshape(frames, plane);
  DiffTensor<Real> acc;
  for (std::size_t c = 0; c < 3; ++c) {
    auto term = grad::reshape(grad::slice(frames, 1, c, c + 1), plane) *
                static_cast<Real>(cfg.luma[c]);
    acc = c == 0 ? term : acc + term;
  }
  return acc;
}

}  // namespace

void FlowConfig::validate() const {
  if (!(alpha > 0.0)) throw PreconditionError("flow: alpha must be > 0");
  if (iters_gradient < 1 || iters_gradient > iters_inference) {
    throw PreconditionError("flow: need 1 <= iters_gradient <= iters_inference");
  }
}

template <typename Real>
void solve_pairs(std::span<const Real> first, std::span<const Real> second, std::size_t pairs,
                 std::size_t channels, std::size_t height, std::size_t width,
                 const FlowConfig& config, int iters, std::span<Real> out) {
  check_channels(channels);
  if (height < 3 || width < 3) throw PreconditionError("flow: H and W must be >= 3");
  const std::size_t n = height * width;
  if (first.size() != pairs * channels * n || second.size() != first.size() ||
      out.size() != pairs * 2 * n) {
    throw PreconditionError("flow: buffer sizes do not match geometry");
  }
  const long h = static_cast<long>(height);
  const long w = static_cast<long>(width);
  const Real a2 = static_cast<Real>(config.alpha * config.alpha);
  std::vector<Real> l1(n), l2(n), m(n), ix(n), iy(n), it(n), den(n), nu(n), nv(n);
  for (std::size_t p = 0; p < pairs; ++p) {
    luminance(first.data() + p * channels * n, channels, n, config, l1.data());
    luminance(second.data() + p * channels * n, channels, n, config, l2.data());
    for (std::size_t i = 0; i < n; ++i) m[i] = (l1[i] + l2[i]) * Real(0.5);
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        const long i = y * w + x;
        ix[i] = kernel::central_diff(m[y * w + kernel::clamp_index(x + 1, w)],
                                     m[y * w + kernel::clamp_index(x - 1, w)]);
        iy[i] = kernel::central_diff(m[kernel::clamp_index(y + 1, h) * w + x],
                                     m[kernel::clamp_index(y - 1, h) * w + x]);
      }
    for (std::size_t i = 0; i < n; ++i) {
      it[i] = l2[i] - l1[i];
      den[i] = (ix[i] * ix[i] + iy[i] * iy[i]) + a2;
    }
    Real* u = out.data() + p * 2 * n;
    Real* v = u + n;
    for (int k = 0; k < iters; ++k) {
      for (long y = 0; y < h; ++y) {
        const long yu = kernel::clamp_index(y - 1, h) * w;
        const long yd = kernel::clamp_index(y + 1, h) * w;
        const long yc = y * w;
        for (long x = 0; x < w; ++x) {
          const long xl = kernel::clamp_index(x - 1, w);
          const long xr = kernel::clamp_index(x + 1, w);
          const long i = yc + x;
          const Real ub = kernel::avg4(u[yc + xl], u[yc + xr], u[yu + x], u[yd + x]);
          const Real vb = kernel::avg4(v[yc + xl], v[yc + xr], v[yu + x], v[yd + x]);
          const Real t = ((ix[i] * ub + iy[i] * vb) + it[i]) / den[i];
          nu[i] = ub - ix[i] * t;
          nv[i] = vb - iy[i] * t;
        }
      }
      std::copy(nu.begin(), nu.end(), u);
      std::copy(nv.begin(), nv.end(), v);
    }
  }
}

FlowField estimate_pair(const FrameView& first, const FrameView& second, const FlowConfig& config) {
  config.validate();
  if (first.channels != second.channels || first.height != second.height ||
      first.width != second.width) {
    throw PreconditionError("estimate_pair: frame shapes differ");
  }
  if (first.values.size() != first.channels * first.height * first.width ||
      second.values.size() != first.values.size()) {
    throw PreconditionError("estimate_pair: frame buffer does not match its shape");
  }
  std::vector<float> out(2 * first.height * first.width, 0.0f);
  solve_pairs<float>(first.values, second.values, 1, first.channels, first.height, first.width,
                     config, config.iters_inference, out);
  return to_stack<float>(out, 1, first.height, first.width, Direction::Forward, 1).fields[0];
}

std::vector<std::pair<std::size_t, std::size_t>> pair_indices(std::size_t frames, Direction d) {
  if (frames < 2) throw PreconditionError("flow: need T >= 2");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  switch (d) {
    case Direction::Forward:
      for (std::size_t t = 0; t + 1 < frames; ++t) out.emplace_back(t, t + 1);
      break;
    case Direction::Backward:
      for (std::size_t t = 0; t + 1 < frames; ++t) out.emplace_back(t + 1, t);
      break;
    case Direction::LongRange:
      if (frames % 2 != 0) {
        throw PreconditionError("flow: long-range pairing needs even T, got " +
                                std::to_string(frames));
      }
      for (std::size_t i = 0; i < frames / 2; ++i) out.emplace_back(i, i + frames / 2);
      break;
  }
  return out;
}

FlowStack estimate_clip(std::span<const float> planar, const video::ClipGeometry& g,
                        Direction direction, const FlowConfig& config) {
  config.validate();
  if (planar.size() != g.size()) throw PreconditionError("estimate_clip: size mismatch");
  const auto pairs = pair_indices(g.frames, direction);
  const std::size_t fs = g.frame_size();
  std::vector<float> first(pairs.size() * fs), second(pairs.size() * fs);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    std::copy_n(planar.data() + pairs[p].first * fs, fs, first.data() + p * fs);
    std::copy_n(planar.data() + pairs[p].second * fs, fs, second.data() + p * fs);
  }
  std::vector<float> out(pairs.size() * 2 * g.height * g.width, 0.0f);
  solve_pairs<float>(first, second, pairs.size(), g.channels, g.height, g.width, config,
                     config.iters_inference, out);
  const std::size_t stride = direction == Direction::LongRange ? g.frames / 2 : 1;
  return to_stack<float>(out, pairs.size(), g.height, g.width, direction, stride);
}

FlowStack estimate_clip(const video::VideoClip& clip, Direction direction,
                        const FlowConfig& config) {
  const auto planar = video::to_planar<float>(clip);
  return estimate_clip(planar, clip.geometry(), direction, config);
}

template <typename Real>
std::pair<DiffTensor<Real>, DiffTensor<Real>> split_pairs(const DiffTensor<Real>& clip,
                                                          Direction direction) {
  const auto& s = clip.shape();
  if (s.size() != 4) throw PreconditionError("flow: clip tensor must be [T,C,H,W]");
  const std::size_t t = s[0];
  pair_indices(t, direction);  // validates T
  switch (direction) {
    case Direction::Forward:
      return {grad::slice(clip, 0, 0, t - 1), grad::slice(clip, 0, 1, t)};
    case Direction::Backward:
      return {grad::slice(clip, 0, 1, t), grad::slice(clip, 0, 0, t - 1)};
    case Direction::LongRange:
      return {grad::slice(clip, 0, 0, t / 2), grad::slice(clip, 0, t / 2, t)};
  }
  throw PreconditionError("flow: unknown direction");
}

template <typename Real>
DiffTensor<Real> estimate_pairs(const DiffTensor<Real>& first, const DiffTensor<Real>& second,
                                const FlowConfig& config) {
  config.validate();
  const auto& s = first.shape();
  if (s.size() != 4 || second.shape() != s) {
    throw PreconditionError("estimate_pairs: expected matching [P,C,H,W] stacks, got " +
                            grad::shape_string(s) + " and " + grad::shape_string(second.shape()));
  }
  check_channels(s[1]);
  const std::size_t pairs = s[0], height = s[2], width = s[3];
  const std::size_t n = height * width;
  auto& graph = first.graph();

  std::vector<Real> warm(pairs * 2 * n, Real(0));
  solve_pairs<Real>(first.value(), second.value(), pairs, s[1], height, width, config,
                    config.iters_inference - config.iters_gradient, warm);
  std::vector<Real> u0(pairs * n), v0(pairs * n);
  for (std::size_t p = 0; p < pairs; ++p) {
    std::copy_n(warm.data() + p * 2 * n, n, u0.data() + p * n);
    std::copy_n(warm.data() + p * 2 * n + n, n, v0.data() + p * n);
  }
  const grad::Shape plane{pairs, height, width};
  auto u = graph.constant(plane, std::move(u0));
  auto v = graph.constant(plane, std::move(v0));

  auto l1 = luminance(first, config);
  auto l2 = luminance(second, config);
  auto m = (l1 + l2) * Real(0.5);
  auto ix = grad::spatial_derivative(m, 1, grad::Axis::X);
  auto iy = grad::spatial_derivative(m, 1, grad::Axis::Y);
  auto it = l2 - l1;
  auto den = (ix * ix + iy * iy) + static_cast<Real>(config.alpha * config.alpha);
  for (int k = 0; k < config.iters_gradient; ++k) {
    auto ub = grad::neighbor_average(u);
    auto vb = grad::neighbor_average(v);
    auto t = ((ix * ub + iy * vb) + it) / den;
    u = ub - ix * t;
    v = vb - iy * t;
  }
  const grad::Shape field{pairs, 1, height, width};
  const std::vector<DiffTensor<Real>> parts{grad::reshape(u, field), grad::reshape(v, field)};
  return grad::concat<Real>(parts, 1);
}

template <typename Real>
DiffTensor<Real> estimate_clip(const DiffTensor<Real>& clip, Direction direction,
                               const FlowConfig& config) {
  auto [first, second] = split_pairs(clip, direction);
  return estimate_pairs(first, second, config);
}

template <typename Real>
FlowStack to_stack(std::span<const Real> planar, std::size_t pairs, std::size_t height,
                   std::size_t width, Direction direction, std::size_t stride) {
  const std::size_t n = height * width;
  if (planar.size() != pairs * 2 * n) throw PreconditionError("to_stack: size mismatch");
  FlowStack stack;
  stack.direction = direction;
  stack.stride = stride;
  for (std::size_t p = 0; p < pairs; ++p) {
    FlowField f(height, width);
    for (std::size_t i = 0; i < n; ++i) {
      f.uv[2 * i] = static_cast<float>(planar[p * 2 * n + i]);
      f.uv[2 * i + 1] = static_cast<float>(planar[p * 2 * n + n + i]);
    }
    stack.fields.push_back(std::move(f));
  }
  return stack;
}

double endpoint_error(const FlowField& flow, const FlowField& truth, std::size_t margin) {
  if (flow.height != truth.height || flow.width != truth.width) {
    throw PreconditionError("endpoint_error: shapes differ");
  }
  if (2 * margin >= flow.height || 2 * margin >= flow.width) {
    throw PreconditionError("endpoint_error: margin leaves no interior");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = margin; y < flow.height - margin; ++y)
    for (std::size_t x = margin; x < flow.width - margin; ++x) {
      const double du = static_cast<double>(flow.u(y, x)) - truth.u(y, x);
      const double dv = static_cast<double>(flow.v(y, x)) - truth.v(y, x);
      total += std::sqrt(du * du + dv * dv);
      ++count;
    }
  return total / static_cast<double>(count);
}

double endpoint_error(const FlowStack& flow, const FlowStack& truth, std::size_t margin) {
  if (flow.count() != truth.count() || flow.count() == 0) {
    throw PreconditionError("endpoint_error: stack sizes differ or are empty");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < flow.count(); ++i)
    total += endpoint_error(flow.fields[i], truth.fields[i], margin);
  return total / static_cast<double>(flow.count());
}

double endpoint_error(const FlowStack& flow, const FlowField& truth, std::size_t margin) {
  if (flow.count() == 0) throw PreconditionError("endpoint_error: empty stack");
  double total = 0.0;
  for (const auto& f : flow.fields) total += endpoint_error(f, truth, margin);
  return total / static_cast<double>(flow.count());
}

std::vector<float> flow_to_color(const FlowField& flow, std::optional<double> max_magnitude) {
  const std::size_t n = flow.height * flow.width;
  double max_mag = 0.0;
  if (max_magnitude) {
    max_mag = *max_magnitude;
  } else {
    for (std::size_t i = 0; i < n; ++i)
      max_mag = std::max(max_mag, std::hypot(static_cast<double>(flow.uv[2 * i]),
                                             static_cast<double>(flow.uv[2 * i + 1])));
  }
  std::vector<float> rgb(n * 3, 1.0f);
  if (!(max_mag > 0.0)) return rgb;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = flow.uv[2 * i];
    const double v = flow.uv[2 * i + 1];
    const double sat = std::min(std::hypot(u, v) / max_mag, 1.0);
    double hue = std::atan2(v, u) * 180.0 / std::numbers::pi;
    if (hue < 0.0) hue += 360.0;
    // HSV -> RGB with value 1.
    const double channel_offset[3] = {5.0, 3.0, 1.0};
    for (std::size_t c = 0; c < 3; ++c) {
      const double k = std::fmod(channel_offset[c] + hue / 60.0, 6.0);
      const double ramp = std::clamp(std::min(k, 4.0 - k), 0.0, 1.0);
      rgb[i * 3 + c] = static_cast<float>(1.0 - sat * ramp);
    }
  }
  return rgb;
}

#define MCD_INSTANTIATE_FLOW(Real)                                                           \
  template void solve_pairs<Real>(std::span<const Real>, std::span<const Real>, std::size_t, \
                                  std::size_t, std::size_t, std::size_t, const FlowConfig&,  \
                                  int, std::span<Real>);                                     \
  template DiffTensor<Real> estimate_pairs(const DiffTensor<Real>&, const DiffTensor<Real>&, \
                                           const FlowConfig&);                               \
  template DiffTensor<Real> estimate_clip(const DiffTensor<Real>&, Direction,                \
                                          const FlowConfig&);                                \
  template std::pair<DiffTensor<Real>, DiffTensor<Real>> split_pairs(const DiffTensor<Real>&, \
                                                                     Direction);             \
  template FlowStack to_stack<Real>(std::span<const Real>, std::size_t, std::size_t,          \
                                    std::size_t, Direction, std::size_t);

MCD_INSTANTIATE_FLOW(float)
MCD_INSTANTIATE_FLOW(double)

}  // namespace mcd::flow
