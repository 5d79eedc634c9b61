#pragma once

// Independent oracles shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mcd/grad/graph.hpp"
#include "mcd/util/rng.hpp"

namespace mcd::test {

using LossBuilder =
    std::function<grad::DiffTensor<double>(grad::Graph64&, const grad::DiffTensor<double>&)>;

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t nonzero = 0;  // entries whose adjoint magnitude exceeds the floor
};

// Relative error with an absolute floor so that entries whose true
// derivative is numerically zero do not divide by zero.
inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double evaluate(const grad::Shape& shape, const std::vector<double>& x,
                       const LossBuilder& build) {
  grad::Graph64 g;
  auto leaf = g.leaf(shape, x);
  return build(g, leaf).item();
}

// Compares reverse-mode adjoints with central differences at `indices`.
inline GradientCheck check_gradient(const grad::Shape& shape, const std::vector<double>& x,
                                    const LossBuilder& build,
                                    const std::vector<std::size_t>& indices, double h = 1e-5,
                                    double floor = 1e-8) {
  grad::Graph64 g;
  auto leaf = g.leaf(shape, x);
  auto root = build(g, leaf);
  g.backward(root);
  const auto adjoint = leaf.grad();
  GradientCheck out;
  auto probe = x;
  for (auto i : indices) {
    probe[i] = x[i] + h;
    const double up = evaluate(shape, probe, build);
    probe[i] = x[i] - h;
    const double down = evaluate(shape, probe, build);
    probe[i] = x[i];
    const double fd = (up - down) / (2.0 * h);
    out.max_rel_error = std::max(out.max_rel_error, relative_error(adjoint[i], fd, floor));
    ++out.checked;
    if (std::abs(adjoint[i]) > floor) ++out.nonzero;
  }
  return out;
}

inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count,
                                               std::uint64_t seed) {
  util::Rng rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < count; ++k)
    out.push_back(std::min(n - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(n))));
  return out;
}

inline std::vector<double> uniform_values(std::size_t n, double lo, double hi, std::uint64_t seed) {
  util::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Smooth random clip [T,C,H,W] in (0,1): a sum of low-frequency sinusoids
// with random phases, moving by a random sub-pixel shift per frame.
inline std::vector<double> smooth_clip(std::size_t frames, std::size_t channels,
                                       std::size_t height, std::size_t width,
                                       std::uint64_t seed) {
  util::Rng rng(seed);
  const double fx1 = rng.uniform(0.15, 0.35), fy1 = rng.uniform(0.15, 0.35);
  const double fx2 = rng.uniform(0.2, 0.5), fy2 = rng.uniform(0.2, 0.5);
  const double dx = rng.uniform(0.4, 1.2), dy = rng.uniform(-0.8, 0.8);
  std::vector<double> phase(channels * 2);
  for (auto& p : phase) p = rng.uniform(0.0, 6.283);
  std::vector<double> v(frames * channels * height * width);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double X = static_cast<double>(x) - dx * static_cast<double>(t);
          const double Y = static_cast<double>(y) - dy * static_cast<double>(t);
          v[((t * channels + c) * height + y) * width + x] =
              0.5 + 0.2 * std::sin(fx1 * X + fy1 * Y + phase[2 * c]) +
              0.15 * std::cos(fx2 * X - fy2 * Y + phase[2 * c + 1]);
        }
  return v;
}

}  // namespace mcd::test
