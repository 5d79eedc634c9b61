#pragma once

#include <optional>
#include <span>
#include <vector>

#include "mcd/grad/graph.hpp"

namespace mcd::grad {

enum class Binary { Add, Sub, Mul, Div };
enum class Unary { Neg, Abs, Charbonnier, Exp, Log, Relu, Clamp01 };
enum class Reduce { Sum, Mean };
enum class Axis { X, Y };

inline constexpr double kDefaultCharbonnierKappa = 1e-3;

// Equal shapes, or one side holding a single element (broadcast).
// In 64-bit mode, division by an exact zero throws NumericError.
template <typename Real>
DiffTensor<Real> elementwise(Binary op, const DiffTensor<Real>& a, const DiffTensor<Real>& b);
template <typename Real>
DiffTensor<Real> elementwise(Binary op, const DiffTensor<Real>& a, Real b);

// abs has adjoint 0 at 0. Charbonnier is sqrt(x^2 + kappa^2) - kappa, smooth
// everywhere; `kappa` is ignored by the other kinds.
template <typename Real>
DiffTensor<Real> elementwise(Unary op, const DiffTensor<Real>& a,
                             Real kappa = Real(kDefaultCharbonnierKappa));

// Reduces over `axes` (all axes when empty), removing them from the shape.
template <typename Real>
DiffTensor<Real> reduce(Reduce op, const DiffTensor<Real>& a, std::vector<std::size_t> axes = {});

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;  // zero padding on every side
};

// Cross-correlation. input [Cin,H,W] or [N,Cin,H,W]; kernel [Cout,Cin,kh,kw]
// with odd kh, kw; optional bias [Cout].
template <typename Real>
DiffTensor<Real> conv2d(const DiffTensor<Real>& input, const DiffTensor<Real>& kernel,
                        const std::optional<DiffTensor<Real>>& bias, Conv2dParams params);
template <typename Real>
DiffTensor<Real> conv2d(const DiffTensor<Real>& input, const DiffTensor<Real>& kernel,
                        Conv2dParams params) {
  return conv2d(input, kernel, std::optional<DiffTensor<Real>>{}, params);
}

// Bilinear interpolation with clamp-to-edge. image [C,H,W] with coords
// [Ho,Wo,2], or batched image [B,C,H,W] with coords [B,Ho,Wo,2]. coords hold
// (x, y) in pixel units. Differentiable in both arguments.
template <typename Real>
DiffTensor<Real> bilinear_sample(const DiffTensor<Real>& image, const DiffTensor<Real>& coords);

// Finite differences over the last two dims (y, x) with replicate boundary:
// order 1 is (a[i+1] - a[i-1]) / 2, order 2 is a[i+1] - 2a[i] + a[i-1].
// Requires both spatial extents >= 3.
template <typename Real>
DiffTensor<Real> spatial_derivative(const DiffTensor<Real>& a, int order, Axis axis);

// Mean of the 4 neighbours over the last two dims, replicate boundary.
template <typename Real>
DiffTensor<Real> neighbor_average(const DiffTensor<Real>& a);

template <typename Real>
DiffTensor<Real> reshape(const DiffTensor<Real>& a, Shape shape);
template <typename Real>
DiffTensor<Real> permute(const DiffTensor<Real>& a, const std::vector<std::size_t>& order);
// Half-open range [begin, end) along `axis`; the axis is kept.
template <typename Real>
DiffTensor<Real> slice(const DiffTensor<Real>& a, std::size_t axis, std::size_t begin,
                       std::size_t end);
template <typename Real>
DiffTensor<Real> concat(std::span<const DiffTensor<Real>> parts, std::size_t axis);
// Repeats every element of `a` over new trailing dims: [..] -> [.., trailing..].
template <typename Real>
DiffTensor<Real> expand_trailing(const DiffTensor<Real>& a, const Shape& trailing);

// --- convenience wrappers ---

template <typename Real>
DiffTensor<Real> operator+(const DiffTensor<Real>& a, const DiffTensor<Real>& b) {
  return elementwise(Binary::Add, a, b);
}
template <typename Real>
DiffTensor<Real> operator-(const DiffTensor<Real>& a, const DiffTensor<Real>& b) {
  return elementwise(Binary::Sub, a, b);
}
template <typename Real>
DiffTensor<Real> operator*(const DiffTensor<Real>& a, const DiffTensor<Real>& b) {
  return elementwise(Binary::Mul, a, b);
}
template <typename Real>
DiffTensor<Real> operator/(const DiffTensor<Real>& a, const DiffTensor<Real>& b) {
  return elementwise(Binary::Div, a, b);
}
template <typename Real>
DiffTensor<Real> operator+(const DiffTensor<Real>& a, Real b) {
  return elementwise(Binary::Add, a, b);
}
template <typename Real>
DiffTensor<Real> operator-(const DiffTensor<Real>& a, Real b) {
  return elementwise(Binary::Sub, a, b);
}
template <typename Real>
DiffTensor<Real> operator*(const DiffTensor<Real>& a, Real b) {
  return elementwise(Binary::Mul, a, b);
}
template <typename Real>
DiffTensor<Real> operator*(Real b, const DiffTensor<Real>& a) {
  return elementwise(Binary::Mul, a, b);
}
template <typename Real>
DiffTensor<Real> operator/(const DiffTensor<Real>& a, Real b) {
  return elementwise(Binary::Div, a, b);
}
template <typename Real>
DiffTensor<Real> operator-(const DiffTensor<Real>& a) {
  return elementwise(Unary::Neg, a);
}

template <typename Real>
DiffTensor<Real> abs(const DiffTensor<Real>& a) {
  return elementwise(Unary::Abs, a);
}
template <typename Real>
DiffTensor<Real> charbonnier_abs(const DiffTensor<Real>& a,
                                 Real kappa = Real(kDefaultCharbonnierKappa)) {
  return elementwise(Unary::Charbonnier, a, kappa);
}
template <typename Real>
DiffTensor<Real> exp(const DiffTensor<Real>& a) {
  return elementwise(Unary::Exp, a);
}
template <typename Real>
DiffTensor<Real> log(const DiffTensor<Real>& a) {
  return elementwise(Unary::Log, a);
}
template <typename Real>
DiffTensor<Real> relu(const DiffTensor<Real>& a) {
  return elementwise(Unary::Relu, a);
}
template <typename Real>
DiffTensor<Real> clamp01(const DiffTensor<Real>& a) {
  return elementwise(Unary::Clamp01, a);
}
template <typename Real>
DiffTensor<Real> sum(const DiffTensor<Real>& a, std::vector<std::size_t> axes = {}) {
  return reduce(Reduce::Sum, a, std::move(axes));
}
template <typename Real>
DiffTensor<Real> mean(const DiffTensor<Real>& a, std::vector<std::size_t> axes = {}) {
  return reduce(Reduce::Mean, a, std::move(axes));
}

}  // namespace mcd::grad
