#pragma once

// Scalar stencil kernels shared by the traced ops and the untraced solver
// loops. Both paths must evaluate the same expressions in the same order so
// that their results agree bit-for-bit.

namespace mcd::grad::kernel {

template <typename Real>
inline Real central_diff(Real next, Real prev) {
  return (next - prev) * Real(0.5);
}

template <typename Real>
inline Real second_diff(Real next, Real center, Real prev) {
  return (next + prev) - (center + center);
}

template <typename Real>
inline Real avg4(Real left, Real right, Real up, Real down) {
  return ((left + right) + (up + down)) * Real(0.25);
}

inline long clamp_index(long i, long n) {
  return i < 0 ? 0 : (i >= n ? n - 1 : i);
}

}  // namespace mcd::grad::kernel
