#pragma once

#include "mcd/flow/estimator.hpp"
#include "mcd/grad/graph.hpp"
#include "mcd/video/clip.hpp"

namespace mcd::loss {

enum class SimMetric { L1, Charbonnier };

struct Constraints {
  bool forward = true;
  bool backward = false;
  bool long_range = false;

  bool any() const { return forward || backward || long_range; }
  bool operator==(const Constraints&) const = default;
};

struct MCConfig {
  SimMetric metric = SimMetric::Charbonnier;
  double kappa = 1e-3;
  int p = 1;  // 1: metric(r); 2: r^2
  double lambda_smooth = 0.05;
  double lambda_edge = 150.0;
  Constraints constraints;

  void validate() const;
  // Copy with forward, backward and long-range constraints enabled.
  MCConfig multi() const;
};

template <typename Real>
using Tensor = grad::DiffTensor<Real>;

// |r| under the configured metric, elementwise. Every absolute value inside
// the losses goes through this, so the L1 metric gives the exact zero laws
// and the Charbonnier metric keeps all adjoints smooth.
template <typename Real>
Tensor<Real> penalty(const Tensor<Real>& r, const MCConfig& config);

// targets [P,C,H,W], flows [P,2,H,W] -> [P,C,H,W]; output pixel (x, y) of
// pair k samples target k at (x + u, y + v).
template <typename Real>
Tensor<Real> warp_backward(const Tensor<Real>& targets, const Tensor<Real>& flows);

// Mean over pairs, channels and pixels of penalty(first - warp(second)).
template <typename Real>
Tensor<Real> photometric_loss(const Tensor<Real>& first, const Tensor<Real>& second,
                              const Tensor<Real>& flows, const MCConfig& config);

// Mean over pairs and pixels of
//   sum_a exp(-(lambda_edge/3) sum_c |dI_c/da|) * sum_comp |d2V/da2|
// for a in {x, y}, with I the first frame of each pair.
template <typename Real>
Tensor<Real> smoothness_loss(const Tensor<Real>& first, const Tensor<Real>& flows,
                             const MCConfig& config);

// Photometric + lambda_smooth * smoothness on forward flows of a planar clip
// tensor [T,C,H,W]. Ignores config.constraints.
template <typename Real>
Tensor<Real> mc_loss(const Tensor<Real>& clip, const flow::FlowConfig& flow_config,
                     const MCConfig& config);

// Sum of the photometric terms of every enabled constraint plus
// lambda_smooth * smoothness on forward flows. With only the forward
// constraint it records the same operations as mc_loss.
template <typename Real>
Tensor<Real> multi_mc_loss(const Tensor<Real>& clip, const flow::FlowConfig& flow_config,
                           const MCConfig& config);

// Untraced 32-bit evaluation of mc_loss (multi = false) or multi_mc_loss.
double evaluate_mc(const video::VideoClip& clip, const flow::FlowConfig& flow_config,
                   const MCConfig& config, bool multi = false);
double evaluate_mc(std::span<const float> planar, const video::ClipGeometry& geometry,
                   const flow::FlowConfig& flow_config, const MCConfig& config, bool multi = false);

}  // namespace mcd::loss
