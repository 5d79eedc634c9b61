#pragma once

#include <span>
#include <vector>

#include "mcd/classifier/model.hpp"
#include "mcd/flow/estimator.hpp"
#include "mcd/loss/motion_loss.hpp"
#include "mcd/video/clip.hpp"

namespace mcd::defense {

enum class DefenseLoss { MC, MultiMC };

struct DefenseConfig {
  double epsilon = 12.0;  // L-inf bound of r, 1/255 units
  double eta = 2.0;       // step size, 1/255 units
  int iterations = 20;    // K
  DefenseLoss loss = DefenseLoss::MC;
  loss::MCConfig mc;
  bool enabled = true;

  // Throws PreconditionError unless K >= 0, epsilon >= 0, eta <= 2 epsilon.
  void validate() const;
  // The MC config actually optimized: mc as is, or with all constraints.
  loss::MCConfig objective() const;
};

struct PurificationResult {
  std::vector<float> purified;  // X', planar [T,C,H,W]
  std::vector<float> reverse;   // r = X' - X
  // Loss of X'_k for k = 0..K; entry 0 is the input. Empty when the loop
  // does not run (K = 0 or disabled), so the identity path costs nothing.
  std::vector<double> loss_trace;
  std::vector<float> best;  // lowest-loss iterate, diagnostics only
  double best_loss = 0.0;
  int best_iteration = 0;
};

// Sign descent on the MC objective with the truncated estimator:
//   X' <- Proj_{|X'-X| <= eps, [0,1]}(X' - eta * sign(grad L(X')))
// starting from X' = X. Returns the final iterate.
PurificationResult purify(std::span<const float> planar, const video::ClipGeometry& geometry,
                          const flow::FlowConfig& flow_config, const DefenseConfig& config);
PurificationResult purify(const video::VideoClip& clip, const flow::FlowConfig& flow_config,
                          const DefenseConfig& config);

// Number of purify() calls made on the calling thread so far.
std::size_t purify_call_count();

struct DefendedPrediction {
  classifier::Prediction prediction;
  PurificationResult purification;
};

// purify, then predict on X' with full-quality flow. Disabled or K = 0 is
// the undefended prediction.
DefendedPrediction defended_predict(const classifier::ClassifierModel& model,
                                    std::span<const float> planar,
                                    const video::ClipGeometry& geometry,
                                    const flow::FlowConfig& flow_config,
                                    const DefenseConfig& config);

// Moves every z[i] onto {|z - x| <= bound} intersected with [0,1]. The
// bound holds exactly for the float values: |double(z) - double(x)| <= bound.
void project(std::span<const float> x, std::span<float> z, float bound);

// sign with sign(0) = 0.
template <typename Real>
Real sign(Real v) {
  return v > Real(0) ? Real(1) : (v < Real(0) ? Real(-1) : Real(0));
}

// Epsilon in 1/255 units -> pixel scale.
inline float to_pixel_scale(double units) { return static_cast<float>(units / 255.0); }

}  // namespace mcd::defense
