#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mcd/classifier/model.hpp"
#include "mcd/defense/purify.hpp"
#include "mcd/flow/estimator.hpp"
#include "mcd/loss/motion_loss.hpp"
#include "mcd/video/clip.hpp"

namespace mcd::attack {

enum class AttackKind { PGD, Random, OneFrame, Flicker, Adaptive1, Adaptive2, BPDA };
const char* to_string(AttackKind kind);
AttackKind attack_kind_from_string(const std::string& name);

enum class Init { Zero, UniformRandom };

struct AttackConfig {
  double epsilon = 8.0;    // L-inf bound, 1/255 units
  int steps = 20;          // K_a
  double step_size = 2.0;  // 1/255 units
  Init init = Init::UniformRandom;
  double lambda = 1.0;     // Lagrangian weight of the adaptive attacks
  std::uint64_t seed = 0;

  // Throws PreconditionError unless epsilon > 0, steps >= 0 and
  // step_size <= 2 epsilon.
  void validate() const;
};

struct FlickerConfig {
  int steps = 100;
  double beta1 = 0.1;      // thickness weight
  double beta2 = 0.1;      // roughness weight
  double step_size = 1.0;  // 1/255 units per sign-ascent step
};

// The attacked clip is planar [T,C,H,W]. For L-inf kinds every recorded
// iterate satisfies |adversarial - clean| <= epsilon and lies in [0,1].
struct Perturbation {
  AttackKind kind = AttackKind::PGD;
  video::ClipGeometry geometry;
  std::vector<float> adversarial;
  // Flicker only: per-frame, per-channel offsets [T,C].
  std::vector<float> offsets;
  // Objective value at the start of every step.
  std::vector<double> loss_trace;
  // max |adversarial - clean| after every step.
  std::vector<double> bound_trace;
  int frame = -1;  // one-frame attack: the attacked frame
  std::size_t purification_calls = 0;

  // adversarial - clean.
  std::vector<float> delta(std::span<const float> clean) const;
};

// Shared inputs of the gradient attacks.
struct Target {
  std::span<const float> planar;  // clean clip
  video::ClipGeometry geometry;
  int label = -1;
};
Target make_target(const video::VideoClip& clip, const std::vector<float>& planar);

// delta <- Proj(delta + step * sign(grad CE(H(G(X + delta))))) with the
// truncated estimator. sign(0) = 0.
Perturbation pgd_attack(const Target& target, const classifier::ClassifierModel& model,
                        const flow::FlowConfig& flow_config, const AttackConfig& config);

// Uniform noise in [-bound, bound] (1/255 units), then clipped to [0,1].
Perturbation random_perturbation(std::span<const float> planar, const video::ClipGeometry& geometry,
                                 double bound, std::uint64_t seed);

// Per-frame L1 norms of grad CE at the clean clip.
std::vector<double> frame_gradient_norms(const Target& target,
                                         const classifier::ClassifierModel& model,
                                         const flow::FlowConfig& flow_config);

// PGD restricted to the frame with the largest gradient L1 norm (lowest
// index on ties).
Perturbation one_frame_attack(const Target& target, const classifier::ClassifierModel& model,
                              const flow::FlowConfig& flow_config, const AttackConfig& config);

// Sign ascent on CE - beta1 * thickness - beta2 * roughness over offsets
// d [T,C] added to every pixel, pixels clamped to [0,1]. No L-inf bound.
// Returns the best objective seen, including d = 0.
Perturbation flickering_attack(const Target& target, const classifier::ClassifierModel& model,
                               const flow::FlowConfig& flow_config, const FlickerConfig& config);

// thickness = mean |d|; roughness = mean |d[t+1]-d[t]| + mean |d[t+1]-2d[t]+d[t-1]|.
double flicker_thickness(std::span<const float> offsets);
double flicker_roughness(std::span<const float> offsets, std::size_t frames, std::size_t channels);

// PGD on CE - lambda * MC.
Perturbation adaptive_attack_1(const Target& target, const classifier::ClassifierModel& model,
                               const flow::FlowConfig& flow_config, const AttackConfig& config,
                               const loss::MCConfig& mc_config);

// PGD on CE - lambda * mean |G(X + delta) - G(X)|, G(X) fixed.
Perturbation adaptive_attack_2(const Target& target, const classifier::ClassifierModel& model,
                               const flow::FlowConfig& flow_config, const AttackConfig& config);

// PGD whose gradient is taken at the purified input and applied to delta as
// if purification were the identity. One full purification per step.
Perturbation bpda_attack(const Target& target, const classifier::ClassifierModel& model,
                         const flow::FlowConfig& flow_config, const AttackConfig& config,
                         const defense::DefenseConfig& defense_config);

}  // namespace mcd::attack
