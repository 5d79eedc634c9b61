#include "mcd/loss/motion_loss.hpp"

#include <vector>

#include "mcd/error.hpp"
#include "mcd/grad/ops.hpp"

namespace mcd::loss {

using flow::Direction;

void MCConfig::validate() const {
  if (!(lambda_smooth >= 0.0) || !(lambda_edge >= 0.0)) {
    throw PreconditionError("mc: lambda_smooth and lambda_edge must be >= 0");
  }
  if (!constraints.any()) throw PreconditionError("mc: constraints must be non-empty");
  if (p != 1 && p != 2) throw PreconditionError("mc: p must be 1 or 2");
  if (metric == SimMetric::Charbonnier && !(kappa > 0.0)) {
    throw PreconditionError("mc: charbonnier kappa must be > 0");
  }
}

MCConfig MCConfig::multi() const {
  MCConfig c = *this;
  c.constraints = Constraints{true, true, true};
  return c;
}

template <typename Real>
Tensor<Real> penalty(const Tensor<Real>& r, const MCConfig& config) {
  if (config.metric == SimMetric::L1) return grad::abs(r);
  return grad::charbonnier_abs(r, static_cast<Real>(config.kappa));
}

namespace {

template <typename Real>
Tensor<Real> residual_penalty(const Tensor<Real>& r, const MCConfig& config) {
  if (config.p == 2) return r * r;
  return penalty(r, config);
}

template <typename Real>
void check_stack(const Tensor<Real>& frames, const Tensor<Real>& flows, const char* op) {
  const auto& f = frames.shape();
  const auto& v = flows.shape();
  if (f.size() != 4 || v.size() != 4 || v[1] != 2 || f[0] != v[0] || f[2] != v[2] ||
      f[3] != v[3]) {
    throw PreconditionError(std::string(op) + ": frames " + grad::shape_string(f) +
                            " do not pair with flows " + grad::shape_string(v));
  }
}

}  // namespace

template <typename Real>
Tensor<Real> warp_backward(const Tensor<Real>& targets, const Tensor<Real>& flows) {
  check_stack(targets, flows, "warp_backward");
  const auto& s = flows.shape();
  const std::size_t pairs = s[0], h = s[2], w = s[3];
  std::vector<Real> base(pairs * h * w * 2);
  for (std::size_t p = 0; p < pairs; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        base[((p * h + y) * w + x) * 2] = static_cast<Real>(x);
        base[((p * h + y) * w + x) * 2 + 1] = static_cast<Real>(y);
      }
  auto grid = flows.graph().constant({pairs, h, w, 2}, std::move(base));
  auto coords = grid + grad::permute(flows, {0, 2, 3, 1});
  return grad::bilinear_sample(targets, coords);
}

template <typename Real>
Tensor<Real> photometric_loss(const Tensor<Real>& first, const Tensor<Real>& second,
                              const Tensor<Real>& flows, const MCConfig& config) {
  if (first.shape() != second.shape()) {
    throw PreconditionError("photometric_loss: first and second stacks differ in shape");
  }
  check_stack(first, flows, "photometric_loss");
  return grad::mean(residual_penalty(first - warp_backward(second, flows), config));
}

template <typename Real>
Tensor<Real> smoothness_loss(const Tensor<Real>& first, const Tensor<Real>& flows,
                             const MCConfig& config) {
  check_stack(first, flows, "smoothness_loss");
  const Real edge_scale = static_cast<Real>(-config.lambda_edge / 3.0);
  Tensor<Real> total;
  for (auto axis : {grad::Axis::X, grad::Axis::Y}) {
    auto edge = grad::sum(penalty(grad::spatial_derivative(first, 1, axis), config), {1});
    auto weight = grad::exp(edge * edge_scale);
    auto curvature = grad::sum(penalty(grad::spatial_derivative(flows, 2, axis), config), {1});
    auto term = weight * curvature;
    total = axis == grad::Axis::X ? term : total + term;
  }
  return grad::mean(total);
}

template <typename Real>
Tensor<Real> mc_loss(const Tensor<Real>& clip, const flow::FlowConfig& flow_config,
                     const MCConfig& config) {
  MCConfig forward_only = config;
  forward_only.constraints = Constraints{};
  return multi_mc_loss(clip, flow_config, forward_only);
}

template <typename Real>
Tensor<Real> multi_mc_loss(const Tensor<Real>& clip, const flow::FlowConfig& flow_config,
                           const MCConfig& config) {
  config.validate();
  const auto& s = clip.shape();
  if (s.size() != 4) throw PreconditionError("mc: clip tensor must be [T,C,H,W]");
  if (config.constraints.long_range && s[0] % 2 != 0) {
    throw PreconditionError("multi_mc_loss: long-range constraint needs even T, got " +
                            std::to_string(s[0]));
  }
  auto [fwd_first, fwd_second] = flow::split_pairs(clip, Direction::Forward);
  auto fwd_flows = flow::estimate_pairs(fwd_first, fwd_second, flow_config);
  Tensor<Real> total;
  auto accumulate = [&](const Tensor<Real>& term) { total = total.valid() ? total + term : term; };
  if (config.constraints.forward) {
    accumulate(photometric_loss(fwd_first, fwd_second, fwd_flows, config));
  }
  for (auto dir : {Direction::Backward, Direction::LongRange}) {
    const bool on = dir == Direction::Backward ? config.constraints.backward
                                               : config.constraints.long_range;
    if (!on) continue;
    auto [first, second] = flow::split_pairs(clip, dir);
    auto flows = flow::estimate_pairs(first, second, flow_config);
    accumulate(photometric_loss(first, second, flows, config));
  }
  accumulate(smoothness_loss(fwd_first, fwd_flows, config) *
             static_cast<Real>(config.lambda_smooth));
  return total;
}

double evaluate_mc(std::span<const float> planar, const video::ClipGeometry& g,
                   const flow::FlowConfig& flow_config, const MCConfig& config, bool multi) {
  grad::Graph32 graph;
  auto clip = graph.constant({g.frames, g.channels, g.height, g.width},
                             std::vector<float>(planar.begin(), planar.end()));
  auto loss = multi ? multi_mc_loss(clip, flow_config, config) : mc_loss(clip, flow_config, config);
  return loss.item();
}

double evaluate_mc(const video::VideoClip& clip, const flow::FlowConfig& flow_config,
                   const MCConfig& config, bool multi) {
  const auto planar = video::to_planar<float>(clip);
  return evaluate_mc(planar, clip.geometry(), flow_config, config, multi);
}

#define MCD_INSTANTIATE_LOSS(Real)                                                            \
  template Tensor<Real> penalty(const Tensor<Real>&, const MCConfig&);                        \
  template Tensor<Real> warp_backward(const Tensor<Real>&, const Tensor<Real>&);              \
  template Tensor<Real> photometric_loss(const Tensor<Real>&, const Tensor<Real>&,            \
                                         const Tensor<Real>&, const MCConfig&);               \
  template Tensor<Real> smoothness_loss(const Tensor<Real>&, const Tensor<Real>&,             \
                                        const MCConfig&);                                     \
  template Tensor<Real> mc_loss(const Tensor<Real>&, const flow::FlowConfig&,                 \
                                const MCConfig&);                                             \
  template Tensor<Real> multi_mc_loss(const Tensor<Real>&, const flow::FlowConfig&,           \
                                      const MCConfig&);

MCD_INSTANTIATE_LOSS(float)
MCD_INSTANTIATE_LOSS(double)

}  // namespace mcd::loss
