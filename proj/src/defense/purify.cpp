#include "mcd/defense/purify.hpp"

#include <cmath>

#include "mcd/error.hpp"

namespace mcd::defense {

namespace {

thread_local std::size_t purify_calls = 0;

// Loss and its gradient w.r.t. the clip.
double loss_and_gradient(std::span<const float> planar, const video::ClipGeometry& g,
                         const flow::FlowConfig& flow_config, const DefenseConfig& config,
                         std::vector<float>* gradient) {
  grad::Graph32 graph;
  auto clip = graph.leaf({g.frames, g.channels, g.height, g.width},
                         std::vector<float>(planar.begin(), planar.end()), gradient != nullptr);
  const auto mc = config.objective();
  auto loss = config.loss == DefenseLoss::MC ? loss::mc_loss(clip, flow_config, mc)
                                             : loss::multi_mc_loss(clip, flow_config, mc);
  if (gradient) {
    graph.backward(loss);
    auto gr = clip.grad();
    gradient->assign(gr.begin(), gr.end());
  }
  return loss.item();
}

}  // namespace

void DefenseConfig::validate() const {
  if (iterations < 0) throw PreconditionError("defense: K must be >= 0");
  if (!(epsilon >= 0.0)) throw PreconditionError("defense: epsilon must be >= 0");
  if (!(eta >= 0.0) || eta > 2.0 * epsilon) {
    throw PreconditionError("defense: need 0 <= eta <= 2 * epsilon");
  }
  objective().validate();
}

loss::MCConfig DefenseConfig::objective() const {
  return loss == DefenseLoss::MultiMC ? mc.multi() : mc;
}

void project(std::span<const float> x, std::span<float> z, float bound) {
  if (x.size() != z.size()) throw PreconditionError("project: size mismatch");
  const double b = bound;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double xi = x[i];
    const double lo = std::max(0.0, xi - b);
    const double hi = std::min(1.0, xi + b);
    float f = static_cast<float>(std::clamp(static_cast<double>(z[i]), lo, hi));
    if (static_cast<double>(f) > hi) f = std::nextafter(f, -1.0f);
    if (static_cast<double>(f) < lo) f = std::nextafter(f, 2.0f);
    z[i] = f;
  }
}

PurificationResult purify(std::span<const float> planar, const video::ClipGeometry& g,
                          const flow::FlowConfig& flow_config, const DefenseConfig& config) {
  config.validate();
  flow_config.validate();
  if (planar.size() != g.size()) throw PreconditionError("purify: clip size mismatch");
  if (config.loss == DefenseLoss::MultiMC && g.frames % 2 != 0) {
    throw PreconditionError("purify: multi-constraint loss needs even T");
  }
  ++purify_calls;
  PurificationResult result;
  result.purified.assign(planar.begin(), planar.end());
  const int k_max = config.enabled ? config.iterations : 0;
  const float eps = to_pixel_scale(config.epsilon);
  const float eta = to_pixel_scale(config.eta);
  std::vector<float> gradient;
  for (int k = 0; k < k_max; ++k) {
    const double l = loss_and_gradient(result.purified, g, flow_config, config, &gradient);
    result.loss_trace.push_back(l);
    if (k == 0 || l < result.best_loss) {
      result.best_loss = l;
      result.best_iteration = k;
      result.best = result.purified;
    }
    for (std::size_t i = 0; i < gradient.size(); ++i)
      result.purified[i] -= eta * sign(gradient[i]);
    project(planar, result.purified, eps);
  }
  if (k_max > 0) {
    const double l = loss_and_gradient(result.purified, g, flow_config, config, nullptr);
    result.loss_trace.push_back(l);
    if (l < result.best_loss) {
      result.best_loss = l;
      result.best_iteration = k_max;
      result.best = result.purified;
    }
  } else {
    result.best = result.purified;
  }
  result.reverse.resize(planar.size());
  for (std::size_t i = 0; i < planar.size(); ++i)
    result.reverse[i] = result.purified[i] - planar[i];
  return result;
}

PurificationResult purify(const video::VideoClip& clip, const flow::FlowConfig& flow_config,
                          const DefenseConfig& config) {
  const auto planar = video::to_planar<float>(clip);
  return purify(planar, clip.geometry(), flow_config, config);
}

std::size_t purify_call_count() { return purify_calls; }

DefendedPrediction defended_predict(const classifier::ClassifierModel& model,
                                    std::span<const float> planar,
                                    const video::ClipGeometry& geometry,
                                    const flow::FlowConfig& flow_config,
                                    const DefenseConfig& config) {
  DefendedPrediction out;
  out.purification = purify(planar, geometry, flow_config, config);
  out.prediction =
      classifier::predict(model, out.purification.purified, geometry, flow_config);
  return out;
}

}  // namespace mcd::defense
