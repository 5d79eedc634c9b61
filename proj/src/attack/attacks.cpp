#include "mcd/attack/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>

#include "mcd/error.hpp"
#include "mcd/grad/ops.hpp"
#include "mcd/util/rng.hpp"

namespace mcd::attack {

namespace {

using grad::DiffTensor;
using defense::sign;

// Objective value at x; writes d objective / d x into `gradient`.
using ObjectiveFn = std::function<double(std::span<const float> x, std::vector<float>& gradient)>;

grad::Shape clip_shape(const video::ClipGeometry& g) {
  return {g.frames, g.channels, g.height, g.width};
}

void check_target(const Target& t, const classifier::ClassifierModel& model) {
  if (t.label < 0 || static_cast<std::size_t>(t.label) >= model.geometry.num_classes) {
    throw PreconditionError("attack: clip has no valid label");
  }
  if (t.planar.size() != t.geometry.size()) throw PreconditionError("attack: clip size mismatch");
}

DiffTensor<float> cross_entropy_of(const DiffTensor<float>& x,
                                   const classifier::BoundModel<float>& params,
                                   const classifier::ClassifierModel& model,
                                   const flow::FlowConfig& flow_config, int label) {
  auto flows = flow::estimate_clip(x, flow::Direction::Forward, flow_config);
  return classifier::cross_entropy(classifier::forward(params, model.geometry, flows), label);
}

// Objective = CE - lambda * extra(x), extra optional.
ObjectiveFn make_objective(
    const Target& target, const classifier::ClassifierModel& model,
    const flow::FlowConfig& flow_config, double lambda,
    std::function<DiffTensor<float>(const DiffTensor<float>&)> extra = nullptr) {
  return [&, lambda, extra](std::span<const float> x, std::vector<float>& gradient) {
    grad::Graph32 graph;
    auto leaf = graph.leaf(clip_shape(target.geometry), std::vector<float>(x.begin(), x.end()));
    auto params = classifier::bind(graph, model, false);
    auto objective = cross_entropy_of(leaf, params, model, flow_config, target.label);
    if (extra && lambda != 0.0) objective = objective - extra(leaf) * static_cast<float>(lambda);
    graph.backward(objective);
    auto g = leaf.grad();
    gradient.assign(g.begin(), g.end());
    return static_cast<double>(objective.item());
  };
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Sign-gradient ascent inside the epsilon ball. `support` limits init noise
// and steps to the index range [begin, end).
Perturbation run_pgd(AttackKind kind, const Target& target, const AttackConfig& config,
                     const ObjectiveFn& objective, std::size_t begin, std::size_t end,
                     const std::function<std::span<const float>(std::span<const float>)>&
                         gradient_point = nullptr) {
  config.validate();
  const float eps = defense::to_pixel_scale(config.epsilon);
  const float step = defense::to_pixel_scale(config.step_size);
  Perturbation p;
  p.kind = kind;
  p.geometry = target.geometry;
  p.adversarial.assign(target.planar.begin(), target.planar.end());
  if (config.init == Init::UniformRandom) {
    util::Rng rng(util::child_seed(config.seed, 0, 31));
    for (std::size_t i = begin; i < end; ++i)
      p.adversarial[i] += static_cast<float>(rng.uniform(-eps, eps));
    defense::project(target.planar, p.adversarial, eps);
  }
  std::vector<float> gradient;
  for (int k = 0; k < config.steps; ++k) {
    auto at = gradient_point ? gradient_point(p.adversarial) : std::span<const float>(p.adversarial);
    p.loss_trace.push_back(objective(at, gradient));
    for (std::size_t i = begin; i < end; ++i) p.adversarial[i] += step * sign(gradient[i]);
    defense::project(target.planar, p.adversarial, eps);
    p.bound_trace.push_back(max_abs_diff(p.adversarial, target.planar));
  }
  return p;
}

}  // namespace

const char* to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::PGD: return "pgd";
    case AttackKind::Random: return "random";
    case AttackKind::OneFrame: return "one-frame";
    case AttackKind::Flicker: return "flicker";
    case AttackKind::Adaptive1: return "adaptive-1";
    case AttackKind::Adaptive2: return "adaptive-2";
    case AttackKind::BPDA: return "bpda";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& name) {
  for (auto k : {AttackKind::PGD, AttackKind::Random, AttackKind::OneFrame, AttackKind::Flicker,
                 AttackKind::Adaptive1, AttackKind::Adaptive2, AttackKind::BPDA}) {
    if (name == to_string(k)) return k;
  }
  throw PreconditionError("unknown attack kind '" + name + "'");
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw PreconditionError("attack: epsilon must be > 0");
  if (steps < 0) throw PreconditionError("attack: steps must be >= 0");
  if (!(step_size >= 0.0) || step_size > 2.0 * epsilon) {
    throw PreconditionError("attack: need 0 <= step_size <= 2 * epsilon");
  }
}

std::vector<float> Perturbation::delta(std::span<const float> clean) const {
  if (clean.size() != adversarial.size()) throw PreconditionError("delta: size mismatch");
  std::vector<float> d(clean.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = adversarial[i] - clean[i];
  return d;
}

Target make_target(const video::VideoClip& clip, const std::vector<float>& planar) {
  if (!clip.label()) throw PreconditionError("attack: clip " + clip.id() + " is unlabeled");
  return Target{planar, clip.geometry(), *clip.label()};
}

Perturbation pgd_attack(const Target& target, const classifier::ClassifierModel& model,
                        const flow::FlowConfig& flow_config, const AttackConfig& config) {
  check_target(target, model);
  return run_pgd(AttackKind::PGD, target, config,
                 make_objective(target, model, flow_config, 0.0), 0, target.planar.size());
}

Perturbation random_perturbation(std::span<const float> planar, const video::ClipGeometry& geometry,
                                 double bound, std::uint64_t seed) {
  if (!(bound >= 0.0)) throw PreconditionError("random_perturbation: bound must be >= 0");
  const float b = defense::to_pixel_scale(bound);
  Perturbation p;
  p.kind = AttackKind::Random;
  p.geometry = geometry;
  p.adversarial.assign(planar.begin(), planar.end());
  util::Rng rng(util::child_seed(seed, 0, 37));
  for (auto& v : p.adversarial) v += static_cast<float>(rng.uniform(-b, b));
  defense::project(planar, p.adversarial, b);
  p.bound_trace.push_back(max_abs_diff(p.adversarial, planar));
  return p;
}

std::vector<double> frame_gradient_norms(const Target& target,
                                         const classifier::ClassifierModel& model,
                                         const flow::FlowConfig& flow_config) {
  check_target(target, model);
  std::vector<float> gradient;
  make_objective(target, model, flow_config, 0.0)(target.planar, gradient);
  const std::size_t fs = target.geometry.frame_size();
  std::vector<double> norms(target.geometry.frames, 0.0);
  for (std::size_t t = 0; t < norms.size(); ++t)
    for (std::size_t i = 0; i < fs; ++i) norms[t] += std::abs(gradient[t * fs + i]);
  return norms;
}

Perturbation one_frame_attack(const Target& target, const classifier::ClassifierModel& model,
                              const flow::FlowConfig& flow_config, const AttackConfig& config) {
  const auto norms = frame_gradient_norms(target, model, flow_config);
  const auto frame = static_cast<std::size_t>(std::max_element(norms.begin(), norms.end()) -
                                              norms.begin());
  const std::size_t fs = target.geometry.frame_size();
  auto p = run_pgd(AttackKind::OneFrame, target, config,
                   make_objective(target, model, flow_config, 0.0), frame * fs, (frame + 1) * fs);
  p.frame = static_cast<int>(frame);
  return p;
}

double flicker_thickness(std::span<const float> offsets) {
  double total = 0.0;
  for (float d : offsets) total += std::abs(static_cast<double>(d));
  return total / static_cast<double>(offsets.size());
}

double flicker_roughness(std::span<const float> d, std::size_t frames, std::size_t channels) {
  double first = 0.0, second = 0.0;
  for (std::size_t t = 0; t + 1 < frames; ++t)
    for (std::size_t c = 0; c < channels; ++c)
      first += std::abs(static_cast<double>(d[(t + 1) * channels + c]) - d[t * channels + c]);
  double r = first / static_cast<double>((frames - 1) * channels);
  if (frames >= 3) {
    for (std::size_t t = 1; t + 1 < frames; ++t)
      for (std::size_t c = 0; c < channels; ++c)
        second += std::abs(static_cast<double>(d[(t + 1) * channels + c]) -
                           2.0 * d[t * channels + c] + d[(t - 1) * channels + c]);
    r += second / static_cast<double>((frames - 2) * channels);
  }
  return r;
}

Perturbation flickering_attack(const Target& target, const classifier::ClassifierModel& model,
                               const flow::FlowConfig& flow_config, const FlickerConfig& config) {
  check_target(target, model);
  if (config.steps < 0) throw PreconditionError("flicker: steps must be >= 0");
  const auto& g = target.geometry;
  const std::size_t tc = g.frames * g.channels;
  const float step = defense::to_pixel_scale(config.step_size);

  auto evaluate = [&](std::span<const float> d, std::vector<float>* gradient) {
    grad::Graph32 graph;
    auto offsets = graph.leaf({g.frames, g.channels}, std::vector<float>(d.begin(), d.end()),
                              gradient != nullptr);
    auto clean = graph.constant(clip_shape(g),
                                std::vector<float>(target.planar.begin(), target.planar.end()));
    auto x = grad::clamp01(clean + grad::expand_trailing(offsets, {g.height, g.width}));
    auto params = classifier::bind(graph, model, false);
    auto ce = cross_entropy_of(x, params, model, flow_config, target.label);
    auto thickness = grad::mean(grad::abs(offsets));
    auto next = grad::slice(offsets, 0, 1, g.frames);
    auto prev = grad::slice(offsets, 0, 0, g.frames - 1);
    auto roughness = grad::mean(grad::abs(next - prev));
    if (g.frames >= 3) {
      auto curvature = (grad::slice(offsets, 0, 2, g.frames) -
                        grad::slice(offsets, 0, 1, g.frames - 1) * 2.0f) +
                       grad::slice(offsets, 0, 0, g.frames - 2);
      roughness = roughness + grad::mean(grad::abs(curvature));
    }
    auto objective = ce - thickness * static_cast<float>(config.beta1) -
                     roughness * static_cast<float>(config.beta2);
    if (gradient) {
      graph.backward(objective);
      auto gr = offsets.grad();
      gradient->assign(gr.begin(), gr.end());
    }
    return static_cast<double>(objective.item());
  };

  Perturbation p;
  p.kind = AttackKind::Flicker;
  p.geometry = g;
  std::vector<float> d(tc, 0.0f), gradient;
  std::vector<float> best = d;
  double best_objective = 0.0;
  for (int k = 0; k <= config.steps; ++k) {
    const bool last = k == config.steps;
    const double objective = evaluate(d, last ? nullptr : &gradient);
    p.loss_trace.push_back(objective);
    if (k == 0 || objective > best_objective) {
      best_objective = objective;
      best = d;
    }
    if (last) break;
    for (std::size_t i = 0; i < tc; ++i) d[i] += step * sign(gradient[i]);
  }
  p.offsets = best;
  p.adversarial.resize(target.planar.size());
  const std::size_t hw = g.height * g.width;
  for (std::size_t i = 0; i < tc; ++i)
    for (std::size_t j = 0; j < hw; ++j)
      p.adversarial[i * hw + j] = std::clamp(target.planar[i * hw + j] + best[i], 0.0f, 1.0f);
  p.bound_trace.push_back(max_abs_diff(p.adversarial, target.planar));
  return p;
}

Perturbation adaptive_attack_1(const Target& target, const classifier::ClassifierModel& model,
                               const flow::FlowConfig& flow_config, const AttackConfig& config,
                               const loss::MCConfig& mc_config) {
  check_target(target, model);
  auto mc = [&](const DiffTensor<float>& x) { return loss::mc_loss(x, flow_config, mc_config); };
  return run_pgd(AttackKind::Adaptive1, target, config,
                 make_objective(target, model, flow_config, config.lambda, mc), 0,
                 target.planar.size());
}

Perturbation adaptive_attack_2(const Target& target, const classifier::ClassifierModel& model,
                               const flow::FlowConfig& flow_config, const AttackConfig& config) {
  check_target(target, model);
  const auto& g = target.geometry;
  const auto clean = flow::estimate_clip(target.planar, g, flow::Direction::Forward, flow_config);
  const std::size_t n = g.height * g.width;
  std::vector<float> clean_planar(clean.count() * 2 * n);
  for (std::size_t p = 0; p < clean.count(); ++p)
    for (std::size_t i = 0; i < n; ++i) {
      clean_planar[p * 2 * n + i] = clean.fields[p].uv[2 * i];
      clean_planar[p * 2 * n + n + i] = clean.fields[p].uv[2 * i + 1];
    }
  auto change = [&](const DiffTensor<float>& x) {
    auto flows = flow::estimate_clip(x, flow::Direction::Forward, flow_config);
    auto reference = x.graph().constant(flows.shape(), clean_planar);
    return grad::mean(grad::abs(flows - reference));
  };
  return run_pgd(AttackKind::Adaptive2, target, config,
                 make_objective(target, model, flow_config, config.lambda, change), 0,
                 target.planar.size());
}

Perturbation bpda_attack(const Target& target, const classifier::ClassifierModel& model,
                         const flow::FlowConfig& flow_config, const AttackConfig& config,
                         const defense::DefenseConfig& defense_config) {
  check_target(target, model);
  std::size_t calls = 0;
  std::vector<float> purified;
  auto purify_point = [&](std::span<const float> x) -> std::span<const float> {
    ++calls;
    purified = defense::purify(x, target.geometry, flow_config, defense_config).purified;
    return purified;
  };
  auto p = run_pgd(AttackKind::BPDA, target, config,
                   make_objective(target, model, flow_config, 0.0), 0, target.planar.size(),
                   purify_point);
  p.purification_calls = calls;
  return p;
}

}  // namespace mcd::attack
