#include "mcd/classifier/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mcd/error.hpp"
#include "mcd/grad/ops.hpp"
#include "mcd/util/binary_io.hpp"
#include "mcd/util/parallel.hpp"
#include "mcd/util/rng.hpp"

namespace mcd::classifier {

namespace {

using grad::DiffTensor;
constexpr std::string_view kModelMagic = "VMDL";

void fill_uniform(std::vector<float>& v, std::size_t n, double bound, util::Rng& rng) {
  v.resize(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
}

template <typename Real>
std::vector<Real> widen(std::span<const float> v) {
  return std::vector<Real>(v.begin(), v.end());
}

}  // namespace

ClassifierModel ClassifierModel::initialize(const ModelGeometry& geometry, std::uint64_t seed) {
  if (geometry.num_classes < 2) throw PreconditionError("classifier: need >= 2 classes");
  ClassifierModel m;
  m.geometry = geometry;
  m.train_seed = seed;
  util::Rng rng(util::child_seed(seed, 0, 7));
  const double b1 = 1.0 / std::sqrt(2.0 * kKernel * kKernel);
  const double b2 = 1.0 / std::sqrt(static_cast<double>(kConv1Out * kKernel * kKernel));
  const double bh = 1.0 / std::sqrt(static_cast<double>(kConv2Out));
  fill_uniform(m.conv1_w, kConv1Out * 2 * kKernel * kKernel, b1, rng);
  fill_uniform(m.conv1_b, kConv1Out, b1, rng);
  fill_uniform(m.conv2_w, kConv2Out * kConv1Out * kKernel * kKernel, b2, rng);
  fill_uniform(m.conv2_b, kConv2Out, b2, rng);
  fill_uniform(m.head_w, geometry.num_classes * kConv2Out, bh, rng);
  fill_uniform(m.head_b, geometry.num_classes, bh, rng);
  return m;
}

std::vector<std::span<float>> ClassifierModel::parameters() {
  return {conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b};
}

std::vector<std::span<const float>> ClassifierModel::parameters() const {
  return {conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b};
}

std::size_t ClassifierModel::parameter_count() const {
  std::size_t n = 0;
  for (auto p : parameters()) n += p.size();
  return n;
}

template <typename Real>
BoundModel<Real> bind(grad::Graph<Real>& graph, const ClassifierModel& model, bool requires_grad) {
  const std::size_t k = model.geometry.num_classes;
  BoundModel<Real> b;
  b.conv1_w = graph.leaf({kConv1Out, 2, kKernel, kKernel}, widen<Real>(model.conv1_w), requires_grad);
  b.conv1_b = graph.leaf({kConv1Out}, widen<Real>(model.conv1_b), requires_grad);
  b.conv2_w = graph.leaf({kConv2Out, kConv1Out, kKernel, kKernel}, widen<Real>(model.conv2_w),
                         requires_grad);
  b.conv2_b = graph.leaf({kConv2Out}, widen<Real>(model.conv2_b), requires_grad);
  b.head_w = graph.leaf({k, kConv2Out, 1, 1}, widen<Real>(model.head_w), requires_grad);
  b.head_b = graph.leaf({k}, widen<Real>(model.head_b), requires_grad);
  return b;
}

template <typename Real>
DiffTensor<Real> forward(const BoundModel<Real>& params, const ModelGeometry& geometry,
                         const DiffTensor<Real>& flows) {
  const auto& s = flows.shape();
  if (s.size() != 4 || s[1] != 2 || s[0] == 0) {
    throw PreconditionError("classifier: flows must be [P,2,H,W], got " + grad::shape_string(s));
  }
  if (s[2] != geometry.height || s[3] != geometry.width) {
    throw GeometryError("classifier: model expects " + std::to_string(geometry.height) + "x" +
                        std::to_string(geometry.width) + " flows, got " +
                        std::to_string(s[2]) + "x" + std::to_string(s[3]));
  }
  const grad::Conv2dParams down{2, 1};
  auto h1 = grad::relu(grad::conv2d(flows, params.conv1_w, std::optional(params.conv1_b), down));
  auto h2 = grad::relu(grad::conv2d(h1, params.conv2_w, std::optional(params.conv2_b), down));
  auto pooled = grad::mean(grad::mean(h2, {2, 3}), {0});
  auto column = grad::reshape(pooled, {kConv2Out, 1, 1});
  auto logits = grad::conv2d(column, params.head_w, std::optional(params.head_b), grad::Conv2dParams{1, 0});
  return grad::reshape(logits, {geometry.num_classes});
}

template <typename Real>
DiffTensor<Real> cross_entropy(const DiffTensor<Real>& logits, int label) {
  const auto& s = logits.shape();
  if (s.size() != 1 || label < 0 || static_cast<std::size_t>(label) >= s[0]) {
    throw PreconditionError("cross_entropy: label out of range");
  }
  auto v = logits.value();
  const Real shift = *std::max_element(v.begin(), v.end());
  auto z = logits - shift;
  auto lse = grad::log(grad::sum(grad::exp(z)));
  auto picked = grad::reshape(grad::slice(z, 0, static_cast<std::size_t>(label),
                                          static_cast<std::size_t>(label) + 1),
                              {});
  return lse - picked;
}

std::vector<double> softmax(std::span<const float> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - m);
  for (auto& x : p) x /= total;
  return p;
}

Prediction classify_flows(const ClassifierModel& model, std::span<const float> flows,
                          std::size_t pairs) {
  const auto& g = model.geometry;
  if (flows.size() != pairs * 2 * g.height * g.width) {
    throw GeometryError("classifier: flow buffer does not match model geometry");
  }
  grad::Graph32 graph;
  auto params = bind(graph, model, false);
  auto input = graph.constant({pairs, 2, g.height, g.width},
                              std::vector<float>(flows.begin(), flows.end()));
  auto logits = forward(params, g, input);
  Prediction p;
  p.logits.assign(logits.value().begin(), logits.value().end());
  p.probabilities = softmax(p.logits);
  p.label = static_cast<int>(std::max_element(p.logits.begin(), p.logits.end()) - p.logits.begin());
  return p;
}

Prediction predict(const ClassifierModel& model, std::span<const float> planar,
                   const video::ClipGeometry& geometry, const flow::FlowConfig& flow_config) {
  if (geometry.height != model.geometry.height || geometry.width != model.geometry.width) {
    throw GeometryError("predict: clip " + video::to_string(geometry) +
                        " does not match model geometry");
  }
  const auto stack = flow::estimate_clip(planar, geometry, flow::Direction::Forward, flow_config);
  const std::size_t n = geometry.height * geometry.width;
  std::vector<float> flows(stack.count() * 2 * n);
  for (std::size_t p = 0; p < stack.count(); ++p)
    for (std::size_t i = 0; i < n; ++i) {
      flows[p * 2 * n + i] = stack.fields[p].uv[2 * i];
      flows[p * 2 * n + n + i] = stack.fields[p].uv[2 * i + 1];
    }
  return classify_flows(model, flows, stack.count());
}

Prediction predict(const ClassifierModel& model, const video::VideoClip& clip,
                   const flow::FlowConfig& flow_config) {
  const auto planar = video::to_planar<float>(clip);
  return predict(model, planar, clip.geometry(), flow_config);
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw PreconditionError("train: learning rate must be > 0");
  if (epochs < 1) throw PreconditionError("train: epochs must be >= 1");
  if (batch_size < 1) throw PreconditionError("train: batch size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw PreconditionError("train: momentum must be in [0,1)");
}

std::vector<float> clip_flows(const video::VideoClip& clip, const flow::FlowConfig& flow_config) {
  const auto planar = video::to_planar<float>(clip);
  const auto& g = clip.geometry();
  const auto pairs = flow::pair_indices(g.frames, flow::Direction::Forward);
  const std::size_t fs = g.frame_size();
  std::vector<float> first(pairs.size() * fs), second(pairs.size() * fs);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    std::copy_n(planar.data() + pairs[p].first * fs, fs, first.data() + p * fs);
    std::copy_n(planar.data() + pairs[p].second * fs, fs, second.data() + p * fs);
  }
  std::vector<float> out(pairs.size() * 2 * g.height * g.width, 0.0f);
  flow_config.validate();
  flow::solve_pairs<float>(first, second, pairs.size(), g.channels, g.height, g.width,
                           flow_config, flow_config.iters_inference, out);
  return out;
}

ClassifierModel train(std::span<const TrainingSample> samples, const ModelGeometry& geometry,
                      const TrainConfig& config) {
  config.validate();
  if (samples.empty()) throw PreconditionError("train: empty dataset");
  for (const auto& s : samples) {
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= geometry.num_classes) {
      throw PreconditionError("train: label " + std::to_string(s.label) + " out of range");
    }
  }
  auto model = ClassifierModel::initialize(geometry, config.seed);
  auto params = model.parameters();
  std::vector<std::vector<float>> velocity;
  for (auto p : params) velocity.emplace_back(p.size(), 0.0f);

  std::vector<std::size_t> order(samples.size());
  const float lr = static_cast<float>(config.learning_rate);
  const float mu = static_cast<float>(config.momentum);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    util::Rng rng(util::child_seed(config.seed, static_cast<std::uint64_t>(epoch), 11));
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      grad::Graph32 graph;
      auto bound = bind(graph, model, true);
      DiffTensor<float> total;
      for (std::size_t b = start; b < end; ++b) {
        const auto& s = samples[order[b]];
        auto input = graph.constant({s.pairs, 2, geometry.height, geometry.width}, s.flows);
        auto ce = cross_entropy(forward(bound, geometry, input), s.label);
        total = total.valid() ? total + ce : ce;
      }
      auto loss = total / static_cast<float>(end - start);
      if (!std::isfinite(loss.item())) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                           " (learning rate " + std::to_string(config.learning_rate) +
                           " too high?)");
      }
      graph.backward(loss);
      const auto leaves = bound.all();
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto g = leaves[k].grad();
        for (std::size_t i = 0; i < params[k].size(); ++i) {
          velocity[k][i] = mu * velocity[k][i] + g[i];
          params[k][i] -= lr * velocity[k][i];
        }
      }
    }
  }
  std::size_t correct = 0;
  for (const auto& s : samples)
    if (classify_flows(model, s.flows, s.pairs).label == s.label) ++correct;
  model.train_accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  return model;
}

ClassifierModel train(const video::Dataset& dataset, const TrainConfig& train_config,
                      const flow::FlowConfig& flow_config, unsigned workers) {
  if (dataset.records.empty()) throw PreconditionError("train: empty dataset");
  std::vector<TrainingSample> samples(dataset.records.size());
  util::parallel_for(samples.size(), workers, [&](std::size_t i) {
    const auto& rec = dataset.records[i];
    if (!rec.clip.label()) throw PreconditionError("train: unlabeled clip " + rec.clip.id());
    samples[i].flows = clip_flows(rec.clip, flow_config);
    samples[i].pairs = rec.clip.geometry().frames - 1;
    samples[i].label = *rec.clip.label();
  });
  const auto& g = dataset.spec.geometry;
  ModelGeometry geometry{g.frames, g.height, g.width, video::kNumClasses};
  auto model = train(samples, geometry, train_config);
  model.class_names.assign(video::class_names().begin(), video::class_names().end());
  return model;
}

void save_model(const ClassifierModel& model, const std::filesystem::path& path) {
  util::ByteWriter w;
  w.bytes(kModelMagic);
  w.u32(kModelFormatVersion);
  w.u32(static_cast<std::uint32_t>(model.geometry.frames));
  w.u32(static_cast<std::uint32_t>(model.geometry.height));
  w.u32(static_cast<std::uint32_t>(model.geometry.width));
  w.u32(static_cast<std::uint32_t>(model.geometry.num_classes));
  w.u64(model.train_seed);
  w.f64(model.train_accuracy);
  w.u32(static_cast<std::uint32_t>(model.class_names.size()));
  for (const auto& name : model.class_names) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
  }
  w.u32(static_cast<std::uint32_t>(model.parameter_count()));
  for (auto p : model.parameters()) w.f32s(p);
  util::write_file_atomic(path, w.data());
}

ClassifierModel load_model(const std::filesystem::path& path, std::optional<ModelGeometry> expected) {
  util::ByteReader r(util::read_file(path));
  if (r.remaining() < kModelMagic.size() || r.bytes(kModelMagic.size(), "magic") != kModelMagic) {
    throw BadMagicError(path.string() + ": not a model file");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kModelFormatVersion) {
    throw VersionError(path.string() + ": unsupported model version " + std::to_string(version));
  }
  ModelGeometry g;
  g.frames = r.u32("header");
  g.height = r.u32("header");
  g.width = r.u32("header");
  g.num_classes = r.u32("header");
  if (g.frames < 2 || g.height < 3 || g.width < 3 || g.num_classes < 2) {
    throw GeometryError(path.string() + ": invalid model geometry");
  }
  if (expected && *expected != g) {
    throw GeometryError(path.string() + ": model geometry " + std::to_string(g.height) + "x" +
                        std::to_string(g.width) + " does not match pipeline " +
                        std::to_string(expected->height) + "x" + std::to_string(expected->width));
  }
  auto model = ClassifierModel::initialize(g, 0);
  model.train_seed = r.u64("header");
  model.train_accuracy = r.f64("header");
  const std::uint32_t names = r.u32("class names");
  if (names > g.num_classes) throw GeometryError(path.string() + ": too many class names");
  for (std::uint32_t i = 0; i < names; ++i) {
    const std::uint32_t len = r.u32("class names");
    model.class_names.push_back(r.bytes(len, "class names"));
  }
  const std::uint32_t count = r.u32("parameter count");
  if (count != model.parameter_count()) {
    throw GeometryError(path.string() + ": parameter count " + std::to_string(count) +
                        " does not match architecture (" +
                        std::to_string(model.parameter_count()) + ")");
  }
  for (auto p : model.parameters()) {
    auto values = r.f32s(p.size(), "parameters");
    std::copy(values.begin(), values.end(), p.begin());
  }
  return model;
}

#define MCD_INSTANTIATE_MODEL(Real)                                                         \
  template BoundModel<Real> bind(grad::Graph<Real>&, const ClassifierModel&, bool);         \
  template DiffTensor<Real> forward(const BoundModel<Real>&, const ModelGeometry&,          \
                                    const DiffTensor<Real>&);                               \
  template DiffTensor<Real> cross_entropy(const DiffTensor<Real>&, int);

MCD_INSTANTIATE_MODEL(float)
MCD_INSTANTIATE_MODEL(double)

}  // namespace mcd::classifier
