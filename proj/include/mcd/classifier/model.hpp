#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mcd/flow/estimator.hpp"
#include "mcd/grad/graph.hpp"
#include "mcd/video/dataset.hpp"

namespace mcd::classifier {

struct ModelGeometry {
  std::size_t frames = 16;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t num_classes = 8;
  bool operator==(const ModelGeometry&) const = default;
};

inline constexpr std::size_t kConv1Out = 8;
inline constexpr std::size_t kConv2Out = 16;
inline constexpr std::size_t kKernel = 3;

// conv1 8x2x3x3 (stride 2, pad 1) -> relu -> conv2 16x8x3x3 (stride 2, pad 1)
// -> relu -> spatial mean -> mean over fields -> linear head. head_w is
// [num_classes][16].
struct ClassifierModel {
  ModelGeometry geometry;
  std::vector<std::string> class_names;
  std::uint64_t train_seed = 0;
  double train_accuracy = 0.0;

  std::vector<float> conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias.
  static ClassifierModel initialize(const ModelGeometry& geometry, std::uint64_t seed);

  std::vector<std::span<float>> parameters();
  std::vector<std::span<const float>> parameters() const;
  std::size_t parameter_count() const;
  bool operator==(const ClassifierModel&) const = default;
};

template <typename Real>
struct BoundModel {
  grad::DiffTensor<Real> conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b;
  std::vector<grad::DiffTensor<Real>> all() const {
    return {conv1_w, conv1_b, conv2_w, conv2_b, head_w, head_b};
  }
};

// Places the parameters on a graph as leaves.
template <typename Real>
BoundModel<Real> bind(grad::Graph<Real>& graph, const ClassifierModel& model, bool requires_grad);

// flows [P,2,H,W] -> logits [num_classes]. Throws GeometryError when H, W
// differ from the model geometry.
template <typename Real>
grad::DiffTensor<Real> forward(const BoundModel<Real>& params, const ModelGeometry& geometry,
                               const grad::DiffTensor<Real>& flows);

// -log softmax(logits)[label], stabilized by a constant max shift.
template <typename Real>
grad::DiffTensor<Real> cross_entropy(const grad::DiffTensor<Real>& logits, int label);

std::vector<double> softmax(std::span<const float> logits);

struct Prediction {
  int label = 0;  // argmax, lowest index on ties
  std::vector<double> probabilities;
  std::vector<float> logits;
};

// Forward flows at full quality, then the classifier.
Prediction predict(const ClassifierModel& model, const video::VideoClip& clip,
                   const flow::FlowConfig& flow_config);
Prediction predict(const ClassifierModel& model, std::span<const float> planar,
                   const video::ClipGeometry& geometry, const flow::FlowConfig& flow_config);
// Classifier only, on precomputed planar flows [P,2,H,W].
Prediction classify_flows(const ClassifierModel& model, std::span<const float> flows,
                          std::size_t pairs);

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  int epochs = 30;
  int batch_size = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainingSample {
  std::vector<float> flows;  // [P,2,H,W]
  std::size_t pairs = 0;
  int label = 0;
};

// Planar forward flows of a clip at full quality, [P,2,H,W].
std::vector<float> clip_flows(const video::VideoClip& clip, const flow::FlowConfig& flow_config);

// Mini-batch SGD with momentum on mean cross-entropy. Batches follow a
// seeded shuffle per epoch. Throws NumericError on a non-finite loss.
ClassifierModel train(std::span<const TrainingSample> samples, const ModelGeometry& geometry,
                      const TrainConfig& config);
ClassifierModel train(const video::Dataset& dataset, const TrainConfig& train_config,
                      const flow::FlowConfig& flow_config, unsigned workers = 1);

// VMDL: "VMDL", u32 version, u32 frames, height, width, num_classes, u64
// train seed, f64 train accuracy, class names (u32 count, then u32 length
// and bytes each), u32 parameter count, float32 parameters. All LE.
inline constexpr std::uint32_t kModelFormatVersion = 1;
void save_model(const ClassifierModel& model, const std::filesystem::path& path);
// Throws GeometryError if `expected` is given and differs from the file.
ClassifierModel load_model(const std::filesystem::path& path,
                           std::optional<ModelGeometry> expected = std::nullopt);

}  // namespace mcd::classifier
