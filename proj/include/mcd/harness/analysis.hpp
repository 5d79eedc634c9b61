#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mcd/flow/estimator.hpp"
#include "mcd/video/clip.hpp"

namespace mcd::harness {

struct NamedValues {
  std::string name;
  std::vector<double> values;
};

// Shared equal-width bins over the pooled range of every condition.
struct Histogram {
  std::vector<double> edges;  // bins + 1 ascending edges
  std::vector<NamedValues> conditions;
  std::vector<std::vector<std::size_t>> counts;  // [condition][bin]
};

// Requires >= 2 conditions, each non-empty, and bins >= 1. The last bin is
// closed on the right so every value is counted.
Histogram loss_histogram(const std::vector<NamedValues>& conditions, std::size_t bins);
std::string histogram_csv(const Histogram& histogram);

// Grouped bar chart, one colour per condition, as an RGB [H,W,3] raster in
// [0,1]. Bars are scaled to the largest count.
std::vector<float> render_histogram(const Histogram& histogram, std::size_t height,
                                    std::size_t width);

// Probability that a random `positive` score exceeds a random `negative`
// one, ties counting half.
double auroc(const std::vector<double>& negative, const std::vector<double>& positive);

struct PanelRow {
  std::string name;
  std::vector<float> planar;  // [T,C,H,W]
};

// Writes frames.ppm (RGB frames of the first condition), flow_<name>.ppm for
// every condition and panel.ppm stacking them, each row holding the first
// `columns` frame pairs. Flow colours share one magnitude scale. Returns the
// written paths.
std::vector<std::filesystem::path> viz_flow_panel(const video::ClipGeometry& geometry,
                                                  const std::vector<PanelRow>& conditions,
                                                  const flow::FlowConfig& flow_config,
                                                  const std::filesystem::path& directory,
                                                  std::size_t columns = 4);

}  // namespace mcd::harness
