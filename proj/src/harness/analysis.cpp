#include "mcd/harness/analysis.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <fmt/format.h>

#include "mcd/error.hpp"
#include "mcd/util/binary_io.hpp"

namespace mcd::harness {

namespace {

constexpr std::array<std::array<float, 3>, 6> kPalette{{
    {0.12f, 0.47f, 0.71f},
    {0.84f, 0.15f, 0.16f},
    {0.17f, 0.63f, 0.17f},
    {1.00f, 0.50f, 0.05f},
    {0.58f, 0.40f, 0.74f},
    {0.55f, 0.34f, 0.29f},
}};

// Copies an [h,w,3] tile into an [H,W,3] canvas at (top, left).
void blit(std::vector<float>& canvas, std::size_t canvas_width, std::span<const float> tile,
          std::size_t h, std::size_t w, std::size_t top, std::size_t left) {
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(tile.data() + y * w * 3, w * 3,
                canvas.data() + ((top + y) * canvas_width + left) * 3);
}

std::vector<float> frame_rgb(std::span<const float> planar, const video::ClipGeometry& g,
                             std::size_t t) {
  const std::size_t hw = g.height * g.width;
  std::vector<float> rgb(hw * 3);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      rgb[p * 3 + c] = planar[(t * g.channels + std::min(c, g.channels - 1)) * hw + p];
  return rgb;
}

}  // namespace

Histogram loss_histogram(const std::vector<NamedValues>& conditions, std::size_t bins) {
  if (conditions.size() < 2) throw PreconditionError("loss_histogram: need >= 2 conditions");
  if (bins == 0) throw PreconditionError("loss_histogram: bins must be >= 1");
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& c : conditions) {
    if (c.values.empty()) throw PreconditionError("loss_histogram: condition '" + c.name + "' is empty");
    for (double v : c.values) {
      if (!std::isfinite(v)) throw PreconditionError("loss_histogram: non-finite value");
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi == lo) hi = lo + 1.0;
  Histogram h;
  h.conditions = conditions;
  for (std::size_t b = 0; b <= bins; ++b)
    h.edges.push_back(b == bins ? hi : lo + (hi - lo) * static_cast<double>(b) / bins);
  for (const auto& c : conditions) {
    std::vector<std::size_t> counts(bins, 0);
    for (double v : c.values) {
      auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
      ++counts[std::min(b, bins - 1)];
    }
    h.counts.push_back(std::move(counts));
  }
  return h;
}

std::string histogram_csv(const Histogram& h) {
  std::string out = "bin_lo,bin_hi";
  for (const auto& c : h.conditions) out += "," + c.name;
  out += "\n";
  for (std::size_t b = 0; b + 1 < h.edges.size(); ++b) {
    out += fmt::format("{:.6g},{:.6g}", h.edges[b], h.edges[b + 1]);
    for (const auto& counts : h.counts) out += fmt::format(",{}", counts[b]);
    out += "\n";
  }
  return out;
}

std::vector<float> render_histogram(const Histogram& h, std::size_t height, std::size_t width) {
  const std::size_t bins = h.edges.size() - 1;
  const std::size_t n = h.conditions.size();
  if (height < 8 || width < bins * (n + 1)) throw PreconditionError("render_histogram: raster too small");
  std::vector<float> img(height * width * 3, 1.0f);
  std::size_t peak = 1;
  for (const auto& counts : h.counts)
    for (auto c : counts) peak = std::max(peak, c);
  const std::size_t axis = height - 2;  // baseline row
  for (std::size_t x = 0; x < width; ++x)
    for (std::size_t c = 0; c < 3; ++c) img[(axis * width + x) * 3 + c] = 0.0f;
  // Each bin slot holds n bars followed by one blank column group.
  const std::size_t slot = width / bins;
  const std::size_t bar = std::max<std::size_t>(1, slot / (n + 1));
  for (std::size_t b = 0; b < bins; ++b) {
    for (std::size_t k = 0; k < n; ++k) {
      const auto bar_height = static_cast<std::size_t>(
          std::lround(static_cast<double>(h.counts[k][b]) / peak * static_cast<double>(axis - 1)));
      const auto& color = kPalette[k % kPalette.size()];
      const std::size_t left = b * slot + k * bar;
      for (std::size_t y = axis - bar_height; y < axis; ++y)
        for (std::size_t x = left; x < std::min(left + bar, width); ++x)
          for (std::size_t c = 0; c < 3; ++c) img[(y * width + x) * 3 + c] = color[c];
    }
  }
  return img;
}

double auroc(const std::vector<double>& negative, const std::vector<double>& positive) {
  if (negative.empty() || positive.empty()) throw PreconditionError("auroc: empty class");
  double wins = 0.0;
  for (double p : positive)
    for (double q : negative) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
  return wins / (static_cast<double>(negative.size()) * static_cast<double>(positive.size()));
}

std::vector<std::filesystem::path> viz_flow_panel(const video::ClipGeometry& g,
                                                  const std::vector<PanelRow>& conditions,
                                                  const flow::FlowConfig& flow_config,
                                                  const std::filesystem::path& directory,
                                                  std::size_t columns) {
  if (conditions.empty()) throw PreconditionError("viz_flow_panel: no conditions");
  columns = std::min(columns, g.frames - 1);
  if (columns == 0) throw PreconditionError("viz_flow_panel: need >= 1 column");
  std::filesystem::create_directories(directory);
  std::vector<flow::FlowStack> stacks;
  double peak = 0.0;
  for (const auto& row : conditions) {
    if (row.planar.size() != g.size()) throw PreconditionError("viz_flow_panel: size mismatch");
    stacks.push_back(flow::estimate_clip(row.planar, g, flow::Direction::Forward, flow_config));
    for (std::size_t t = 0; t < columns; ++t) {
      const auto& uv = stacks.back().fields[t].uv;
      for (std::size_t i = 0; i < uv.size(); i += 2) 
        peak = std::max(peak, std::hypot(double(uv[i]), double(uv[i + 1])));
    }
  }
  const std::optional<double> scale = peak > 0.0 ? std::optional(peak) : std::nullopt;
  const std::size_t row_width = columns * g.width;
  std::vector<std::filesystem::path> written;
  std::vector<float> panel((conditions.size() + 1) * g.height * row_width * 3);
  auto write_row = [&](const std::string& file, std::size_t panel_row, auto&& tile_of) {
    std::vector<float> row(g.height * row_width * 3);
    for (std::size_t t = 0; t < columns; ++t) {
      const auto tile = tile_of(t);
      blit(row, row_width, tile, g.height, g.width, 0, t * g.width);
      blit(panel, row_width, tile, g.height, g.width, panel_row * g.height, t * g.width);
    }
    video::write_ppm(directory / file, g.height, row_width, row);
    written.push_back(directory / file);
  };
  write_row("frames.ppm", 0, [&](std::size_t t) { return frame_rgb(conditions[0].planar, g, t); });
  for (std::size_t k = 0; k < conditions.size(); ++k) {
    write_row("flow_" + conditions[k].name + ".ppm", k + 1,
              [&](std::size_t t) { return flow::flow_to_color(stacks[k].fields[t], scale); });
  }
  video::write_ppm(directory / "panel.ppm", (conditions.size() + 1) * g.height, row_width, panel);
  written.push_back(directory / "panel.ppm");
  return written;
}

}  // namespace mcd::harness
