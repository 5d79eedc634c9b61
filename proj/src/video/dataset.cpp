#include "mcd/video/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include <nlohmann/json.hpp>

#include "mcd/error.hpp"
#include "mcd/flow/io.hpp"
#include "mcd/util/binary_io.hpp"
#include "mcd/util/parallel.hpp"
#include "mcd/util/rng.hpp"

namespace mcd::video {

namespace {

using nlohmann::json;

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

// Same interpolation rule as the differentiable sampler.
float sample(std::span<const float> plane, long h, long w, double x, double y) {
  const double xc = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const double yc = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const long x0 = std::min(static_cast<long>(std::floor(xc)), w - 2);
  const long y0 = std::min(static_cast<long>(std::floor(yc)), h - 2);
  const double ax = xc - static_cast<double>(x0);
  const double ay = yc - static_cast<double>(y0);
  auto at = [&](long yy, long xx) { return static_cast<double>(plane[yy * w + xx]); };
  const double top = (1.0 - ax) * at(y0, x0) + ax * at(y0, x0 + 1);
  const double bot = (1.0 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1);
  return static_cast<float>((1.0 - ay) * top + ay * bot);
}

std::vector<double> gaussian_kernel(double sigma) {
  const long r = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (long i = -r; i <= r; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = v;
    total += v;
  }
  for (auto& v : k) v /= total;
  return k;
}

json motion_json(const Motion& m) {
  return {{"class", class_names()[static_cast<int>(m.cls)]},
          {"class_index", static_cast<int>(m.cls)},
          {"magnitude", m.magnitude}};
}

json spec_json(const DatasetSpec& s) {
  return {{"frames", s.geometry.frames},
          {"height", s.geometry.height},
          {"width", s.geometry.width},
          {"channels", s.geometry.channels},
          {"clips_per_class", s.clips_per_class},
          {"texture_seed", s.texture_seed},
          {"shift_range", s.shift_range},
          {"angle_range", s.angle_range},
          {"scale_range", s.scale_range},
          {"texture_sigma", s.texture_sigma},
          {"texture_contrast", s.texture_contrast},
          {"margin", s.margin}};
}

DatasetSpec spec_from_json(const json& j) {
  DatasetSpec s;
  s.geometry.frames = j.at("frames").get<std::size_t>();
  s.geometry.height = j.at("height").get<std::size_t>();
  s.geometry.width = j.at("width").get<std::size_t>();
  s.geometry.channels = j.at("channels").get<std::size_t>();
  s.clips_per_class = j.at("clips_per_class").get<int>();
  s.texture_seed = j.at("texture_seed").get<std::uint64_t>();
  s.shift_range = j.at("shift_range").get<std::array<double, 2>>();
  s.angle_range = j.at("angle_range").get<std::array<double, 2>>();
  s.scale_range = j.at("scale_range").get<std::array<double, 2>>();
  s.texture_sigma = j.at("texture_sigma").get<double>();
  s.texture_contrast = j.at("texture_contrast").get<double>();
  s.margin = j.at("margin").get<std::size_t>();
  return s;
}

}  // namespace

const std::array<std::string, kNumClasses>& class_names() {
  static const std::array<std::string, kNumClasses> names{
      "translate-E", "translate-N", "translate-W", "translate-S",
      "rotate-CW",   "rotate-CCW",  "zoom-in",     "zoom-out"};
  return names;
}

std::array<double, 2> Motion::advance(double x, double y, int k, std::size_t height,
                                      std::size_t width) const {
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double kk = static_cast<double>(k);
  switch (cls) {
    case MotionClass::TranslateE: return {x + kk * magnitude, y};
    case MotionClass::TranslateN: return {x, y - kk * magnitude};
    case MotionClass::TranslateW: return {x - kk * magnitude, y};
    case MotionClass::TranslateS: return {x, y + kk * magnitude};
    case MotionClass::RotateCW:
    case MotionClass::RotateCCW: {
      const double sign = cls == MotionClass::RotateCW ? 1.0 : -1.0;
      const double a = sign * deg2rad(magnitude) * kk;
      const double dx = x - cx;
      const double dy = y - cy;
      return {cx + dx * std::cos(a) - dy * std::sin(a), cy + dx * std::sin(a) + dy * std::cos(a)};
    }
    case MotionClass::ZoomIn:
    case MotionClass::ZoomOut: {
      const double rate = cls == MotionClass::ZoomIn ? 1.0 + magnitude : 1.0 - magnitude;
      const double s = std::pow(rate, kk);
      return {cx + (x - cx) * s, cy + (y - cy) * s};
    }
  }
  return {x, y};
}

void DatasetSpec::validate() const {
  if (geometry.frames < 2) throw PreconditionError("dataset: T must be >= 2");
  if (geometry.height < 3 || geometry.width < 3) throw PreconditionError("dataset: H, W must be >= 3");
  if (geometry.channels != 1 && geometry.channels != 3) {
    throw PreconditionError("dataset: C must be 1 or 3");
  }
  if (clips_per_class < 1) throw PreconditionError("dataset: clips_per_class must be >= 1");
  for (const auto* r : {&shift_range, &angle_range, &scale_range}) {
    if ((*r)[0] < 0.0 || (*r)[1] < (*r)[0]) throw PreconditionError("dataset: invalid magnitude range");
  }
  if (scale_range[1] >= 1.0) throw PreconditionError("dataset: scale change must be < 1");
  if (!(texture_sigma > 0.0) || !(texture_contrast > 0.0)) {
    throw PreconditionError("dataset: texture sigma and contrast must be positive");
  }
}

std::vector<float> render_texture(const DatasetSpec& spec, std::uint64_t seed) {
  const auto kernel = gaussian_kernel(spec.texture_sigma);
  const std::size_t r = kernel.size() / 2;
  const std::size_t ch = spec.geometry.height + 2 * spec.margin;
  const std::size_t cw = spec.geometry.width + 2 * spec.margin;
  const std::size_t nh = ch + 2 * r;
  const std::size_t nw = cw + 2 * r;
  const std::size_t channels = spec.geometry.channels;
  util::Rng rng(seed);
  std::vector<double> out(channels * ch * cw);
  std::vector<double> noise(nh * nw);
  std::vector<double> rows(nh * cw);
  for (std::size_t c = 0; c < channels; ++c) {
    for (auto& v : noise) v = rng.normal();
    for (std::size_t y = 0; y < nh; ++y)
      for (std::size_t x = 0; x < cw; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * noise[y * nw + x + k];
        rows[y * cw + x] = acc;
      }
    for (std::size_t y = 0; y < ch; ++y)
      for (std::size_t x = 0; x < cw; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * rows[(y + k) * cw + x];
        out[(c * ch + y) * cw + x] = acc;
      }
  }
  double mean = 0.0;
  for (double v : out) mean += v;
  mean /= static_cast<double>(out.size());
  double var = 0.0;
  for (double v : out) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(out.size()));
  std::vector<float> canvas(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = 0.5 + (out[i] - mean) / sd * spec.texture_contrast;
    canvas[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return canvas;
}

flow::FlowField ground_truth_flow(const Motion& motion, std::size_t height, std::size_t width) {
  flow::FlowField f(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const double px = static_cast<double>(x);
      const double py = static_cast<double>(y);
      const auto q = motion.advance(px, py, 1, height, width);
      f.uv[(y * width + x) * 2] = static_cast<float>(q[0] - px);
      f.uv[(y * width + x) * 2 + 1] = static_cast<float>(q[1] - py);
    }
  return f;
}

ClipRecord render_clip(const DatasetSpec& spec, const Motion& motion, std::uint64_t texture_seed,
                       std::string id) {
  spec.validate();
  const auto& g = spec.geometry;
  const double m = static_cast<double>(spec.margin);
  // Affine motions reach their largest displacement at the frame corners.
  for (std::size_t t = 0; t < g.frames; ++t) {
    for (double cy : {0.0, static_cast<double>(g.height - 1)})
      for (double cx : {0.0, static_cast<double>(g.width - 1)}) {
        const auto q = motion.advance(cx, cy, -static_cast<int>(t), g.height, g.width);
        if (std::abs(q[0] - cx) > m || std::abs(q[1] - cy) > m) {
          throw PreconditionError("dataset: canvas margin " + std::to_string(spec.margin) +
                                  " too small for " + class_names()[static_cast<int>(motion.cls)] +
                                  " magnitude " + std::to_string(motion.magnitude) + " over " +
                                  std::to_string(g.frames) + " frames");
        }
      }
  }
  const auto canvas = render_texture(spec, texture_seed);
  const long ch = static_cast<long>(g.height + 2 * spec.margin);
  const long cw = static_cast<long>(g.width + 2 * spec.margin);
  std::vector<float> values(g.size());
  for (std::size_t t = 0; t < g.frames; ++t)
    for (std::size_t y = 0; y < g.height; ++y)
      for (std::size_t x = 0; x < g.width; ++x) {
        const auto q = motion.advance(static_cast<double>(x), static_cast<double>(y),
                                      -static_cast<int>(t), g.height, g.width);
        for (std::size_t c = 0; c < g.channels; ++c) {
          std::span<const float> plane(canvas.data() + c * ch * cw, ch * cw);
          values[((t * g.height + y) * g.width + x) * g.channels + c] =
              sample(plane, ch, cw, q[0] + m, q[1] + m);
        }
      }
  ClipRecord rec;
  rec.clip = VideoClip(g, std::move(values), std::move(id), static_cast<int>(motion.cls));
  rec.motion = motion;
  rec.seed = texture_seed;
  rec.ground_truth = ground_truth_flow(motion, g.height, g.width);
  return rec;
}

ClipRecord generate_clip(const DatasetSpec& spec, std::uint64_t seed, std::size_t index) {
  const std::uint64_t base = util::child_seed(seed, index);
  util::Rng motion_rng(util::child_seed(base, 0, 2));
  Motion motion;
  motion.cls = static_cast<MotionClass>(static_cast<int>(index % kNumClasses));
  const int c = static_cast<int>(motion.cls);
  const auto& range = c < 4 ? spec.shift_range : (c < 6 ? spec.angle_range : spec.scale_range);
  motion.magnitude = motion_rng.uniform(range[0], range[1]);
  const std::uint64_t texture_seed = util::child_seed(base ^ spec.texture_seed, 0, 1);
  char id[32];
  std::snprintf(id, sizeof id, "clip%05zu", index);
  auto rec = render_clip(spec, motion, texture_seed, id);
  rec.seed = base;
  return rec;
}

Dataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed, unsigned workers) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.records.resize(spec.num_clips());
  util::parallel_for(ds.records.size(), workers,
                     [&](std::size_t i) { ds.records[i] = generate_clip(spec, seed, i); });
  return ds;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& directory) {
  std::error_code ec;
  std::filesystem::create_directories(directory, ec);
  if (ec) throw IoError("cannot create " + directory.string() + ": " + ec.message());
  json clips = json::array();
  for (const auto& rec : dataset.records) {
    const std::string clip_file = rec.clip.id() + ".vclip";
    const std::string flow_file = rec.clip.id() + ".gt.flo";
    save_clip(rec.clip, directory / clip_file);
    flow::save_flo(rec.ground_truth, directory / flow_file);
    clips.push_back({{"id", rec.clip.id()},
                     {"path", clip_file},
                     {"ground_truth", flow_file},
                     {"label", *rec.clip.label()},
                     {"motion", motion_json(rec.motion)},
                     {"seed", rec.seed}});
  }
  json manifest{{"format", "mcd-dataset"},
                {"version", 1},
                {"seed", dataset.seed},
                {"spec", spec_json(dataset.spec)},
                {"classes", class_names()},
                {"clips", clips}};
  util::write_file_atomic(directory / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& directory) {
  json manifest;
  try {
    manifest = json::parse(util::read_file(directory / "manifest.json"));
  } catch (const json::exception& e) {
    throw FormatError((directory / "manifest.json").string() + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.spec = spec_from_json(manifest.at("spec"));
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& c : manifest.at("clips")) {
      ClipRecord rec;
      rec.clip = load_clip(directory / c.at("path").get<std::string>());
      if (rec.clip.geometry() != ds.spec.geometry) {
        throw GeometryError(c.at("path").get<std::string>() + ": geometry differs from manifest");
      }
      rec.clip.set_id(c.at("id").get<std::string>());
      rec.clip.set_label(c.at("label").get<int>());
      rec.motion.cls = static_cast<MotionClass>(c.at("motion").at("class_index").get<int>());
      rec.motion.magnitude = c.at("motion").at("magnitude").get<double>();
      rec.seed = c.at("seed").get<std::uint64_t>();
      rec.ground_truth = flow::load_flo(directory / c.at("ground_truth").get<std::string>());
      ds.records.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw FormatError((directory / "manifest.json").string() + ": " + e.what());
  }
  return ds;
}

}  // namespace mcd::video
