#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "mcd/error.hpp"
#include "mcd/loss/motion_loss.hpp"
#include "mcd/util/binary_io.hpp"
#include "mcd/video/dataset.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace mcd;
using namespace mcd::video;

namespace {

DatasetSpec small_spec() {
  DatasetSpec s;
  s.geometry = {4, 24, 24, 3};
  s.clips_per_class = 2;
  return s;
}

VideoClip random_clip(std::uint64_t seed) {
  ClipGeometry g{3, 5, 4, 3};
  const auto v = test::uniform_values(g.size(), 0.0, 1.0, seed);
  return VideoClip(g, std::vector<float>(v.begin(), v.end()), "rnd", 2);
}

}  // namespace

TEST_CASE("clip construction validates geometry and range") {
  ClipGeometry g{2, 2, 2, 1};
  CHECK_NOTHROW(VideoClip(g, std::vector<float>(8, 0.5f)));
  CHECK_THROWS_AS(VideoClip({1, 2, 2, 1}, std::vector<float>(4, 0.5f)), PreconditionError);
  CHECK_THROWS_AS(VideoClip(g, std::vector<float>(7, 0.5f)), PreconditionError);
  auto bad = std::vector<float>(8, 0.5f);
  bad[3] = 1.5f;
  CHECK_THROWS_AS(VideoClip(g, bad), ValueRangeError);
  bad[3] = NAN;
  CHECK_THROWS_AS(VideoClip(g, bad), ValueRangeError);
}

TEST_CASE("planar conversion round-trips") {
  const auto clip = random_clip(1);
  const auto planar = to_planar<float>(clip);
  const auto& g = clip.geometry();
  CHECK(planar[((1 * g.channels + 2) * g.height + 3) * g.width + 1] == clip.at(1, 3, 1, 2));
  CHECK(from_planar<float>(clip, planar) == clip);
}

TEST_CASE("static degenerate motion gives identical frames and zero flow") {
  auto spec = small_spec();
  for (auto cls : {MotionClass::TranslateE, MotionClass::RotateCW, MotionClass::ZoomIn}) {
    const auto rec = render_clip(spec, Motion{cls, 0.0}, 5, "static");
    const auto& g = rec.clip.geometry();
    const auto v = rec.clip.values();
    for (std::size_t t = 1; t < g.frames; ++t)
      for (std::size_t i = 0; i < g.frame_size(); ++i) REQUIRE(v[t * g.frame_size() + i] == v[i]);
    for (float f : rec.ground_truth.uv) CHECK(f == 0.0f);
  }
}

TEST_CASE("translate-E ground truth is the constant shift") {
  const auto f = ground_truth_flow(Motion{MotionClass::TranslateE, 2.0}, 16, 16);
  for (std::size_t i = 0; i < 16 * 16; ++i) {
    CHECK(f.uv[2 * i] == 2.0f);
    CHECK(f.uv[2 * i + 1] == 0.0f);
  }
  const auto n = ground_truth_flow(Motion{MotionClass::TranslateN, 1.5}, 8, 8);
  CHECK(n.uv[1] == -1.5f);
}

TEST_CASE("dataset generation is deterministic and balanced") {
  const auto spec = small_spec();
  const auto a = generate_dataset(spec, 9, 1);
  const auto b = generate_dataset(spec, 9, 3);
  REQUIRE(a.records.size() == spec.num_clips());
  std::array<int, kNumClasses> count{};
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].clip == b.records[i].clip);
    CHECK(a.records[i].ground_truth.uv == b.records[i].ground_truth.uv);
    ++count[static_cast<std::size_t>(*a.records[i].clip.label())];
  }
  for (int c : count) CHECK(c == spec.clips_per_class);
}

TEST_CASE("mean intensity carries no label information") {
  DatasetSpec spec;
  spec.geometry = {4, 32, 32, 3};
  spec.clips_per_class = 50;
  const auto d = generate_dataset(spec, 17, 1);
  std::vector<double> mean, label;
  for (const auto& r : d.records) {
    double m = 0.0;
    for (float v : r.clip.values()) m += v;
    mean.push_back(m / static_cast<double>(r.clip.values().size()));
    label.push_back(*r.clip.label());
  }
  auto avg = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double ma = avg(mean), la = avg(label);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    sxy += (mean[i] - ma) * (label[i] - la);
    sxx += (mean[i] - ma) * (mean[i] - ma);
    syy += (label[i] - la) * (label[i] - la);
  }
  CHECK(std::abs(sxy / std::sqrt(sxx * syy)) < 0.1);
}

TEST_CASE("warping the next frame by ground truth reproduces the current frame") {
  // Bilinear resampling of the texture is only accurate to 1e-3 when the
  // texture is smooth relative to the pixel grid.
  DatasetSpec spec;
  spec.geometry = {3, 32, 32, 3};
  spec.texture_sigma = 8.0;
  spec.texture_contrast = 0.1;
  for (int c = 0; c < kNumClasses; ++c) {
    const auto cls = static_cast<MotionClass>(c);
    const double magnitude = c < 4 ? 1.5 : (c < 6 ? 1.5 : 0.015);
    const auto rec = render_clip(spec, Motion{cls, magnitude}, 40 + c, "w");
    const auto& g = rec.clip.geometry();
    const auto planar = to_planar<double>(rec.clip);
    const std::size_t n = g.height * g.width;
    std::vector<double> flows(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
      flows[i] = rec.ground_truth.uv[2 * i];
      flows[n + i] = rec.ground_truth.uv[2 * i + 1];
    }
    grad::Graph64 graph;
    for (std::size_t t = 0; t + 1 < g.frames; ++t) {
      std::vector<double> next(planar.begin() + (t + 1) * g.channels * n,
                               planar.begin() + (t + 2) * g.channels * n);
      auto warped = loss::warp_backward(graph.constant({1, g.channels, g.height, g.width}, next),
                                        graph.constant({1, 2, g.height, g.width}, flows));
      double err = 0.0;
      std::size_t count = 0;
      for (std::size_t y = 0; y < g.height; ++y)
        for (std::size_t x = 0; x < g.width; ++x) {
          const double sx = x + flows[y * g.width + x], sy = y + flows[n + y * g.width + x];
          if (sx < 0 || sy < 0 || sx > g.width - 1.0 || sy > g.height - 1.0) continue;
          for (std::size_t ch = 0; ch < g.channels; ++ch) {
            const std::size_t i = ch * n + y * g.width + x;
            err += std::abs(warped.value()[i] - planar[t * g.channels * n + i]);
            ++count;
          }
        }
      CHECK_MESSAGE(err / static_cast<double>(count) < 1e-3, class_names()[c]);
    }
  }
}

TEST_CASE("clip files round-trip bit-exactly") {
  test::TempDir dir;
  const auto clip = random_clip(3);
  save_clip(clip, dir / "a.vclip");
  const auto back = load_clip(dir / "a.vclip");
  CHECK(back.geometry() == clip.geometry());
  CHECK(std::memcmp(back.values().data(), clip.values().data(), clip.values().size() * 4) == 0);
  const auto raw = util::read_file(dir / "a.vclip");
  CHECK(raw.substr(0, 4) == "VCLP");
  CHECK(raw.size() == 4 + 5 * 4 + clip.values().size() * 4);
}

TEST_CASE("malformed clip files raise the named errors") {
  test::TempDir dir;
  const auto clip = random_clip(4);
  save_clip(clip, dir / "good.vclip");
  auto raw = util::read_file(dir / "good.vclip");

  auto bad_magic = raw;
  bad_magic[0] = 'X';
  util::write_file_atomic(dir / "magic.vclip", bad_magic);
  CHECK_THROWS_AS(load_clip(dir / "magic.vclip"), BadMagicError);

  util::write_file_atomic(dir / "short.vclip", raw.substr(0, raw.size() - 3));
  CHECK_THROWS_AS(load_clip(dir / "short.vclip"), TruncatedError);

  auto version = raw;
  version[4] = 9;
  util::write_file_atomic(dir / "version.vclip", version);
  CHECK_THROWS_AS(load_clip(dir / "version.vclip"), VersionError);

  auto geometry = raw;
  std::memset(geometry.data() + 8, 0, 4);  // T = 0
  util::write_file_atomic(dir / "geometry.vclip", geometry);
  CHECK_THROWS_AS(load_clip(dir / "geometry.vclip"), GeometryError);

  auto range = raw;
  const float big = 2.0f;
  std::memcpy(range.data() + 24, &big, 4);
  util::write_file_atomic(dir / "range.vclip", range);
  CHECK_THROWS_AS(load_clip(dir / "range.vclip"), ValueRangeError);
  CHECK(load_array(dir / "range.vclip").second[0] == 2.0f);

  CHECK_THROWS_AS(load_clip(dir / "missing.vclip"), IoError);
}

TEST_CASE("frame export rounds half up") {
  CHECK(to_byte(0.0f) == 0);
  CHECK(to_byte(1.0f) == 255);
  CHECK(to_byte(0.5f) == 128);
  test::TempDir dir;
  ClipGeometry g{2, 2, 3, 3};
  std::vector<float> v(g.size(), 0.0f);
  std::fill(v.begin() + static_cast<long>(g.frame_size()), v.end(), 1.0f);
  export_frames(VideoClip(g, v), dir.path());
  const auto zero = util::read_file(dir / "frame_0000.ppm");
  const auto one = util::read_file(dir / "frame_0001.ppm");
  const std::string header = "P6\n3 2\n255\n";
  REQUIRE(zero.substr(0, header.size()) == header);
  for (std::size_t i = header.size(); i < zero.size(); ++i) CHECK(zero[i] == '\0');
  for (std::size_t i = header.size(); i < one.size(); ++i) CHECK(static_cast<unsigned char>(one[i]) == 255);
  CHECK(zero.size() == header.size() + 18);
}

TEST_CASE("datasets round-trip through the manifest") {
  test::TempDir dir;
  const auto d = generate_dataset(small_spec(), 21, 1);
  save_dataset(d, dir.path());
  const auto back = load_dataset(dir.path());
  CHECK(back.seed == d.seed);
  REQUIRE(back.records.size() == d.records.size());
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    CHECK(back.records[i].clip == d.records[i].clip);
    CHECK(back.records[i].ground_truth.uv == d.records[i].ground_truth.uv);
    CHECK(back.records[i].motion.magnitude == d.records[i].motion.magnitude);
  }
}

TEST_CASE("dataset spec validation") {
  auto s = small_spec();
  s.geometry.channels = 2;
  CHECK_THROWS_AS(s.validate(), PreconditionError);
  s = small_spec();
  s.scale_range = {0.5, 1.5};
  CHECK_THROWS_AS(s.validate(), PreconditionError);
  s = small_spec();
  s.margin = 0;
  CHECK_THROWS_AS(generate_clip(s, 1, 0), PreconditionError);
}
