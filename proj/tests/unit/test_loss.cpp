#include <doctest.h>

#include <cmath>
#include <vector>

#include "mcd/error.hpp"
#include "mcd/grad/ops.hpp"
#include "mcd/loss/motion_loss.hpp"
#include "mcd/video/dataset.hpp"
#include "support/oracles.hpp"

using namespace mcd;
using namespace mcd::loss;
using grad::DiffTensor;
using grad::Graph64;

namespace {

// Plain-loop oracles over planar [P,C,H,W] / [P,2,H,W] buffers.

double sample_clamped(const std::vector<double>& img, std::size_t base, std::size_t h,
                      std::size_t w, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const auto x0 = std::min(static_cast<std::size_t>(std::floor(x)), w - 2);
  const auto y0 = std::min(static_cast<std::size_t>(std::floor(y)), h - 2);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  auto at = [&](std::size_t yy, std::size_t xx) { return img[base + yy * w + xx]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

double pen(double r, const MCConfig& c) {
  if (c.metric == SimMetric::L1) return std::abs(r);
  return std::sqrt(r * r + c.kappa * c.kappa) - c.kappa;
}

double brute_photometric(const std::vector<double>& first, const std::vector<double>& second,
                         const std::vector<double>& flows, std::size_t P, std::size_t C,
                         std::size_t H, std::size_t W, const MCConfig& c) {
  double total = 0.0;
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double u = flows[((p * 2 + 0) * H + y) * W + x];
          const double v = flows[((p * 2 + 1) * H + y) * W + x];
          const double warped =
              sample_clamped(second, (p * C + ch) * H * W, H, W, static_cast<double>(x) + u,
                             static_cast<double>(y) + v);
          const double r = first[((p * C + ch) * H + y) * W + x] - warped;
          total += c.p == 2 ? r * r : pen(r, c);
        }
  return total / static_cast<double>(P * C * H * W);
}

double brute_smoothness(const std::vector<double>& first, const std::vector<double>& flows,
                        std::size_t P, std::size_t C, std::size_t H, std::size_t W,
                        const MCConfig& c) {
  auto at = [&](const std::vector<double>& a, std::size_t plane, long y, long x) {
    y = std::clamp(y, 0L, static_cast<long>(H) - 1);
    x = std::clamp(x, 0L, static_cast<long>(W) - 1);
    return a[plane * H * W + static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
  };
  double total = 0.0;
  for (std::size_t p = 0; p < P; ++p)
    for (long y = 0; y < static_cast<long>(H); ++y)
      for (long x = 0; x < static_cast<long>(W); ++x)
        for (int axis = 0; axis < 2; ++axis) {
          const long dx = axis == 0 ? 1 : 0, dy = axis == 0 ? 0 : 1;
          double edge = 0.0;
          for (std::size_t ch = 0; ch < C; ++ch) {
            const auto plane = p * C + ch;
            edge += pen(0.5 * (at(first, plane, y + dy, x + dx) - at(first, plane, y - dy, x - dx)), c);
          }
          double curv = 0.0;
          for (std::size_t k = 0; k < 2; ++k) {
            const auto plane = p * 2 + k;
            curv += pen(at(flows, plane, y + dy, x + dx) + at(flows, plane, y - dy, x - dx) -
                            2.0 * at(flows, plane, y, x),
                        c);
          }
          total += std::exp(-c.lambda_edge / 3.0 * edge) * curv;
        }
  return total / static_cast<double>(P * H * W);
}

flow::FlowConfig gradient_flow() {
  flow::FlowConfig fc;
  fc.iters_inference = fc.iters_gradient = 2;
  return fc;
}

std::vector<double> static_clip(std::size_t T, std::size_t C, std::size_t H, std::size_t W) {
  const auto one = test::smooth_clip(1, C, H, W, 17);
  std::vector<double> out;
  for (std::size_t t = 0; t < T; ++t) out.insert(out.end(), one.begin(), one.end());
  return out;
}

}  // namespace

TEST_CASE("warp with zero flow is the identity bit for bit") {
  const std::size_t C = 3, H = 9, W = 11;
  const auto img = test::uniform_values(2 * C * H * W, 0.0, 1.0, 3);
  Graph64 g;
  auto t = g.constant({2, C, H, W}, img);
  auto f = g.constant({2, 2, H, W}, std::vector<double>(2 * 2 * H * W, 0.0));
  const auto v = warp_backward(t, f).value();
  CHECK(std::vector<double>(v.begin(), v.end()) == img);
}

TEST_CASE("horizontal ramp warped by unit flow shifts by one in the interior") {
  const std::size_t H = 6, W = 10;
  std::vector<double> ramp(H * W), flows(2 * H * W, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) ramp[y * W + x] = 0.1 * static_cast<double>(x);
  for (std::size_t i = 0; i < H * W; ++i) flows[i] = 1.0;
  Graph64 g;
  auto out = warp_backward(g.constant({1, 1, H, W}, ramp), g.constant({1, 2, H, W}, flows));
  const auto v = out.value();
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x + 1 < W; ++x) CHECK(v[y * W + x] == ramp[y * W + x + 1]);
    CHECK(v[y * W + W - 1] == ramp[y * W + W - 1]);
  }
}

TEST_CASE("photometric and smoothness terms match plain-loop oracles") {
  const std::size_t P = 2, C = 3, H = 10, W = 12;
  const auto first = test::uniform_values(P * C * H * W, 0.0, 1.0, 11);
  const auto second = test::uniform_values(P * C * H * W, 0.0, 1.0, 12);
  const auto flows = test::uniform_values(P * 2 * H * W, -3.0, 3.0, 13);
  for (auto metric : {SimMetric::L1, SimMetric::Charbonnier})
    for (int p : {1, 2}) {
      MCConfig c;
      c.metric = metric;
      c.p = p;
      c.lambda_edge = 2.0;
      Graph64 g;
      auto a = g.constant({P, C, H, W}, first);
      auto b = g.constant({P, C, H, W}, second);
      auto f = g.constant({P, 2, H, W}, flows);
      CHECK(photometric_loss(a, b, f, c).item() ==
            doctest::Approx(brute_photometric(first, second, flows, P, C, H, W, c)).epsilon(1e-12));
      CHECK(smoothness_loss(a, f, c).item() ==
            doctest::Approx(brute_smoothness(first, flows, P, C, H, W, c)).epsilon(1e-12));
    }
}

TEST_CASE("translated texture warped by its true flow has near-zero photometric loss") {
  video::DatasetSpec spec;
  spec.geometry = {2, 64, 64, 3};
  const auto rec = video::render_clip(spec, {video::MotionClass::TranslateE, 1.0}, 21, "t");
  const auto planar = video::to_planar<double>(rec.clip);
  const std::size_t n = 3 * 64 * 64;
  std::vector<double> first(planar.begin(), planar.begin() + static_cast<long>(n));
  std::vector<double> second(planar.begin() + static_cast<long>(n), planar.end());
  std::vector<double> flows(2 * 64 * 64);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      flows[y * 64 + x] = rec.ground_truth.u(y, x);
      flows[64 * 64 + y * 64 + x] = rec.ground_truth.v(y, x);
    }
  MCConfig c;
  c.metric = SimMetric::L1;
  Graph64 g;
  const double l = photometric_loss(g.constant({1, 3, 64, 64}, first), g.constant({1, 3, 64, 64}, second),
                                    g.constant({1, 2, 64, 64}, flows), c)
                       .item();
  CHECK(l < 1e-3);
}

TEST_CASE("smoothness vanishes for constant and linear flow and matches x squared") {
  const std::size_t H = 8, W = 8;
  const std::vector<double> img(3 * H * W, 0.5);
  MCConfig c;
  c.metric = SimMetric::L1;
  auto smooth = [&](const std::vector<double>& f) {
    Graph64 g;
    return smoothness_loss(g.constant({1, 3, H, W}, img), g.constant({1, 2, H, W}, f), c).item();
  };
  std::vector<double> constant(2 * H * W, 1.5), linear(2 * H * W), square(2 * H * W, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      linear[y * W + x] = 0.5 * static_cast<double>(x) + 0.25 * static_cast<double>(y);
      linear[H * W + y * W + x] = -static_cast<double>(y);
      square[y * W + x] = static_cast<double>(x * x);
    }
  CHECK(smooth(constant) == 0.0);
  // Replicate boundaries break linearity at the border columns and rows only.
  const double lin = smooth(linear);
  CHECK(lin == doctest::Approx(brute_smoothness(img, linear, 1, 3, H, W, c)));
  // u = x^2: second difference 2 inside, uniform image so the weight is 1.
  const double sq = smooth(square);
  CHECK(sq == doctest::Approx(brute_smoothness(img, square, 1, 3, H, W, c)));
  double expected = 0.0;
  for (std::size_t x = 1; x + 1 < W; ++x) expected += 2.0 * static_cast<double>(H);
  expected += static_cast<double>(H) * (1.0 - 0.0);                          // x = 0
  expected += static_cast<double>(H) * std::abs(49.0 - 2.0 * 49.0 + 36.0);  // x = 7
  CHECK(sq == doctest::Approx(expected / static_cast<double>(H * W)));
}

TEST_CASE("linear flow interior has zero curvature") {
  const std::size_t H = 8, W = 8;
  std::vector<double> img(3 * H * W, 0.5), linear(2 * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) linear[y * W + x] = 0.5 * static_cast<double>(x);
  MCConfig c;
  c.metric = SimMetric::L1;
  Graph64 g;
  auto f = g.constant({1, 2, H, W}, linear);
  const auto curv = grad::spatial_derivative(f, 2, grad::Axis::X).value();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 1; x + 1 < W; ++x) CHECK(curv[y * W + x] == 0.0);
}

TEST_CASE("edges damp the smoothness weight") {
  const std::size_t H = 8, W = 8;
  std::vector<double> flat(3 * H * W, 0.5), edged(3 * H * W), f(2 * H * W, 0.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) edged[(c * H + y) * W + x] = x < 4 ? 0.2 : 0.8;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) f[y * W + x] = (x % 2) ? 1.0 : -1.0;
  MCConfig c;
  Graph64 g;
  auto vf = g.constant({1, 2, H, W}, f);
  const double on_flat = smoothness_loss(g.constant({1, 3, H, W}, flat), vf, c).item();
  const double on_edge = smoothness_loss(g.constant({1, 3, H, W}, edged), vf, c).item();
  CHECK(on_edge < on_flat);
  CHECK(on_flat > 0.0);
}

TEST_CASE("static clip has exactly zero MC loss under both metrics") {
  const auto clip = static_clip(4, 3, 16, 16);
  for (auto metric : {SimMetric::L1, SimMetric::Charbonnier}) {
    MCConfig c;
    c.metric = metric;
    Graph64 g;
    auto x = g.constant({4, 3, 16, 16}, clip);
    CHECK(mc_loss(x, flow::FlowConfig{}, c).item() == 0.0);
    CHECK(multi_mc_loss(x, flow::FlowConfig{}, c.multi()).item() == 0.0);
  }
}

TEST_CASE("MC with zero smoothness weight is the forward photometric term") {
  const auto clip = test::smooth_clip(3, 3, 16, 16, 23);
  MCConfig c;
  c.lambda_smooth = 0.0;
  Graph64 g;
  auto x = g.constant({3, 3, 16, 16}, clip);
  auto [a, b] = flow::split_pairs(x, flow::Direction::Forward);
  auto f = flow::estimate_pairs(a, b, flow::FlowConfig{});
  CHECK(mc_loss(x, flow::FlowConfig{}, c).item() == photometric_loss(a, b, f, c).item());
}

TEST_CASE("multiMC with only the forward constraint equals MC bit for bit") {
  const auto clip = test::smooth_clip(4, 3, 16, 16, 29);
  Graph64 g;
  auto x = g.constant({4, 3, 16, 16}, clip);
  MCConfig c;
  CHECK(multi_mc_loss(x, flow::FlowConfig{}, c).item() == mc_loss(x, flow::FlowConfig{}, c).item());
}

TEST_CASE("multiMC is the sum of its components") {
  const auto clip = test::smooth_clip(4, 3, 16, 16, 31);
  Graph64 g;
  auto x = g.constant({4, 3, 16, 16}, clip);
  const flow::FlowConfig fc;
  MCConfig c;
  double expected = mc_loss(x, fc, c).item();
  for (auto dir : {flow::Direction::Backward, flow::Direction::LongRange}) {
    auto [a, b] = flow::split_pairs(x, dir);
    expected += photometric_loss(a, b, flow::estimate_pairs(a, b, fc), c).item();
  }
  CHECK(multi_mc_loss(x, fc, c.multi()).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("losses are non-negative on random clips") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto clip = test::uniform_values(4 * 3 * 12 * 12, 0.0, 1.0, 100 + seed);
    Graph64 g;
    auto x = g.constant({4, 3, 12, 12}, clip);
    MCConfig c;
    CHECK(mc_loss(x, flow::FlowConfig{}, c).item() >= 0.0);
    CHECK(multi_mc_loss(x, flow::FlowConfig{}, c.multi()).item() >= 0.0);
  }
}

TEST_CASE("photometric, smoothness and multiMC gradients match finite differences") {
  const std::size_t P = 2, C = 3, H = 10, W = 10;
  const auto first = test::smooth_clip(P, C, H, W, 41);
  const auto second = test::smooth_clip(P, C, H, W, 42);
  const auto flows = test::uniform_values(P * 2 * H * W, -1.5, 1.5, 43);
  MCConfig c;
  SUBCASE("photometric in the flow") {
    auto r = test::check_gradient({P, 2, H, W}, flows, [&](Graph64& g, const DiffTensor<double>& f) {
      return photometric_loss(g.constant({P, C, H, W}, first), g.constant({P, C, H, W}, second), f, c);
    }, test::sample_indices(flows.size(), 50, 1));
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("photometric in the frames") {
    auto r = test::check_gradient({P, C, H, W}, second, [&](Graph64& g, const DiffTensor<double>& s) {
      return photometric_loss(g.constant({P, C, H, W}, first), s, g.constant({P, 2, H, W}, flows), c);
    }, test::sample_indices(second.size(), 50, 2));
    CHECK(r.max_rel_error < 1e-4);
  }
  SUBCASE("smoothness in the flow and the image") {
    MCConfig soft = c;
    soft.lambda_edge = 5.0;
    auto rf = test::check_gradient({P, 2, H, W}, flows, [&](Graph64& g, const DiffTensor<double>& f) {
      return smoothness_loss(g.constant({P, C, H, W}, first), f, soft);
    }, test::sample_indices(flows.size(), 50, 3));
    CHECK(rf.max_rel_error < 1e-4);
    auto ri = test::check_gradient({P, C, H, W}, first, [&](Graph64& g, const DiffTensor<double>& a) {
      return smoothness_loss(a, g.constant({P, 2, H, W}, flows), soft);
    }, test::sample_indices(first.size(), 50, 4));
    CHECK(ri.max_rel_error < 1e-4);
  }
  SUBCASE("multiMC on a clip") {
    const auto clip = test::smooth_clip(4, 3, 16, 16, 44);
    auto r = test::check_gradient({4, 3, 16, 16}, clip, [&](Graph64&, const DiffTensor<double>& x) {
      return multi_mc_loss(x, gradient_flow(), c.multi());
    }, test::sample_indices(clip.size(), 50, 5));
    CHECK(r.max_rel_error < 1e-4);
    CHECK(r.nonzero > 25);
  }
}

TEST_CASE("loss preconditions") {
  Graph64 g;
  auto x = g.constant({3, 3, 8, 8}, std::vector<double>(3 * 3 * 64, 0.5));
  MCConfig c;
  CHECK_THROWS_AS(multi_mc_loss(x, flow::FlowConfig{}, c.multi()), PreconditionError);
  c.constraints = {false, false, false};
  CHECK_THROWS_AS(c.validate(), PreconditionError);
  MCConfig bad;
  bad.lambda_smooth = -1.0;
  CHECK_THROWS_AS(bad.validate(), PreconditionError);
  auto f = g.constant({2, 2, 8, 8}, std::vector<double>(2 * 2 * 64, 0.0));
  CHECK_THROWS_AS(warp_backward(x, f), PreconditionError);
}
