#include <doctest.h>

#include <cmath>

#include "mcd/error.hpp"
#include "mcd/flow/estimator.hpp"
#include "mcd/grad/ops.hpp"
#include "mcd/loss/motion_loss.hpp"
#include "support/oracles.hpp"

using namespace mcd;
using namespace mcd::grad;

TEST_CASE("abs value and subgradient") {
  Graph64 g;
  auto x = g.leaf({2}, {-3.0, 0.0});
  auto y = abs(x);
  CHECK(y.value()[0] == 3.0);
  CHECK(y.value()[1] == 0.0);
  g.backward(sum(y));
  CHECK(x.grad()[0] == -1.0);
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("charbonnier abs matches finite differences") {
  const auto x = test::uniform_values(100, -1.0, 1.0, 11);
  std::vector<std::size_t> all(100);
  for (std::size_t i = 0; i < 100; ++i) all[i] = i;
  auto r = test::check_gradient({100}, x, [](Graph64&, const DiffTensor<double>& a) {
    return sum(charbonnier_abs(a, 1e-3));
  }, all, 1e-6);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("charbonnier is zero at zero and non-negative") {
  Graph32 g;
  auto x = g.leaf({3}, {0.0f, 1e-7f, -2.0f});
  auto y = charbonnier_abs(x);
  CHECK(y.value()[0] == 0.0f);
  CHECK(y.value()[1] >= 0.0f);
  CHECK(y.value()[2] == doctest::Approx(2.0 - 1e-3).epsilon(1e-6));
}

TEST_CASE("reduce examples") {
  Graph64 g;
  auto ones = g.leaf({4, 4}, std::vector<double>(16, 1.0));
  CHECK(mean(ones).item() == 1.0);
  auto v = g.leaf({3}, {1.0, 2.0, 3.0});
  auto s = sum(v);
  CHECK(s.item() == 6.0);
  g.backward(s);
  for (double a : v.grad()) CHECK(a == 1.0);
}

TEST_CASE("reduce over axes keeps the remaining layout") {
  Graph64 g;
  auto a = g.leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  auto rows = sum(a, {1});
  REQUIRE(rows.shape() == Shape{2});
  CHECK(rows.value()[0] == 6.0);
  CHECK(rows.value()[1] == 15.0);
  auto cols = mean(a, {0});
  CHECK(cols.value()[2] == 4.5);
}

TEST_CASE("mean adjoint matches finite differences") {
  const auto x = test::uniform_values(64, -1.0, 1.0, 12);
  auto r = test::check_gradient({8, 8}, x, [](Graph64&, const DiffTensor<double>& a) {
    return mean(a * a);
  }, test::sample_indices(64, 64, 1));
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("conv2d identity kernel and overlap counts") {
  Graph64 g;
  auto in = g.leaf({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto k = g.leaf({1, 1, 1, 1}, {1.0});
  auto out = conv2d(in, k, {1, 0});
  for (std::size_t i = 0; i < 9; ++i) CHECK(out.value()[i] == in.value()[i]);

  auto ones = g.leaf({1, 4, 4}, std::vector<double>(16, 1.0));
  auto k3 = g.leaf({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  auto o = conv2d(ones, k3, {1, 1});
  CHECK(o.value()[1 * 4 + 1] == 9.0);
  CHECK(o.value()[0] == 4.0);
}

TEST_CASE("conv2d adjoints match finite differences") {
  const auto input = test::uniform_values(2 * 8 * 8, -1.0, 1.0, 21);
  const auto kernel = test::uniform_values(4 * 2 * 3 * 3, -1.0, 1.0, 22);
  const auto bias = test::uniform_values(4, -1.0, 1.0, 23);
  for (std::size_t stride : {1u, 2u}) {
    auto wrt_input = test::check_gradient({2, 8, 8}, input, [&](Graph64& g, const DiffTensor<double>& x) {
      auto k = g.constant({4, 2, 3, 3}, kernel);
      auto b = g.constant({4}, bias);
      auto y = conv2d(x, k, std::optional(b), {stride, 1});
      return sum(y * y);
    }, test::sample_indices(128, 40, 2));
    CHECK(wrt_input.max_rel_error < 1e-5);
    auto wrt_kernel = test::check_gradient({4, 2, 3, 3}, kernel, [&](Graph64& g, const DiffTensor<double>& k) {
      auto x = g.constant({2, 8, 8}, input);
      auto y = conv2d(x, k, {stride, 1});
      return sum(y * y);
    }, test::sample_indices(72, 40, 3));
    CHECK(wrt_kernel.max_rel_error < 1e-5);
  }
}

TEST_CASE("bilinear identity grid is bit-exact and ramps interpolate exactly") {
  const std::size_t H = 5, W = 7;
  const auto img = test::uniform_values(H * W, 0.0, 1.0, 31);
  Graph64 g;
  auto image = g.constant({1, H, W}, img);
  std::vector<double> grid(H * W * 2), shifted(H * W * 2);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      grid[(y * W + x) * 2] = static_cast<double>(x);
      grid[(y * W + x) * 2 + 1] = static_cast<double>(y);
      shifted[(y * W + x) * 2] = static_cast<double>(x) + 0.5;
      shifted[(y * W + x) * 2 + 1] = static_cast<double>(y);
    }
  auto same = bilinear_sample(image, g.constant({H, W, 2}, grid));
  for (std::size_t i = 0; i < H * W; ++i) CHECK(same.value()[i] == img[i]);

  std::vector<double> ramp(H * W);
  for (std::size_t i = 0; i < H * W; ++i) ramp[i] = static_cast<double>(i % W);
  auto r = bilinear_sample(g.constant({1, H, W}, ramp), g.constant({H, W, 2}, shifted));
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x + 1 < W; ++x) CHECK(r.value()[y * W + x] == static_cast<double>(x) + 0.5);
}

TEST_CASE("bilinear adjoints match finite differences away from integer coordinates") {
  const std::size_t C = 2, H = 6, W = 6;
  const auto img = test::uniform_values(C * H * W, 0.0, 1.0, 41);
  auto coords = test::uniform_values(H * W * 2, 0.6, 4.4, 42);
  for (auto& c : coords) {
    const double f = c - std::floor(c);
    if (f < 0.1 || f > 0.9) c += 0.3;
  }
  auto wrt_image = test::check_gradient({C, H, W}, img, [&](Graph64& g, const DiffTensor<double>& x) {
    auto s = bilinear_sample(x, g.constant({H, W, 2}, coords));
    return sum(s * s);
  }, test::sample_indices(C * H * W, 40, 4));
  CHECK(wrt_image.max_rel_error < 1e-5);
  auto wrt_coords = test::check_gradient({H, W, 2}, coords, [&](Graph64& g, const DiffTensor<double>& c) {
    auto s = bilinear_sample(g.constant({C, H, W}, img), c);
    return sum(s * s);
  }, test::sample_indices(H * W * 2, 40, 5));
  CHECK(wrt_coords.max_rel_error < 1e-5);
}

TEST_CASE("spatial derivatives on polynomials") {
  const std::size_t H = 6, W = 7;
  std::vector<double> constant(H * W, 0.3), linear(H * W), quad(H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      linear[y * W + x] = static_cast<double>(x);
      quad[y * W + x] = static_cast<double>(x * x);
    }
  Graph64 g;
  auto c = g.constant({1, H, W}, constant);
  for (int order : {1, 2})
    for (auto axis : {Axis::X, Axis::Y})
      for (double v : spatial_derivative(c, order, axis).value()) CHECK(v == 0.0);
  auto l = g.constant({1, H, W}, linear);
  auto d1 = spatial_derivative(l, 1, Axis::X).value();
  auto d2 = spatial_derivative(l, 2, Axis::X).value();
  auto q2 = spatial_derivative(g.constant({1, H, W}, quad), 2, Axis::X).value();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 1; x + 1 < W; ++x) {
      CHECK(d1[y * W + x] == 1.0);
      CHECK(d2[y * W + x] == 0.0);
      CHECK(q2[y * W + x] == 2.0);
    }
}

TEST_CASE("stencil adjoints match finite differences") {
  const auto x = test::uniform_values(2 * 5 * 6, -1.0, 1.0, 51);
  for (int order : {1, 2})
    for (auto axis : {Axis::X, Axis::Y}) {
      auto r = test::check_gradient({2, 5, 6}, x, [&](Graph64&, const DiffTensor<double>& a) {
        auto d = spatial_derivative(a, order, axis);
        return sum(d * d);
      }, test::sample_indices(60, 30, 6));
      CHECK(r.max_rel_error < 1e-5);
    }
  auto r = test::check_gradient({2, 5, 6}, x, [&](Graph64&, const DiffTensor<double>& a) {
    auto d = neighbor_average(a);
    return sum(d * d);
  }, test::sample_indices(60, 30, 7));
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("backward examples") {
  Graph64 g;
  auto leaf = g.leaf({1}, {2.5});
  g.backward(leaf);
  CHECK(leaf.grad()[0] == 1.0);

  Graph64 h;
  const auto values = test::uniform_values(10, -1.0, 1.0, 61);
  auto a = h.leaf({10}, values);
  h.backward(mean(a * a));
  for (std::size_t i = 0; i < 10; ++i) CHECK(a.grad()[i] == doctest::Approx(2.0 * values[i] / 10.0).epsilon(1e-15));
}

TEST_CASE("backward is single-shot until reset and adjoints start at zero") {
  Graph64 g;
  auto a = g.leaf({3}, {1.0, 2.0, 3.0});
  auto y = sum(a * a);
  for (double v : a.grad()) CHECK(v == 0.0);
  g.backward(y);
  CHECK_THROWS_AS(g.backward(y), GraphError);
  g.reset();
  for (double v : a.grad()) CHECK(v == 0.0);
  g.backward(y);
  CHECK(a.grad()[2] == 6.0);
  g.reset();
  CHECK_THROWS_AS(g.backward(a), PreconditionError);
}

TEST_CASE("elementwise preconditions") {
  Graph64 g;
  auto a = g.leaf({3}, {1.0, 2.0, 3.0});
  auto b = g.leaf({2}, {1.0, 2.0});
  CHECK_THROWS_AS(a + b, PreconditionError);
  auto z = g.leaf({3}, {1.0, 0.0, 1.0});
  CHECK_THROWS_AS(a / z, NumericError);
  Graph64 other;
  auto c = other.leaf({3}, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(a + c, GraphError);
}

TEST_CASE("full MC loss on a 4-frame clip matches finite differences") {
  const std::size_t T = 4, C = 3, H = 16, W = 16;
  const auto clip = test::smooth_clip(T, C, H, W, 71);
  flow::FlowConfig fc;
  fc.iters_inference = fc.iters_gradient = 2;
  loss::MCConfig mc;
  auto r = test::check_gradient({T, C, H, W}, clip, [&](Graph64&, const DiffTensor<double>& x) {
    return loss::mc_loss(x, fc, mc);
  }, test::sample_indices(T * C * H * W, 50, 8));
  CHECK(r.max_rel_error < 1e-4);
  CHECK(r.nonzero > 25);
}

TEST_CASE("tape is topological, replays bit-exactly and is deterministic") {
  const std::size_t T = 4, C = 3, H = 12, W = 12;
  const auto clip = test::smooth_clip(T, C, H, W, 81);
  auto run = [&](std::vector<double>& adjoint) {
    Graph64 g;
    auto x = g.leaf({T, C, H, W}, clip);
    auto l = loss::multi_mc_loss(x, flow::FlowConfig{}, loss::MCConfig{}.multi());
    CHECK(g.topologically_ordered());
    CHECK(g.replay_mismatches() == 0);
    g.backward(l);
    adjoint.assign(x.grad().begin(), x.grad().end());
    return l.item();
  };
  std::vector<double> a1, a2;
  const double v1 = run(a1), v2 = run(a2);
  CHECK(v1 == v2);
  CHECK(a1 == a2);
}

TEST_CASE("backward is linear in the root") {
  const auto x = test::uniform_values(20, -1.0, 1.0, 91);
  auto grad_of = [&](double alpha, double beta) {
    Graph64 g;
    auto a = g.leaf({20}, x);
    auto l1 = sum(exp(a) * a);
    auto l2 = mean(charbonnier_abs(a - 0.2));
    g.backward(l1 * alpha + l2 * beta);
    return std::vector<double>(a.grad().begin(), a.grad().end());
  };
  const auto g1 = grad_of(1.0, 0.0), g2 = grad_of(0.0, 1.0), g12 = grad_of(0.7, -1.3);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double expected = 0.7 * g1[i] - 1.3 * g2[i];
    CHECK(std::abs(g12[i] - expected) <= 4 * std::numeric_limits<double>::epsilon() *
                                              std::max(1.0, std::abs(expected)));
  }
}

TEST_CASE("shape ops route adjoints") {
  Graph64 g;
  auto a = g.leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  auto p = permute(a, {1, 0});
  CHECK(p.shape() == Shape{3, 2});
  CHECK(p.value()[1] == 4.0);
  auto s = slice(a, 1, 1, 3);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.value()[0] == 2.0);
  auto e = expand_trailing(slice(a, 1, 0, 1), {2});
  CHECK(e.shape() == Shape{2, 1, 2});
  CHECK(e.value()[3] == 4.0);
  std::vector<DiffTensor<double>> parts{a, a};
  auto c = concat<double>(parts, 0);
  CHECK(c.shape() == Shape{4, 3});
  g.backward(sum(p * 2.0) + sum(s) + sum(e) + sum(c));
  // 2 (permute) + 1 (slice, cols 1..2) + 2 (expand, col 0) + 2 (concat twice)
  CHECK(a.grad()[0] == 6.0);
  CHECK(a.grad()[1] == 5.0);
}
