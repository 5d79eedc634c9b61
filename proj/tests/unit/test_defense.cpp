#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "mcd/attack/attacks.hpp"
#include "mcd/defense/purify.hpp"
#include "mcd/error.hpp"
#include "support/small_world.hpp"

using namespace mcd;
using namespace mcd::defense;

namespace {

double max_abs_delta(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Mean over frames and channels of |mean_pixels(a) - mean_pixels(b)|.
double channel_mean_gap(std::span<const float> a, std::span<const float> b,
                        const video::ClipGeometry& g) {
  const std::size_t plane = g.height * g.width;
  double total = 0.0;
  for (std::size_t tc = 0; tc < g.frames * g.channels; ++tc) {
    double d = 0.0;
    for (std::size_t k = 0; k < plane; ++k)
      d += static_cast<double>(a[tc * plane + k]) - static_cast<double>(b[tc * plane + k]);
    total += std::abs(d / static_cast<double>(plane));
  }
  return total / static_cast<double>(g.frames * g.channels);
}

}  // namespace

TEST_CASE("zero iterations is the identity") {
  const auto& w = test::small_world();
  DefenseConfig c;
  c.iterations = 0;
  const auto r = purify(w.planar, w.record.clip.geometry(), w.flow, c);
  CHECK(r.purified == w.planar);
  for (float v : r.reverse) CHECK(v == 0.0f);
  CHECK(r.loss_trace.empty());
}

TEST_CASE("every iterate stays in the ball around the input and in range") {
  const auto& w = test::small_world();
  const auto g = w.record.clip.geometry();
  const auto noisy = attack::random_perturbation(w.planar, g, 8.0, 5).adversarial;
  const double eps = to_pixel_scale(12.0);
  for (int k = 1; k <= 4; ++k) {
    DefenseConfig c;
    c.iterations = k;
    const auto r = purify(noisy, g, w.flow, c);
    CHECK(max_abs_delta(r.purified, noisy) <= eps);
    CHECK(std::all_of(r.purified.begin(), r.purified.end(), [](float v) { return v >= 0.0f && v <= 1.0f; }));
    for (std::size_t i = 0; i < noisy.size(); ++i) CHECK(r.reverse[i] == r.purified[i] - noisy[i]);
  }
}

TEST_CASE("the best loss on the trace does not exceed the initial loss") {
  const auto& w = test::small_world();
  const auto g = w.record.clip.geometry();
  attack::AttackConfig ac;
  ac.steps = 4;
  const auto adv = attack::pgd_attack(w.target(), w.model, w.flow, ac).adversarial;
  DefenseConfig c;
  c.iterations = 6;
  const auto r = purify(adv, g, w.flow, c);
  REQUIRE(r.loss_trace.size() == 7);
  const double lowest = *std::min_element(r.loss_trace.begin(), r.loss_trace.end());
  CHECK(lowest <= r.loss_trace.front());
  CHECK(r.best_loss == lowest);
  CHECK(r.loss_trace[static_cast<std::size_t>(r.best_iteration)] == lowest);
  CHECK(r.loss_trace.front() == doctest::Approx(loss::evaluate_mc(adv, g, w.flow, c.mc)).epsilon(1e-6));
}

TEST_CASE("purification lowers the MC loss of a noisy clip") {
  const auto& w = test::small_world();
  const auto g = w.record.clip.geometry();
  const auto noisy = attack::random_perturbation(w.planar, g, 8.0, 6).adversarial;
  const auto r = purify(noisy, g, w.flow, DefenseConfig{});
  CHECK(loss::evaluate_mc(r.purified, g, w.flow, DefenseConfig{}.mc) <
        loss::evaluate_mc(noisy, g, w.flow, DefenseConfig{}.mc));
}

TEST_CASE("disabled or empty defense predicts like the undefended model") {
  const auto& w = test::small_world();
  const auto g = w.record.clip.geometry();
  const auto plain = classifier::predict(w.model, w.planar, g, w.flow);
  DefenseConfig off;
  off.enabled = false;
  DefenseConfig empty;
  empty.iterations = 0;
  for (const auto& c : {off, empty}) {
    const auto d = defended_predict(w.model, w.planar, g, w.flow, c);
    CHECK(d.prediction.label == plain.label);
    CHECK(d.prediction.logits == plain.logits);
    CHECK(d.purification.purified == w.planar);
  }
}

TEST_CASE("purification pulls flickered frame colors back toward the clean clip") {
  const auto& w = test::small_world();
  const auto g = w.record.clip.geometry();
  const std::size_t plane = g.height * g.width;
  const float offsets[] = {0.05f, -0.05f, 0.04f, -0.04f};
  auto flickered = w.planar;
  for (std::size_t t = 0; t < g.frames; ++t)
    for (std::size_t k = 0; k < g.channels * plane; ++k) {
      auto& v = flickered[t * g.channels * plane + k];
      v = std::clamp(v + offsets[t], 0.0f, 1.0f);
    }
  const auto r = purify(flickered, g, w.flow, DefenseConfig{});
  CHECK(channel_mean_gap(r.purified, w.planar, g) < channel_mean_gap(flickered, w.planar, g));
}

TEST_CASE("multi-constraint purification") {
  const auto& w = test::small_world();
  const auto g = w.record.clip.geometry();
  DefenseConfig c;
  c.loss = DefenseLoss::MultiMC;
  c.iterations = 2;
  CHECK(c.objective().constraints == loss::Constraints{true, true, true});
  const auto r = purify(w.planar, g, w.flow, c);
  CHECK(r.loss_trace.size() == 3);
  std::vector<float> odd(w.planar.begin(), w.planar.begin() + static_cast<long>(3 * g.frame_size()));
  CHECK_THROWS_AS(purify(odd, {3, g.height, g.width, g.channels}, w.flow, c), PreconditionError);
}

TEST_CASE("projection is exact in float") {
  const std::vector<float> x{0.3f, 0.99f, 0.01f, 0.5f};
  std::vector<float> z{0.9f, 1.5f, -1.0f, 0.5f + 8.0f / 255.0f};
  const float bound = to_pixel_scale(8.0);
  project(x, z, bound);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(std::abs(static_cast<double>(z[i]) - static_cast<double>(x[i])) <= static_cast<double>(bound));
    CHECK(z[i] >= 0.0f);
    CHECK(z[i] <= 1.0f);
  }
  CHECK(z[1] == 1.0f);
  CHECK(z[2] == 0.0f);
  for (std::uint32_t s = 0; s < 2000; ++s) {
    const float xv = static_cast<float>(s) / 2000.0f;
    std::vector<float> xs{xv}, zs{xv + 0.5f};
    project(xs, zs, bound);
    CHECK(static_cast<double>(zs[0]) - static_cast<double>(xs[0]) <= static_cast<double>(bound));
  }
}

TEST_CASE("sign is zero at zero") {
  CHECK(sign(0.0) == 0.0);
  CHECK(sign(-0.0f) == 0.0f);
  CHECK(sign(-3.0) == -1.0);
  CHECK(sign(2.0f) == 1.0f);
}

TEST_CASE("defense config validation") {
  DefenseConfig c;
  CHECK_NOTHROW(c.validate());
  c.iterations = -1;
  CHECK_THROWS_AS(c.validate(), PreconditionError);
  c = DefenseConfig{};
  c.eta = 30.0;
  CHECK_THROWS_AS(c.validate(), PreconditionError);
  c = DefenseConfig{};
  c.epsilon = -1.0;
  CHECK_THROWS_AS(c.validate(), PreconditionError);
}
