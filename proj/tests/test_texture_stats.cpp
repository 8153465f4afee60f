#include <cmath>

#include "doctest.h"
#include "grad_check.hpp"
#include "metamer/error.hpp"
#include "metamer/texture_stats.hpp"
#include "support.hpp"

using namespace metamer;

namespace {

ImageBuffer circular_shift(const ImageBuffer& img, int dx, int dy) {
  ImageBuffer out(img.width(), img.height(), 1);
  const int n = img.width();
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) out.at((x + dx) % n, (y + dy) % n) = img.at(x, y);
  return out;
}

ImageBuffer crop(const ImageBuffer& img, int x0, int y0, int side) {
  ImageBuffer out(side, side, 1);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) out.at(x, y) = img.at(x0 + x, y0 + y);
  return out;
}

}  // namespace

TEST_CASE("constant image follows the zero-variance convention") {
  const StatConfig cfg{.scales = 3, .orientations = 4, .autocorr_size = 5};
  const StatVector s = compute_stats(ImageBuffer(64, 64, 1, 0.42), cfg);
  const auto& px = s.groups[0].values;
  CHECK(px[0] == doctest::Approx(0.42));
  CHECK(px[1] == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(px[2] == 0.0);
  CHECK(px[3] == 0.0);
  CHECK(s.has_flag("zero_variance"));
  CHECK(s.has_flag("degenerate_correlation"));
  for (double v : s.groups[3].values) CHECK(v == 0.0);
}

TEST_CASE("white noise has near-zero skew and excess kurtosis") {
  const StatConfig cfg{.scales = 3, .orientations = 4, .autocorr_size = 5};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ImageBuffer noise = testing::white_noise(64, 100 + seed, 0.0, 1.0);
    const auto& px = compute_stats(noise, cfg).groups[0].values;
    CHECK(std::abs(px[2]) < 0.15);
    CHECK(std::abs(px[3]) < 0.3);
  }
}

TEST_CASE("statistic count matches an independent enumeration") {
  const StatConfig cfg{.scales = 4, .orientations = 4, .autocorr_size = 7};
  // Enumerate every statistic the model defines.
  std::size_t count = 6;  // mean, variance, skew, kurtosis, min, max
  for (int s = 0; s <= 4; ++s)
    for (int dy = -3; dy <= 3; ++dy)
      for (int dx = -3; dx <= 3; ++dx)
        if (dy > 0 || (dy == 0 && dx >= 0)) ++count;  // autocorrelation is symmetric
  for (int s = 0; s < 4; ++s)
    for (int k = 0; k < 4; ++k) {
      ++count;  // magnitude mean
      for (int l = k + 1; l < 4; ++l) ++count;
      if (s + 1 < 4)
        for (int l = 0; l < 4; ++l) ++count;
    }
  CHECK(count == 219);
  CHECK(stat_count(cfg) == count);
  CHECK(compute_stats(testing::white_noise(128, 1), cfg).size() == count);
  CHECK(stat_field_names(cfg).size() == count);
}

TEST_CASE("stat_distance is a symmetric weighted L2") {
  const StatConfig cfg{.scales = 3, .orientations = 4, .autocorr_size = 5};
  const auto a = compute_stats(testing::white_noise(64, 1), cfg);
  const auto b = compute_stats(testing::filtered_noise(64, testing::random_texture_params(3), 2), cfg);
  CHECK(stat_distance(a, a) == 0.0);
  CHECK(stat_distance(a, b) == stat_distance(b, a));
  CHECK(stat_distance(a, b) > 0.0);
  const auto other = compute_stats(testing::white_noise(64, 1), StatConfig{.scales = 2, .orientations = 4, .autocorr_size = 5});
  CHECK_THROWS_AS(stat_distance(a, other), ConfigError);
}

TEST_CASE("statistics are deterministic") {
  const StatConfig cfg{.scales = 3, .orientations = 4, .autocorr_size = 5};
  const ImageBuffer img = testing::filtered_noise(64, testing::random_texture_params(9), 4);
  CHECK(compute_stats(img, cfg).flat() == compute_stats(img, cfg).flat());
}

TEST_CASE("within-texture distances beat between-texture distances") {
  const StatConfig cfg{.scales = 3, .orientations = 4, .autocorr_size = 5};
  int wins = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto pa = testing::random_texture_params(1000 + 2 * trial);
    const auto pb = testing::random_texture_params(1001 + 2 * trial);
    const ImageBuffer ta = testing::filtered_noise(128, pa, 10 + trial);
    const ImageBuffer tb = testing::filtered_noise(128, pb, 500 + trial);
    const auto a1 = compute_stats(crop(ta, 0, 0, 64), cfg);
    const auto a2 = compute_stats(crop(ta, 64, 64, 64), cfg);
    const auto b1 = compute_stats(crop(tb, 0, 0, 64), cfg);
    if (stat_distance(a1, a2) < stat_distance(a1, b1)) ++wins;
  }
  CHECK(wins >= 45);
}

TEST_CASE("circular shifts barely move the statistics") {
  const StatConfig cfg{.scales = 3, .orientations = 4, .autocorr_size = 5};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ImageBuffer tex = testing::filtered_noise(64, testing::random_texture_params(seed), seed + 40);
    const auto s = compute_stats(tex, cfg);
    const auto shifted = compute_stats(circular_shift(tex, 17, 5), cfg);
    const auto noise = compute_stats(testing::white_noise(64, seed + 80), cfg);
    CHECK(stat_distance(s, shifted) < 0.05 * stat_distance(s, noise));
  }
}

TEST_CASE("gradient vanishes at a matching image") {
  const StatConfig cfg{.scales = 2, .orientations = 4, .autocorr_size = 3};
  const ImageBuffer img = testing::white_noise(16, 5);
  const ImageBuffer g = stat_gradient(img, compute_stats(img, cfg), cfg);
  for (double v : g.data()) CHECK(v == 0.0);
}

TEST_CASE("analytic gradient agrees with central differences") {
  const StatConfig cfg{.scales = 2, .orientations = 4, .autocorr_size = 3};
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const ImageBuffer img = testing::white_noise(16, 200 + seed);
    const StatVector target = compute_stats(testing::white_noise(16, 300 + seed, 0.45, 0.2), cfg);
    const ImageBuffer g = stat_gradient(img, target, cfg);
    auto loss = [&](const std::vector<double>& x) {
      const double d = stat_distance(compute_stats(ImageBuffer(16, 16, 1, x), cfg), target);
      return 0.5 * d * d;
    };
    const auto fd = testing::central_differences(loss, img.vec(), 1e-4);
    CHECK(testing::fraction_within(g.vec(), fd, 1e-4) >= 0.99);
  }
}

TEST_CASE("pooled statistics gradient agrees with central differences") {
  const int n = 16;
  const StatConfig cfg{.scales = 2, .orientations = 3, .autocorr_size = 3};
  std::vector<RealPlane> windows(2, RealPlane(n * n));
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double t = std::clamp((x - 4.0) / 8.0, 0.0, 1.0);
      const double w = std::sin(t * std::numbers::pi / 2);
      windows[0][y * n + x] = 1 - w * w;
      windows[1][y * n + x] = w * w;
    }
  TextureStatistics engine(n, cfg, windows);
  const ImageBuffer img = testing::white_noise(n, 7);
  std::vector<std::vector<double>> targets;
  for (const auto& s : engine.compute(testing::white_noise(n, 8, 0.55, 0.1).vec())) targets.push_back(s.flat());
  const auto lg = engine.loss_and_gradient(img.vec(), targets);
  CHECK(lg.loss == doctest::Approx(engine.loss(img.vec(), targets)).epsilon(1e-14));
  const auto fd = testing::central_differences([&](const auto& x) { return engine.loss(x, targets); }, img.vec(), 1e-4);
  CHECK(testing::fraction_within(lg.gradient, fd, 1e-4) >= 0.99);

  // Features reproduce the loss as 0.5 * squared Euclidean distance.
  const auto f = engine.features(img.vec());
  const auto scale = engine.feature_scale();
  double d2 = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double t = scale[i] * targets[i / engine.stats_per_window()][i % engine.stats_per_window()];
    d2 += (f[i] - t) * (f[i] - t);
  }
  CHECK(0.5 * d2 == doctest::Approx(lg.loss).epsilon(1e-12));
}

TEST_CASE("group weights scale the gradient linearly") {
  StatConfig cfg{.scales = 2, .orientations = 4, .autocorr_size = 3};
  const ImageBuffer img = testing::white_noise(16, 1);
  const StatVector target = compute_stats(testing::white_noise(16, 2), cfg);
  cfg.group_weights = effective_group_weights(cfg);
  StatConfig scaled = cfg;
  for (double& w : *scaled.group_weights) w *= 3.0;
  const ImageBuffer g1 = stat_gradient(img, target, cfg);
  const ImageBuffer g3 = stat_gradient(img, target, scaled);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g3.vec()[i] == doctest::Approx(3.0 * g1.vec()[i]).epsilon(1e-12));
}

TEST_CASE("config validation and fitting") {
  CHECK_THROWS_AS(compute_stats(testing::white_noise(64, 1), StatConfig{.autocorr_size = 4}), ConfigError);
  CHECK_THROWS_AS(compute_stats(ImageBuffer(48, 48, 1, 0.5), StatConfig{}), DimensionError);
  CHECK_THROWS_AS(compute_stats(ImageBuffer(64, 64, 3, 0.5), StatConfig{}), DimensionError);
  const StatConfig fitted = StatConfig{}.fitted_to(32);
  CHECK(fitted.scales == 2);
  CHECK(fitted.autocorr_size == 7);
  CHECK_NOTHROW(compute_stats(testing::white_noise(32, 1), fitted));
  const StatConfig tiny = StatConfig{}.fitted_to(8);
  CHECK(tiny.scales == 1);
  CHECK(tiny.autocorr_size == 3);
}
