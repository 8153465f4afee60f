// Test-only fixtures: noise images and synthetic stationary textures.
#pragma once

#include <cmath>
#include <numbers>
#include <random>

#include "fft.hpp"
#include "metamer/image.hpp"

namespace metamer::testing {

inline ImageBuffer white_noise(int n, std::uint64_t seed, double mean = 0.5, double sd = 0.15) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(mean, sd);
  ImageBuffer img(n, n, 1);
  for (double& v : img.data()) v = nd(rng);
  return img;
}

inline ImageBuffer uniform_noise(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageBuffer img(n, n, 1);
  for (double& v : img.data()) v = u(rng);
  return img;
}

// Parameters of a stationary filtered-noise texture: an oriented
// log-Gaussian band-pass around (radius, angle) in radians/pixel.
struct TextureParams {
  double radius = 1.0;
  double angle = 0.0;
  double angular_sd = 0.4;
  double octave_sd = 0.35;
  double contrast = 0.15;
};

inline TextureParams random_texture_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> r(0.35, 1.6), a(0.0, std::numbers::pi), w(0.25, 0.8);
  TextureParams p;
  p.radius = r(rng);
  p.angle = a(rng);
  p.angular_sd = w(rng);
  return p;
}

// Filtered white noise; `seed` selects the noise sample, `p` the texture.
inline ImageBuffer filtered_noise(int n, const TextureParams& p, std::uint64_t seed) {
  using detail::signed_freq;
  const ImageBuffer noise = white_noise(n, seed, 0.0, 1.0);
  auto spec = detail::fft2(noise.vec(), n);
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      const double wx = 2 * std::numbers::pi * signed_freq(ix, n) / n;
      const double wy = 2 * std::numbers::pi * signed_freq(iy, n) / n;
      const double r = std::hypot(wx, wy);
      double g = 0.0;
      if (r > 0) {
        const double lr = std::log2(r / p.radius) / p.octave_sd;
        double d = std::atan2(wy, wx) - p.angle;
        d = std::remainder(d, std::numbers::pi);  // orientation is mod pi
        const double da = d / p.angular_sd;
        g = std::exp(-0.5 * lr * lr) * std::exp(-0.5 * da * da);
      }
      spec[iy * n + ix] *= g;
    }
  }
  auto plane = detail::ifft2_real(spec, n);
  double m = 0, v = 0;
  for (double x : plane) m += x;
  m /= plane.size();
  for (double x : plane) v += (x - m) * (x - m);
  const double sd = std::sqrt(v / plane.size());
  for (double& x : plane) x = 0.5 + p.contrast * (x - m) / sd;
  return ImageBuffer(n, n, 1, std::move(plane));
}

inline double rel_mse(const ImageBuffer& a, const ImageBuffer& b) {
  double e = 0;
  for (std::size_t i = 0; i < a.size(); ++i) e += (a.vec()[i] - b.vec()[i]) * (a.vec()[i] - b.vec()[i]);
  e /= a.size();
  return e / a.variance();
}

}  // namespace metamer::testing
