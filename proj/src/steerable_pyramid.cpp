#include "metamer/steerable_pyramid.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "fft.hpp"
#include "metamer/error.hpp"

namespace metamer {
namespace {

using detail::cplx;
using detail::signed_freq;
using detail::Spectrum;
constexpr double kPi = std::numbers::pi;

// Raised-cosine transition over one octave below r = pi: 0 for r <= pi/2,
// 1 for r >= pi. Its complement sqrt(1 - h^2) is the matching lowpass.
double highpass_profile(double r) {
  if (r <= 0.0) return 0.0;
  const double lr = std::log2(r / kPi);
  if (lr >= 0.0) return 1.0;
  if (lr <= -1.0) return 0.0;
  return std::cos(kPi / 2.0 * -lr);
}

double lowpass_profile(double r) {
  if (r <= 0.0) return 1.0;
  const double lr = std::log2(r / kPi);
  if (lr >= 0.0) return 0.0;
  if (lr <= -1.0) return 1.0;
  return std::sin(kPi / 2.0 * -lr);
}

double factorial(int k) {
  double f = 1.0;
  for (int i = 2; i <= k; ++i) f *= i;
  return f;
}

// Normalizer making sum_k alpha^2 cos^{2(K-1)}(theta - pi k/K) == 1.
double angular_gain(int k) {
  return std::pow(2.0, k - 1) * factorial(k - 1) / std::sqrt(k * factorial(2 * (k - 1)));
}

double wrap_angle(double a) {
  while (a > kPi) a -= 2 * kPi;
  while (a <= -kPi) a += 2 * kPi;
  return a;
}

// One-sided window 2*alpha*cos^{K-1} on the half plane facing theta_k.
double analytic_window(double wx, double wy, int k, int orientations, double gain) {
  const double theta = std::atan2(wy, wx);
  const double d = wrap_angle(theta - kPi * k / orientations);
  const double ad = std::abs(d);
  if (ad > kPi / 2) return 0.0;
  const double c = std::pow(std::cos(d), orientations - 1);
  return ad == kPi / 2 ? gain * c : 2.0 * gain * c;
}

int index_of(int fx, int fy, int n) {
  const int ix = fx < 0 ? fx + n : fx;
  const int iy = fy < 0 ? fy + n : fy;
  return iy * n + ix;
}

// Crop the centred band [-n/4, n/4) of an n x n spectrum, with the 1/2 gain
// of an orthonormal 2x decimation.
Spectrum crop_half(const Spectrum& s, int n) {
  const int m = n / 2;
  Spectrum out(static_cast<std::size_t>(m) * m);
  for (int iy = 0; iy < m; ++iy) {
    const int fy = signed_freq(iy, m);
    for (int ix = 0; ix < m; ++ix) {
      const int fx = signed_freq(ix, m);
      out[iy * m + ix] = 0.5 * s[index_of(fx, fy, n)];
    }
  }
  return out;
}

// Transpose of crop_half (zero padding with the same gain, doubled because
// the spectra are unnormalized: see analyze_adjoint).
Spectrum pad_double(const Spectrum& s, int m) {
  const int n = 2 * m;
  Spectrum out(static_cast<std::size_t>(n) * n, cplx{0.0, 0.0});
  for (int iy = 0; iy < m; ++iy) {
    const int fy = signed_freq(iy, m);
    for (int ix = 0; ix < m; ++ix) {
      const int fx = signed_freq(ix, m);
      out[index_of(fx, fy, n)] = 2.0 * s[iy * m + ix];
    }
  }
  return out;
}

void multiply(Spectrum& s, const RealPlane& f) {
  for (std::size_t i = 0; i < s.size(); ++i) s[i] *= f[i];
}

Spectrum multiplied(const Spectrum& s, const RealPlane& f) {
  Spectrum out = s;
  multiply(out, f);
  return out;
}

ImageBuffer plane_image(const RealPlane& p, int n) { return ImageBuffer(n, n, 1, p); }

}  // namespace

int min_steerable_size(int scales) { return std::max(8, 2 << scales); }

double SteerablePyramid::energy() const {
  double e = 0.0;
  auto add = [&e](const ImageBuffer& b) {
    for (double v : b.data()) e += v * v;
  };
  add(highpass);
  add(lowpass);
  for (const auto& row : bands)
    for (const auto& b : row) add(b);
  return e;
}

SteerableBank::SteerableBank(int size, int scales, int orientations)
    : size_(size), scales_(scales), orientations_(orientations) {
  if (scales < 1) throw ConfigError("steerable pyramid needs at least one scale");
  if (orientations < 1) throw ConfigError("steerable pyramid needs at least one orientation");
  if (!is_power_of_two(size) || size < min_steerable_size(scales))
    throw DimensionError("steerable pyramid with " + std::to_string(scales) +
                         " scales needs a power-of-two side >= " +
                         std::to_string(min_steerable_size(scales)) + ", got " +
                         std::to_string(size));
  const double gain = angular_gain(orientations);

  auto radius_plane = [](int n, auto&& fn) {
    RealPlane out(static_cast<std::size_t>(n) * n);
    for (int iy = 0; iy < n; ++iy) {
      const double wy = 2 * kPi * signed_freq(iy, n) / n;
      for (int ix = 0; ix < n; ++ix) {
        const double wx = 2 * kPi * signed_freq(ix, n) / n;
        out[iy * n + ix] = fn(wx, wy);
      }
    }
    return out;
  };

  hi0_ = radius_plane(size, [](double wx, double wy) { return highpass_profile(std::hypot(wx, wy)); });
  lo0_ = radius_plane(size, [](double wx, double wy) { return lowpass_profile(std::hypot(wx, wy)); });

  for (int s = 0; s < scales; ++s) {
    Level lv;
    lv.n = size >> s;
    lv.highpass = radius_plane(lv.n, [](double wx, double wy) {
      return highpass_profile(2.0 * std::hypot(wx, wy));
    });
    lv.lowpass = radius_plane(lv.n, [](double wx, double wy) {
      return lowpass_profile(2.0 * std::hypot(wx, wy));
    });
    for (int k = 0; k < orientations; ++k) {
      RealPlane a = radius_plane(lv.n, [&](double wx, double wy) {
        return analytic_window(wx, wy, k, orientations, gain);
      });
      RealPlane sym = radius_plane(lv.n, [&](double wx, double wy) {
        return 0.5 * (analytic_window(wx, wy, k, orientations, gain) +
                      analytic_window(-wx, -wy, k, orientations, gain));
      });
      for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] *= lv.highpass[i];
        sym[i] *= lv.highpass[i];
      }
      lv.analytic.push_back(std::move(a));
      lv.symmetric.push_back(std::move(sym));
    }
    levels_.push_back(std::move(lv));
  }
}

SteerableBank::Coefficients SteerableBank::analyze(const RealPlane& img) const {
  if (img.size() != static_cast<std::size_t>(size_) * size_)
    throw DimensionError("analyze: image size does not match filter bank");
  Coefficients out;
  out.bands.resize(scales_);
  Spectrum lo = multiplied(detail::fft2(img, size_), lo0_);
  for (int s = 0; s < scales_; ++s) {
    const Level& lv = levels_[s];
    out.lowpass.push_back(detail::ifft2_real(lo, lv.n));
    for (int k = 0; k < orientations_; ++k)
      out.bands[s].push_back(detail::ifft2(multiplied(lo, lv.analytic[k]), lv.n));
    multiply(lo, lv.lowpass);
    lo = crop_half(lo, lv.n);
  }
  out.lowpass.push_back(detail::ifft2_real(lo, size_ >> scales_));
  return out;
}

RealPlane SteerableBank::analyze_adjoint(
    const std::vector<RealPlane>& grad_lowpass,
    const std::vector<std::vector<ComplexPlane>>& grad_bands) const {
  if (static_cast<int>(grad_lowpass.size()) != scales_ + 1 ||
      static_cast<int>(grad_bands.size()) != scales_)
    throw StructureError("analyze_adjoint: gradient structure does not match filter bank");
  // Every forward stage is U^H F U for a real diagonal F and the unitary DFT
  // U, so each adjoint is the same filter applied again. Decimation
  // x -> ifft_m(crop(fft_n x))/2 has transpose y -> 2 ifft_n(pad(fft_m y)).
  Spectrum g = detail::fft2(grad_lowpass[scales_], size_ >> scales_);
  for (int s = scales_ - 1; s >= 0; --s) {
    const Level& lv = levels_[s];
    const int n = lv.n;
    Spectrum acc = pad_double(g, n / 2);
    multiply(acc, lv.lowpass);
    Spectrum lo_grad = detail::fft2(grad_lowpass[s], n);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += lo_grad[i];
    for (int k = 0; k < orientations_; ++k) {
      if (grad_bands[s][k].empty()) continue;
      // Real part of ifft(A fft(g_c)): spectrum (W(b) + conj(W(-b))) / 2.
      Spectrum w = multiplied(detail::fft2(grad_bands[s][k], n), lv.analytic[k]);
      for (int iy = 0; iy < n; ++iy) {
        const int my = (n - iy) % n;
        for (int ix = 0; ix < n; ++ix) {
          const int mx = (n - ix) % n;
          acc[iy * n + ix] += 0.5 * (w[iy * n + ix] + std::conj(w[my * n + mx]));
        }
      }
    }
    g = std::move(acc);
  }
  multiply(g, lo0_);
  return detail::ifft2_real(g, size_);
}

SteerablePyramid SteerableBank::decompose(const RealPlane& img) const {
  SteerablePyramid pyr;
  pyr.size = size_;
  pyr.scales = scales_;
  pyr.orientations = orientations_;
  const Spectrum x = detail::fft2(img, size_);
  pyr.highpass = plane_image(detail::ifft2_real(multiplied(x, hi0_), size_), size_);
  Spectrum lo = multiplied(x, lo0_);
  pyr.bands.resize(scales_);
  for (int s = 0; s < scales_; ++s) {
    const Level& lv = levels_[s];
    for (int k = 0; k < orientations_; ++k)
      pyr.bands[s].push_back(
          plane_image(detail::ifft2_real(multiplied(lo, lv.symmetric[k]), lv.n), lv.n));
    multiply(lo, lv.lowpass);
    lo = crop_half(lo, lv.n);
  }
  const int m = size_ >> scales_;
  pyr.lowpass = plane_image(detail::ifft2_real(lo, m), m);
  return pyr;
}

RealPlane SteerableBank::reconstruct(const SteerablePyramid& pyr) const {
  if (pyr.size != size_ || pyr.scales != scales_ || pyr.orientations != orientations_ ||
      static_cast<int>(pyr.bands.size()) != scales_)
    throw StructureError("reconstruct: pyramid layout does not match filter bank");
  const int m = size_ >> scales_;
  if (pyr.lowpass.width() != m || pyr.lowpass.height() != m)
    throw StructureError("reconstruct: lowpass residual has wrong dimensions");
  if (pyr.highpass.width() != size_ || pyr.highpass.height() != size_)
    throw StructureError("reconstruct: highpass residual has wrong dimensions");
  Spectrum g = detail::fft2(pyr.lowpass.vec(), m);
  for (int s = scales_ - 1; s >= 0; --s) {
    const Level& lv = levels_[s];
    if (static_cast<int>(pyr.bands[s].size()) != orientations_)
      throw StructureError("reconstruct: wrong orientation count at scale " + std::to_string(s));
    Spectrum acc = pad_double(g, lv.n / 2);
    multiply(acc, lv.lowpass);
    for (int k = 0; k < orientations_; ++k) {
      const ImageBuffer& b = pyr.bands[s][k];
      if (b.width() != lv.n || b.height() != lv.n || b.channels() != 1)
        throw StructureError("reconstruct: band (" + std::to_string(s) + "," +
                             std::to_string(k) + ") has wrong dimensions");
      Spectrum bs = multiplied(detail::fft2(b.vec(), lv.n), lv.symmetric[k]);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += bs[i];
    }
    g = std::move(acc);
  }
  multiply(g, lo0_);
  Spectrum hp = multiplied(detail::fft2(pyr.highpass.vec(), size_), hi0_);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += hp[i];
  return detail::ifft2_real(g, size_);
}

SteerablePyramid steerable_decompose(const ImageBuffer& img, int scales, int orientations,
                                     SteerableOptions opts) {
  if (img.empty()) throw DimensionError("steerable_decompose: empty image");
  const ImageBuffer sq = require_pow2_square(to_grayscale(img), opts.crop_non_pow2);
  SteerableBank bank(sq.width(), scales, orientations);
  return bank.decompose(sq.vec());
}

ImageBuffer steerable_reconstruct(const SteerablePyramid& pyr) {
  SteerableBank bank(pyr.size, pyr.scales, pyr.orientations);
  return plane_image(bank.reconstruct(pyr), pyr.size);
}

}  // namespace metamer
