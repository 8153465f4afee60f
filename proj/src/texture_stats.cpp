#include "metamer/texture_stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fft.hpp"
#include "metamer/error.hpp"

namespace metamer {
namespace {

// Variances at or below this are treated as zero (constant regions).
constexpr double kVarianceFloor = 1e-20;

struct Lag {
  int dx, dy;
};

std::vector<Lag> unique_lags(int m) {
  const int h = (m - 1) / 2;
  std::vector<Lag> lags;
  for (int dx = 0; dx <= h; ++dx) lags.push_back({dx, 0});
  for (int dy = 1; dy <= h; ++dy)
    for (int dx = -h; dx <= h; ++dx) lags.push_back({dx, dy});
  return lags;
}

int wrap(int i, int n) {
  i %= n;
  return i < 0 ? i + n : i;
}

void add_flag(std::vector<std::string>* flags, const char* f) {
  if (!flags) return;
  if (std::find(flags->begin(), flags->end(), f) == flags->end()) flags->push_back(f);
}

}  // namespace

const char* stat_group_name(StatGroupId g) {
  switch (g) {
    case StatGroupId::kPixelMarginals: return "pixel_marginals";
    case StatGroupId::kLowpassAutocorr: return "lowpass_autocorr";
    case StatGroupId::kMagnitudeMeans: return "magnitude_means";
    case StatGroupId::kMagnitudeCrossOrientation: return "magnitude_cross_orientation";
    case StatGroupId::kMagnitudeCrossScale: return "magnitude_cross_scale";
  }
  return "unknown";
}

void StatConfig::validate() const {
  if (scales < 1) throw ConfigError("StatConfig: scales must be >= 1");
  if (orientations < 1) throw ConfigError("StatConfig: orientations must be >= 1");
  if (autocorr_size < 1 || autocorr_size % 2 == 0)
    throw ConfigError("StatConfig: autocorr_size must be odd and >= 1");
  if (group_weights)
    for (double w : *group_weights)
      if (!std::isfinite(w) || w < 0) throw ConfigError("StatConfig: group weights must be finite and >= 0");
}

StatConfig StatConfig::fitted_to(int n) const {
  StatConfig out = *this;
  while (out.scales > 1 && ((n >> out.scales) < out.autocorr_size || n < min_steerable_size(out.scales)))
    --out.scales;
  const int coarse = n >> out.scales;
  if (coarse < out.autocorr_size) out.autocorr_size = std::max(1, coarse % 2 == 0 ? coarse - 1 : coarse);
  return out;
}

std::array<std::size_t, kStatGroupCount> stat_group_sizes(const StatConfig& cfg) {
  const std::size_t s = cfg.scales, k = cfg.orientations;
  const std::size_t a = (static_cast<std::size_t>(cfg.autocorr_size) * cfg.autocorr_size + 1) / 2;
  return {6, (s + 1) * a, s * k, s * k * (k - 1) / 2, (s - 1) * k * k};
}

std::size_t stat_count(const StatConfig& cfg) {
  std::size_t n = 0;
  for (std::size_t g : stat_group_sizes(cfg)) n += g;
  return n;
}

std::array<double, kStatGroupCount> effective_group_weights(const StatConfig& cfg) {
  if (cfg.group_weights) return *cfg.group_weights;
  const auto sizes = stat_group_sizes(cfg);
  std::array<double, kStatGroupCount> w{};
  for (int g = 0; g < kStatGroupCount; ++g) w[g] = sizes[g] ? 1.0 / static_cast<double>(sizes[g]) : 0.0;
  return w;
}

std::vector<std::string> stat_field_names(const StatConfig& cfg) {
  std::vector<std::string> names;
  const std::string px = stat_group_name(StatGroupId::kPixelMarginals);
  for (const char* f : {"mean", "variance", "skew", "kurtosis", "min", "max"}) names.push_back(px + "." + f);
  const std::string ac = stat_group_name(StatGroupId::kLowpassAutocorr);
  const auto lags = unique_lags(cfg.autocorr_size);
  for (int s = 0; s <= cfg.scales; ++s)
    for (const Lag& l : lags)
      names.push_back(ac + ".s" + std::to_string(s) + ".dx" + std::to_string(l.dx) + ".dy" + std::to_string(l.dy));
  const std::string mm = stat_group_name(StatGroupId::kMagnitudeMeans);
  for (int s = 0; s < cfg.scales; ++s)
    for (int k = 0; k < cfg.orientations; ++k)
      names.push_back(mm + ".s" + std::to_string(s) + ".o" + std::to_string(k));
  const std::string co = stat_group_name(StatGroupId::kMagnitudeCrossOrientation);
  for (int s = 0; s < cfg.scales; ++s)
    for (int k = 0; k < cfg.orientations; ++k)
      for (int l = k + 1; l < cfg.orientations; ++l)
        names.push_back(co + ".s" + std::to_string(s) + ".o" + std::to_string(k) + "o" + std::to_string(l));
  const std::string cs = stat_group_name(StatGroupId::kMagnitudeCrossScale);
  for (int s = 0; s + 1 < cfg.scales; ++s)
    for (int k = 0; k < cfg.orientations; ++k)
      for (int l = 0; l < cfg.orientations; ++l)
        names.push_back(cs + ".s" + std::to_string(s) + ".o" + std::to_string(k) + ".parent_o" + std::to_string(l));
  return names;
}

std::vector<double> StatVector::flat() const {
  std::vector<double> out;
  for (const auto& g : groups) out.insert(out.end(), g.values.begin(), g.values.end());
  return out;
}

std::size_t StatVector::size() const {
  std::size_t n = 0;
  for (const auto& g : groups) n += g.values.size();
  return n;
}

bool StatVector::has_flag(const std::string& f) const {
  return std::find(flags.begin(), flags.end(), f) != flags.end();
}

StatVector make_stat_vector(const StatConfig& cfg, const std::vector<double>& flat,
                            std::vector<std::string> flags) {
  if (flat.size() != stat_count(cfg))
    throw ConfigError("stat vector has " + std::to_string(flat.size()) + " entries, config expects " +
                      std::to_string(stat_count(cfg)));
  StatVector v;
  v.config = cfg;
  v.flags = std::move(flags);
  const auto sizes = stat_group_sizes(cfg);
  const auto weights = effective_group_weights(cfg);
  std::size_t off = 0;
  for (int g = 0; g < kStatGroupCount; ++g) {
    StatGroup grp;
    grp.id = static_cast<StatGroupId>(g);
    grp.name = stat_group_name(grp.id);
    grp.weight = weights[g];
    grp.values.assign(flat.begin() + off, flat.begin() + off + sizes[g]);
    off += sizes[g];
    v.groups.push_back(std::move(grp));
  }
  return v;
}

// ---------------------------------------------------------------------------
// Engine

struct TextureStatistics::Forward {
  RealPlane pixels;
  std::vector<RealPlane> lowpass;               // scaled by 2^-s
  std::vector<std::vector<ComplexPlane>> band;  // raw analytic bands
  std::vector<std::vector<RealPlane>> mag;      // |band| * 2^-s
  // Band s+1 interpolated onto the scale-s grid, and its scaled modulus.
  std::vector<std::vector<ComplexPlane>> parent;
  std::vector<std::vector<RealPlane>> parent_mag;
};

namespace {

// Band-limited 2x interpolation of a complex m x m plane (zero padding in
// frequency), amplitude preserving.
ComplexPlane spectral_upsample(const ComplexPlane& x, int m) {
  using detail::signed_freq;
  const int n = 2 * m;
  const auto fx = detail::fft2(x, m);
  detail::Spectrum pad(static_cast<std::size_t>(n) * n, detail::cplx{});
  for (int iy = 0; iy < m; ++iy)
    for (int ix = 0; ix < m; ++ix) {
      const int ky = signed_freq(iy, m), kx = signed_freq(ix, m);
      pad[(ky < 0 ? ky + n : ky) * n + (kx < 0 ? kx + n : kx)] = 4.0 * fx[iy * m + ix];
    }
  return detail::ifft2(pad, n);
}

// Adjoint of spectral_upsample.
ComplexPlane spectral_upsample_adjoint(const ComplexPlane& g, int m) {
  using detail::signed_freq;
  const int n = 2 * m;
  const auto fg = detail::fft2(g, n);
  detail::Spectrum crop(static_cast<std::size_t>(m) * m);
  for (int iy = 0; iy < m; ++iy)
    for (int ix = 0; ix < m; ++ix) {
      const int ky = signed_freq(iy, m), kx = signed_freq(ix, m);
      crop[iy * m + ix] = fg[(ky < 0 ? ky + n : ky) * n + (kx < 0 ? kx + n : kx)];
    }
  return detail::ifft2(crop, m);
}

}  // namespace

TextureStatistics::TextureStatistics(int size, StatConfig cfg, std::vector<RealPlane> windows)
    : size_(size),
      cfg_(std::move(cfg)),
      count_((cfg_.validate(), stat_count(cfg_))),
      bank_(size, cfg_.scales, cfg_.orientations) {
  if ((size >> cfg_.scales) < cfg_.autocorr_size)
    throw DimensionError("autocorrelation window " + std::to_string(cfg_.autocorr_size) +
                         " exceeds the coarsest lowpass (" + std::to_string(size >> cfg_.scales) + " px)");
  const auto sizes = stat_group_sizes(cfg_);
  const auto gw = effective_group_weights(cfg_);
  for (int g = 0; g < kStatGroupCount; ++g) weights_.insert(weights_.end(), sizes[g], gw[g]);

  const std::size_t npx = static_cast<std::size_t>(size) * size;
  if (windows.empty()) windows.emplace_back(npx, 1.0);
  double total_mass = 0.0;
  std::vector<double> masses;
  for (const RealPlane& w : windows) {
    if (w.size() != npx) throw DimensionError("pooling window does not match image size");
    double m = 0.0;
    for (double v : w) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("pooling window weights must be finite and >= 0");
      m += v;
    }
    if (m <= 0.0) throw ConfigError("pooling window has zero mass");
    masses.push_back(m);
    total_mass += m;
  }
  for (std::size_t r = 0; r < windows.size(); ++r) {
    Window win;
    win.share = windows.size() == 1 ? 1.0 : masses[r] / total_mass;
    RealPlane cur = windows[r];
    for (int s = 0; s <= cfg_.scales; ++s) {
      const int n = size >> s;
      if (s > 0) {
        RealPlane next(static_cast<std::size_t>(n) * n);
        const int pn = 2 * n;
        for (int y = 0; y < n; ++y)
          for (int x = 0; x < n; ++x)
            next[y * n + x] = 0.25 * (cur[(2 * y) * pn + 2 * x] + cur[(2 * y) * pn + 2 * x + 1] +
                                      cur[(2 * y + 1) * pn + 2 * x] + cur[(2 * y + 1) * pn + 2 * x + 1]);
        cur = std::move(next);
      }
      double sum = 0.0;
      Box b{n, n, 0, 0};
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const double v = cur[y * n + x];
          sum += v;
          if (v > 0) {
            b.x0 = std::min(b.x0, x);
            b.y0 = std::min(b.y0, y);
            b.x1 = std::max(b.x1, x + 1);
            b.y1 = std::max(b.y1, y + 1);
          }
        }
      RealPlane p = cur;
      for (double& v : p) v /= sum;
      win.p.push_back(std::move(p));
      win.box.push_back(b);
    }
    windows_.push_back(std::move(win));
  }
}

TextureStatistics::Forward TextureStatistics::forward(const RealPlane& img) const {
  if (img.size() != static_cast<std::size_t>(size_) * size_)
    throw DimensionError("image size does not match statistics engine");
  Forward f;
  f.pixels = img;
  auto coeffs = bank_.analyze(img);
  f.lowpass = std::move(coeffs.lowpass);
  for (int s = 0; s <= cfg_.scales; ++s) {
    const double c = std::ldexp(1.0, -s);
    for (double& v : f.lowpass[s]) v *= c;
  }
  f.band = std::move(coeffs.bands);
  f.mag.resize(cfg_.scales);
  for (int s = 0; s < cfg_.scales; ++s) {
    const double c = std::ldexp(1.0, -s);
    for (const auto& b : f.band[s]) {
      RealPlane m(b.size());
      for (std::size_t i = 0; i < b.size(); ++i) m[i] = c * std::abs(b[i]);
      f.mag[s].push_back(std::move(m));
    }
  }
  f.parent.resize(cfg_.scales > 0 ? cfg_.scales - 1 : 0);
  f.parent_mag.resize(f.parent.size());
  for (int s = 0; s + 1 < cfg_.scales; ++s) {
    const double c = std::ldexp(1.0, -(s + 1));
    for (const auto& b : f.band[s + 1]) {
      ComplexPlane up = spectral_upsample(b, size_ >> (s + 1));
      RealPlane m(up.size());
      for (std::size_t i = 0; i < up.size(); ++i) m[i] = c * std::abs(up[i]);
      f.parent[s].push_back(std::move(up));
      f.parent_mag[s].push_back(std::move(m));
    }
  }
  return f;
}

namespace {

// Weighted mean and centered copy over a box.
struct Centered {
  double mean = 0.0;
  double var = 0.0;
  RealPlane d;  // x - mean over the whole plane
};

template <class Box>
Centered center(const RealPlane& x, const RealPlane& p, const Box& b, int n) {
  Centered c;
  for (int y = b.y0; y < b.y1; ++y)
    for (int i = y * n + b.x0; i < y * n + b.x1; ++i) c.mean += p[i] * x[i];
  c.d.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) c.d[i] = x[i] - c.mean;
  for (int y = b.y0; y < b.y1; ++y)
    for (int i = y * n + b.x0; i < y * n + b.x1; ++i) c.var += p[i] * c.d[i] * c.d[i];
  return c;
}

template <class Box>
double weighted_cov(const RealPlane& a, const RealPlane& b, const RealPlane& p, const Box& bx, int n) {
  double s = 0.0;
  for (int y = bx.y0; y < bx.y1; ++y)
    for (int i = y * n + bx.x0; i < y * n + bx.x1; ++i) s += p[i] * a[i] * b[i];
  return s;
}

}  // namespace

std::vector<double> TextureStatistics::window_stats(const Forward& f, const Window& w,
                                                    std::vector<std::string>* flags) const {
  std::vector<double> out;
  out.reserve(count_);
  const int S = cfg_.scales, K = cfg_.orientations;

  // Pixel marginals.
  {
    const auto& p = w.p[0];
    const auto& b = w.box[0];
    const Centered c = center(f.pixels, p, b, size_);
    double m3 = 0, m4 = 0;
    double mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (int y = b.y0; y < b.y1; ++y)
      for (int i = y * size_ + b.x0; i < y * size_ + b.x1; ++i) {
        const double d = c.d[i], d2 = d * d;
        m3 += p[i] * d2 * d;
        m4 += p[i] * d2 * d2;
        if (p[i] > 0) {
          mn = std::min(mn, f.pixels[i]);
          mx = std::max(mx, f.pixels[i]);
        }
      }
    double skew = 0, kurt = 0;
    if (c.var > kVarianceFloor) {
      skew = m3 / std::pow(c.var, 1.5);
      kurt = m4 / (c.var * c.var) - 3.0;
    } else {
      add_flag(flags, "zero_variance");
    }
    out.insert(out.end(), {c.mean, c.var, skew, kurt, mn, mx});
  }

  // Lowpass autocorrelation.
  const auto lags = unique_lags(cfg_.autocorr_size);
  for (int s = 0; s <= S; ++s) {
    const int n = size_ >> s;
    const auto& p = w.p[s];
    const auto& b = w.box[s];
    const Centered c = center(f.lowpass[s], p, b, n);
    for (const Lag& l : lags) {
      double acc = 0.0;
      for (int y = b.y0; y < b.y1; ++y) {
        const int yy = wrap(y + l.dy, n);
        for (int x = b.x0; x < b.x1; ++x) acc += p[y * n + x] * c.d[y * n + x] * c.d[yy * n + wrap(x + l.dx, n)];
      }
      out.push_back(acc);
    }
  }

  // Magnitude means, then correlations (needing centered magnitudes).
  std::vector<std::vector<Centered>> cm(S);
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < K; ++k) {
      cm[s].push_back(center(f.mag[s][k], w.p[s], w.box[s], size_ >> s));
      out.push_back(cm[s][k].mean);
    }

  auto corr = [&](double cov, double va, double vb) {
    if (va <= kVarianceFloor || vb <= kVarianceFloor) {
      add_flag(flags, "degenerate_correlation");
      return 0.0;
    }
    return cov / std::sqrt(va * vb);
  };

  for (int s = 0; s < S; ++s)
    for (int k = 0; k < K; ++k)
      for (int l = k + 1; l < K; ++l)
        out.push_back(corr(weighted_cov(cm[s][k].d, cm[s][l].d, w.p[s], w.box[s], size_ >> s), cm[s][k].var,
                           cm[s][l].var));

  for (int s = 0; s + 1 < S; ++s) {
    const int n = size_ >> s;
    for (int k = 0; k < K; ++k)
      for (int l = 0; l < K; ++l) {
        const Centered pc = center(f.parent_mag[s][l], w.p[s], w.box[s], n);
        out.push_back(corr(weighted_cov(cm[s][k].d, pc.d, w.p[s], w.box[s], n), cm[s][k].var, pc.var));
      }
  }
  return out;
}

void TextureStatistics::window_backward(const Forward& f, const Window& w,
                                        const std::vector<double>& g,
                                        RealPlane& g_pixels, std::vector<RealPlane>& g_lowpass,
                                        std::vector<std::vector<RealPlane>>& g_mag,
                                        std::vector<std::vector<RealPlane>>& g_parent) const {
  const int S = cfg_.scales, K = cfg_.orientations;
  std::size_t off = 0;

  // Pixel marginals.
  {
    const auto& p = w.p[0];
    const auto& b = w.box[0];
    const Centered c = center(f.pixels, p, b, size_);
    double m3 = 0, m4 = 0;
    int imin = -1, imax = -1;
    for (int y = b.y0; y < b.y1; ++y)
      for (int i = y * size_ + b.x0; i < y * size_ + b.x1; ++i) {
        const double d = c.d[i], d2 = d * d;
        m3 += p[i] * d2 * d;
        m4 += p[i] * d2 * d2;
        if (p[i] > 0) {
          if (imin < 0 || f.pixels[i] < f.pixels[imin]) imin = i;
          if (imax < 0 || f.pixels[i] > f.pixels[imax]) imax = i;
        }
      }
    const double gm = g[off], gv = g[off + 1], gs = g[off + 2], gk = g[off + 3];
    const bool live = c.var > kVarianceFloor;
    const double v = c.var;
    // d skew = dm3 v^-1.5 - 1.5 m3 v^-2.5 dv ; d kurt = dm4 v^-2 - 2 m4 v^-3 dv
    const double s_m3 = live ? gs * std::pow(v, -1.5) : 0.0;
    const double k_m4 = live ? gk / (v * v) : 0.0;
    const double dv_total =
        gv + (live ? -1.5 * gs * m3 * std::pow(v, -2.5) - 2.0 * gk * m4 / (v * v * v) : 0.0);
    for (int y = b.y0; y < b.y1; ++y)
      for (int i = y * size_ + b.x0; i < y * size_ + b.x1; ++i) {
        const double d = c.d[i], d2 = d * d;
        g_pixels[i] += p[i] * (gm + dv_total * 2.0 * d + s_m3 * 3.0 * (d2 - v) + k_m4 * 4.0 * (d2 * d - m3));
      }
    if (imin >= 0) g_pixels[imin] += g[off + 4];
    if (imax >= 0) g_pixels[imax] += g[off + 5];
    off += 6;
  }

  // Lowpass autocorrelation: ac = sum_p p_p a_p a_{p+d}, a = l - mean_p(l).
  const auto lags = unique_lags(cfg_.autocorr_size);
  for (int s = 0; s <= S; ++s) {
    const int n = size_ >> s;
    const auto& p = w.p[s];
    const auto& b = w.box[s];
    const Centered c = center(f.lowpass[s], p, b, n);
    RealPlane ga(c.d.size(), 0.0);
    bool any = false;
    for (const Lag& l : lags) {
      const double gl = g[off++];
      if (gl == 0.0) continue;
      any = true;
      for (int y = b.y0; y < b.y1; ++y) {
        const int yy = wrap(y + l.dy, n);
        for (int x = b.x0; x < b.x1; ++x) {
          const int i = y * n + x, j = yy * n + wrap(x + l.dx, n);
          ga[i] += gl * p[i] * c.d[j];
          ga[j] += gl * p[i] * c.d[i];
        }
      }
    }
    if (!any) continue;
    double total = 0.0;
    for (double v : ga) total += v;
    for (std::size_t i = 0; i < ga.size(); ++i) g_lowpass[s][i] += ga[i] - p[i] * total;
  }

  std::vector<std::vector<Centered>> cm(S);
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < K; ++k) cm[s].push_back(center(f.mag[s][k], w.p[s], w.box[s], size_ >> s));

  for (int s = 0; s < S; ++s) {
    const int n = size_ >> s;
    const auto& b = w.box[s];
    for (int k = 0; k < K; ++k) {
      const double gl = g[off++];
      if (gl == 0.0) continue;
      for (int y = b.y0; y < b.y1; ++y)
        for (int i = y * n + b.x0; i < y * n + b.x1; ++i) g_mag[s][k][i] += gl * w.p[s][i];
    }
  }

  // d rho / d a_i = p_i (db_i / sqrt(va vb) - rho da_i / va), and symmetrically for b.
  auto corr_backward = [](double grad, const Centered& a, const Centered& bb, const RealPlane& p,
                          const Box& bx, int n, RealPlane& ga, RealPlane& gb) {
    if (grad == 0.0 || a.var <= kVarianceFloor || bb.var <= kVarianceFloor) return;
    const double sq = std::sqrt(a.var * bb.var);
    double cov = 0.0;
    for (int y = bx.y0; y < bx.y1; ++y)
      for (int i = y * n + bx.x0; i < y * n + bx.x1; ++i) cov += p[i] * a.d[i] * bb.d[i];
    const double rho = cov / sq;
    for (int y = bx.y0; y < bx.y1; ++y)
      for (int i = y * n + bx.x0; i < y * n + bx.x1; ++i) {
        ga[i] += grad * p[i] * (bb.d[i] / sq - rho * a.d[i] / a.var);
        gb[i] += grad * p[i] * (a.d[i] / sq - rho * bb.d[i] / bb.var);
      }
  };

  for (int s = 0; s < S; ++s)
    for (int k = 0; k < K; ++k)
      for (int l = k + 1; l < K; ++l)
        corr_backward(g[off++], cm[s][k], cm[s][l], w.p[s], w.box[s], size_ >> s, g_mag[s][k],
                      g_mag[s][l]);

  for (int s = 0; s + 1 < S; ++s) {
    const int n = size_ >> s;
    for (int k = 0; k < K; ++k)
      for (int l = 0; l < K; ++l) {
        const double gl = g[off++];
        if (gl == 0.0) continue;
        const Centered pc = center(f.parent_mag[s][l], w.p[s], w.box[s], n);
        corr_backward(gl, cm[s][k], pc, w.p[s], w.box[s], n, g_mag[s][k], g_parent[s][l]);
      }
  }
}

std::vector<StatVector> TextureStatistics::compute(const RealPlane& img) const {
  const Forward f = forward(img);
  std::vector<StatVector> out;
  for (const Window& w : windows_) {
    std::vector<std::string> flags;
    auto flat = window_stats(f, w, &flags);
    out.push_back(make_stat_vector(cfg_, flat, std::move(flags)));
  }
  return out;
}

double TextureStatistics::loss(const RealPlane& img, const std::vector<std::vector<double>>& targets) const {
  if (targets.size() != windows_.size()) throw ConfigError("target count does not match window count");
  const Forward f = forward(img);
  double total = 0.0;
  for (std::size_t r = 0; r < windows_.size(); ++r) {
    const auto s = window_stats(f, windows_[r], nullptr);
    if (targets[r].size() != s.size()) throw ConfigError("target statistics length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) acc += weights_[i] * (s[i] - targets[r][i]) * (s[i] - targets[r][i]);
    total += windows_[r].share * acc;
  }
  return 0.5 * total;
}

TextureStatistics::LossGradient TextureStatistics::loss_and_gradient(
    const RealPlane& img, const std::vector<std::vector<double>>& targets) const {
  if (targets.size() != windows_.size()) throw ConfigError("target count does not match window count");
  const Forward f = forward(img);
  const int S = cfg_.scales;
  RealPlane g_pixels(img.size(), 0.0);
  std::vector<RealPlane> g_lowpass;
  std::vector<std::vector<RealPlane>> g_mag(S);
  for (int s = 0; s <= S; ++s) g_lowpass.emplace_back(static_cast<std::size_t>(size_ >> s) * (size_ >> s), 0.0);
  for (int s = 0; s < S; ++s)
    for (int k = 0; k < cfg_.orientations; ++k) g_mag[s].emplace_back(g_lowpass[s].size(), 0.0);
  std::vector<std::vector<RealPlane>> g_parent(f.parent.size());
  for (std::size_t s = 0; s < g_parent.size(); ++s)
    for (int k = 0; k < cfg_.orientations; ++k) g_parent[s].emplace_back(g_lowpass[s].size(), 0.0);

  LossGradient out;
  double total = 0.0;
  for (std::size_t r = 0; r < windows_.size(); ++r) {
    const auto s = window_stats(f, windows_[r], nullptr);
    if (targets[r].size() != s.size()) throw ConfigError("target statistics length mismatch");
    std::vector<double> gs(s.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double d = s[i] - targets[r][i];
      acc += weights_[i] * d * d;
      gs[i] = windows_[r].share * weights_[i] * d;
    }
    total += windows_[r].share * acc;
    window_backward(f, windows_[r], gs, g_pixels, g_lowpass, g_mag, g_parent);
  }
  out.loss = 0.5 * total;

  // Undo the per-scale normalization and the modulus.
  std::vector<std::vector<ComplexPlane>> g_band(S);
  for (int s = 0; s <= S; ++s) {
    const double c = std::ldexp(1.0, -s);
    for (double& v : g_lowpass[s]) v *= c;
  }
  for (int s = 0; s < S; ++s) {
    const double c = std::ldexp(1.0, -s);
    for (int k = 0; k < cfg_.orientations; ++k) {
      const auto& band = f.band[s][k];
      ComplexPlane gb(band.size());
      for (std::size_t i = 0; i < band.size(); ++i) {
        const double a = std::abs(band[i]);
        gb[i] = a > 0 ? band[i] * (c * g_mag[s][k][i] / a) : std::complex<double>{};
      }
      g_band[s].push_back(std::move(gb));
    }
  }
  auto modulus_backward = [](const ComplexPlane& z, const RealPlane& gm, double c) {
    ComplexPlane g(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double a = std::abs(z[i]);
      g[i] = a > 0 ? z[i] * (c * gm[i] / a) : std::complex<double>{};
    }
    return g;
  };
  for (int s = 0; s + 1 < S; ++s) {
    const double c = std::ldexp(1.0, -(s + 1));
    for (int k = 0; k < cfg_.orientations; ++k) {
      const ComplexPlane gp =
          spectral_upsample_adjoint(modulus_backward(f.parent[s][k], g_parent[s][k], c), size_ >> (s + 1));
      for (std::size_t i = 0; i < gp.size(); ++i) g_band[s + 1][k][i] += gp[i];
    }
  }
  out.gradient = bank_.analyze_adjoint(g_lowpass, g_band);
  for (std::size_t i = 0; i < g_pixels.size(); ++i) out.gradient[i] += g_pixels[i];
  return out;
}

std::vector<double> TextureStatistics::feature_scale() const {
  std::vector<double> scale;
  scale.reserve(count_ * windows_.size());
  for (const Window& w : windows_)
    for (double wg : weights_) scale.push_back(std::sqrt(w.share * wg));
  return scale;
}

std::vector<double> TextureStatistics::features(const RealPlane& img) const {
  const Forward f = forward(img);
  std::vector<double> out;
  out.reserve(count_ * windows_.size());
  for (const Window& w : windows_) {
    const auto s = window_stats(f, w, nullptr);
    for (std::size_t i = 0; i < s.size(); ++i) out.push_back(std::sqrt(w.share * weights_[i]) * s[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

ImageBuffer prepare(const ImageBuffer& img) {
  if (img.channels() != 1) throw DimensionError("texture statistics need a grayscale image");
  if (img.width() != img.height() || !is_power_of_two(img.width()))
    throw DimensionError("texture statistics need a square power-of-two image");
  return img;
}

}  // namespace

StatVector compute_stats(const ImageBuffer& img, const StatConfig& cfg) {
  const ImageBuffer g = prepare(img);
  TextureStatistics engine(g.width(), cfg);
  return engine.compute(g.vec()).front();
}

double stat_distance(const StatVector& a, const StatVector& b) {
  if (!a.config.same_layout(b.config) || a.size() != b.size() || a.groups.size() != b.groups.size())
    throw ConfigError("stat_distance: vectors come from different statistic configurations");
  double acc = 0.0;
  for (std::size_t g = 0; g < a.groups.size(); ++g) {
    if (a.groups[g].weight != b.groups[g].weight)
      throw ConfigError("stat_distance: group weights differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.groups[g].values.size(); ++i) {
      const double d = a.groups[g].values[i] - b.groups[g].values[i];
      s += d * d;
    }
    acc += a.groups[g].weight * s;
  }
  return std::sqrt(acc);
}

ImageBuffer stat_gradient(const ImageBuffer& img, const StatVector& target, const StatConfig& cfg) {
  const ImageBuffer g = prepare(img);
  if (!target.config.same_layout(cfg) || target.size() != stat_count(cfg))
    throw ConfigError("stat_gradient: target was computed with a different configuration");
  TextureStatistics engine(g.width(), cfg);
  auto lg = engine.loss_and_gradient(g.vec(), {target.flat()});
  return ImageBuffer(g.width(), g.height(), 1, std::move(lg.gradient));
}

}  // namespace metamer
