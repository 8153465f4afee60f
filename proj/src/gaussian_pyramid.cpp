#include "metamer/gaussian_pyramid.hpp"

#include <algorithm>
#include <array>
#include <string>

#include "metamer/error.hpp"

namespace metamer {
namespace {

constexpr std::array<double, 5> kBinomial = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

// Half-sample symmetric reflection: ... b a | a b c ... c | c b ...
int reflect(int i, int n) {
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

// out[j] = sum_t k[t] * in[reflect(2j + t - 2)], j < ceil(n/2)
void reduce_1d(const double* in, int n, int stride, double* out, int out_stride) {
  const int m = (n + 1) / 2;
  for (int j = 0; j < m; ++j) {
    double s = 0.0;
    for (int t = 0; t < 5; ++t) s += kBinomial[t] * in[reflect(2 * j + t - 2, n) * stride];
    out[j * out_stride] = s;
  }
}

// Transpose of reduce_1d: scatters each reduced sample back along the taps.
void reduce_1d_adjoint(const double* in, int n, int stride, double* out, int out_stride) {
  const int m = (n + 1) / 2;
  for (int i = 0; i < n; ++i) out[i * out_stride] = 0.0;
  for (int j = 0; j < m; ++j) {
    const double v = in[j * stride];
    for (int t = 0; t < 5; ++t) out[reflect(2 * j + t - 2, n) * out_stride] += kBinomial[t] * v;
  }
}

ImageBuffer reduce_plane(const ImageBuffer& p) {
  const int w = p.width(), h = p.height();
  const int mw = (w + 1) / 2, mh = (h + 1) / 2;
  std::vector<double> tmp(static_cast<std::size_t>(mw) * h);
  const double* src = p.data().data();
  for (int y = 0; y < h; ++y) reduce_1d(src + y * w, w, 1, tmp.data() + y * mw, 1);
  ImageBuffer out(mw, mh, 1);
  double* dst = out.data().data();
  for (int x = 0; x < mw; ++x) reduce_1d(tmp.data() + x, h, mw, dst + x, mw);
  return out;
}

ImageBuffer reduce_plane_adjoint(const ImageBuffer& r, int w, int h) {
  const int mw = (w + 1) / 2, mh = (h + 1) / 2;
  if (r.width() != mw || r.height() != mh)
    throw DimensionError("reduced image does not match ceil(full/2)");
  std::vector<double> tmp(static_cast<std::size_t>(mw) * h);
  const double* src = r.data().data();
  for (int x = 0; x < mw; ++x) reduce_1d_adjoint(src + x, h, mw, tmp.data() + x, mw);
  ImageBuffer out(w, h, 1);
  double* dst = out.data().data();
  for (int y = 0; y < h; ++y) reduce_1d_adjoint(tmp.data() + y * mw, w, 1, dst + y * w, 1);
  return out;
}

}  // namespace

int max_pyramid_levels(int width, int height) {
  int levels = 0;
  int side = std::min(width, height);
  while (side >= 4) {
    ++levels;
    side /= 2;
  }
  return levels;
}

ImageBuffer pyramid_reduce(const ImageBuffer& img) {
  if (img.empty()) throw DimensionError("cannot reduce an empty image");
  if (img.channels() == 1) return reduce_plane(img);
  ImageBuffer out((img.width() + 1) / 2, (img.height() + 1) / 2, img.channels());
  for (int c = 0; c < img.channels(); ++c) out.set_channel(c, reduce_plane(img.channel(c)));
  return out;
}

ImageBuffer pyramid_reduce_adjoint(const ImageBuffer& reduced, int full_width, int full_height) {
  if (reduced.channels() == 1) return reduce_plane_adjoint(reduced, full_width, full_height);
  ImageBuffer out(full_width, full_height, reduced.channels());
  for (int c = 0; c < reduced.channels(); ++c)
    out.set_channel(c, reduce_plane_adjoint(reduced.channel(c), full_width, full_height));
  return out;
}

GaussianPyramid gaussian_pyramid(const ImageBuffer& img, int levels) {
  if (img.empty()) throw DimensionError("gaussian_pyramid: empty image");
  if (levels < 1) throw DimensionError("gaussian_pyramid: levels must be >= 1");
  const int side = std::min(img.width(), img.height());
  if ((side >> (levels - 1)) < 4)
    throw DimensionError("gaussian_pyramid: " + std::to_string(levels) +
                         " levels need min(width,height)/2^(levels-1) >= 4, image is " +
                         std::to_string(img.width()) + "x" + std::to_string(img.height()));
  GaussianPyramid pyr;
  pyr.levels.reserve(levels);
  pyr.levels.push_back(img);
  for (int k = 1; k < levels; ++k) pyr.levels.push_back(pyramid_reduce(pyr.levels.back()));
  return pyr;
}

ImageBuffer gaussian_level(const ImageBuffer& img, int level) {
  return gaussian_pyramid(img, level + 1).levels.back();
}

ImageBuffer gaussian_level_adjoint(const ImageBuffer& level_img, int level, int full_width,
                                   int full_height) {
  std::vector<std::pair<int, int>> dims{{full_width, full_height}};
  for (int k = 0; k < level; ++k)
    dims.push_back({(dims.back().first + 1) / 2, (dims.back().second + 1) / 2});
  ImageBuffer cur = level_img;
  for (int k = level; k > 0; --k)
    cur = pyramid_reduce_adjoint(cur, dims[k - 1].first, dims[k - 1].second);
  return cur;
}

}  // namespace metamer
