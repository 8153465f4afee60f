#pragma once

#include <vector>

#include "metamer/image.hpp"

namespace metamer {

// Burt-Adelson style Gaussian pyramid: each level is the previous one
// blurred with the separable 5-tap binomial kernel [1 4 6 4 1]/16
// (half-sample symmetric boundary) and decimated to ceil(n/2).
struct GaussianPyramid {
  std::vector<ImageBuffer> levels;
};

GaussianPyramid gaussian_pyramid(const ImageBuffer& img, int levels);

// One blur + decimate step, and its exact adjoint (transpose). The adjoint
// maps an image of reduced size back to `full_width` x `full_height`.
ImageBuffer pyramid_reduce(const ImageBuffer& img);
ImageBuffer pyramid_reduce_adjoint(const ImageBuffer& reduced, int full_width, int full_height);

// Level `level` alone (level 0 is the input itself).
ImageBuffer gaussian_level(const ImageBuffer& img, int level);
// Adjoint of gaussian_level: pulls a level-sized image back to full size.
ImageBuffer gaussian_level_adjoint(const ImageBuffer& level_img, int level, int full_width,
                                   int full_height);

// Maximum number of levels an image supports under the >= 4 px rule.
int max_pyramid_levels(int width, int height);

}  // namespace metamer
