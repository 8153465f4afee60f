#pragma once

#include <complex>
#include <vector>

#include "metamer/image.hpp"

namespace metamer {

using ComplexPlane = std::vector<std::complex<double>>;
using RealPlane = std::vector<double>;

// Real steerable pyramid of a square power-of-two image.
//
// Frequency-domain construction with polar-separable raised-cosine windows:
// a highpass residual, `scales` x `orientations` oriented bands and a lowpass
// residual. The filter bank is a tight frame, so reconstruction is the
// adjoint of decomposition and band energies sum to the image energy.
// Downsampling between scales is orthonormal, which makes the lowpass
// residual of a constant image equal to mean * 2^scales.
struct SteerablePyramid {
  int size = 0;  // side of the level-0 image
  int scales = 0;
  int orientations = 0;
  ImageBuffer highpass;
  std::vector<std::vector<ImageBuffer>> bands;  // [scale][orientation], scale s is size/2^s
  ImageBuffer lowpass;                          // size/2^scales

  double energy() const;
};

struct SteerableOptions {
  // Center-crop non-power-of-two inputs to the largest power-of-two square;
  // when false such inputs are rejected with a DimensionError.
  bool crop_non_pow2 = true;
};

// Smallest square side the pyramid accepts for a given scale count.
int min_steerable_size(int scales);

SteerablePyramid steerable_decompose(const ImageBuffer& img, int scales = 4,
                                     int orientations = 4, SteerableOptions opts = {});
ImageBuffer steerable_reconstruct(const SteerablePyramid& pyr);

// Filter bank shared by the decomposition and by the texture statistics.
// `analyze` yields the lowpass image entering every scale (plus the final
// residual) and the analytic (complex) oriented bands whose real parts are
// the SteerablePyramid bands. `analyze_adjoint` applies the transpose of
// that linear map, given gradients w.r.t. each output.
class SteerableBank {
 public:
  SteerableBank(int size, int scales, int orientations);

  int size() const { return size_; }
  int scales() const { return scales_; }
  int orientations() const { return orientations_; }
  int size_at(int scale) const { return size_ >> scale; }

  struct Coefficients {
    std::vector<RealPlane> lowpass;            // scales + 1 entries
    std::vector<std::vector<ComplexPlane>> bands;  // [scale][orientation]
  };

  Coefficients analyze(const RealPlane& img) const;
  RealPlane analyze_adjoint(const std::vector<RealPlane>& grad_lowpass,
                            const std::vector<std::vector<ComplexPlane>>& grad_bands) const;

  SteerablePyramid decompose(const RealPlane& img) const;
  RealPlane reconstruct(const SteerablePyramid& pyr) const;

 private:
  struct Level {
    int n = 0;
    RealPlane highpass;                   // H(r)
    RealPlane lowpass;                    // L(r)
    std::vector<RealPlane> analytic;      // one-sided angular windows
    std::vector<RealPlane> symmetric;     // real-band windows
  };

  int size_, scales_, orientations_;
  RealPlane hi0_, lo0_;
  std::vector<Level> levels_;
};

}  // namespace metamer
