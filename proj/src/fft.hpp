#pragma once

#include <complex>
#include <vector>

namespace metamer::detail {

using cplx = std::complex<double>;
using Spectrum = std::vector<cplx>;

// Unnormalized forward 2-D DFT of a real n x n image (row-major).
Spectrum fft2(const std::vector<double>& img, int n);
Spectrum fft2(const Spectrum& img, int n);
// Inverse 2-D DFT including the 1/n^2 factor.
Spectrum ifft2(const Spectrum& spec, int n);
std::vector<double> ifft2_real(const Spectrum& spec, int n);

// Signed frequency index for DFT bin k of an n-point transform.
inline int signed_freq(int k, int n) { return k < (n + 1) / 2 ? k : k - n; }

}  // namespace metamer::detail
