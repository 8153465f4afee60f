#include "fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <utility>

namespace metamer::detail {
namespace {

// FFTW planning is not thread-safe; execution of an existing plan on new
// arrays is. Plans are created once per (size, direction) and never freed.
fftw_plan plan_for(int n, int sign) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, fftw_plan> plans;
  std::lock_guard lock(mu);
  auto it = plans.find({n, sign});
  if (it != plans.end()) return it->second;
  std::vector<cplx> a(static_cast<std::size_t>(n) * n), b(a.size());
  fftw_plan p = fftw_plan_dft_2d(n, n, reinterpret_cast<fftw_complex*>(a.data()),
                                 reinterpret_cast<fftw_complex*>(b.data()), sign,
                                 FFTW_ESTIMATE | FFTW_UNALIGNED);
  plans.emplace(std::make_pair(n, sign), p);
  return p;
}

Spectrum run(const Spectrum& in, int n, int sign) {
  Spectrum in_copy = in;
  Spectrum out(in.size());
  fftw_execute_dft(plan_for(n, sign), reinterpret_cast<fftw_complex*>(in_copy.data()),
                   reinterpret_cast<fftw_complex*>(out.data()));
  return out;
}

}  // namespace

Spectrum fft2(const std::vector<double>& img, int n) {
  Spectrum c(img.begin(), img.end());
  return run(c, n, FFTW_FORWARD);
}

Spectrum fft2(const Spectrum& img, int n) { return run(img, n, FFTW_FORWARD); }

Spectrum ifft2(const Spectrum& spec, int n) {
  Spectrum out = run(spec, n, FFTW_BACKWARD);
  const double s = 1.0 / (static_cast<double>(n) * n);
  for (auto& v : out) v *= s;
  return out;
}

std::vector<double> ifft2_real(const Spectrum& spec, int n) {
  Spectrum c = ifft2(spec, n);
  std::vector<double> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[i].real();
  return out;
}

}  // namespace metamer::detail
