#include "inkline/wavelet.hpp"

#include <cmath>
#include <stdexcept>

namespace inkline {

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244008443621048490;
}

SubbandPair dwt1(const Mat& x, WaveletFamily family) {
  if (family != WaveletFamily::kHaar) throw std::runtime_error("unsupported wavelet family");
  if (x.rows < 2) throw std::runtime_error("dwt1 needs at least 2 rows");
  const std::size_t half = x.rows / 2;
  SubbandPair out{Mat(half, x.cols), Mat(half, x.cols)};
  for (std::size_t k = 0; k < half; ++k) {
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double a = x.at(2 * k, c);
      const double b = x.at(2 * k + 1, c);
      out.low.at(k, c) = (a + b) * kInvSqrt2;
      out.high.at(k, c) = (a - b) * kInvSqrt2;
    }
  }
  return out;
}

Mat idwt1(const SubbandPair& bands, WaveletFamily family) {
  if (family != WaveletFamily::kHaar) throw std::runtime_error("unsupported wavelet family");
  if (bands.low.rows != bands.high.rows || bands.low.cols != bands.high.cols)
    throw std::runtime_error("sub-band shape mismatch");
  Mat x(2 * bands.low.rows, bands.low.cols);
  for (std::size_t k = 0; k < bands.low.rows; ++k) {
    for (std::size_t c = 0; c < bands.low.cols; ++c) {
      const double l = bands.low.at(k, c);
      const double h = bands.high.at(k, c);
      x.at(2 * k, c) = (l + h) * kInvSqrt2;
      x.at(2 * k + 1, c) = (l - h) * kInvSqrt2;
    }
  }
  return x;
}

}  // namespace inkline
