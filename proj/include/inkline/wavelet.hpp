#pragma once

#include <cstddef>
#include <vector>

namespace inkline {

/// Dense row-major L x d matrix of doubles used by the wavelet routines.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

/// Reserved hook; only the Haar family is implemented.
enum class WaveletFamily { kHaar };

struct SubbandPair {
  Mat low;   // floor(L/2) x d
  Mat high;  // floor(L/2) x d
};

/// One-level per-channel Haar analysis:
///   low_k  = (x_{2k} + x_{2k+1}) / sqrt(2)
///   high_k = (x_{2k} - x_{2k+1}) / sqrt(2)
/// An odd final sample is dropped (output length floor(L/2)). L < 2 errors.
SubbandPair dwt1(const Mat& x, WaveletFamily family = WaveletFamily::kHaar);

/// Perfect-reconstruction inverse of dwt1 (even-length signals).
Mat idwt1(const SubbandPair& bands, WaveletFamily family = WaveletFamily::kHaar);

}  // namespace inkline
