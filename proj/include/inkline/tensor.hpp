#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace inkline::ad {

/// Dense row-major tensor. Sequences use shape {channels, length}.
template <typename S>
struct Tensor {
  std::vector<int> shape;
  std::vector<S> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> sh) : shape(std::move(sh)) {
    v.assign(static_cast<std::size_t>(numel_of(shape)), S{0});
  }
  Tensor(std::vector<int> sh, std::vector<S> data)
      : shape(std::move(sh)), v(std::move(data)) {
    if (static_cast<std::int64_t>(v.size()) != numel_of(shape))
      throw std::runtime_error("tensor data does not match shape");
  }

  static std::int64_t numel_of(const std::vector<int>& sh) {
    std::int64_t n = 1;
    for (int d : sh) n *= d;
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  S* data() { return v.data(); }
  const S* data() const { return v.data(); }

  static Tensor zeros(std::vector<int> sh) { return Tensor(std::move(sh)); }
  static Tensor full(std::vector<int> sh, S value) {
    Tensor t(std::move(sh));
    for (auto& x : t.v) x = value;
    return t;
  }
  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
    return out;
  }
};

inline std::string shape_string(const std::vector<int>& sh) {
  std::string s = "(";
  for (std::size_t i = 0; i < sh.size(); ++i) {
    s += std::to_string(sh[i]);
    if (i + 1 < sh.size()) s += ",";
  }
  s += ")";
  return s;
}

}  // namespace inkline::ad
