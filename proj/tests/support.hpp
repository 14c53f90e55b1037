#pragma once

// Helpers shared by the test binaries: seeded random tensors and
// distributions, and small 64-bit reference routines.

#include <cmath>
#include <cstdint>
#include <vector>

#include "sapfuse/rng.hpp"
#include "sapfuse/tensor.hpp"

namespace testing_support {

using sapfuse::BasicTensor;
using sapfuse::Rng;
using sapfuse::Shape;

template <typename T = float>
BasicTensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Strictly positive entries summing to one (normalized in double).
template <typename T = float>
BasicTensor<T> random_distribution(std::size_t n, Rng& rng) {
  std::vector<double> raw(n);
  double total = 0.0;
  for (auto& v : raw) {
    v = rng.uniform(0.05, 1.0);
    total += v;
  }
  BasicTensor<T> t(Shape{n});
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<T>(raw[i] / total);
  return t;
}

inline std::vector<double> softmax64(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double z = 0.0;
  for (double v : x) z += std::exp(v - m);
  std::vector<double> out;
  for (double v : x) out.push_back(std::exp(v - m) / z);
  return out;
}

inline double cosine64(const double* a, const double* b, std::size_t n) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

template <typename T>
std::vector<double> to64(const BasicTensor<T>& t) {
  return std::vector<double>(t.values().begin(), t.values().end());
}

}  // namespace testing_support
