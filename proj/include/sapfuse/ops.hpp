#pragma once

// Dense kernels with analytic reverse-mode gradients.
//
// Storage follows the tensor's scalar type; every reduction (sums, norms,
// dot products, softmax denominators) accumulates in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sapfuse/tensor.hpp"

namespace sapfuse {

/// Value of an operation plus its vector-Jacobian product: given the output
/// cotangent, returns one cotangent per input, shaped like that input.
template <typename T>
struct GradPair {
  BasicTensor<T> value;
  std::function<std::vector<BasicTensor<T>>(const BasicTensor<T>&)> vjp;
};

namespace ops {

inline constexpr double kKlEpsilon = 1e-8;
inline constexpr double kNormalizationTolerance = 1e-4;

template <typename T>
bool all_finite(std::span<const T> x) {
  return std::all_of(x.begin(), x.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
double sum(std::span<const T> x) {
  double acc = 0.0;
  for (T v : x) acc += static_cast<double>(v);
  return acc;
}

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

template <typename T>
void add_inplace(BasicTensor<T>& into, const BasicTensor<T>& other) {
  if (into.shape() != other.shape()) {
    throw DimensionError("add: shape " + shape_string(into.shape()) + " vs " +
                         shape_string(other.shape()));
  }
  auto dst = into.data();
  auto src = other.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void scale_inplace(BasicTensor<T>& x, double factor) {
  for (T& v : x.data()) v = static_cast<T>(v * factor);
}

namespace detail {

template <typename T>
void require_matrix(const BasicTensor<T>& m, const char* what) {
  if (m.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got shape " +
                         shape_string(m.shape()));
  }
}

}  // namespace detail

/// a[m×k] · b[k×n]; row-major i-k-j accumulation, fixed order.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  BasicTensor<T> out({m, n});
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = op + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ap[i * k + p];
      if (av == T(0)) continue;
      const T* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// aᵀ · b for a[k×m], b[k×n].
template <typename T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_tn");
  detail::require_matrix(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_tn: leading dimensions disagree " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  BasicTensor<T> out({m, n});
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = bp + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ap[p * m + i];
      if (av == T(0)) continue;
      T* orow = op + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

/// a · bᵀ for a[m×k], b[n×k].
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: trailing dimensions disagree " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  BasicTensor<T> out({m, n});
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = ap + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = bp + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      op[i * n + j] = acc;
    }
  }
  return out;
}

template <typename T>
GradPair<T> matmul_vjp(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  GradPair<T> out{matmul(a, b), {}};
  out.vjp = [a, b](const BasicTensor<T>& cot) {
    return std::vector<BasicTensor<T>>{matmul_nt(cot, b), matmul_tn(a, cot)};
  };
  return out;
}

/// Numerically stable softmax of `in` into `out` (same length).
template <typename T>
void softmax_into(std::span<const T> in, std::span<T> out) {
  double max_v = -INFINITY;
  for (T v : in) max_v = std::max(max_v, static_cast<double>(v));
  double denom = 0.0;
  for (std::size_t i = 0; i < in.size(); ++i) denom += std::exp(static_cast<double>(in[i]) - max_v);
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = static_cast<T>(std::exp(static_cast<double>(in[i]) - max_v) / denom);
  }
}

/// grad_in = y ⊙ (grad_y − ⟨y, grad_y⟩), accumulated into `grad_in`.
template <typename T>
void softmax_backward_into(std::span<const T> y, std::span<const T> grad_y, std::span<T> grad_in) {
  const double inner = dot(y, grad_y);
  for (std::size_t i = 0; i < y.size(); ++i) {
    grad_in[i] += static_cast<T>(y[i] * (grad_y[i] - inner));
  }
}

namespace detail {

struct AxisLayout {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(shape));
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace detail

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto l = detail::axis_layout(x.shape(), axis);
  BasicTensor<T> out = BasicTensor<T>::zeros_like(x);
  std::vector<T> lane_in(l.extent), lane_out(l.extent);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.extent * l.inner + i;
      for (std::size_t e = 0; e < l.extent; ++e) lane_in[e] = x[base + e * l.inner];
      softmax_into<T>(lane_in, lane_out);
      for (std::size_t e = 0; e < l.extent; ++e) out[base + e * l.inner] = lane_out[e];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& y, const BasicTensor<T>& grad_y,
                                std::size_t axis) {
  if (y.shape() != grad_y.shape()) throw DimensionError("softmax_backward: shape mismatch");
  const auto l = detail::axis_layout(y.shape(), axis);
  BasicTensor<T> out = BasicTensor<T>::zeros_like(y);
  std::vector<T> ly(l.extent), lg(l.extent), lo(l.extent);
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.extent * l.inner + i;
      for (std::size_t e = 0; e < l.extent; ++e) {
        ly[e] = y[base + e * l.inner];
        lg[e] = grad_y[base + e * l.inner];
        lo[e] = T(0);
      }
      softmax_backward_into<T>(ly, lg, lo);
      for (std::size_t e = 0; e < l.extent; ++e) out[base + e * l.inner] = lo[e];
    }
  }
  return out;
}

template <typename T>
GradPair<T> softmax_vjp(const BasicTensor<T>& x, std::size_t axis) {
  GradPair<T> out{softmax(x, axis), {}};
  out.vjp = [y = out.value, axis](const BasicTensor<T>& cot) {
    return std::vector<BasicTensor<T>>{softmax_backward(y, cot, axis)};
  };
  return out;
}

/// Σ pᵢ·log((pᵢ+ε)/(gᵢ+ε)) without normalization checks.
template <typename T>
double kl_divergence_unchecked(std::span<const T> p, std::span<const T> g) {
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    acc += pi * std::log((pi + kKlEpsilon) / (static_cast<double>(g[i]) + kKlEpsilon));
  }
  return acc;
}

/// Accumulates grad_out · ∂KL/∂p into dp and grad_out · ∂KL/∂g into dg
/// (either span may be empty to skip it).
template <typename T>
void kl_divergence_backward_into(std::span<const T> p, std::span<const T> g, double grad_out,
                                 std::span<T> dp, std::span<T> dg) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    const double gi = g[i];
    if (!dp.empty()) {
      dp[i] += static_cast<T>(grad_out * (std::log((pi + kKlEpsilon) / (gi + kKlEpsilon)) +
                                          pi / (pi + kKlEpsilon)));
    }
    if (!dg.empty()) dg[i] += static_cast<T>(-grad_out * pi / (gi + kKlEpsilon));
  }
}

namespace detail {

template <typename T>
void require_distribution(std::span<const T> x, const char* name) {
  double total = 0.0;
  for (T v : x) {
    if (!(v >= T(0))) throw DomainError(std::string("kl_divergence: negative entry in ") + name);
    total += v;
  }
  if (std::abs(total - 1.0) > kNormalizationTolerance) {
    throw DomainError(std::string("kl_divergence: ") + name + " sums to " + std::to_string(total));
  }
}

}  // namespace detail

template <typename T>
double kl_divergence(std::span<const T> p, std::span<const T> g) {
  if (p.size() != g.size()) {
    throw DimensionError("kl_divergence: length " + std::to_string(p.size()) + " vs " +
                         std::to_string(g.size()));
  }
  detail::require_distribution(p, "p");
  detail::require_distribution(g, "g");
  return kl_divergence_unchecked(p, g);
}

template <typename T>
double kl_divergence(const BasicTensor<T>& p, const BasicTensor<T>& g) {
  if (p.size() != g.size()) {
    throw DimensionError("kl_divergence: shape " + shape_string(p.shape()) + " vs " +
                         shape_string(g.shape()));
  }
  return kl_divergence<T>(p.data(), g.data());
}

/// KL as a differentiable function of both arguments (no normalization check,
/// so it can be probed off the simplex by finite differences).
template <typename T>
GradPair<T> kl_divergence_vjp(const BasicTensor<T>& p, const BasicTensor<T>& g) {
  if (p.shape() != g.shape()) throw DimensionError("kl_divergence_vjp: shape mismatch");
  GradPair<T> out{BasicTensor<T>::scalar(static_cast<T>(kl_divergence_unchecked<T>(p.data(), g.data()))),
                  {}};
  out.vjp = [p, g](const BasicTensor<T>& cot) {
    BasicTensor<T> dp = BasicTensor<T>::zeros_like(p);
    BasicTensor<T> dg = BasicTensor<T>::zeros_like(g);
    kl_divergence_backward_into<T>(p.data(), g.data(), cot[0], dp.data(), dg.data());
    return std::vector<BasicTensor<T>>{std::move(dp), std::move(dg)};
  };
  return out;
}

template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine_similarity: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine_similarity: zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

template <typename T>
double cosine_similarity(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return cosine_similarity<T>(a.data(), b.data());
}

/// Accumulates grad_out · ∂cos/∂a and grad_out · ∂cos/∂b.
template <typename T>
void cosine_similarity_backward_into(std::span<const T> a, std::span<const T> b, double grad_out,
                                     std::span<T> da, std::span<T> db) {
  const double na2 = dot(a, a);
  const double nb2 = dot(b, b);
  const double na = std::sqrt(na2);
  const double nb = std::sqrt(nb2);
  const double ab = dot(a, b);
  const double inv = 1.0 / (na * nb);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!da.empty()) da[i] += static_cast<T>(grad_out * (b[i] * inv - ab * inv * a[i] / na2));
    if (!db.empty()) db[i] += static_cast<T>(grad_out * (a[i] * inv - ab * inv * b[i] / nb2));
  }
}

template <typename T>
GradPair<T> cosine_similarity_vjp(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  GradPair<T> out{BasicTensor<T>::scalar(static_cast<T>(cosine_similarity(a, b))), {}};
  out.vjp = [a, b](const BasicTensor<T>& cot) {
    BasicTensor<T> da = BasicTensor<T>::zeros_like(a);
    BasicTensor<T> db = BasicTensor<T>::zeros_like(b);
    cosine_similarity_backward_into<T>(a.data(), b.data(), cot[0], da.data(), db.data());
    return std::vector<BasicTensor<T>>{std::move(da), std::move(db)};
  };
  return out;
}

template <typename T>
GradPair<T> sum_vjp(const BasicTensor<T>& x) {
  GradPair<T> out{BasicTensor<T>::scalar(static_cast<T>(sum<T>(x.data()))), {}};
  out.vjp = [shape = x.shape()](const BasicTensor<T>& cot) {
    return std::vector<BasicTensor<T>>{BasicTensor<T>(shape, cot[0])};
  };
  return out;
}

}  // namespace ops
}  // namespace sapfuse
