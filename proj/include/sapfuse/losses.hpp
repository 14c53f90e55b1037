#pragma once

// Answer cross-entropy and pixel-wise mask losses (BCE + Dice) with their
// gradients. Values are computed in double regardless of storage type.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "sapfuse/errors.hpp"
#include "sapfuse/tensor.hpp"

namespace sapfuse::losses {

inline constexpr double kDiceSmoothing = 1.0;

template <typename T>
struct AnswerLoss {
  double value = 0.0;
  BasicTensor<T> grad;  // d value / d logits
};

/// −log softmax(logits)[label].
template <typename T>
AnswerLoss<T> answer_ce(const BasicTensor<T>& logits, std::size_t label) {
  if (label >= logits.size()) {
    throw DomainError("answer_ce: label " + std::to_string(label) + " outside vocabulary of " +
                      std::to_string(logits.size()));
  }
  double peak = -INFINITY;
  for (T v : logits.values()) peak = std::max(peak, static_cast<double>(v));
  double denom = 0.0;
  for (T v : logits.values()) denom += std::exp(static_cast<double>(v) - peak);
  AnswerLoss<T> out;
  out.value = std::log(denom) + peak - static_cast<double>(logits[label]);
  out.grad = BasicTensor<T>(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = std::exp(static_cast<double>(logits[i]) - peak) / denom;
    out.grad[i] = static_cast<T>(p - (i == label ? 1.0 : 0.0));
  }
  return out;
}

template <typename T>
struct MaskLoss {
  double ce = 0.0;
  double dice = 0.0;
  BasicTensor<T> grad_ce;
  BasicTensor<T> grad_dice;
};

/// ce: mean BCE of sigmoid(logits) against gt; dice: 1 − (2Σpg + 1)/(Σp + Σg + 1).
template <typename T>
MaskLoss<T> mask_losses(const BasicTensor<T>& logits, const BasicTensor<T>& gt) {
  if (logits.shape() != gt.shape()) {
    throw DimensionError("mask_losses: logits " + shape_string(logits.shape()) + " vs mask " +
                         shape_string(gt.shape()));
  }
  const std::size_t n = logits.size();
  MaskLoss<T> out;
  out.grad_ce = BasicTensor<T>(logits.shape());
  out.grad_dice = BasicTensor<T>(logits.shape());
  std::vector<double> p(n);
  double bce = 0.0, inter = 0.0, sum_p = 0.0, sum_g = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits[i];
    const double g = gt[i];
    // Stable log(1 + e^z) − z·g.
    bce += std::max(z, 0.0) - z * g + std::log1p(std::exp(-std::abs(z)));
    p[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    inter += p[i] * g;
    sum_p += p[i];
    sum_g += g;
  }
  out.ce = bce / static_cast<double>(n);
  const double num = 2.0 * inter + kDiceSmoothing;
  const double den = sum_p + sum_g + kDiceSmoothing;
  out.dice = 1.0 - num / den;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = gt[i];
    const double dp = p[i] * (1.0 - p[i]);
    out.grad_ce[i] = static_cast<T>((p[i] - g) / static_cast<double>(n));
    out.grad_dice[i] = static_cast<T>(-(2.0 * g * den - num) / (den * den) * dp);
  }
  return out;
}

}  // namespace sapfuse::losses
