#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sapfuse/tensor.hpp"

namespace sapfuse::metrics {

struct Overlap {
  std::size_t intersection = 0;
  std::size_t union_count = 0;
  /// IoU, defined as 1 when both masks are empty.
  double iou() const;
};

/// Pixel counts |a∧b| and |a∨b|; both masks must be binary and equally shaped.
Overlap mask_overlap(const Tensor& a, const Tensor& b);

double mask_iou(const Tensor& a, const Tensor& b);

struct MaskRecord {
  Tensor pred;
  Tensor gt;
};

struct LabelRecord {
  std::size_t pred = 0;
  std::size_t gt = 0;
};

struct Summary {
  double miou = 0.0;
  double oiou = 0.0;
  double accuracy = 0.0;
};

double mean_iou(std::span<const Overlap> overlaps);
/// Σ intersections / Σ unions; 1 when every union is empty.
double overall_iou(std::span<const Overlap> overlaps);
double accuracy(std::span<const LabelRecord> labels);

/// Both lists must be non-empty.
Summary aggregate_metrics(std::span<const MaskRecord> masks, std::span<const LabelRecord> labels);

}  // namespace sapfuse::metrics
