#include "sapfuse/metrics.hpp"

namespace sapfuse::metrics {

double Overlap::iou() const {
  if (union_count == 0) return 1.0;
  return static_cast<double>(intersection) / static_cast<double>(union_count);
}

Overlap mask_overlap(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mask_iou: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Overlap o;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float x = a[i], y = b[i];
    if ((x != 0.0f && x != 1.0f) || (y != 0.0f && y != 1.0f)) {
      throw DomainError("mask_iou: masks must be binary");
    }
    const bool xa = x == 1.0f, yb = y == 1.0f;
    o.intersection += (xa && yb) ? 1 : 0;
    o.union_count += (xa || yb) ? 1 : 0;
  }
  return o;
}

double mask_iou(const Tensor& a, const Tensor& b) { return mask_overlap(a, b).iou(); }

double mean_iou(std::span<const Overlap> overlaps) {
  if (overlaps.empty()) throw DomainError("mean_iou: no mask records");
  double acc = 0.0;
  for (const auto& o : overlaps) acc += o.iou();
  return acc / static_cast<double>(overlaps.size());
}

double overall_iou(std::span<const Overlap> overlaps) {
  if (overlaps.empty()) throw DomainError("overall_iou: no mask records");
  std::size_t inter = 0, uni = 0;
  for (const auto& o : overlaps) {
    inter += o.intersection;
    uni += o.union_count;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double accuracy(std::span<const LabelRecord> labels) {
  if (labels.empty()) throw DomainError("accuracy: no label records");
  std::size_t hits = 0;
  for (const auto& l : labels) hits += l.pred == l.gt ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

Summary aggregate_metrics(std::span<const MaskRecord> masks, std::span<const LabelRecord> labels) {
  std::vector<Overlap> overlaps;
  overlaps.reserve(masks.size());
  for (const auto& r : masks) overlaps.push_back(mask_overlap(r.pred, r.gt));
  Summary s;
  s.miou = mean_iou(overlaps);
  s.oiou = overall_iou(overlaps);
  s.accuracy = accuracy(labels);
  return s;
}

}  // namespace sapfuse::metrics
