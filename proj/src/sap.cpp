#include "sapfuse/sap.hpp"

#include <cmath>

#include "sapfuse/ops.hpp"

namespace sapfuse::sap {

std::string to_string(LayerMode mode) {
  switch (mode) {
    case LayerMode::first: return "first";
    case LayerMode::middle: return "middle";
    case LayerMode::last: return "last";
    case LayerMode::all: return "all";
  }
  return "unknown";
}

LayerMode parse_layer_mode(const std::string& name) {
  if (name == "first") return LayerMode::first;
  if (name == "middle") return LayerMode::middle;
  if (name == "last") return LayerMode::last;
  if (name == "all") return LayerMode::all;
  throw DomainError("unknown SAP layer mode '" + name + "'");
}

std::vector<std::size_t> selected_layers(LayerMode mode, std::size_t layers) {
  if (layers == 0) return {};
  switch (mode) {
    case LayerMode::first: return {0};
    case LayerMode::middle: return {layers / 2};
    case LayerMode::last: return {layers - 1};
    case LayerMode::all: break;
  }
  std::vector<std::size_t> all(layers);
  for (std::size_t l = 0; l < layers; ++l) all[l] = l;
  return all;
}

std::string to_string(KlDirection d) {
  return d == KlDirection::attention_to_target ? "attention_to_target" : "target_to_attention";
}

KlDirection parse_kl_direction(const std::string& name) {
  if (name == "attention_to_target") return KlDirection::attention_to_target;
  if (name == "target_to_attention") return KlDirection::target_to_attention;
  throw DomainError("unknown KL direction '" + name + "'");
}

template <typename T>
BasicTensor<T> seg_to_image_map(const BasicTensor<T>& raw) {
  if (raw.rank() != 4) throw DimensionError("seg_to_image_map: expected L×H×Q×P logits");
  const std::size_t layers = raw.dim(0), heads = raw.dim(1), segs = raw.dim(2), cells = raw.dim(3);
  BasicTensor<T> out({layers, segs, cells});
  std::vector<double> acc(cells);
  std::vector<T> probs(cells);
  auto src = raw.data();
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t q = 0; q < segs; ++q) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t h = 0; h < heads; ++h) {
        ops::softmax_into<T>(src.subspan(((l * heads + h) * segs + q) * cells, cells), probs);
        for (std::size_t p = 0; p < cells; ++p) acc[p] += probs[p];
      }
      for (std::size_t p = 0; p < cells; ++p) {
        out(l, q, p) = static_cast<T>(acc[p] / static_cast<double>(heads));
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> seg_to_image_map_backward(const BasicTensor<T>& raw, const BasicTensor<T>& grad_map) {
  if (raw.rank() != 4) throw DimensionError("seg_to_image_map_backward: expected L×H×Q×P logits");
  const std::size_t layers = raw.dim(0), heads = raw.dim(1), segs = raw.dim(2), cells = raw.dim(3);
  if (grad_map.shape() != Shape{layers, segs, cells}) {
    throw DimensionError("seg_to_image_map_backward: cotangent shape mismatch");
  }
  BasicTensor<T> out = BasicTensor<T>::zeros_like(raw);
  std::vector<T> probs(cells), g(cells);
  auto src = raw.data();
  auto dst = out.data();
  const double inv_heads = 1.0 / static_cast<double>(heads);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t q = 0; q < segs; ++q) {
      for (std::size_t p = 0; p < cells; ++p) g[p] = static_cast<T>(grad_map(l, q, p) * inv_heads);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = ((l * heads + h) * segs + q) * cells;
        ops::softmax_into<T>(src.subspan(off, cells), probs);
        ops::softmax_backward_into<T>(probs, g, dst.subspan(off, cells));
      }
    }
  }
  return out;
}

namespace {

void check_divisible(const Tensor& mask, GridSize grid) {
  if (mask.rank() != 2) throw DimensionError("mask_to_target: expected an H×W mask");
  if (grid.rows == 0 || grid.cols == 0 || mask.rows() % grid.rows != 0 ||
      mask.cols() % grid.cols != 0) {
    throw DimensionError("mask " + shape_string(mask.shape()) + " not divisible by grid " +
                         std::to_string(grid.rows) + "x" + std::to_string(grid.cols));
  }
}

}  // namespace

std::vector<std::size_t> mask_cell_counts(const Tensor& mask, GridSize grid) {
  check_divisible(mask, grid);
  const std::size_t ch = mask.rows() / grid.rows, cw = mask.cols() / grid.cols;
  std::vector<std::size_t> counts(grid.cells(), 0);
  for (std::size_t y = 0; y < mask.rows(); ++y) {
    for (std::size_t x = 0; x < mask.cols(); ++x) {
      if (mask(y, x) >= 0.5f) ++counts[(y / ch) * grid.cols + x / cw];
    }
  }
  return counts;
}

TokenTarget mask_to_target(const Tensor& mask, GridSize grid) {
  const auto counts = mask_cell_counts(mask, grid);
  const std::size_t cells = grid.cells();
  const double cell_area =
      static_cast<double>(mask.rows() / grid.rows) * static_cast<double>(mask.cols() / grid.cols);
  std::size_t total = 0;
  for (std::size_t c : counts) total += c;

  TokenTarget out;
  out.g = Tensor({cells});
  if (total == 0) {
    for (float& v : out.g.data()) v = static_cast<float>(1.0 / static_cast<double>(cells));
    out.valid = false;
    return out;
  }
  std::vector<double> pooled(cells);
  double sum = 0.0;
  for (std::size_t p = 0; p < cells; ++p) {
    pooled[p] = static_cast<double>(counts[p]) / cell_area + ops::kKlEpsilon;
    sum += pooled[p];
  }
  for (std::size_t p = 0; p < cells; ++p) out.g[p] = static_cast<float>(pooled[p] / sum);
  out.valid = true;
  return out;
}

MaskTarget stack_targets(const std::vector<TokenTarget>& rows) {
  if (rows.empty()) throw DimensionError("stack_targets: need at least one seg token target");
  const std::size_t cells = rows.front().g.size();
  MaskTarget t;
  t.g = Tensor({rows.size(), cells});
  for (std::size_t q = 0; q < rows.size(); ++q) {
    if (rows[q].g.size() != cells) throw DimensionError("stack_targets: token count mismatch");
    for (std::size_t p = 0; p < cells; ++p) t.g(q, p) = rows[q].g[p];
    t.valid.push_back(rows[q].valid);
  }
  return t;
}

namespace {

template <typename T>
void check_loss_inputs(const BasicTensor<T>& map, const BasicMaskTarget<T>& target) {
  if (map.rank() != 3) throw DimensionError("sap_loss: expected an L×Q×P map");
  if (target.g.rank() != 2 || target.g.rows() != map.dim(1) || target.g.cols() != map.dim(2)) {
    throw DimensionError("sap_loss: target " + shape_string(target.g.shape()) +
                         " does not match map " + shape_string(map.shape()));
  }
  if (target.valid.size() != map.dim(1)) {
    throw DimensionError("sap_loss: validity flags do not match seg token count");
  }
}

}  // namespace

template <typename T>
double sap_loss(const BasicTensor<T>& map, const BasicMaskTarget<T>& target, LayerMode mode,
                KlDirection direction) {
  check_loss_inputs(map, target);
  const std::size_t segs = map.dim(1), cells = map.dim(2);
  auto m = map.data();
  double total = 0.0;
  for (std::size_t l : selected_layers(mode, map.dim(0))) {
    for (std::size_t q = 0; q < segs; ++q) {
      if (!target.valid[q]) continue;
      auto a = m.subspan((l * segs + q) * cells, cells);
      auto g = target.g.row(q);
      total += direction == KlDirection::attention_to_target ? ops::kl_divergence<T>(a, g)
                                                             : ops::kl_divergence<T>(g, a);
    }
  }
  return total;
}

template <typename T>
BasicTensor<T> sap_loss_backward(const BasicTensor<T>& map, const BasicMaskTarget<T>& target,
                                 LayerMode mode, double grad_out, KlDirection direction) {
  check_loss_inputs(map, target);
  const std::size_t segs = map.dim(1), cells = map.dim(2);
  BasicTensor<T> out = BasicTensor<T>::zeros_like(map);
  auto m = map.data();
  auto d = out.data();
  for (std::size_t l : selected_layers(mode, map.dim(0))) {
    for (std::size_t q = 0; q < segs; ++q) {
      if (!target.valid[q]) continue;
      const std::size_t off = (l * segs + q) * cells;
      auto a = m.subspan(off, cells);
      auto g = target.g.row(q);
      if (direction == KlDirection::attention_to_target) {
        ops::kl_divergence_backward_into<T>(a, g, grad_out, d.subspan(off, cells), {});
      } else {
        ops::kl_divergence_backward_into<T>(g, a, grad_out, {}, d.subspan(off, cells));
      }
    }
  }
  return out;
}

template <typename T>
std::size_t sap_term_count(const BasicTensor<T>& map, const BasicMaskTarget<T>& target, LayerMode mode) {
  check_loss_inputs(map, target);
  std::size_t valid = 0;
  for (bool v : target.valid) valid += v ? 1 : 0;
  return selected_layers(mode, map.dim(0)).size() * valid;
}

#define SAPFUSE_INSTANTIATE_SAP(T)                                                                \
  template BasicTensor<T> seg_to_image_map<T>(const BasicTensor<T>&);                             \
  template BasicTensor<T> seg_to_image_map_backward<T>(const BasicTensor<T>&, const BasicTensor<T>&); \
  template double sap_loss<T>(const BasicTensor<T>&, const BasicMaskTarget<T>&, LayerMode,         \
                              KlDirection);                                                       \
  template BasicTensor<T> sap_loss_backward<T>(const BasicTensor<T>&, const BasicMaskTarget<T>&,   \
                                               LayerMode, double, KlDirection);                   \
  template std::size_t sap_term_count<T>(const BasicTensor<T>&, const BasicMaskTarget<T>&, LayerMode);

SAPFUSE_INSTANTIATE_SAP(float)
SAPFUSE_INSTANTIATE_SAP(double)

}  // namespace sapfuse::sap
