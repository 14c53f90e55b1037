#pragma once

// Spatial attention prompting: mask-derived token distributions and KL
// supervision of the head-averaged seg→image attention.

#include <cstddef>
#include <string>
#include <vector>

#include "sapfuse/model.hpp"
#include "sapfuse/tensor.hpp"

namespace sapfuse::sap {

/// Token-level target distributions, one row per seg token.
template <typename T>
struct BasicMaskTarget {
  BasicTensor<T> g;         // Q×P
  std::vector<bool> valid;  // false where the source mask was empty
};

using MaskTarget = BasicMaskTarget<float>;

enum class LayerMode { first, middle, last, all };

std::string to_string(LayerMode mode);
LayerMode parse_layer_mode(const std::string& name);

/// Layer indices supervised under `mode` for an L-layer model; middle is ⌊L/2⌋.
std::vector<std::size_t> selected_layers(LayerMode mode, std::size_t layers);

/// Which way the divergence runs: KL(Â‖G) as printed, or KL(G‖Â).
enum class KlDirection { attention_to_target, target_to_attention };

std::string to_string(KlDirection d);
KlDirection parse_kl_direction(const std::string& name);

/// Â[l,q,·] = (1/H) Σ_h softmax_P(raw[l,h,q,·]); raw is L×H×Q×P.
template <typename T>
BasicTensor<T> seg_to_image_map(const BasicTensor<T>& raw);

template <typename T>
BasicTensor<T> seg_to_image_map(const BasicAttentionStack<T>& attn) {
  return seg_to_image_map(attn.raw);
}

/// Cotangent of `raw` given the cotangent of the map.
template <typename T>
BasicTensor<T> seg_to_image_map_backward(const BasicTensor<T>& raw, const BasicTensor<T>& grad_map);

struct TokenTarget {
  Tensor g;  // P
  bool valid = false;
};

/// Average-pools a binary H×W mask onto the token grid, adds ε and
/// normalizes. Soft inputs are rounded at 0.5. An empty mask yields a
/// uniform, invalid target.
TokenTarget mask_to_target(const Tensor& mask, GridSize grid);

/// Integer positive-pixel count per grid cell (row-major) after rounding.
std::vector<std::size_t> mask_cell_counts(const Tensor& mask, GridSize grid);

/// Stacks per-seg-token targets into a Q×P MaskTarget.
MaskTarget stack_targets(const std::vector<TokenTarget>& rows);

/// Σ over selected layers and valid q of KL(Â[l,q]‖g[q]) (or the reverse).
template <typename T>
double sap_loss(const BasicTensor<T>& map, const BasicMaskTarget<T>& target, LayerMode mode,
                KlDirection direction = KlDirection::attention_to_target);

/// Cotangent of `map` for a sap_loss cotangent `grad_out`.
template <typename T>
BasicTensor<T> sap_loss_backward(const BasicTensor<T>& map, const BasicMaskTarget<T>& target,
                                 LayerMode mode, double grad_out,
                                 KlDirection direction = KlDirection::attention_to_target);

/// Number of terms in the double sum: |selected layers| · |valid q|.
template <typename T>
std::size_t sap_term_count(const BasicTensor<T>& map, const BasicMaskTarget<T>& target, LayerMode mode);

}  // namespace sapfuse::sap
