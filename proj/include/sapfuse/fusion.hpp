#pragma once

// Cross-modal fusion: token-level contrastive alignment, learnable-query
// mutual attention, reweight-and-concatenate, and token dropping.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sapfuse/model.hpp"
#include "sapfuse/tensor.hpp"

namespace sapfuse::fusion {

template <typename T>
struct BasicModalityPair {
  BasicTokenGrid<T> optical;
  BasicTokenGrid<T> sar;

  /// Both grids must agree in token count, width and layout.
  void validate() const;
};

using ModalityPair = BasicModalityPair<float>;

template <typename T>
struct BasicFusionParams {
  BasicTensor<T> queries;  // k×D
  double tau_cl = 0.07;
};

using FusionParams = BasicFusionParams<float>;

/// Per-token relevance of each modality; each vector sums to one.
template <typename T>
struct BasicImportanceWeights {
  BasicTensor<T> w_s;
  BasicTensor<T> w_o;
};

using ImportanceWeights = BasicImportanceWeights<float>;

template <typename T>
BasicImportanceWeights<T> uniform_weights(std::size_t tokens);

/// Mean over tokens of the per-position cosine between two P×D grids.
template <typename T>
double mean_token_cosine(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
struct ContrastiveGrads {
  std::vector<BasicTensor<T>> optical;
  std::vector<BasicTensor<T>> sar;
};

/// Symmetric batch contrastive loss with pair score
/// f(a,b) = exp(mean_p cos(a_p, b_p) / tau). Denominators and the batch sum
/// are accumulated over sorted terms, so the value is independent of the
/// order in which pairs are listed.
template <typename T>
double contrastive_loss(std::span<const BasicTensor<T>> batch_o,
                        std::span<const BasicTensor<T>> batch_s, double tau);

template <typename T>
double contrastive_loss(std::span<const BasicTensor<T>> batch_o,
                        std::span<const BasicTensor<T>> batch_s, double tau,
                        ContrastiveGrads<T>* grads);

/// Importance weights from learnable queries k×D:
///   ŝ_{k,p} = queries[k] ⊙ x^s_p, S_s[k,p] = ⟨mean_p x^o_p, ŝ_{k,p}⟩/√D,
///   w_s = softmax_P(mean_k S_s[k,·]); w_o symmetrically.
template <typename T>
BasicImportanceWeights<T> mutual_attention(const BasicModalityPair<T>& pair,
                                           const BasicFusionParams<T>& params);

template <typename T>
struct MutualAttentionGrads {
  BasicTensor<T> queries;
  BasicTensor<T> optical;
  BasicTensor<T> sar;
};

template <typename T>
MutualAttentionGrads<T> mutual_attention_backward(const BasicModalityPair<T>& pair,
                                                  const BasicFusionParams<T>& params,
                                                  const BasicImportanceWeights<T>& weights,
                                                  const BasicImportanceWeights<T>& grad_weights);

/// Query-free baseline: w_s = w_o = softmax_P(cos(x^o_p, x^s_p)).
template <typename T>
BasicImportanceWeights<T> naive_attention(const BasicModalityPair<T>& pair);

template <typename T>
struct PairGrads {
  BasicTensor<T> optical;
  BasicTensor<T> sar;
};

template <typename T>
PairGrads<T> naive_attention_backward(const BasicModalityPair<T>& pair,
                                      const BasicImportanceWeights<T>& weights,
                                      const BasicImportanceWeights<T>& grad_weights);

/// [ (P·w_o[p])·x^o_p ; (P·w_s[p])·x^s_p ], optical first; 2P×D.
template <typename T>
BasicTokenGrid<T> fuse(const BasicModalityPair<T>& pair, const BasicImportanceWeights<T>& weights);

template <typename T>
struct FuseGrads {
  BasicTensor<T> optical;
  BasicTensor<T> sar;
  BasicImportanceWeights<T> weights;
};

template <typename T>
FuseGrads<T> fuse_backward(const BasicModalityPair<T>& pair, const BasicImportanceWeights<T>& weights,
                           const BasicTensor<T>& grad_fused);

enum class DropStrategy { random, importance };

std::string to_string(DropStrategy s);

/// ⌈keep_ratio·P⌉, guarded against floating-point overshoot.
std::size_t kept_count(std::size_t tokens, double keep_ratio);

/// Indices kept by token_drop, ascending.
template <typename T>
std::vector<std::size_t> kept_indices(const BasicTensor<T>& weights, double keep_ratio,
                                      DropStrategy strategy, std::uint64_t seed);

/// Keeps ⌈keep_ratio·P⌉ tokens: the largest weights (ties to the lower index)
/// or a seeded uniform sample. Relative order and cell indices are preserved.
template <typename T>
BasicTokenGrid<T> token_drop(const BasicTokenGrid<T>& tokens, const BasicTensor<T>& weights,
                             double keep_ratio, DropStrategy strategy, std::uint64_t seed);

}  // namespace sapfuse::fusion
