#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sapfuse/tensor.hpp"

namespace sapfuse {

enum class Modality { optical, sar, fused };

std::string to_string(Modality m);

/// Image tokens laid out on a grid. `cells[i]` is the row-major grid cell
/// token i came from; a freshly built grid has cells 0..P-1, a fused grid
/// repeats them per modality and a pruned grid keeps a subset.
template <typename T>
struct BasicTokenGrid {
  BasicTensor<T> tokens;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  Modality modality = Modality::optical;
  std::vector<std::size_t> cells;

  std::size_t count() const { return tokens.empty() ? 0 : tokens.rows(); }
  std::size_t width() const { return tokens.empty() ? 0 : tokens.cols(); }
};

using TokenGrid = BasicTokenGrid<float>;

/// Builds a full grid (P = rows·cols, cells in row-major order).
template <typename T>
BasicTokenGrid<T> make_token_grid(BasicTensor<T> tokens, std::size_t rows, std::size_t cols,
                                  Modality modality);

/// Learnable `<SEG>` query embeddings, Q×D.
template <typename T>
struct BasicSegTokenSet {
  BasicTensor<T> embeddings;
  std::size_t count() const { return embeddings.rows(); }
};

using SegTokenSet = BasicSegTokenSet<float>;

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t width = 32;
  std::size_t ffn_width = 32;
  std::size_t text_vocab = 16;
  std::size_t answer_vocab = 8;
  /// Number of grid cells that own a learned position embedding.
  std::size_t positions = 64;
  bool position_embeddings = true;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum TokenType : std::size_t { kImageToken = 0, kSegToken = 1, kTextToken = 2 };

template <typename T>
struct BasicLayerParams {
  BasicTensor<T> wq, wk, wv, wo;  // D×D
  BasicTensor<T> w1;              // D×F
  BasicTensor<T> w2;              // F×D
};

/// Transformer weights plus the mask-decoder projection W_m and answer head.
template <typename T>
struct BasicModelParams {
  ModelConfig config;
  BasicTensor<T> type_embedding;      // 3×D
  BasicTensor<T> position_embedding;  // positions×D
  BasicTensor<T> text_embedding;      // text_vocab×D
  std::vector<BasicLayerParams<T>> layers;
  BasicTensor<T> mask_projection;  // D×D
  BasicTensor<T> answer_head;      // D×answer_vocab

  /// Uniform(−1/√D, 1/√D) for every matrix, seeded.
  static BasicModelParams initialize(const ModelConfig& config, std::uint64_t seed);
  static BasicModelParams zeros(const ModelConfig& config);

  /// Visits every tensor as f(name, tensor) in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  template <typename U>
  BasicModelParams<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("type_embedding"), self.type_embedding);
    f(std::string("position_embedding"), self.position_embedding);
    f(std::string("text_embedding"), self.text_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      f(p + "wq", self.layers[l].wq);
      f(p + "wk", self.layers[l].wk);
      f(p + "wv", self.layers[l].wv);
      f(p + "wo", self.layers[l].wo);
      f(p + "w1", self.layers[l].w1);
      f(p + "w2", self.layers[l].w2);
    }
    f(std::string("mask_projection"), self.mask_projection);
    f(std::string("answer_head"), self.answer_head);
  }
};

using ModelParams = BasicModelParams<float>;

/// Seg→image attention: raw logits L×H×Q×P and head-averaged,
/// image-normalized maps L×Q×P.
template <typename T>
struct BasicAttentionStack {
  BasicTensor<T> raw;
  BasicTensor<T> normalized;
};

using AttentionStack = BasicAttentionStack<float>;

template <typename T>
struct BasicForwardOutput {
  BasicTensor<T> hidden;  // T×D, final layer (after the output norm)
  BasicAttentionStack<T> attn;
  BasicTensor<T> seg_hidden;     // Q×D
  BasicTensor<T> answer_logits;  // answer_vocab
};

using ForwardOutput = BasicForwardOutput<float>;

/// Output cotangents; an empty tensor means zero.
template <typename T>
struct ForwardCotangents {
  BasicTensor<T> hidden;
  BasicTensor<T> seg_hidden;
  BasicTensor<T> answer_logits;
  BasicTensor<T> attn_raw;
};

template <typename T>
struct ForwardGrads {
  BasicModelParams<T> params;
  BasicTensor<T> image_tokens;
  BasicTensor<T> seg_embeddings;
};

template <typename T>
using ForwardVjp = std::function<ForwardGrads<T>(const ForwardCotangents<T>&)>;

/// Bidirectional transformer over [image; seg; text].
///
/// Each layer is pre-norm (parameter-free RMS norm) attention followed by a
/// ReLU feed-forward block, both residual. The seg→image logits of every
/// layer/head are captured before softmax; answer logits come from the final
/// text position (or the last sequence position when text is empty).
template <typename T>
BasicForwardOutput<T> forward(const BasicModelParams<T>& params, const BasicTokenGrid<T>& image,
                              const BasicSegTokenSet<T>& segs, const std::vector<std::size_t>& text);

/// forward() plus its vector-Jacobian product. The returned closure refers to
/// `params`, which must stay alive and unchanged until it has been called.
template <typename T>
std::pair<BasicForwardOutput<T>, ForwardVjp<T>> forward_with_vjp(
    const BasicModelParams<T>& params, const BasicTokenGrid<T>& image,
    const BasicSegTokenSet<T>& segs, const std::vector<std::size_t>& text);

struct GridSize {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t cells() const { return rows * cols; }
  bool operator==(const GridSize&) const = default;
};

/// logit[q,p] = ⟨seg_hidden[q]·W_m, grounding[p]⟩/√D on the token grid,
/// nearest-neighbour upsampled to out_size. Returns Q×H×W.
template <typename T>
BasicTensor<T> decode_mask(const BasicTensor<T>& seg_hidden, const BasicTensor<T>& grounding,
                           const BasicTensor<T>& mask_projection, GridSize grid, GridSize out_size);

template <typename T>
struct DecodeMaskGrads {
  BasicTensor<T> seg_hidden;
  BasicTensor<T> grounding;
  BasicTensor<T> mask_projection;
};

template <typename T>
DecodeMaskGrads<T> decode_mask_backward(const BasicTensor<T>& seg_hidden,
                                        const BasicTensor<T>& grounding,
                                        const BasicTensor<T>& mask_projection, GridSize grid,
                                        GridSize out_size, const BasicTensor<T>& grad_logits);

/// Flattens each grid cell's C×h×w patch (channel-major, then row, then
/// column) into one row: P×(C·h·w).
template <typename T>
BasicTensor<T> patch_matrix(const BasicTensor<T>& pixels, GridSize grid);

/// Patches projected to width D: patch_matrix(pixels) · proj.
template <typename T>
BasicTensor<T> grounding_features(const BasicTensor<T>& pixels, GridSize grid,
                                  const BasicTensor<T>& proj);

}  // namespace sapfuse
