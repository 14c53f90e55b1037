#include "sapfuse/model.hpp"

#include <cmath>
#include <memory>
#include <numeric>

#include "sapfuse/ops.hpp"
#include "sapfuse/rng.hpp"
#include "sapfuse/sap.hpp"

namespace sapfuse {

std::string to_string(Modality m) {
  switch (m) {
    case Modality::optical: return "optical";
    case Modality::sar: return "sar";
    case Modality::fused: return "fused";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || width == 0 || ffn_width == 0) {
    throw DimensionError("model sizes must be positive");
  }
  if (width % heads != 0) {
    throw DimensionError("model width " + std::to_string(width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (text_vocab == 0 || answer_vocab == 0 || positions == 0) {
    throw DimensionError("vocabulary and position counts must be positive");
  }
}

template <typename T>
BasicTokenGrid<T> make_token_grid(BasicTensor<T> tokens, std::size_t rows, std::size_t cols,
                                  Modality modality) {
  if (tokens.rank() != 2 || tokens.rows() != rows * cols) {
    throw DimensionError("token grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " does not match tokens " + shape_string(tokens.shape()));
  }
  BasicTokenGrid<T> grid;
  grid.tokens = std::move(tokens);
  grid.grid_rows = rows;
  grid.grid_cols = cols;
  grid.modality = modality;
  grid.cells.resize(rows * cols);
  std::iota(grid.cells.begin(), grid.cells.end(), std::size_t{0});
  return grid;
}

namespace {

template <typename T>
BasicTensor<T> uniform_matrix(std::size_t r, std::size_t c, double bound, Rng& rng) {
  BasicTensor<T> m({r, c});
  for (T& v : m.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return m;
}

}  // namespace

template <typename T>
BasicModelParams<T> BasicModelParams<T>::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed, 0x6d6f64656cULL);
  const std::size_t d = config.width;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  BasicModelParams p;
  p.config = config;
  p.type_embedding = uniform_matrix<T>(3, d, bound, rng);
  p.position_embedding = uniform_matrix<T>(config.positions, d, bound, rng);
  p.text_embedding = uniform_matrix<T>(config.text_vocab, d, bound, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    BasicLayerParams<T> layer;
    layer.wq = uniform_matrix<T>(d, d, bound, rng);
    layer.wk = uniform_matrix<T>(d, d, bound, rng);
    layer.wv = uniform_matrix<T>(d, d, bound, rng);
    layer.wo = uniform_matrix<T>(d, d, bound, rng);
    layer.w1 = uniform_matrix<T>(d, config.ffn_width, bound, rng);
    layer.w2 = uniform_matrix<T>(config.ffn_width, d, bound, rng);
    p.layers.push_back(std::move(layer));
  }
  p.mask_projection = uniform_matrix<T>(d, d, bound, rng);
  p.answer_head = uniform_matrix<T>(d, config.answer_vocab, bound, rng);
  return p;
}

template <typename T>
BasicModelParams<T> BasicModelParams<T>::zeros(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.width;
  BasicModelParams p;
  p.config = config;
  p.type_embedding = BasicTensor<T>({3, d});
  p.position_embedding = BasicTensor<T>({config.positions, d});
  p.text_embedding = BasicTensor<T>({config.text_vocab, d});
  for (std::size_t l = 0; l < config.layers; ++l) {
    p.layers.push_back({BasicTensor<T>({d, d}), BasicTensor<T>({d, d}), BasicTensor<T>({d, d}),
                        BasicTensor<T>({d, d}), BasicTensor<T>({d, config.ffn_width}),
                        BasicTensor<T>({config.ffn_width, d})});
  }
  p.mask_projection = BasicTensor<T>({d, d});
  p.answer_head = BasicTensor<T>({d, config.answer_vocab});
  return p;
}

template <typename T>
template <typename U>
BasicModelParams<U> BasicModelParams<T>::cast() const {
  BasicModelParams<U> out = BasicModelParams<U>::zeros(config);
  std::vector<const BasicTensor<T>*> src;
  for_each([&src](const std::string&, const BasicTensor<T>& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.for_each([&](const std::string&, BasicTensor<U>& t) { t = src[i++]->template cast<U>(); });
  return out;
}

namespace {

constexpr double kRmsEpsilon = 1e-6;

/// Row-wise x / sqrt(mean(x²) + ε); stores 1/rms per row.
template <typename T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, std::vector<double>& inv_rms) {
  const std::size_t n = x.rows(), d = x.cols();
  BasicTensor<T> y({n, d});
  inv_rms.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = x.row(i);
    const double ms = ops::dot<T>(row, row) / static_cast<double>(d);
    const double r = 1.0 / std::sqrt(ms + kRmsEpsilon);
    inv_rms[i] = r;
    for (std::size_t j = 0; j < d; ++j) y(i, j) = static_cast<T>(row[j] * r);
  }
  return y;
}

/// dx = r·(dy − y·mean(dy⊙y)), accumulated into dx.
template <typename T>
void rms_norm_backward(const BasicTensor<T>& y, const std::vector<double>& inv_rms,
                       const BasicTensor<T>& dy, BasicTensor<T>& dx) {
  const std::size_t n = y.rows(), d = y.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const double m = ops::dot<T>(dy.row(i), y.row(i)) / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      dx(i, j) += static_cast<T>(inv_rms[i] * (dy(i, j) - y(i, j) * m));
    }
  }
}

template <typename T>
BasicTensor<T> column_block(const BasicTensor<T>& m, std::size_t begin, std::size_t width) {
  BasicTensor<T> out({m.rows(), width});
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < width; ++j) out(i, j) = m(i, begin + j);
  }
  return out;
}

template <typename T>
void add_column_block(BasicTensor<T>& m, std::size_t begin, const BasicTensor<T>& block) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < block.cols(); ++j) m(i, begin + j) += block(i, j);
  }
}

template <typename T>
struct LayerCache {
  BasicTensor<T> x_in, n1, q, k, v, attn_out, x_mid, n2, h_pre, h;
  std::vector<double> inv1, inv2;
  std::vector<BasicTensor<T>> probs;  // per head, S×S
};

template <typename T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  BasicTensor<T> x_final;
  std::vector<double> inv_final;
  std::size_t image_count = 0, seg_count = 0, seq_len = 0;
};

template <typename T>
void check_inputs(const BasicModelParams<T>& params, const BasicTokenGrid<T>& image,
                  const BasicSegTokenSet<T>& segs, const std::vector<std::size_t>& text) {
  const std::size_t d = params.config.width;
  if (image.tokens.rank() != 2 || image.tokens.cols() != d) {
    throw DimensionError("forward: image tokens " + shape_string(image.tokens.shape()) +
                         " do not have model width " + std::to_string(d));
  }
  if (image.cells.size() != image.count()) {
    throw DimensionError("forward: image cell index size does not match token count");
  }
  for (std::size_t c : image.cells) {
    if (params.config.position_embeddings && c >= params.config.positions) {
      throw DimensionError("forward: grid cell " + std::to_string(c) + " has no position embedding");
    }
  }
  if (segs.embeddings.rank() != 2 || segs.embeddings.cols() != d || segs.count() == 0) {
    throw DimensionError("forward: seg tokens " + shape_string(segs.embeddings.shape()) +
                         " do not have model width " + std::to_string(d));
  }
  for (std::size_t id : text) {
    if (id >= params.config.text_vocab) {
      throw DimensionError("forward: text id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

template <typename T>
BasicForwardOutput<T> run_forward(const BasicModelParams<T>& params, const BasicTokenGrid<T>& image,
                                  const BasicSegTokenSet<T>& segs,
                                  const std::vector<std::size_t>& text, ForwardCache<T>* cache) {
  check_inputs(params, image, segs, text);
  const ModelConfig& cfg = params.config;
  const std::size_t d = cfg.width, heads = cfg.heads, dh = d / heads;
  const std::size_t n_img = image.count(), n_seg = segs.count(), n_txt = text.size();
  const std::size_t seq = n_img + n_seg + n_txt;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  BasicTensor<T> x({seq, d});
  for (std::size_t i = 0; i < n_img; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      T v = image.tokens(i, j) + params.type_embedding(kImageToken, j);
      if (cfg.position_embeddings) v += params.position_embedding(image.cells[i], j);
      x(i, j) = v;
    }
  }
  for (std::size_t q = 0; q < n_seg; ++q) {
    for (std::size_t j = 0; j < d; ++j) {
      x(n_img + q, j) = segs.embeddings(q, j) + params.type_embedding(kSegToken, j);
    }
  }
  for (std::size_t t = 0; t < n_txt; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      x(n_img + n_seg + t, j) = params.text_embedding(text[t], j) + params.type_embedding(kTextToken, j);
    }
  }

  BasicForwardOutput<T> out;
  out.attn.raw = BasicTensor<T>({cfg.layers, heads, n_seg, n_img});
  if (cache) {
    cache->layers.resize(cfg.layers);
    cache->image_count = n_img;
    cache->seg_count = n_seg;
    cache->seq_len = seq;
  }

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& w = params.layers[l];
    LayerCache<T> lc;
    lc.x_in = x;
    lc.n1 = rms_norm(x, lc.inv1);
    lc.q = ops::matmul(lc.n1, w.wq);
    lc.k = ops::matmul(lc.n1, w.wk);
    lc.v = ops::matmul(lc.n1, w.wv);
    lc.attn_out = BasicTensor<T>({seq, d});
    for (std::size_t h = 0; h < heads; ++h) {
      const auto qh = column_block(lc.q, h * dh, dh);
      const auto kh = column_block(lc.k, h * dh, dh);
      const auto vh = column_block(lc.v, h * dh, dh);
      BasicTensor<T> scores = ops::matmul_nt(qh, kh);
      ops::scale_inplace(scores, scale);
      for (std::size_t q = 0; q < n_seg; ++q) {
        for (std::size_t p = 0; p < n_img; ++p) {
          out.attn.raw[((l * heads + h) * n_seg + q) * n_img + p] = scores(n_img + q, p);
        }
      }
      BasicTensor<T> probs({seq, seq});
      for (std::size_t i = 0; i < seq; ++i) ops::softmax_into<T>(scores.row(i), probs.row(i));
      add_column_block(lc.attn_out, h * dh, ops::matmul(probs, vh));
      lc.probs.push_back(std::move(probs));
    }
    lc.x_mid = x;
    ops::add_inplace(lc.x_mid, ops::matmul(lc.attn_out, w.wo));
    lc.n2 = rms_norm(lc.x_mid, lc.inv2);
    lc.h_pre = ops::matmul(lc.n2, w.w1);
    lc.h = lc.h_pre;
    for (T& v : lc.h.data()) v = v > T(0) ? v : T(0);
    x = lc.x_mid;
    ops::add_inplace(x, ops::matmul(lc.h, w.w2));
    if (cache) cache->layers[l] = std::move(lc);
  }

  std::vector<double> inv_final;
  out.hidden = rms_norm(x, inv_final);
  if (cache) {
    cache->x_final = x;
    cache->inv_final = std::move(inv_final);
  }

  out.attn.normalized = sap::seg_to_image_map(out.attn.raw);
  out.seg_hidden = BasicTensor<T>({n_seg, d});
  for (std::size_t q = 0; q < n_seg; ++q) {
    for (std::size_t j = 0; j < d; ++j) out.seg_hidden(q, j) = out.hidden(n_img + q, j);
  }
  const std::size_t last = seq - 1;
  out.answer_logits = BasicTensor<T>({cfg.answer_vocab});
  for (std::size_t a = 0; a < cfg.answer_vocab; ++a) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += static_cast<double>(out.hidden(last, j)) * params.answer_head(j, a);
    out.answer_logits[a] = static_cast<T>(acc);
  }
  return out;
}

template <typename T>
ForwardGrads<T> run_backward(const BasicModelParams<T>& params, const BasicTokenGrid<T>& image,
                             const std::vector<std::size_t>& text, const ForwardCache<T>& cache,
                             const BasicForwardOutput<T>& out, const ForwardCotangents<T>& cot) {
  const ModelConfig& cfg = params.config;
  const std::size_t d = cfg.width, heads = cfg.heads, dh = d / heads;
  const std::size_t n_img = cache.image_count, n_seg = cache.seg_count, seq = cache.seq_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardGrads<T> g;
  g.params = BasicModelParams<T>::zeros(cfg);

  BasicTensor<T> d_hidden = cot.hidden.empty() ? BasicTensor<T>({seq, d}) : cot.hidden;
  if (!cot.seg_hidden.empty()) {
    for (std::size_t q = 0; q < n_seg; ++q) {
      for (std::size_t j = 0; j < d; ++j) d_hidden(n_img + q, j) += cot.seg_hidden(q, j);
    }
  }
  if (!cot.answer_logits.empty()) {
    const std::size_t last = seq - 1;
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t a = 0; a < cfg.answer_vocab; ++a) {
        g.params.answer_head(j, a) += out.hidden(last, j) * cot.answer_logits[a];
        acc += static_cast<double>(params.answer_head(j, a)) * cot.answer_logits[a];
      }
      d_hidden(last, j) += static_cast<T>(acc);
    }
  }

  BasicTensor<T> dx({seq, d});
  rms_norm_backward(out.hidden, cache.inv_final, d_hidden, dx);

  for (std::size_t li = cfg.layers; li-- > 0;) {
    const auto& w = params.layers[li];
    const auto& lc = cache.layers[li];
    auto& gw = g.params.layers[li];

    // Feed-forward block: x_out = x_mid + relu(n2·W1)·W2.
    ops::add_inplace(gw.w2, ops::matmul_tn(lc.h, dx));
    BasicTensor<T> dh_act = ops::matmul_nt(dx, w.w2);
    for (std::size_t i = 0; i < dh_act.size(); ++i) {
      if (!(lc.h_pre[i] > T(0))) dh_act[i] = T(0);
    }
    ops::add_inplace(gw.w1, ops::matmul_tn(lc.n2, dh_act));
    BasicTensor<T> dn2 = ops::matmul_nt(dh_act, w.w1);
    BasicTensor<T> dx_mid = dx;
    rms_norm_backward(lc.n2, lc.inv2, dn2, dx_mid);

    // Attention block: x_mid = x_in + attn_out·Wo.
    ops::add_inplace(gw.wo, ops::matmul_tn(lc.attn_out, dx_mid));
    BasicTensor<T> d_attn = ops::matmul_nt(dx_mid, w.wo);
    BasicTensor<T> dq({seq, d}), dk({seq, d}), dv({seq, d});
    for (std::size_t h = 0; h < heads; ++h) {
      const auto qh = column_block(lc.q, h * dh, dh);
      const auto kh = column_block(lc.k, h * dh, dh);
      const auto vh = column_block(lc.v, h * dh, dh);
      const auto d_oh = column_block(d_attn, h * dh, dh);
      const auto& probs = lc.probs[h];
      add_column_block(dv, h * dh, ops::matmul_tn(probs, d_oh));
      const BasicTensor<T> d_probs = ops::matmul_nt(d_oh, vh);
      BasicTensor<T> d_scores({seq, seq});
      for (std::size_t i = 0; i < seq; ++i) {
        ops::softmax_backward_into<T>(probs.row(i), d_probs.row(i), d_scores.row(i));
      }
      if (!cot.attn_raw.empty()) {
        for (std::size_t q = 0; q < n_seg; ++q) {
          for (std::size_t p = 0; p < n_img; ++p) {
            d_scores(n_img + q, p) += cot.attn_raw[((li * heads + h) * n_seg + q) * n_img + p];
          }
        }
      }
      ops::scale_inplace(d_scores, scale);
      add_column_block(dq, h * dh, ops::matmul(d_scores, kh));
      add_column_block(dk, h * dh, ops::matmul_tn(d_scores, qh));
    }
    ops::add_inplace(gw.wq, ops::matmul_tn(lc.n1, dq));
    ops::add_inplace(gw.wk, ops::matmul_tn(lc.n1, dk));
    ops::add_inplace(gw.wv, ops::matmul_tn(lc.n1, dv));
    BasicTensor<T> dn1 = ops::matmul_nt(dq, w.wq);
    ops::add_inplace(dn1, ops::matmul_nt(dk, w.wk));
    ops::add_inplace(dn1, ops::matmul_nt(dv, w.wv));
    dx = dx_mid;
    rms_norm_backward(lc.n1, lc.inv1, dn1, dx);
  }

  g.image_tokens = BasicTensor<T>({n_img, d});
  g.seg_embeddings = BasicTensor<T>({n_seg, d});
  for (std::size_t i = 0; i < n_img; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      g.image_tokens(i, j) = dx(i, j);
      g.params.type_embedding(kImageToken, j) += dx(i, j);
      if (cfg.position_embeddings) g.params.position_embedding(image.cells[i], j) += dx(i, j);
    }
  }
  for (std::size_t q = 0; q < n_seg; ++q) {
    for (std::size_t j = 0; j < d; ++j) {
      g.seg_embeddings(q, j) = dx(n_img + q, j);
      g.params.type_embedding(kSegToken, j) += dx(n_img + q, j);
    }
  }
  for (std::size_t t = 0; t < text.size(); ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      const T v = dx(n_img + n_seg + t, j);
      g.params.text_embedding(text[t], j) += v;
      g.params.type_embedding(kTextToken, j) += v;
    }
  }
  return g;
}

}  // namespace

template <typename T>
BasicForwardOutput<T> forward(const BasicModelParams<T>& params, const BasicTokenGrid<T>& image,
                              const BasicSegTokenSet<T>& segs, const std::vector<std::size_t>& text) {
  return run_forward<T>(params, image, segs, text, nullptr);
}

template <typename T>
std::pair<BasicForwardOutput<T>, ForwardVjp<T>> forward_with_vjp(
    const BasicModelParams<T>& params, const BasicTokenGrid<T>& image,
    const BasicSegTokenSet<T>& segs, const std::vector<std::size_t>& text) {
  auto cache = std::make_shared<ForwardCache<T>>();
  BasicForwardOutput<T> out = run_forward<T>(params, image, segs, text, cache.get());
  auto image_copy = std::make_shared<BasicTokenGrid<T>>(image);
  auto out_copy = std::make_shared<BasicForwardOutput<T>>(out);
  ForwardVjp<T> vjp = [&params, image_copy, text, cache, out_copy](const ForwardCotangents<T>& cot) {
    return run_backward<T>(params, *image_copy, text, *cache, *out_copy, cot);
  };
  return {std::move(out), std::move(vjp)};
}

namespace {

void check_upsample(GridSize grid, GridSize out_size) {
  if (grid.rows == 0 || grid.cols == 0 || out_size.rows % grid.rows != 0 ||
      out_size.cols % grid.cols != 0) {
    throw DimensionError("mask size " + std::to_string(out_size.rows) + "x" +
                         std::to_string(out_size.cols) + " is not an integer multiple of grid " +
                         std::to_string(grid.rows) + "x" + std::to_string(grid.cols));
  }
}

template <typename T>
void check_decode(const BasicTensor<T>& seg_hidden, const BasicTensor<T>& grounding,
                  const BasicTensor<T>& mask_projection, GridSize grid, GridSize out_size) {
  check_upsample(grid, out_size);
  if (grounding.rank() != 2 || grounding.rows() != grid.cells()) {
    throw DimensionError("decode_mask: grounding " + shape_string(grounding.shape()) +
                         " does not match grid");
  }
  const std::size_t d = grounding.cols();
  if (seg_hidden.rank() != 2 || seg_hidden.cols() != d || mask_projection.shape() != Shape{d, d}) {
    throw DimensionError("decode_mask: width mismatch");
  }
}

}  // namespace

template <typename T>
BasicTensor<T> decode_mask(const BasicTensor<T>& seg_hidden, const BasicTensor<T>& grounding,
                           const BasicTensor<T>& mask_projection, GridSize grid, GridSize out_size) {
  check_decode(seg_hidden, grounding, mask_projection, grid, out_size);
  const std::size_t n_seg = seg_hidden.rows(), d = grounding.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const BasicTensor<T> probe = ops::matmul(seg_hidden, mask_projection);
  BasicTensor<T> cell_logits({n_seg, grid.cells()});
  for (std::size_t q = 0; q < n_seg; ++q) {
    for (std::size_t p = 0; p < grid.cells(); ++p) {
      cell_logits(q, p) = static_cast<T>(ops::dot<T>(probe.row(q), grounding.row(p)) * inv_sqrt_d);
    }
  }
  const std::size_t ry = out_size.rows / grid.rows, rx = out_size.cols / grid.cols;
  BasicTensor<T> out({n_seg, out_size.rows, out_size.cols});
  for (std::size_t q = 0; q < n_seg; ++q) {
    for (std::size_t y = 0; y < out_size.rows; ++y) {
      for (std::size_t x = 0; x < out_size.cols; ++x) {
        out(q, y, x) = cell_logits(q, (y / ry) * grid.cols + x / rx);
      }
    }
  }
  return out;
}

template <typename T>
DecodeMaskGrads<T> decode_mask_backward(const BasicTensor<T>& seg_hidden,
                                        const BasicTensor<T>& grounding,
                                        const BasicTensor<T>& mask_projection, GridSize grid,
                                        GridSize out_size, const BasicTensor<T>& grad_logits) {
  check_decode(seg_hidden, grounding, mask_projection, grid, out_size);
  const std::size_t n_seg = seg_hidden.rows(), d = grounding.cols();
  if (grad_logits.shape() != Shape{n_seg, out_size.rows, out_size.cols}) {
    throw DimensionError("decode_mask_backward: cotangent shape mismatch");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const std::size_t ry = out_size.rows / grid.rows, rx = out_size.cols / grid.cols;
  BasicTensor<T> d_cells({n_seg, grid.cells()});
  for (std::size_t q = 0; q < n_seg; ++q) {
    for (std::size_t y = 0; y < out_size.rows; ++y) {
      for (std::size_t x = 0; x < out_size.cols; ++x) {
        d_cells(q, (y / ry) * grid.cols + x / rx) += grad_logits(q, y, x);
      }
    }
  }
  ops::scale_inplace(d_cells, inv_sqrt_d);
  const BasicTensor<T> probe = ops::matmul(seg_hidden, mask_projection);
  const BasicTensor<T> d_probe = ops::matmul(d_cells, grounding);
  DecodeMaskGrads<T> g;
  g.grounding = ops::matmul_tn(d_cells, probe);
  g.mask_projection = ops::matmul_tn(seg_hidden, d_probe);
  g.seg_hidden = ops::matmul_nt(d_probe, mask_projection);
  return g;
}

template <typename T>
BasicTensor<T> patch_matrix(const BasicTensor<T>& pixels, GridSize grid) {
  if (pixels.rank() != 3) throw DimensionError("patch_matrix: expected C×H×W pixels");
  const std::size_t c = pixels.dim(0), height = pixels.dim(1), width = pixels.dim(2);
  if (grid.rows == 0 || grid.cols == 0 || height % grid.rows != 0 || width % grid.cols != 0) {
    throw DimensionError("image " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by grid " + std::to_string(grid.rows) + "x" +
                         std::to_string(grid.cols));
  }
  const std::size_t ph = height / grid.rows, pw = width / grid.cols;
  BasicTensor<T> out({grid.cells(), c * ph * pw});
  for (std::size_t gy = 0; gy < grid.rows; ++gy) {
    for (std::size_t gx = 0; gx < grid.cols; ++gx) {
      auto row = out.row(gy * grid.cols + gx);
      std::size_t k = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < ph; ++y) {
          for (std::size_t x = 0; x < pw; ++x) row[k++] = pixels(ch, gy * ph + y, gx * pw + x);
        }
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> grounding_features(const BasicTensor<T>& pixels, GridSize grid,
                                  const BasicTensor<T>& proj) {
  return ops::matmul(patch_matrix(pixels, grid), proj);
}

#define SAPFUSE_INSTANTIATE_MODEL(T)                                                            \
  template struct BasicModelParams<T>;                                                          \
  template BasicTokenGrid<T> make_token_grid<T>(BasicTensor<T>, std::size_t, std::size_t,       \
                                                Modality);                                      \
  template BasicForwardOutput<T> forward<T>(const BasicModelParams<T>&, const BasicTokenGrid<T>&, \
                                            const BasicSegTokenSet<T>&,                         \
                                            const std::vector<std::size_t>&);                   \
  template std::pair<BasicForwardOutput<T>, ForwardVjp<T>> forward_with_vjp<T>(                 \
      const BasicModelParams<T>&, const BasicTokenGrid<T>&, const BasicSegTokenSet<T>&,         \
      const std::vector<std::size_t>&);                                                         \
  template BasicTensor<T> decode_mask<T>(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                         const BasicTensor<T>&, GridSize, GridSize);            \
  template DecodeMaskGrads<T> decode_mask_backward<T>(const BasicTensor<T>&,                    \
                                                      const BasicTensor<T>&,                    \
                                                      const BasicTensor<T>&, GridSize, GridSize, \
                                                      const BasicTensor<T>&);                   \
  template BasicTensor<T> patch_matrix<T>(const BasicTensor<T>&, GridSize);                     \
  template BasicTensor<T> grounding_features<T>(const BasicTensor<T>&, GridSize,                \
                                                const BasicTensor<T>&);

SAPFUSE_INSTANTIATE_MODEL(float)
SAPFUSE_INSTANTIATE_MODEL(double)

template BasicModelParams<double> BasicModelParams<float>::cast<double>() const;
template BasicModelParams<float> BasicModelParams<double>::cast<float>() const;
template BasicModelParams<float> BasicModelParams<float>::cast<float>() const;

}  // namespace sapfuse
