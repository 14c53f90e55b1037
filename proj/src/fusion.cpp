#include "sapfuse/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sapfuse/ops.hpp"
#include "sapfuse/rng.hpp"

namespace sapfuse::fusion {

template <typename T>
void BasicModalityPair<T>::validate() const {
  if (optical.tokens.shape() != sar.tokens.shape() || optical.tokens.rank() != 2) {
    throw DimensionError("modality pair: optical " + shape_string(optical.tokens.shape()) +
                         " vs sar " + shape_string(sar.tokens.shape()));
  }
  if (optical.grid_rows != sar.grid_rows || optical.grid_cols != sar.grid_cols ||
      optical.cells != sar.cells) {
    throw DimensionError("modality pair: grids disagree");
  }
}

template <typename T>
BasicImportanceWeights<T> uniform_weights(std::size_t tokens) {
  const T u = static_cast<T>(1.0 / static_cast<double>(tokens));
  return {BasicTensor<T>({tokens}, u), BasicTensor<T>({tokens}, u)};
}

template <typename T>
double mean_token_cosine(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape() || a.rank() != 2) {
    throw DimensionError("mean_token_cosine: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  double acc = 0.0;
  for (std::size_t p = 0; p < a.rows(); ++p) acc += ops::cosine_similarity<T>(a.row(p), b.row(p));
  return acc / static_cast<double>(a.rows());
}

namespace {

double sorted_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += t;
  return acc;
}

}  // namespace

template <typename T>
double contrastive_loss(std::span<const BasicTensor<T>> batch_o,
                        std::span<const BasicTensor<T>> batch_s, double tau,
                        ContrastiveGrads<T>* grads) {
  const std::size_t b = batch_o.size();
  if (b == 0) throw DomainError("contrastive_loss: empty batch");
  if (batch_s.size() != b) throw DimensionError("contrastive_loss: batch sizes disagree");
  if (!(tau > 0.0)) throw DomainError("contrastive_loss: temperature must be positive");

  // sim[i][k] = mean-token cosine of optical i against SAR k.
  std::vector<double> sim(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t k = 0; k < b; ++k) sim[i * b + k] = mean_token_cosine(batch_o[i], batch_s[k]);
  }
  // log f(x_i, y_i) / Σ_k f(x_i, y_k) for rows (optical anchors) and
  // columns (SAR anchors), each with its own softmax.
  std::vector<double> row_sm(b * b), col_sm(b * b);
  std::vector<double> terms;
  terms.reserve(2 * b);
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < b; ++i) {
      auto at = [&](std::size_t k) { return pass == 0 ? sim[i * b + k] : sim[k * b + i]; };
      double m = -INFINITY;
      for (std::size_t k = 0; k < b; ++k) m = std::max(m, at(k) / tau);
      std::vector<double> e(b);
      for (std::size_t k = 0; k < b; ++k) e[k] = std::exp(at(k) / tau - m);
      const double denom = sorted_sum(e);
      terms.push_back(at(i) / tau - m - std::log(denom));
      auto& sm = pass == 0 ? row_sm : col_sm;
      for (std::size_t k = 0; k < b; ++k) {
        if (pass == 0) {
          sm[i * b + k] = e[k] / denom;
        } else {
          sm[k * b + i] = e[k] / denom;
        }
      }
    }
  }
  const double loss = -sorted_sum(terms) / static_cast<double>(b);

  if (grads) {
    grads->optical.clear();
    grads->sar.clear();
    for (std::size_t i = 0; i < b; ++i) {
      grads->optical.push_back(BasicTensor<T>::zeros_like(batch_o[i]));
      grads->sar.push_back(BasicTensor<T>::zeros_like(batch_s[i]));
    }
    const double scale = -1.0 / (static_cast<double>(b) * tau);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t k = 0; k < b; ++k) {
        const double delta = i == k ? 1.0 : 0.0;
        const double d_sim = scale * ((delta - row_sm[i * b + k]) + (delta - col_sm[i * b + k]));
        const std::size_t tokens = batch_o[i].rows();
        const double d_cos = d_sim / static_cast<double>(tokens);
        for (std::size_t p = 0; p < tokens; ++p) {
          ops::cosine_similarity_backward_into<T>(batch_o[i].row(p), batch_s[k].row(p), d_cos,
                                                  grads->optical[i].row(p), grads->sar[k].row(p));
        }
      }
    }
  }
  return loss;
}

template <typename T>
double contrastive_loss(std::span<const BasicTensor<T>> batch_o,
                        std::span<const BasicTensor<T>> batch_s, double tau) {
  return contrastive_loss<T>(batch_o, batch_s, tau, nullptr);
}

namespace {

template <typename T>
std::vector<double> token_mean(const BasicTensor<T>& x) {
  std::vector<double> m(x.cols(), 0.0);
  for (std::size_t p = 0; p < x.rows(); ++p) {
    for (std::size_t d = 0; d < x.cols(); ++d) m[d] += x(p, d);
  }
  for (double& v : m) v /= static_cast<double>(x.rows());
  return m;
}

/// s[p] = mean_k ⟨ref, q_k ⊙ x_p⟩ / √D.
template <typename T>
BasicTensor<T> query_scores(const std::vector<double>& ref, const BasicTensor<T>& queries,
                            const BasicTensor<T>& x) {
  const std::size_t k = queries.rows(), tokens = x.rows(), width = x.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(width));
  BasicTensor<T> s({tokens});
  for (std::size_t p = 0; p < tokens; ++p) {
    double total = 0.0;
    for (std::size_t q = 0; q < k; ++q) {
      double dotp = 0.0;
      for (std::size_t d = 0; d < width; ++d) dotp += ref[d] * queries(q, d) * x(p, d);
      total += dotp * inv_sqrt_d;
    }
    s[p] = static_cast<T>(total / static_cast<double>(k));
  }
  return s;
}

template <typename T>
void query_scores_backward(const std::vector<double>& ref, const BasicTensor<T>& queries,
                           const BasicTensor<T>& x, const BasicTensor<T>& d_scores,
                           std::vector<double>& d_ref, BasicTensor<T>& d_queries,
                           BasicTensor<T>& d_x) {
  const std::size_t k = queries.rows(), tokens = x.rows(), width = x.cols();
  const double c = 1.0 / (std::sqrt(static_cast<double>(width)) * static_cast<double>(k));
  for (std::size_t p = 0; p < tokens; ++p) {
    const double g = d_scores[p] * c;
    for (std::size_t q = 0; q < k; ++q) {
      for (std::size_t d = 0; d < width; ++d) {
        d_x(p, d) += static_cast<T>(g * ref[d] * queries(q, d));
        d_queries(q, d) += static_cast<T>(g * ref[d] * x(p, d));
        d_ref[d] += g * queries(q, d) * x(p, d);
      }
    }
  }
}

template <typename T>
void check_queries(const BasicModalityPair<T>& pair, const BasicFusionParams<T>& params) {
  pair.validate();
  if (params.queries.rank() != 2 || params.queries.cols() != pair.optical.width() ||
      params.queries.rows() == 0) {
    throw DimensionError("mutual_attention: queries " + shape_string(params.queries.shape()) +
                         " do not match token width");
  }
}

}  // namespace

template <typename T>
BasicImportanceWeights<T> mutual_attention(const BasicModalityPair<T>& pair,
                                           const BasicFusionParams<T>& params) {
  check_queries(pair, params);
  const auto& xo = pair.optical.tokens;
  const auto& xs = pair.sar.tokens;
  BasicImportanceWeights<T> w;
  w.w_s = ops::softmax(query_scores(token_mean(xo), params.queries, xs), 0);
  w.w_o = ops::softmax(query_scores(token_mean(xs), params.queries, xo), 0);
  return w;
}

template <typename T>
MutualAttentionGrads<T> mutual_attention_backward(const BasicModalityPair<T>& pair,
                                                  const BasicFusionParams<T>& params,
                                                  const BasicImportanceWeights<T>& weights,
                                                  const BasicImportanceWeights<T>& grad_weights) {
  check_queries(pair, params);
  const auto& xo = pair.optical.tokens;
  const auto& xs = pair.sar.tokens;
  const std::size_t tokens = xo.rows(), width = xo.cols();
  MutualAttentionGrads<T> g{BasicTensor<T>::zeros_like(params.queries), BasicTensor<T>::zeros_like(xo),
                            BasicTensor<T>::zeros_like(xs)};
  const auto mean_o = token_mean(xo);
  const auto mean_s = token_mean(xs);
  std::vector<double> d_mean_o(width, 0.0), d_mean_s(width, 0.0);
  if (!grad_weights.w_s.empty()) {
    const auto d_scores = ops::softmax_backward(weights.w_s, grad_weights.w_s, 0);
    query_scores_backward(mean_o, params.queries, xs, d_scores, d_mean_o, g.queries, g.sar);
  }
  if (!grad_weights.w_o.empty()) {
    const auto d_scores = ops::softmax_backward(weights.w_o, grad_weights.w_o, 0);
    query_scores_backward(mean_s, params.queries, xo, d_scores, d_mean_s, g.queries, g.optical);
  }
  const double inv_p = 1.0 / static_cast<double>(tokens);
  for (std::size_t p = 0; p < tokens; ++p) {
    for (std::size_t d = 0; d < width; ++d) {
      g.optical(p, d) += static_cast<T>(d_mean_o[d] * inv_p);
      g.sar(p, d) += static_cast<T>(d_mean_s[d] * inv_p);
    }
  }
  return g;
}

template <typename T>
BasicImportanceWeights<T> naive_attention(const BasicModalityPair<T>& pair) {
  pair.validate();
  const std::size_t tokens = pair.optical.count();
  BasicTensor<T> c({tokens});
  for (std::size_t p = 0; p < tokens; ++p) {
    c[p] = static_cast<T>(ops::cosine_similarity<T>(pair.optical.tokens.row(p), pair.sar.tokens.row(p)));
  }
  BasicTensor<T> w = ops::softmax(c, 0);
  return {w, w};
}

template <typename T>
PairGrads<T> naive_attention_backward(const BasicModalityPair<T>& pair,
                                      const BasicImportanceWeights<T>& weights,
                                      const BasicImportanceWeights<T>& grad_weights) {
  pair.validate();
  const std::size_t tokens = pair.optical.count();
  BasicTensor<T> d_w({tokens});
  if (!grad_weights.w_s.empty()) ops::add_inplace(d_w, grad_weights.w_s);
  if (!grad_weights.w_o.empty()) ops::add_inplace(d_w, grad_weights.w_o);
  const auto d_c = ops::softmax_backward(weights.w_s, d_w, 0);
  PairGrads<T> g{BasicTensor<T>::zeros_like(pair.optical.tokens), BasicTensor<T>::zeros_like(pair.sar.tokens)};
  for (std::size_t p = 0; p < tokens; ++p) {
    ops::cosine_similarity_backward_into<T>(pair.optical.tokens.row(p), pair.sar.tokens.row(p), d_c[p],
                                            g.optical.row(p), g.sar.row(p));
  }
  return g;
}

template <typename T>
BasicTokenGrid<T> fuse(const BasicModalityPair<T>& pair, const BasicImportanceWeights<T>& weights) {
  pair.validate();
  const std::size_t tokens = pair.optical.count(), width = pair.optical.width();
  if (weights.w_o.size() != tokens || weights.w_s.size() != tokens) {
    throw DimensionError("fuse: weights do not match token count");
  }
  const double p_count = static_cast<double>(tokens);
  BasicTokenGrid<T> out;
  out.tokens = BasicTensor<T>({2 * tokens, width});
  out.grid_rows = pair.optical.grid_rows;
  out.grid_cols = pair.optical.grid_cols;
  out.modality = Modality::fused;
  out.cells = pair.optical.cells;
  out.cells.insert(out.cells.end(), pair.sar.cells.begin(), pair.sar.cells.end());
  for (std::size_t p = 0; p < tokens; ++p) {
    const double so = p_count * weights.w_o[p];
    const double ss = p_count * weights.w_s[p];
    for (std::size_t d = 0; d < width; ++d) {
      out.tokens(p, d) = static_cast<T>(so * pair.optical.tokens(p, d));
      out.tokens(tokens + p, d) = static_cast<T>(ss * pair.sar.tokens(p, d));
    }
  }
  return out;
}

template <typename T>
FuseGrads<T> fuse_backward(const BasicModalityPair<T>& pair, const BasicImportanceWeights<T>& weights,
                           const BasicTensor<T>& grad_fused) {
  pair.validate();
  const std::size_t tokens = pair.optical.count(), width = pair.optical.width();
  if (grad_fused.shape() != Shape{2 * tokens, width}) {
    throw DimensionError("fuse_backward: cotangent shape mismatch");
  }
  const double p_count = static_cast<double>(tokens);
  FuseGrads<T> g;
  g.optical = BasicTensor<T>::zeros_like(pair.optical.tokens);
  g.sar = BasicTensor<T>::zeros_like(pair.sar.tokens);
  g.weights.w_o = BasicTensor<T>({tokens});
  g.weights.w_s = BasicTensor<T>({tokens});
  for (std::size_t p = 0; p < tokens; ++p) {
    const double so = p_count * weights.w_o[p];
    const double ss = p_count * weights.w_s[p];
    double dwo = 0.0, dws = 0.0;
    for (std::size_t d = 0; d < width; ++d) {
      const double go = grad_fused(p, d), gs = grad_fused(tokens + p, d);
      g.optical(p, d) = static_cast<T>(so * go);
      g.sar(p, d) = static_cast<T>(ss * gs);
      dwo += go * pair.optical.tokens(p, d);
      dws += gs * pair.sar.tokens(p, d);
    }
    g.weights.w_o[p] = static_cast<T>(p_count * dwo);
    g.weights.w_s[p] = static_cast<T>(p_count * dws);
  }
  return g;
}

std::string to_string(DropStrategy s) { return s == DropStrategy::random ? "random" : "importance"; }

std::size_t kept_count(std::size_t tokens, double keep_ratio) {
  if (!(keep_ratio > 0.0 && keep_ratio <= 1.0)) {
    throw DomainError("token_drop: keep ratio must lie in (0, 1]");
  }
  const double raw = keep_ratio * static_cast<double>(tokens);
  const auto n = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::size_t>(n, 1, tokens);
}

template <typename T>
std::vector<std::size_t> kept_indices(const BasicTensor<T>& weights, double keep_ratio,
                                      DropStrategy strategy, std::uint64_t seed) {
  const std::size_t tokens = weights.size();
  const std::size_t n = kept_count(tokens, keep_ratio);
  std::vector<std::size_t> order(tokens);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (strategy == DropStrategy::importance) {
    std::stable_sort(order.begin(), order.end(),
                     [&weights](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
  } else {
    Rng rng(seed, 0x64726f70ULL);
    std::shuffle(order.begin(), order.end(), rng.engine());
  }
  order.resize(n);
  std::sort(order.begin(), order.end());
  return order;
}

template <typename T>
BasicTokenGrid<T> token_drop(const BasicTokenGrid<T>& tokens, const BasicTensor<T>& weights,
                             double keep_ratio, DropStrategy strategy, std::uint64_t seed) {
  if (weights.size() != tokens.count()) throw DimensionError("token_drop: weights do not match tokens");
  const auto keep = kept_indices(weights, keep_ratio, strategy, seed);
  BasicTokenGrid<T> out;
  out.tokens = BasicTensor<T>({keep.size(), tokens.width()});
  out.grid_rows = tokens.grid_rows;
  out.grid_cols = tokens.grid_cols;
  out.modality = tokens.modality;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    auto src = tokens.tokens.row(keep[i]);
    std::copy(src.begin(), src.end(), out.tokens.row(i).begin());
    out.cells.push_back(tokens.cells[keep[i]]);
  }
  return out;
}

#define SAPFUSE_INSTANTIATE_FUSION(T)                                                             \
  template struct BasicModalityPair<T>;                                                           \
  template BasicImportanceWeights<T> uniform_weights<T>(std::size_t);                             \
  template double mean_token_cosine<T>(const BasicTensor<T>&, const BasicTensor<T>&);             \
  template double contrastive_loss<T>(std::span<const BasicTensor<T>>,                            \
                                      std::span<const BasicTensor<T>>, double);                   \
  template double contrastive_loss<T>(std::span<const BasicTensor<T>>,                            \
                                      std::span<const BasicTensor<T>>, double, ContrastiveGrads<T>*); \
  template BasicImportanceWeights<T> mutual_attention<T>(const BasicModalityPair<T>&,             \
                                                         const BasicFusionParams<T>&);            \
  template MutualAttentionGrads<T> mutual_attention_backward<T>(                                  \
      const BasicModalityPair<T>&, const BasicFusionParams<T>&, const BasicImportanceWeights<T>&, \
      const BasicImportanceWeights<T>&);                                                          \
  template BasicImportanceWeights<T> naive_attention<T>(const BasicModalityPair<T>&);             \
  template PairGrads<T> naive_attention_backward<T>(const BasicModalityPair<T>&,                  \
                                                    const BasicImportanceWeights<T>&,             \
                                                    const BasicImportanceWeights<T>&);            \
  template BasicTokenGrid<T> fuse<T>(const BasicModalityPair<T>&, const BasicImportanceWeights<T>&); \
  template FuseGrads<T> fuse_backward<T>(const BasicModalityPair<T>&,                             \
                                         const BasicImportanceWeights<T>&, const BasicTensor<T>&); \
  template std::vector<std::size_t> kept_indices<T>(const BasicTensor<T>&, double, DropStrategy,  \
                                                    std::uint64_t);                               \
  template BasicTokenGrid<T> token_drop<T>(const BasicTokenGrid<T>&, const BasicTensor<T>&,       \
                                           double, DropStrategy, std::uint64_t);

SAPFUSE_INSTANTIATE_FUSION(float)
SAPFUSE_INSTANTIATE_FUSION(double)

}  // namespace sapfuse::fusion
