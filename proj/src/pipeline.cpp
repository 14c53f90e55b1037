#include "sapfuse/pipeline.hpp"

#include <cmath>

#include "sapfuse/errors.hpp"
#include "sapfuse/losses.hpp"
#include "sapfuse/ops.hpp"
#include "sapfuse/rng.hpp"

namespace sapfuse::harness {

std::string to_string(FusionVariant v) {
  switch (v) {
    case FusionVariant::ours: return "ours";
    case FusionVariant::naive_concat: return "naive_concat";
    case FusionVariant::naive_attention: return "naive_attention";
    case FusionVariant::single_optical: return "single_optical";
    case FusionVariant::single_sar: return "single_sar";
  }
  return "?";
}

FusionVariant parse_fusion_variant(const std::string& name) {
  for (auto v : {FusionVariant::ours, FusionVariant::naive_concat, FusionVariant::naive_attention,
                 FusionVariant::single_optical, FusionVariant::single_sar}) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown fusion variant '" + name + "'");
}

bool is_fused(FusionVariant v) { return v != FusionVariant::single_optical && v != FusionVariant::single_sar; }

ModelConfig SystemConfig::model_config() const {
  ModelConfig m;
  m.layers = layers;
  m.heads = heads;
  m.width = width;
  m.ffn_width = ffn_width;
  m.text_vocab = synth::vocab::text_size(num_classes);
  m.answer_vocab = synth::vocab::answer_size(max_objects);
  m.positions = grid.cells();
  return m;
}

std::size_t SystemConfig::patch_dim() const {
  return 3 * (image_height / grid.rows) * (image_width / grid.cols);
}

void SystemConfig::validate() const {
  if (grid.rows == 0 || grid.cols == 0) throw ConfigError("token grid must be non-empty");
  if (image_height % grid.rows != 0 || image_width % grid.cols != 0) {
    throw ConfigError("image size " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                      " is not divisible by the token grid");
  }
  if (seg_tokens == 0) throw ConfigError("at least one seg token is required");
  if (fusion_queries == 0) throw ConfigError("at least one fusion query is required");
  if (num_classes == 0 || num_classes > synth::vocab::kMaxClasses) throw ConfigError("num_classes out of range");
  try {
    model_config().validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
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
BasicSystemParams<T> BasicSystemParams<T>::initialize(const SystemConfig& config, std::uint64_t seed) {
  config.validate();
  BasicSystemParams p;
  p.model = BasicModelParams<T>::initialize(config.model_config(), seed);
  Rng rng(seed, 0x73797374656dULL);
  const std::size_t d = config.width;
  const std::size_t k = config.patch_dim();
  const double patch_bound = 1.0 / std::sqrt(static_cast<double>(k));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  p.encoder_optical = uniform_matrix<T>(k, d, patch_bound, rng);
  p.encoder_sar = uniform_matrix<T>(k, d, patch_bound, rng);
  p.encoder_grounding = uniform_matrix<T>(2 * k, d, patch_bound, rng);
  p.fusion_queries = uniform_matrix<T>(config.fusion_queries, d, bound, rng);
  p.seg_embeddings = uniform_matrix<T>(config.seg_tokens, d, bound, rng);
  return p;
}

template <typename T>
BasicSystemParams<T> BasicSystemParams<T>::zeros(const SystemConfig& config) {
  config.validate();
  BasicSystemParams p;
  p.model = BasicModelParams<T>::zeros(config.model_config());
  const std::size_t d = config.width;
  const std::size_t k = config.patch_dim();
  p.encoder_optical = BasicTensor<T>({k, d});
  p.encoder_sar = BasicTensor<T>({k, d});
  p.encoder_grounding = BasicTensor<T>({2 * k, d});
  p.fusion_queries = BasicTensor<T>({config.fusion_queries, d});
  p.seg_embeddings = BasicTensor<T>({config.seg_tokens, d});
  return p;
}

template <typename T>
template <typename U>
BasicSystemParams<U> BasicSystemParams<T>::cast() const {
  BasicSystemParams<U> p;
  p.model = model.template cast<U>();
  p.encoder_optical = encoder_optical.template cast<U>();
  p.encoder_sar = encoder_sar.template cast<U>();
  p.encoder_grounding = encoder_grounding.template cast<U>();
  p.fusion_queries = fusion_queries.template cast<U>();
  p.seg_embeddings = seg_embeddings.template cast<U>();
  return p;
}

template <typename T>
BasicSceneInputs<T> prepare_scene(const synth::Scene& scene, std::size_t index, const SystemConfig& config) {
  const std::size_t h = scene.optical.dim(1), w = scene.optical.dim(2);
  if (h != config.image_height || w != config.image_width) {
    throw ConfigError("scene is " + std::to_string(h) + "x" + std::to_string(w) + ", system expects " +
                      std::to_string(config.image_height) + "x" + std::to_string(config.image_width));
  }
  const Tensor sar = sensor::pad_sar({scene.sar, sensor::SensorKind::sar}, config.sar_pad);

  BasicSceneInputs<T> in;
  in.index = index;
  const Tensor opt_patches = patch_matrix(scene.optical, config.grid);
  const Tensor sar_patches = patch_matrix(sar, config.grid);
  in.optical_patches = opt_patches.cast<T>();
  in.sar_patches = sar_patches.cast<T>();

  // Stacked 6-channel patches; channel-major flattening puts the optical
  // block first, so zeroing an absent modality is a column range.
  const std::size_t p = config.grid.cells(), k = config.patch_dim();
  in.grounding_patches = BasicTensor<T>({p, 2 * k});
  const bool use_opt = config.variant != FusionVariant::single_sar;
  const bool use_sar = config.variant != FusionVariant::single_optical;
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      in.grounding_patches(i, j) = use_opt ? static_cast<T>(opt_patches(i, j)) : T(0);
      in.grounding_patches(i, k + j) = use_sar ? static_cast<T>(sar_patches(i, j)) : T(0);
    }
  }
  for (const auto& obj : scene.objects) {
    in.masks.push_back(obj.mask.cast<T>());
    in.targets.push_back(sap::mask_to_target(obj.mask, config.grid));
  }
  in.queries = scene.queries;
  return in;
}

template <typename T>
BasicEncodedScene<T> encode_scene(const BasicSystemParams<T>& params, const BasicSceneInputs<T>& inputs,
                                  const SystemConfig& config) {
  const GridSize g = config.grid;
  BasicEncodedScene<T> e;
  e.pair.optical = make_token_grid(ops::matmul(inputs.optical_patches, params.encoder_optical), g.rows, g.cols,
                                   Modality::optical);
  e.pair.sar =
      make_token_grid(ops::matmul(inputs.sar_patches, params.encoder_sar), g.rows, g.cols, Modality::sar);
  e.grounding = ops::matmul(inputs.grounding_patches, params.encoder_grounding);
  const std::size_t p = g.cells();
  switch (config.variant) {
    case FusionVariant::ours:
      e.weights = config.mutual_attention
                      ? fusion::mutual_attention(e.pair, fusion::BasicFusionParams<T>{params.fusion_queries, 0.07})
                      : fusion::uniform_weights<T>(p);
      e.image = fusion::fuse(e.pair, e.weights);
      break;
    case FusionVariant::naive_concat:
      e.weights = fusion::uniform_weights<T>(p);
      e.image = fusion::fuse(e.pair, e.weights);
      break;
    case FusionVariant::naive_attention:
      e.weights = fusion::naive_attention(e.pair);
      e.image = fusion::fuse(e.pair, e.weights);
      break;
    case FusionVariant::single_optical:
      e.weights = fusion::uniform_weights<T>(p);
      e.image = e.pair.optical;
      break;
    case FusionVariant::single_sar:
      e.weights = fusion::uniform_weights<T>(p);
      e.image = e.pair.sar;
      break;
  }
  return e;
}

double compose_total(const ObjectiveConfig& o, double ce, double dice, double kl, double cl) {
  double total = o.lambda_ce * ce;
  total += o.lambda_dice * dice;
  total += o.lambda_kl * kl;
  total += o.lambda_cl * cl;
  return total;
}

template <typename T>
sap::BasicMaskTarget<T> expand_target(const sap::TokenTarget& target, const std::vector<std::size_t>& cells,
                                      std::size_t seg_tokens) {
  double z = 0.0;
  for (std::size_t c : cells) z += static_cast<double>(target.g[c]);
  sap::BasicMaskTarget<T> out;
  out.g = BasicTensor<T>({seg_tokens, cells.size()});
  for (std::size_t q = 0; q < seg_tokens; ++q) {
    for (std::size_t i = 0; i < cells.size(); ++i) out.g(q, i) = static_cast<T>(target.g[cells[i]] / z);
  }
  out.valid.assign(seg_tokens, target.valid);
  return out;
}

namespace {

template <typename T>
BasicTensor<T> slice_first(const BasicTensor<T>& x, std::size_t i) {
  const std::size_t n = x.size() / x.dim(0);
  Shape shape(x.shape().begin() + 1, x.shape().end());
  std::vector<T> v(x.values().begin() + static_cast<std::ptrdiff_t>(i * n),
                   x.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
  return BasicTensor<T>(std::move(shape), std::move(v));
}

template <typename T>
void add_scaled(BasicTensor<T>& into, const BasicTensor<T>& x, double s) {
  auto dst = into.data();
  auto src = x.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(dst[i] + s * src[i]);
}

}  // namespace

template <typename T>
LossBundle batch_objective(const BasicSystemParams<T>& params, const SystemConfig& config,
                           const ObjectiveConfig& objective, const std::vector<const BasicSceneInputs<T>*>& scenes,
                           const std::vector<SampleRef>& samples, BasicSystemParams<T>* grads) {
  if (samples.empty()) throw DomainError("batch_objective: empty minibatch");
  const double n = static_cast<double>(samples.size());
  const GridSize out_size{config.image_height, config.image_width};
  const std::size_t q_count = config.seg_tokens;
  const bool supervise_attention = objective.sap_layers.has_value();
  const bool train_attention = supervise_attention && objective.lambda_kl != 0.0;

  std::vector<BasicEncodedScene<T>> encoded;
  encoded.reserve(scenes.size());
  for (const auto* s : scenes) encoded.push_back(encode_scene(params, *s, config));

  std::vector<BasicTensor<T>> grad_image, grad_grounding;
  if (grads) {
    *grads = BasicSystemParams<T>::zeros(config);
    for (const auto& e : encoded) {
      grad_image.push_back(BasicTensor<T>::zeros_like(e.image.tokens));
      grad_grounding.push_back(BasicTensor<T>::zeros_like(e.grounding));
    }
  }

  const BasicSegTokenSet<T> segs{params.seg_embeddings};
  double ce_sum = 0.0, dice_sum = 0.0, kl_sum = 0.0;
  for (const SampleRef& ref : samples) {
    const BasicSceneInputs<T>& in = *scenes.at(ref.scene);
    const BasicEncodedScene<T>& enc = encoded[ref.scene];
    const synth::Query& query = in.queries.at(ref.query);

    auto [out, vjp] = forward_with_vjp(params.model, enc.image, segs, query.tokens);
    ForwardCotangents<T> cot;

    if (query.kind != synth::QueryKind::segment) {
      const auto a = losses::answer_ce(out.answer_logits, query.answer);
      ce_sum += a.value;
      if (grads) {
        cot.answer_logits = a.grad;
        ops::scale_inplace(cot.answer_logits, objective.lambda_ce / n);
      }
    } else {
      const std::size_t obj = query.target.value();
      const BasicTensor<T> logits =
          decode_mask(out.seg_hidden, enc.grounding, params.model.mask_projection, config.grid, out_size);
      BasicTensor<T> grad_logits(logits.shape());
      const std::size_t hw = out_size.cells();
      for (std::size_t q = 0; q < q_count; ++q) {
        const auto ml = losses::mask_losses(slice_first(logits, q), in.masks.at(obj));
        ce_sum += ml.ce / static_cast<double>(q_count);
        dice_sum += ml.dice / static_cast<double>(q_count);
        const double sc = objective.lambda_ce / (n * static_cast<double>(q_count));
        const double sd = objective.lambda_dice / (n * static_cast<double>(q_count));
        for (std::size_t i = 0; i < hw; ++i) {
          grad_logits[q * hw + i] = static_cast<T>(sc * ml.grad_ce[i] + sd * ml.grad_dice[i]);
        }
      }
      if (grads) {
        const auto dm = decode_mask_backward(out.seg_hidden, enc.grounding, params.model.mask_projection,
                                             config.grid, out_size, grad_logits);
        cot.seg_hidden = dm.seg_hidden;
        ops::add_inplace(grad_grounding[ref.scene], dm.grounding);
        ops::add_inplace(grads->model.mask_projection, dm.mask_projection);
      }
      const sap::TokenTarget& target = in.targets.at(obj);
      if (supervise_attention && target.valid) {
        const auto tgt = expand_target<T>(target, enc.image.cells, q_count);
        const BasicTensor<T> map = sap::seg_to_image_map(out.attn.raw);
        const double terms = static_cast<double>(sap::sap_term_count(map, tgt, *objective.sap_layers));
        kl_sum += sap::sap_loss(map, tgt, *objective.sap_layers, objective.kl_direction) / terms;
        if (grads && train_attention) {
          const BasicTensor<T> grad_map = sap::sap_loss_backward(
              map, tgt, *objective.sap_layers, objective.lambda_kl / (terms * n), objective.kl_direction);
          cot.attn_raw = sap::seg_to_image_map_backward(out.attn.raw, grad_map);
        }
      }
    }

    if (grads) {
      const ForwardGrads<T> g = vjp(cot);
      std::vector<BasicTensor<T>*> into;
      grads->model.for_each([&into](const std::string&, BasicTensor<T>& t) { into.push_back(&t); });
      std::size_t idx = 0;
      g.params.for_each([&](const std::string&, const BasicTensor<T>& t) { ops::add_inplace(*into[idx++], t); });
      ops::add_inplace(grads->seg_embeddings, g.seg_embeddings);
      ops::add_inplace(grad_image[ref.scene], g.image_tokens);
    }
  }

  LossBundle bundle;
  bundle.ce = ce_sum / n;
  bundle.dice = dice_sum / n;
  bundle.kl = kl_sum / n;

  // Contrastive alignment across the minibatch scenes.
  fusion::ContrastiveGrads<T> cl_grads;
  if (is_fused(config.variant)) {
    std::vector<BasicTensor<T>> xo, xs;
    for (const auto& e : encoded) {
      xo.push_back(e.pair.optical.tokens);
      xs.push_back(e.pair.sar.tokens);
    }
    const bool want = grads && objective.lambda_cl != 0.0;
    bundle.cl = fusion::contrastive_loss<T>(std::span<const BasicTensor<T>>(xo), std::span<const BasicTensor<T>>(xs),
                                            objective.tau_cl, want ? &cl_grads : nullptr);
  }
  bundle.total = compose_total(objective, bundle.ce, bundle.dice, bundle.kl, bundle.cl);

  if (!grads) return bundle;

  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const BasicSceneInputs<T>& in = *scenes[s];
    const BasicEncodedScene<T>& enc = encoded[s];
    BasicTensor<T> gx_o = BasicTensor<T>::zeros_like(enc.pair.optical.tokens);
    BasicTensor<T> gx_s = BasicTensor<T>::zeros_like(enc.pair.sar.tokens);
    switch (config.variant) {
      case FusionVariant::single_optical: gx_o = grad_image[s]; break;
      case FusionVariant::single_sar: gx_s = grad_image[s]; break;
      default: {
        const auto fg = fusion::fuse_backward(enc.pair, enc.weights, grad_image[s]);
        gx_o = fg.optical;
        gx_s = fg.sar;
        if (config.variant == FusionVariant::ours && config.mutual_attention) {
          const auto mg = fusion::mutual_attention_backward(
              enc.pair, fusion::BasicFusionParams<T>{params.fusion_queries, 0.07}, enc.weights, fg.weights);
          ops::add_inplace(gx_o, mg.optical);
          ops::add_inplace(gx_s, mg.sar);
          ops::add_inplace(grads->fusion_queries, mg.queries);
        } else if (config.variant == FusionVariant::naive_attention) {
          const auto ng = fusion::naive_attention_backward(enc.pair, enc.weights, fg.weights);
          ops::add_inplace(gx_o, ng.optical);
          ops::add_inplace(gx_s, ng.sar);
        }
        if (!cl_grads.optical.empty()) {
          add_scaled(gx_o, cl_grads.optical[s], objective.lambda_cl);
          add_scaled(gx_s, cl_grads.sar[s], objective.lambda_cl);
        }
      }
    }
    ops::add_inplace(grads->encoder_optical, ops::matmul_tn(in.optical_patches, gx_o));
    ops::add_inplace(grads->encoder_sar, ops::matmul_tn(in.sar_patches, gx_s));
    ops::add_inplace(grads->encoder_grounding, ops::matmul_tn(in.grounding_patches, grad_grounding[s]));
  }
  return bundle;
}

template <typename T>
BasicTokenGrid<T> drop_tokens(const BasicEncodedScene<T>& encoded, const SystemConfig& config, const DropSpec& drop,
                              std::size_t scene_index) {
  const std::uint64_t base = drop.seed * 0x9E3779B97F4A7C15ULL + 2 * static_cast<std::uint64_t>(scene_index);
  switch (config.variant) {
    case FusionVariant::single_optical:
      return fusion::token_drop(encoded.image, encoded.weights.w_o, drop.keep_ratio, drop.strategy, base);
    case FusionVariant::single_sar:
      return fusion::token_drop(encoded.image, encoded.weights.w_s, drop.keep_ratio, drop.strategy, base + 1);
    default: break;
  }
  const std::size_t p = config.grid.cells();
  const auto keep_o = fusion::kept_indices(encoded.weights.w_o, drop.keep_ratio, drop.strategy, base);
  const auto keep_s = fusion::kept_indices(encoded.weights.w_s, drop.keep_ratio, drop.strategy, base + 1);
  std::vector<std::size_t> rows(keep_o);
  for (std::size_t i : keep_s) rows.push_back(p + i);
  const std::size_t d = encoded.image.width();
  BasicTokenGrid<T> out;
  out.tokens = BasicTensor<T>({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t j = 0; j < d; ++j) out.tokens(r, j) = encoded.image.tokens(rows[r], j);
    out.cells.push_back(encoded.image.cells[rows[r]]);
  }
  out.grid_rows = encoded.image.grid_rows;
  out.grid_cols = encoded.image.grid_cols;
  out.modality = encoded.image.modality;
  return out;
}

template <typename T>
std::vector<Prediction> predict_scene(const BasicSystemParams<T>& params, const SystemConfig& config,
                                      const BasicSceneInputs<T>& inputs, const std::vector<std::size_t>& queries,
                                      const std::optional<DropSpec>& drop) {
  const BasicEncodedScene<T> enc = encode_scene(params, inputs, config);
  const BasicTokenGrid<T> image = drop ? drop_tokens(enc, config, *drop, inputs.index) : enc.image;
  const BasicSegTokenSet<T> segs{params.seg_embeddings};
  const GridSize out_size{config.image_height, config.image_width};
  std::vector<std::size_t> which = queries;
  if (which.empty()) {
    for (std::size_t i = 0; i < inputs.queries.size(); ++i) which.push_back(i);
  }
  std::vector<Prediction> preds;
  for (std::size_t qi : which) {
    const synth::Query& query = inputs.queries.at(qi);
    const BasicForwardOutput<T> out = forward(params.model, image, segs, query.tokens);
    Prediction pred;
    std::size_t best = 0;
    for (std::size_t i = 1; i < out.answer_logits.size(); ++i) {
      if (out.answer_logits[i] > out.answer_logits[best]) best = i;
    }
    pred.answer = best;
    if (query.kind == synth::QueryKind::segment) {
      const BasicTensor<T> logits =
          decode_mask(out.seg_hidden, enc.grounding, params.model.mask_projection, config.grid, out_size);
      const std::size_t hw = out_size.cells();
      pred.mask = Tensor({out_size.rows, out_size.cols});
      for (std::size_t i = 0; i < hw; ++i) {
        double z = 0.0;
        for (std::size_t q = 0; q < config.seg_tokens; ++q) z += static_cast<double>(logits[q * hw + i]);
        pred.mask[i] = z > 0.0 ? 1.0f : 0.0f;
      }
    }
    preds.push_back(std::move(pred));
  }
  return preds;
}

#define SAPFUSE_INSTANTIATE_PIPELINE(T)                                                                          \
  template struct BasicSystemParams<T>;                                                                          \
  template BasicSceneInputs<T> prepare_scene<T>(const synth::Scene&, std::size_t, const SystemConfig&);          \
  template BasicEncodedScene<T> encode_scene<T>(const BasicSystemParams<T>&, const BasicSceneInputs<T>&,         \
                                                const SystemConfig&);                                            \
  template sap::BasicMaskTarget<T> expand_target<T>(const sap::TokenTarget&, const std::vector<std::size_t>&,   \
                                                    std::size_t);                                                \
  template LossBundle batch_objective<T>(const BasicSystemParams<T>&, const SystemConfig&,                       \
                                         const ObjectiveConfig&, const std::vector<const BasicSceneInputs<T>*>&, \
                                         const std::vector<SampleRef>&, BasicSystemParams<T>*);                  \
  template BasicTokenGrid<T> drop_tokens<T>(const BasicEncodedScene<T>&, const SystemConfig&, const DropSpec&,   \
                                            std::size_t);                                                        \
  template std::vector<Prediction> predict_scene<T>(const BasicSystemParams<T>&, const SystemConfig&,            \
                                                    const BasicSceneInputs<T>&, const std::vector<std::size_t>&, \
                                                    const std::optional<DropSpec>&);

SAPFUSE_INSTANTIATE_PIPELINE(float)
SAPFUSE_INSTANTIATE_PIPELINE(double)

template BasicSystemParams<double> BasicSystemParams<float>::cast<double>() const;
template BasicSystemParams<float> BasicSystemParams<double>::cast<float>() const;

}  // namespace sapfuse::harness
