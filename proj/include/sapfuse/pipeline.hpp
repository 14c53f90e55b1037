#pragma once

// End-to-end toy system: per-modality patch encoders, fusion, the
// transformer, the mask decoder and the composed training objective.
//
// Everything here is templated on the scalar type so the full objective can
// be gradient-checked in double while training runs in float.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sapfuse/fusion.hpp"
#include "sapfuse/model.hpp"
#include "sapfuse/sap.hpp"
#include "sapfuse/sensor_format.hpp"
#include "sapfuse/synth.hpp"

namespace sapfuse::harness {

enum class FusionVariant { ours, naive_concat, naive_attention, single_optical, single_sar };

std::string to_string(FusionVariant v);
FusionVariant parse_fusion_variant(const std::string& name);

bool is_fused(FusionVariant v);

struct SystemConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t width = 32;
  std::size_t ffn_width = 32;
  std::size_t seg_tokens = 1;
  std::size_t fusion_queries = 4;
  GridSize grid{8, 8};
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::size_t num_classes = 4;
  std::size_t max_objects = 3;
  FusionVariant variant = FusionVariant::ours;
  /// When false the `ours` arm uses uniform importance weights.
  bool mutual_attention = true;
  sensor::SarPadMode sar_pad = sensor::SarPadMode::zero_pad;

  ModelConfig model_config() const;
  /// Length of one flattened 3-channel patch.
  std::size_t patch_dim() const;
  void validate() const;
  bool operator==(const SystemConfig&) const = default;
};

template <typename T>
struct BasicSystemParams {
  BasicModelParams<T> model;
  BasicTensor<T> encoder_optical;    // patch_dim×D
  BasicTensor<T> encoder_sar;        // patch_dim×D
  BasicTensor<T> encoder_grounding;  // 2·patch_dim×D, over the stacked 6 channels
  BasicTensor<T> fusion_queries;     // k×D
  BasicTensor<T> seg_embeddings;     // Q×D

  static BasicSystemParams initialize(const SystemConfig& config, std::uint64_t seed);
  static BasicSystemParams zeros(const SystemConfig& config);

  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  template <typename U>
  BasicSystemParams<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    self.model.for_each([&f](const std::string& name, auto& t) { f("model." + name, t); });
    f(std::string("encoder.optical"), self.encoder_optical);
    f(std::string("encoder.sar"), self.encoder_sar);
    f(std::string("encoder.grounding"), self.encoder_grounding);
    f(std::string("fusion.queries"), self.fusion_queries);
    f(std::string("seg.embeddings"), self.seg_embeddings);
  }
};

using SystemParams = BasicSystemParams<float>;

/// Fixed per-scene inputs: patch matrices and per-object supervision.
template <typename T>
struct BasicSceneInputs {
  std::size_t index = 0;
  BasicTensor<T> optical_patches;    // P×patch_dim
  BasicTensor<T> sar_patches;        // P×patch_dim, SAR formatted to 3 channels
  BasicTensor<T> grounding_patches;  // P×2·patch_dim, absent modality zeroed
  std::vector<BasicTensor<T>> masks;  // per object, H×W binary
  std::vector<sap::TokenTarget> targets;
  std::vector<synth::Query> queries;
};

using SceneInputs = BasicSceneInputs<float>;

template <typename T>
BasicSceneInputs<T> prepare_scene(const synth::Scene& scene, std::size_t index, const SystemConfig& config);

/// Scene-level activations shared by all of the scene's queries.
template <typename T>
struct BasicEncodedScene {
  fusion::BasicModalityPair<T> pair;
  fusion::BasicImportanceWeights<T> weights;
  BasicTokenGrid<T> image;   // model input: 2P fused tokens or P single-modality tokens
  BasicTensor<T> grounding;  // P×D
};

template <typename T>
BasicEncodedScene<T> encode_scene(const BasicSystemParams<T>& params, const BasicSceneInputs<T>& inputs,
                                  const SystemConfig& config);

struct ObjectiveConfig {
  double lambda_ce = 1.0;
  double lambda_dice = 1.0;
  double lambda_kl = 0.1;
  double lambda_cl = 0.1;
  double tau_cl = 0.07;
  /// Empty disables attention supervision.
  std::optional<sap::LayerMode> sap_layers = sap::LayerMode::all;
  sap::KlDirection kl_direction = sap::KlDirection::attention_to_target;
};

struct LossBundle {
  double ce = 0.0;
  double dice = 0.0;
  double kl = 0.0;
  double cl = 0.0;
  double total = 0.0;
};

/// λ_ce·ce + λ_dice·dice + λ_kl·kl + λ_cl·cl, evaluated left to right.
double compose_total(const ObjectiveConfig& objective, double ce, double dice, double kl, double cl);

/// One query of one scene in a minibatch.
struct SampleRef {
  std::size_t scene = 0;  // position in the minibatch scene list
  std::size_t query = 0;
};

/// Image-token distribution for a model input whose tokens come from
/// `cells`: each token inherits its cell's target mass, renormalized.
template <typename T>
sap::BasicMaskTarget<T> expand_target(const sap::TokenTarget& target, const std::vector<std::size_t>& cells,
                                      std::size_t seg_tokens);

/// Minibatch objective. ce averages answer CE (non-segment queries) and
/// mask BCE (segment queries) over samples; dice and the per-term-averaged
/// SAP loss are averaged over the same count; cl is the contrastive loss
/// over the minibatch scenes (zero for single-modality arms). When `grads`
/// is non-null it receives d total / d params.
template <typename T>
LossBundle batch_objective(const BasicSystemParams<T>& params, const SystemConfig& config,
                           const ObjectiveConfig& objective, const std::vector<const BasicSceneInputs<T>*>& scenes,
                           const std::vector<SampleRef>& samples, BasicSystemParams<T>* grads);

struct DropSpec {
  double keep_ratio = 1.0;
  fusion::DropStrategy strategy = fusion::DropStrategy::importance;
  std::uint64_t seed = 0;
};

/// Applies token dropping to the model input of an encoded scene. Fused
/// inputs are pruned within the optical half (by w_o) and the SAR half
/// (by w_s) separately.
template <typename T>
BasicTokenGrid<T> drop_tokens(const BasicEncodedScene<T>& encoded, const SystemConfig& config, const DropSpec& drop,
                              std::size_t scene_index);

struct Prediction {
  std::size_t answer = 0;
  Tensor mask;  // H×W binary; empty for non-segment queries
};

/// Predictions for the given queries of one scene (all when empty).
template <typename T>
std::vector<Prediction> predict_scene(const BasicSystemParams<T>& params, const SystemConfig& config,
                                      const BasicSceneInputs<T>& inputs, const std::vector<std::size_t>& queries,
                                      const std::optional<DropSpec>& drop = std::nullopt);

}  // namespace sapfuse::harness
