#include "sapfuse/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "sapfuse/dataset_io.hpp"
#include "sapfuse/errors.hpp"
#include "sapfuse/json_util.hpp"
#include "sapfuse/metrics.hpp"
#include "sapfuse/ops.hpp"
#include "sapfuse/rng.hpp"

namespace sapfuse::harness {

using json = nlohmann::json;

std::string to_string(Optimizer o) { return o == Optimizer::gd ? "gd" : "adam"; }

Optimizer parse_optimizer(const std::string& name) {
  if (name == "gd") return Optimizer::gd;
  if (name == "adam") return Optimizer::adam;
  throw ConfigError("unknown optimizer '" + name + "'");
}

void RunConfig::validate() const {
  const auto& o = objective;
  if (o.lambda_ce < 0 || o.lambda_dice < 0 || o.lambda_kl < 0 || o.lambda_cl < 0) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (!(o.tau_cl > 0)) throw ConfigError("tau_cl must be positive");
  if (!(step_size > 0) || !std::isfinite(step_size)) throw ConfigError("step_size must be positive");
  if (!(clip_norm >= 0) || !std::isfinite(clip_norm)) throw ConfigError("clip_norm must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (train_scenes == 0) throw ConfigError("train_scenes must be positive");
  if (query_kinds.empty()) throw ConfigError("at least one query kind is required");
  try {
    data.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("dataset.spec: ") + e.what());
  }
  system.validate();
  if (system.image_height != data.height || system.image_width != data.width ||
      system.num_classes != data.num_classes || system.max_objects != data.max_objects) {
    throw ConfigError("system shape disagrees with the scene spec");
  }
}

synth::SceneSpec RunConfig::scene_spec() const {
  synth::SceneSpec s = data;
  s.seed = seed;
  return s;
}

namespace {

std::vector<synth::QueryKind> parse_kinds(const json& j) {
  std::vector<synth::QueryKind> kinds;
  try {
    for (const auto& k : j) kinds.push_back(synth::parse_query_kind(k.get<std::string>()));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset.queries: ") + e.what());
  } catch (const DomainError& e) {
    throw ConfigError(std::string("dataset.queries: ") + e.what());
  }
  return kinds;
}

template <typename F>
auto as_config_error(const std::string& ctx, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  using json_util::check_keys;
  using json_util::read;
  RunConfig c;
  check_keys(j, {"seed", "model", "dataset", "loss", "fusion", "optim"}, "config");
  read(j, "seed", c.seed, "config");

  if (auto it = j.find("model"); it != j.end()) {
    const std::string ctx = "model";
    check_keys(*it, {"layers", "heads", "width", "ffn_width", "seg_tokens", "fusion_queries", "grid_rows", "grid_cols"},
               ctx);
    read(*it, "layers", c.system.layers, ctx);
    read(*it, "heads", c.system.heads, ctx);
    read(*it, "width", c.system.width, ctx);
    read(*it, "ffn_width", c.system.ffn_width, ctx);
    read(*it, "seg_tokens", c.system.seg_tokens, ctx);
    read(*it, "fusion_queries", c.system.fusion_queries, ctx);
    read(*it, "grid_rows", c.system.grid.rows, ctx);
    read(*it, "grid_cols", c.system.grid.cols, ctx);
  }
  if (auto it = j.find("dataset"); it != j.end()) {
    const std::string ctx = "dataset";
    check_keys(*it, {"spec", "train_scenes", "test_scenes", "queries"}, ctx);
    if (auto s = it->find("spec"); s != it->end()) {
      if (s->contains("seed")) throw ConfigError("dataset.spec.seed: scene seeds derive from the run seed");
      c.data = synth::scene_spec_from_json(*s, c.data);
    }
    read(*it, "train_scenes", c.train_scenes, ctx);
    read(*it, "test_scenes", c.test_scenes, ctx);
    if (auto q = it->find("queries"); q != it->end()) c.query_kinds = parse_kinds(*q);
  }
  if (auto it = j.find("loss"); it != j.end()) {
    const std::string ctx = "loss";
    check_keys(*it, {"lambda_ce", "lambda_dice", "lambda_kl", "lambda_cl", "tau_cl", "sap_layers", "kl_direction"},
               ctx);
    auto& o = c.objective;
    read(*it, "lambda_ce", o.lambda_ce, ctx);
    read(*it, "lambda_dice", o.lambda_dice, ctx);
    read(*it, "lambda_kl", o.lambda_kl, ctx);
    read(*it, "lambda_cl", o.lambda_cl, ctx);
    read(*it, "tau_cl", o.tau_cl, ctx);
    std::string layers = o.sap_layers ? sap::to_string(*o.sap_layers) : "none";
    read(*it, "sap_layers", layers, ctx);
    o.sap_layers = layers == "none" ? std::nullopt
                                    : std::optional(as_config_error("loss.sap_layers", [&] {
                                        return sap::parse_layer_mode(layers);
                                      }));
    std::string direction = sap::to_string(o.kl_direction);
    read(*it, "kl_direction", direction, ctx);
    o.kl_direction = as_config_error("loss.kl_direction", [&] { return sap::parse_kl_direction(direction); });
  }
  if (auto it = j.find("fusion"); it != j.end()) {
    const std::string ctx = "fusion";
    check_keys(*it, {"variant", "mutual_attention", "sar_pad"}, ctx);
    std::string variant = to_string(c.system.variant);
    read(*it, "variant", variant, ctx);
    c.system.variant = parse_fusion_variant(variant);
    read(*it, "mutual_attention", c.system.mutual_attention, ctx);
    std::string pad = sensor::to_string(c.system.sar_pad);
    read(*it, "sar_pad", pad, ctx);
    c.system.sar_pad = as_config_error("fusion.sar_pad", [&] { return sensor::parse_sar_pad_mode(pad); });
  }
  if (auto it = j.find("optim"); it != j.end()) {
    const std::string ctx = "optim";
    check_keys(*it, {"optimizer", "step_size", "clip_norm", "steps", "batch_size"}, ctx);
    std::string method = to_string(c.optimizer);
    read(*it, "optimizer", method, ctx);
    c.optimizer = parse_optimizer(method);
    read(*it, "clip_norm", c.clip_norm, ctx);
    read(*it, "step_size", c.step_size, ctx);
    read(*it, "steps", c.steps, ctx);
    read(*it, "batch_size", c.batch_size, ctx);
  }
  c.system.image_height = c.data.height;
  c.system.image_width = c.data.width;
  c.system.num_classes = c.data.num_classes;
  c.system.max_objects = c.data.max_objects;
  c.validate();
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json spec = synth::scene_spec_to_json(c.data);
  spec.erase("seed");
  json kinds = json::array();
  for (auto k : c.query_kinds) kinds.push_back(synth::to_string(k));
  const auto& o = c.objective;
  return json{
      {"seed", c.seed},
      {"model",
       {{"layers", c.system.layers},
        {"heads", c.system.heads},
        {"width", c.system.width},
        {"ffn_width", c.system.ffn_width},
        {"seg_tokens", c.system.seg_tokens},
        {"fusion_queries", c.system.fusion_queries},
        {"grid_rows", c.system.grid.rows},
        {"grid_cols", c.system.grid.cols}}},
      {"dataset",
       {{"spec", spec}, {"train_scenes", c.train_scenes}, {"test_scenes", c.test_scenes}, {"queries", kinds}}},
      {"loss",
       {{"lambda_ce", o.lambda_ce},
        {"lambda_dice", o.lambda_dice},
        {"lambda_kl", o.lambda_kl},
        {"lambda_cl", o.lambda_cl},
        {"tau_cl", o.tau_cl},
        {"sap_layers", o.sap_layers ? sap::to_string(*o.sap_layers) : "none"},
        {"kl_direction", sap::to_string(o.kl_direction)}}},
      {"fusion",
       {{"variant", to_string(c.system.variant)},
        {"mutual_attention", c.system.mutual_attention},
        {"sar_pad", sensor::to_string(c.system.sar_pad)}}},
      {"optim", {{"optimizer", to_string(c.optimizer)}, {"step_size", c.step_size}, {"clip_norm", c.clip_norm}, {"steps", c.steps}, {"batch_size", c.batch_size}}}};
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

TrainData prepare_data(const RunConfig& config, const std::vector<synth::Scene>& train,
                       const std::vector<synth::Scene>& test) {
  TrainData d;
  for (std::size_t i = 0; i < train.size(); ++i) d.train.push_back(prepare_scene<float>(train[i], i, config.system));
  for (std::size_t i = 0; i < test.size(); ++i) {
    d.test.push_back(prepare_scene<float>(test[i], train.size() + i, config.system));
  }
  return d;
}

TrainData make_data(const RunConfig& config) {
  const auto spec = config.scene_spec();
  return prepare_data(config, synth::generate_scenes(spec, 0, config.train_scenes),
                      synth::generate_scenes(spec, config.train_scenes, config.test_scenes));
}

EvalMetrics summarize(std::span<const SampleRecord> records) {
  std::vector<metrics::Overlap> overlaps;
  std::vector<metrics::LabelRecord> labels;
  for (const auto& r : records) {
    if (r.kind == synth::QueryKind::segment) {
      overlaps.push_back({r.intersection, r.union_count});
    } else {
      labels.push_back({r.answer_pred, r.answer_gt});
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EvalMetrics m;
  m.mask_samples = overlaps.size();
  m.answer_samples = labels.size();
  m.miou = overlaps.empty() ? nan : metrics::mean_iou(overlaps);
  m.oiou = overlaps.empty() ? nan : metrics::overall_iou(overlaps);
  m.accuracy = labels.empty() ? nan : metrics::accuracy(labels);
  return m;
}

std::vector<std::size_t> selected_queries(const SceneInputs& scene, const RunConfig& config) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < scene.queries.size(); ++i) {
    if (std::find(config.query_kinds.begin(), config.query_kinds.end(), scene.queries[i].kind) !=
        config.query_kinds.end()) {
      out.push_back(i);
    }
  }
  return out;
}

EvalResult evaluate(const SystemParams& params, const RunConfig& config, std::span<const SceneInputs> scenes,
                    const std::optional<DropSpec>& drop) {
  EvalResult result;
  for (const auto& scene : scenes) {
    const auto which = selected_queries(scene, config);
    if (which.empty()) continue;
    const auto preds = predict_scene(params, config.system, scene, which, drop);
    for (std::size_t i = 0; i < which.size(); ++i) {
      const synth::Query& q = scene.queries[which[i]];
      SampleRecord r;
      r.scene = scene.index;
      r.query = which[i];
      r.kind = q.kind;
      r.answer_gt = q.answer;
      r.answer_pred = preds[i].answer;
      if (q.kind == synth::QueryKind::segment) {
        const auto ov = metrics::mask_overlap(preds[i].mask, scene.masks.at(q.target.value()));
        r.intersection = ov.intersection;
        r.union_count = ov.union_count;
      }
      result.records.push_back(r);
    }
  }
  result.metrics = summarize(result.records);
  return result;
}

void descend(std::span<float> params, std::span<const float> grads, double step) {
  if (params.size() != grads.size()) throw DimensionError("descend: parameter/gradient size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] = static_cast<float>(params[i] - step * grads[i]);
}

TrainResult train(const RunConfig& config, const TrainData& data) {
  config.validate();
  if (data.train.empty()) throw ConfigError("no training scenes");
  TrainResult result;
  result.params = SystemParams::initialize(config.system, config.seed);

  Rng order(config.seed, 0x6f72646572ULL);
  std::vector<std::size_t> perm(data.train.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::size_t cursor = perm.size();

  // Adam moments, one pair per parameter tensor.
  std::vector<std::vector<double>> m1, m2;
  result.params.for_each([&](const std::string&, const Tensor& p) {
    if (config.optimizer == Optimizer::adam) {
      m1.emplace_back(p.size(), 0.0);
      m2.emplace_back(p.size(), 0.0);
    }
  });
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kAdamEps = 1e-8;

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<const SceneInputs*> scenes;
    std::vector<SampleRef> samples;
    // Draw scenes until the minibatch is full, skipping scenes without
    // eligible queries; an epoch boundary reshuffles.
    std::size_t attempts = 0;
    while (scenes.size() < config.batch_size && attempts < perm.size()) {
      if (cursor == perm.size()) {
        std::shuffle(perm.begin(), perm.end(), order.engine());
        cursor = 0;
      }
      const SceneInputs& s = data.train[perm[cursor++]];
      ++attempts;
      const auto which = selected_queries(s, config);
      if (which.empty()) continue;
      for (std::size_t q : which) samples.push_back({scenes.size(), q});
      scenes.push_back(&s);
    }
    if (samples.empty()) throw ConfigError("no training scene has a query of the selected kinds");

    SystemParams grads;
    LossBundle loss;
    try {
      loss = batch_objective(result.params, config.system, config.objective, scenes, samples, &grads);
    } catch (const DomainError& e) {
      // Softmax outputs only break a distribution precondition once activations overflow.
      if (step == 0) throw;
      throw DivergenceError("numerical blow-up at step " + std::to_string(step) + ": " + e.what(), step);
    }
    if (!std::isfinite(loss.total)) {
      throw DivergenceError("non-finite loss at step " + std::to_string(step) + " (ce=" + std::to_string(loss.ce) +
                                " dice=" + std::to_string(loss.dice) + " kl=" + std::to_string(loss.kl) +
                                " cl=" + std::to_string(loss.cl) + ")",
                            step);
    }
    result.history.push_back({step, loss});

    std::vector<Tensor*> g;
    grads.for_each([&g](const std::string&, Tensor& t) { g.push_back(&t); });
    double sq = 0.0;
    for (const Tensor* t : g) sq += ops::dot<float>(t->data(), t->data());
    const double norm = std::sqrt(sq);
    const double scale = config.clip_norm > 0 && norm > config.clip_norm ? config.clip_norm / norm : 1.0;
    std::size_t idx = 0;
    std::string bad;
    result.params.for_each([&](const std::string& name, Tensor& p) {
      const Tensor& gt = *g[idx++];
      if (!ops::all_finite<float>(gt.data())) bad = name;
      if (config.optimizer == Optimizer::gd) {
        descend(p.data(), gt.data(), config.step_size * scale);
        return;
      }
      auto& a = m1[idx - 1];
      auto& b = m2[idx - 1];
      const double t = static_cast<double>(step + 1);
      const double c1 = 1.0 - std::pow(kBeta1, t), c2 = 1.0 - std::pow(kBeta2, t);
      auto pv = p.data();
      auto gv = gt.data();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double gi = gv[i] * scale;
        a[i] = kBeta1 * a[i] + (1 - kBeta1) * gi;
        b[i] = kBeta2 * b[i] + (1 - kBeta2) * gi * gi;
        pv[i] = static_cast<float>(pv[i] - config.step_size * (a[i] / c1) / (std::sqrt(b[i] / c2) + kAdamEps));
      }
    });
    if (!bad.empty()) throw DivergenceError("non-finite gradient for " + bad + " at step " + std::to_string(step), step);
  }
  return result;
}

}  // namespace sapfuse::harness
