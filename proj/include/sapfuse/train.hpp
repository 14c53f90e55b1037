#pragma once

// Run configuration, gradient-descent training and evaluation.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sapfuse/pipeline.hpp"
#include "sapfuse/synth.hpp"

namespace sapfuse::harness {

/// Plain gradient descent, or Adam (β1 0.9, β2 0.999, ε 1e-8) with the same step size.
enum class Optimizer { gd, adam };

std::string to_string(Optimizer o);
Optimizer parse_optimizer(const std::string& name);

struct RunConfig {
  SystemConfig system;
  /// Scene distribution; its seed is always replaced by the run seed.
  synth::SceneSpec data;
  std::size_t train_scenes = 200;
  std::size_t test_scenes = 100;
  /// Query kinds trained and evaluated (segment + answers = joint training).
  std::vector<synth::QueryKind> query_kinds = {synth::QueryKind::segment, synth::QueryKind::exists,
                                               synth::QueryKind::count};
  ObjectiveConfig objective;
  Optimizer optimizer = Optimizer::gd;
  double step_size = 1e-2;
  /// Rescales the whole gradient to this global L2 norm when larger; 0 disables.
  double clip_norm = 0.0;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
  /// Scene spec with the run seed applied.
  synth::SceneSpec scene_spec() const;
};

/// Strict parsing: unknown keys raise ConfigError; absent keys keep defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::string& path);

struct TrainData {
  std::vector<SceneInputs> train;
  std::vector<SceneInputs> test;
};

/// Generates and prepares the train and test splits (test indices follow
/// the train indices, so the splits are disjoint).
TrainData make_data(const RunConfig& config);
TrainData prepare_data(const RunConfig& config, const std::vector<synth::Scene>& train,
                       const std::vector<synth::Scene>& test);

struct HistoryRow {
  std::size_t step = 0;
  LossBundle loss;
};

/// One evaluated query; enough to recompute every reported metric.
struct SampleRecord {
  std::size_t scene = 0;
  std::size_t query = 0;
  synth::QueryKind kind = synth::QueryKind::segment;
  std::size_t answer_gt = 0;
  std::size_t answer_pred = 0;
  std::size_t intersection = 0;
  std::size_t union_count = 0;
};

/// Metrics over records: mIoU/oIoU over segment queries, accuracy over the
/// rest. A metric without eligible records is NaN.
struct EvalMetrics {
  double miou = 0.0;
  double oiou = 0.0;
  double accuracy = 0.0;
  std::size_t mask_samples = 0;
  std::size_t answer_samples = 0;
};

EvalMetrics summarize(std::span<const SampleRecord> records);

struct EvalResult {
  EvalMetrics metrics;
  std::vector<SampleRecord> records;
};

/// Queries of `scene` whose kind is enabled in the config.
std::vector<std::size_t> selected_queries(const SceneInputs& scene, const RunConfig& config);

EvalResult evaluate(const SystemParams& params, const RunConfig& config, std::span<const SceneInputs> scenes,
                    const std::optional<DropSpec>& drop = std::nullopt);

struct TrainResult {
  SystemParams params;
  std::vector<HistoryRow> history;  // one row per step, losses before the update
};

/// Descent on LossBundle.total over shuffled minibatches of scenes. Throws DivergenceError on a non-finite loss or gradient.
TrainResult train(const RunConfig& config, const TrainData& data);

/// params[i] -= step · grads[i].
void descend(std::span<float> params, std::span<const float> grads, double step);

}  // namespace sapfuse::harness
