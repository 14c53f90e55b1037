#pragma once

// Run artifacts: checkpoints of the full system and the per-run tables.

#include <filesystem>
#include <span>

#include "sapfuse/checkpoint.hpp"
#include "sapfuse/report.hpp"
#include "sapfuse/train.hpp"

namespace sapfuse::harness {

checkpoint::NamedTensors named_tensors(const SystemParams& params);

/// Rebuilds parameters for `config`, requiring every tensor with its shape.
SystemParams params_from_checkpoint(const checkpoint::Contents& contents, const SystemConfig& config);

/// checkpoint.json/.bin with the run configuration stored alongside.
void save_checkpoint(const std::filesystem::path& dir, const SystemParams& params, const RunConfig& config);

/// {step, ce, dice, kl, cl, total}.
report::Table history_table(std::span<const HistoryRow> history);
/// {scene, query, kind, answer_gt, answer_pred, intersection, union}.
report::Table predictions_table(std::span<const SampleRecord> records);
/// Parses predictions.csv back into records.
std::vector<SampleRecord> read_predictions(const std::filesystem::path& path);
/// {miou, oiou, accuracy, mask_samples, answer_samples, seed}.
report::Table metrics_table(const EvalMetrics& metrics, std::uint64_t seed);

}  // namespace sapfuse::harness
