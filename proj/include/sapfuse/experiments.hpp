#pragma once

// Ablation and token-drop experiment runners. Every arm of an experiment
// trains from scratch with the same seed, data and step budget.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sapfuse/report.hpp"
#include "sapfuse/train.hpp"

namespace sapfuse::harness {

/// Called after each finished arm: (setting, seed, metrics).
using ArmCallback = std::function<void(const std::string&, std::uint64_t, const EvalMetrics&)>;

/// SAP settings in table order: without, first, middle, last, all.
std::vector<std::string> sap_settings();

/// Applies a SAP setting name to a config.
RunConfig with_sap_setting(RunConfig config, const std::string& setting);

/// Rows {setting, miou, oiou, seed}, five per seed.
report::Table run_ablation_sap(const RunConfig& base, std::span<const std::uint64_t> seeds,
                               const ArmCallback& on_arm = {});

/// Fusion settings in table order: ours, ours_wo_cl, naive_concat,
/// naive_attention, single_optical, single_sar.
std::vector<std::string> fusion_settings();

RunConfig with_fusion_setting(RunConfig config, const std::string& setting);

/// Rows {setting, accuracy, miou, seed}, six per seed.
report::Table run_ablation_fusion(const RunConfig& base, std::span<const std::uint64_t> seeds,
                                  const ArmCallback& on_arm = {});

/// Trains the configured model once per seed and evaluates it at every
/// keep-ratio under random and importance dropping. Rows
/// {ratio, strategy, accuracy, seed}, |ratios|·2 per seed.
report::Table run_token_drop(const RunConfig& base, std::span<const double> ratios,
                             std::span<const std::uint64_t> seeds, const ArmCallback& on_arm = {});

}  // namespace sapfuse::harness
