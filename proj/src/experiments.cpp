#include "sapfuse/experiments.hpp"

#include "sapfuse/errors.hpp"

namespace sapfuse::harness {

std::vector<std::string> sap_settings() { return {"without", "first", "middle", "last", "all"}; }

RunConfig with_sap_setting(RunConfig config, const std::string& setting) {
  if (setting == "without") {
    config.objective.sap_layers.reset();
  } else {
    try {
      config.objective.sap_layers = sap::parse_layer_mode(setting);
    } catch (const std::exception& e) {
      throw ConfigError("unknown SAP setting '" + setting + "'");
    }
  }
  return config;
}

std::vector<std::string> fusion_settings() {
  return {"ours", "ours_wo_cl", "naive_concat", "naive_attention", "single_optical", "single_sar"};
}

RunConfig with_fusion_setting(RunConfig config, const std::string& setting) {
  if (setting == "ours_wo_cl") {
    config.system.variant = FusionVariant::ours;
    config.objective.lambda_cl = 0.0;
  } else {
    config.system.variant = parse_fusion_variant(setting);
  }
  return config;
}

namespace {

RunConfig seeded(RunConfig config, std::uint64_t seed) {
  config.seed = seed;
  return config;
}

}  // namespace

report::Table run_ablation_sap(const RunConfig& base, std::span<const std::uint64_t> seeds, const ArmCallback& on_arm) {
  report::Table table{"ablate_sap", {"setting", "miou", "oiou", "seed"}, {}};
  for (std::uint64_t seed : seeds) {
    // SAP settings do not change the inputs, so the data is shared.
    const RunConfig cfg = seeded(base, seed);
    const TrainData data = make_data(cfg);
    for (const auto& setting : sap_settings()) {
      const RunConfig arm = with_sap_setting(cfg, setting);
      const TrainResult trained = train(arm, data);
      const EvalResult eval = evaluate(trained.params, arm, data.test);
      table.add_row({setting, eval.metrics.miou, eval.metrics.oiou, seed});
      if (on_arm) on_arm(setting, seed, eval.metrics);
    }
  }
  return table;
}

report::Table run_ablation_fusion(const RunConfig& base, std::span<const std::uint64_t> seeds,
                                  const ArmCallback& on_arm) {
  report::Table table{"ablate_fusion", {"setting", "accuracy", "miou", "seed"}, {}};
  for (std::uint64_t seed : seeds) {
    const RunConfig cfg = seeded(base, seed);
    const auto spec = cfg.scene_spec();
    const auto train_scenes = synth::generate_scenes(spec, 0, cfg.train_scenes);
    const auto test_scenes = synth::generate_scenes(spec, cfg.train_scenes, cfg.test_scenes);
    for (const auto& setting : fusion_settings()) {
      const RunConfig arm = with_fusion_setting(cfg, setting);
      // Preparation depends on the arm: single-modality arms blank the
      // absent modality in the grounding input.
      const TrainData data = prepare_data(arm, train_scenes, test_scenes);
      const TrainResult trained = train(arm, data);
      const EvalResult eval = evaluate(trained.params, arm, data.test);
      table.add_row({setting, eval.metrics.accuracy, eval.metrics.miou, seed});
      if (on_arm) on_arm(setting, seed, eval.metrics);
    }
  }
  return table;
}

report::Table run_token_drop(const RunConfig& base, std::span<const double> ratios,
                             std::span<const std::uint64_t> seeds, const ArmCallback& on_arm) {
  for (double r : ratios) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("keep ratios must lie in (0, 1]");
  }
  report::Table table{"token_drop", {"ratio", "strategy", "accuracy", "seed"}, {}};
  for (std::uint64_t seed : seeds) {
    const RunConfig cfg = seeded(base, seed);
    const TrainData data = make_data(cfg);
    const TrainResult trained = train(cfg, data);
    for (double r : ratios) {
      for (auto strategy : {fusion::DropStrategy::random, fusion::DropStrategy::importance}) {
        const EvalResult eval = evaluate(trained.params, cfg, data.test, DropSpec{r, strategy, seed});
        table.add_row({r, fusion::to_string(strategy), eval.metrics.accuracy, seed});
        if (on_arm) on_arm(fusion::to_string(strategy) + "@" + report::format_cell(r), seed, eval.metrics);
      }
    }
  }
  return table;
}

}  // namespace sapfuse::harness
