// sapfuse: data generation, training, evaluation and the ablation studies.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
// 4 I/O error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sapfuse/dataset_io.hpp"
#include "sapfuse/errors.hpp"
#include "sapfuse/experiments.hpp"
#include "sapfuse/outputs.hpp"

namespace fs = std::filesystem;
using namespace sapfuse;
using namespace sapfuse::harness;

namespace {

constexpr int kConfigExit = 2;
constexpr int kDivergenceExit = 3;
constexpr int kIoExit = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? run_config_from_json(nlohmann::json::object()) : load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void save_config(const fs::path& dir, const RunConfig& cfg) {
  report::write_text(dir / "config.json", run_config_to_json(cfg).dump(1) + "\n");
}

void log_arm(const std::string& setting, std::uint64_t seed, const EvalMetrics& m) {
  std::fprintf(stderr, "  %-18s seed=%llu miou=%.4f oiou=%.4f acc=%.4f\n", setting.c_str(),
               static_cast<unsigned long long>(seed), m.miou, m.oiou, m.accuracy);
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "RunConfig JSON file (defaults when omitted)");
  cmd->add_option("--seed", c.seed, "Run seed; overrides the config");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
}

TrainData load_or_make(const RunConfig& cfg, const std::string& data_dir) {
  if (data_dir.empty()) return make_data(cfg);
  const auto train = synth::read_dataset(fs::path(data_dir) / "train");
  const auto test = synth::read_dataset(fs::path(data_dir) / "test");
  synth::SceneSpec expect = cfg.scene_spec();
  if (!(train.spec == expect) || !(test.spec == expect)) {
    throw ConfigError("dataset in " + data_dir + " was generated with a different spec or seed");
  }
  return prepare_data(cfg, train.scenes, test.scenes);
}

void write_eval(const fs::path& out, const EvalResult& eval, std::uint64_t seed) {
  const auto metrics = metrics_table(eval.metrics, seed);
  report::write_text(out / "predictions.csv", report::to_csv(predictions_table(eval.records)));
  report::write(out, metrics);
}

int run(int argc, char** argv) {
  CLI::App app{"Spatial attention prompting and cross-modal fusion on synthetic optical/SAR scenes"};
  app.require_subcommand(1);

  Common c;
  std::string data_dir;
  std::string checkpoint_dir;
  std::vector<std::uint64_t> seeds;
  std::vector<double> ratios{0.25, 0.5, 0.75, 1.0};

  auto* gen = app.add_subcommand("gen-data", "Generate the train/test scene datasets");
  add_common(gen, c);

  auto* trn = app.add_subcommand("train", "Train one configuration and evaluate it on the test split");
  add_common(trn, c);
  trn->add_option("--data", data_dir, "Use datasets written by gen-data instead of regenerating");

  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(evl, c);
  evl->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->required();
  evl->add_option("--data", data_dir, "Use datasets written by gen-data instead of regenerating");

  auto* sap_cmd = app.add_subcommand("ablate-sap", "SAP layer ablation");
  add_common(sap_cmd, c);
  sap_cmd->add_option("--seeds", seeds, "Seeds to run (default: the run seed)")->delimiter(',');

  auto* fus_cmd = app.add_subcommand("ablate-fusion", "Fusion strategy ablation");
  add_common(fus_cmd, c);
  fus_cmd->add_option("--seeds", seeds, "Seeds to run (default: the run seed)")->delimiter(',');

  auto* drop_cmd = app.add_subcommand("token-drop", "Random vs importance token dropping");
  add_common(drop_cmd, c);
  drop_cmd->add_option("--seeds", seeds, "Seeds to run (default: the run seed)")->delimiter(',');
  drop_cmd->add_option("--ratios", ratios, "Keep ratios in (0, 1]")->delimiter(',')->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  const RunConfig cfg = resolve(c);
  const fs::path out(c.out);
  if (seeds.empty()) seeds.push_back(cfg.seed);

  if (*gen) {
    const auto spec = cfg.scene_spec();
    synth::write_dataset(out / "train", {spec, 0, synth::generate_scenes(spec, 0, cfg.train_scenes)});
    synth::write_dataset(out / "test",
                         {spec, cfg.train_scenes, synth::generate_scenes(spec, cfg.train_scenes, cfg.test_scenes)});
    save_config(out, cfg);
    std::fprintf(stderr, "wrote %zu train and %zu test scenes to %s\n", cfg.train_scenes, cfg.test_scenes,
                 out.string().c_str());
  } else if (*trn) {
    const TrainData data = load_or_make(cfg, data_dir);
    save_config(out, cfg);
    TrainResult trained;
    try {
      trained = train(cfg, data);
    } catch (const DivergenceError& e) {
      report::write_text(out / "divergence.json",
                         nlohmann::json{{"step", e.step()}, {"message", e.what()}}.dump(1) + "\n");
      throw;
    }
    report::write_text(out / "history.csv", report::to_csv(history_table(trained.history)));
    save_checkpoint(out, trained.params, cfg);
    const EvalResult eval = evaluate(trained.params, cfg, data.test);
    write_eval(out, eval, cfg.seed);
    log_arm("train", cfg.seed, eval.metrics);
  } else if (*evl) {
    const auto contents = checkpoint::read(checkpoint_dir);
    RunConfig ecfg = cfg;
    if (c.config.empty()) {
      if (!contents.extra.contains("config")) throw ConfigError("checkpoint has no stored config; pass --config");
      ecfg = run_config_from_json(contents.extra.at("config"));
      if (c.seed) ecfg.seed = *c.seed;
    }
    const SystemParams params = params_from_checkpoint(contents, ecfg.system);
    const TrainData data = load_or_make(ecfg, data_dir);
    const EvalResult eval = evaluate(params, ecfg, data.test);
    write_eval(out, eval, ecfg.seed);
    log_arm("eval", ecfg.seed, eval.metrics);
  } else if (*sap_cmd) {
    save_config(out, cfg);
    report::write(out, run_ablation_sap(cfg, seeds, log_arm));
  } else if (*fus_cmd) {
    save_config(out, cfg);
    report::write(out, run_ablation_fusion(cfg, seeds, log_arm));
  } else if (*drop_cmd) {
    save_config(out, cfg);
    report::write(out, run_token_drop(cfg, ratios, seeds, log_arm));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kDivergenceExit;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIoExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
