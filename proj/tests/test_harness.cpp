#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "fixtures.hpp"
#include "sapfuse/experiments.hpp"
#include "sapfuse/gradcheck.hpp"
#include "sapfuse/losses.hpp"
#include "sapfuse/outputs.hpp"
#include "support.hpp"

using namespace sapfuse;
using namespace sapfuse::harness;
using namespace testing_support;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("sapfuse_harness_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<Tensor> flat(const SystemParams& p) {
  std::vector<Tensor> out;
  p.for_each([&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

}  // namespace

TEST(AnswerCe, Examples) {
  EXPECT_NEAR(losses::answer_ce(Tensor({4}), 2).value, std::log(4.0), 1e-6);
  Tensor peaked({4});
  peaked[1] = 1e3f;
  EXPECT_NEAR(losses::answer_ce(peaked, 1).value, 0.0, 1e-9);
  Rng rng(1);
  const auto logits = random_tensor({6}, rng, -3, 3);
  const auto p = softmax64(to64(logits));
  EXPECT_NEAR(losses::answer_ce(logits, 4).value, -std::log(p[4]), 1e-6);
  EXPECT_THROW(losses::answer_ce(logits, 6), DomainError);
}

TEST(AnswerCe, Gradient) {
  Rng rng(2);
  for (int t = 0; t < 5; ++t) {
    const auto logits = random_tensor<double>({5}, rng, -2, 2);
    const ScalarFunction<double> f = [](const TensorD& x) { return losses::answer_ce(x, 3).value; };
    EXPECT_LT(check_gradient(f, losses::answer_ce(logits, 3).grad, logits, 1e-5), 1e-3);
  }
}

TEST(MaskLosses, Examples) {
  Tensor gt({4, 4});
  Tensor logits({4, 4}, -40.0f);
  for (std::size_t i = 0; i < 6; ++i) {
    gt[i] = 1;
    logits[i] = 40;
  }
  const auto perfect = losses::mask_losses(logits, gt);
  EXPECT_NEAR(perfect.ce, 0.0, 1e-9);
  EXPECT_NEAR(perfect.dice, 0.0, 1e-9);

  const Tensor ones({4, 4}, 1.0f);
  const auto flat0 = losses::mask_losses(Tensor({4, 4}), ones);
  const double n = 16;
  EXPECT_NEAR(flat0.ce, std::log(2.0), 1e-12);
  EXPECT_NEAR(flat0.dice, 1.0 - (2 * 0.5 * n + 1) / (0.5 * n + n + 1), 1e-12);
  EXPECT_THROW(losses::mask_losses(Tensor({2, 2}), ones), DimensionError);
}

TEST(MaskLosses, OracleAndGradient) {
  Rng rng(3);
  const auto logits = random_tensor<double>({5, 4}, rng, -3, 3);
  TensorD gt({5, 4});
  for (auto& v : gt.data()) v = rng.uniform() < 0.4 ? 1 : 0;
  double ce = 0, inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const double p = 1 / (1 + std::exp(-logits[i]));
    ce += -(gt[i] * std::log(p) + (1 - gt[i]) * std::log(1 - p));
    inter += p * gt[i];
    sp += p;
    sg += gt[i];
  }
  const auto m = losses::mask_losses(logits, gt);
  EXPECT_NEAR(m.ce, ce / 20, 1e-6);
  EXPECT_NEAR(m.dice, 1 - (2 * inter + 1) / (sp + sg + 1), 1e-6);
  const ScalarFunction<double> fce = [&](const TensorD& x) { return losses::mask_losses(x, gt).ce; };
  const ScalarFunction<double> fd = [&](const TensorD& x) { return losses::mask_losses(x, gt).dice; };
  EXPECT_LT(check_gradient(fce, m.grad_ce, logits, 1e-5), 1e-3);
  EXPECT_LT(check_gradient(fd, m.grad_dice, logits, 1e-5), 1e-3);
}

TEST(ComposeTotal, ExactLeftToRight) {
  ObjectiveConfig o;
  o.lambda_ce = 0.3;
  o.lambda_dice = 1.7;
  o.lambda_kl = 0.1;
  o.lambda_cl = 0.05;
  Rng rng(4);
  for (int i = 0; i < 100; ++i) {
    const double ce = rng.uniform(0, 5), d = rng.uniform(0, 1), kl = rng.uniform(0, 3), cl = rng.uniform(0, 2);
    const double expect = o.lambda_ce * ce + o.lambda_dice * d + o.lambda_kl * kl + o.lambda_cl * cl;
    EXPECT_EQ(compose_total(o, ce, d, kl, cl), expect);
  }
}

TEST(RunConfigJson, RoundTripAndStrictness) {
  RunConfig c = tiny_run_config(9);
  c.optimizer = Optimizer::adam;
  c.objective.sap_layers = std::nullopt;
  c.system.variant = FusionVariant::naive_attention;
  const json j = run_config_to_json(c);
  const RunConfig back = run_config_from_json(j);
  EXPECT_EQ(run_config_to_json(back), j);
  EXPECT_EQ(back.system, c.system);
  EXPECT_EQ(back.scene_spec(), c.scene_spec());

  for (const char* bad : {R"({"sed": 1})", R"({"model": {"layer": 2}})", R"({"loss": {"lambda_kl": -1}})",
                          R"({"fusion": {"variant": "interleave"}})", R"({"optim": {"step_size": 0}})",
                          R"({"dataset": {"spec": {"seed": 4}}})", R"({"dataset": {"queries": ["caption"]}})",
                          R"({"model": {"width": 9, "heads": 2}})", R"({"optim": {"steps": "many"}})"}) {
    EXPECT_THROW(run_config_from_json(json::parse(bad)), ConfigError) << bad;
  }
  EXPECT_NO_THROW(run_config_from_json(json::object()));
}

TEST(RunConfigJson, LoadErrors) {
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), IoError);
  const auto dir = scratch_dir("cfg");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_run_config((dir / "bad.json").string()), ConfigError);
  fs::remove_all(dir);
}

TEST(BatchObjective, GradientInDouble) {
  RunConfig c = tiny_run_config(3);
  c.system.seg_tokens = 2;
  c.system.fusion_queries = 2;
  const auto scenes = synth::generate_scenes(c.scene_spec(), 0, 3);
  for (auto variant : {FusionVariant::ours, FusionVariant::naive_attention, FusionVariant::single_sar}) {
    c.system.variant = variant;
    std::vector<BasicSceneInputs<double>> inputs;
    for (std::size_t i = 0; i < scenes.size(); ++i) inputs.push_back(prepare_scene<double>(scenes[i], i, c.system));
    std::vector<const BasicSceneInputs<double>*> ptrs;
    std::vector<SampleRef> samples;
    for (std::size_t s = 0; s < inputs.size(); ++s) {
      ptrs.push_back(&inputs[s]);
      for (std::size_t q = 0; q < inputs[s].queries.size(); ++q) samples.push_back({s, q});
    }
    // Seed 5 puts an FFN pre-activation within 1e-5 of the ReLU kink.
    const auto params = BasicSystemParams<double>::initialize(c.system, 6);
    BasicSystemParams<double> grads;
    batch_objective(params, c.system, c.objective, ptrs, samples, &grads);
    std::vector<const TensorD*> g;
    grads.for_each([&](const std::string&, const TensorD& t) { g.push_back(&t); });
    auto probe = params;
    std::size_t idx = 0;
    probe.for_each([&](const std::string& name, TensorD& t) {
      const TensorD at = t;
      const ScalarFunction<double> f = [&](const TensorD& x) {
        t = x;
        const double v =
            batch_objective(probe, c.system, c.objective, ptrs, samples, static_cast<BasicSystemParams<double>*>(nullptr)).total;
        t = at;
        return v;
      };
      // Parameters a variant does not use have zero numeric and analytic gradient.
      EXPECT_LT(check_gradient(f, *g[idx++], at, 1e-5), 1e-3) << to_string(variant) << " " << name;
    });
  }
}

TEST(BatchObjective, TotalIsComposedFromComponents) {
  const RunConfig c = tiny_run_config(4);
  const auto data = make_data(c);
  const auto params = SystemParams::initialize(c.system, 4);
  std::vector<const SceneInputs*> ptrs;
  std::vector<SampleRef> samples;
  for (std::size_t s = 0; s < 4; ++s) {
    ptrs.push_back(&data.train[s]);
    for (std::size_t q : selected_queries(data.train[s], c)) samples.push_back({s, q});
  }
  const auto loss = batch_objective(params, c.system, c.objective, ptrs, samples, static_cast<SystemParams*>(nullptr));
  EXPECT_EQ(loss.total, compose_total(c.objective, loss.ce, loss.dice, loss.kl, loss.cl));
  EXPECT_GT(loss.kl, 0.0);
  EXPECT_GT(loss.cl, 0.0);
}

TEST(Fusion, OursWithoutMutualAttentionEqualsNaiveConcat) {
  RunConfig c = tiny_run_config(6);
  c.objective.lambda_cl = 0;
  const auto scenes = synth::generate_scenes(c.scene_spec(), 0, 3);
  RunConfig ours = c, concat = c;
  ours.system.mutual_attention = false;
  concat.system.variant = FusionVariant::naive_concat;
  const auto params = SystemParams::initialize(c.system, 6);
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto in = prepare_scene<float>(scenes[i], i, c.system);
    const auto a = encode_scene(params, in, ours.system);
    const auto b = encode_scene(params, in, concat.system);
    ASSERT_EQ(a.image.tokens.shape(), b.image.tokens.shape());
    for (std::size_t k = 0; k < a.image.tokens.size(); ++k) EXPECT_NEAR(a.image.tokens[k], b.image.tokens[k], 1e-6);
  }
  const auto data_a = make_data(ours);
  const auto ma = train(ours, data_a);
  const auto mb = train(concat, data_a);
  for (std::size_t s = 0; s < ma.history.size(); ++s) EXPECT_NEAR(ma.history[s].loss.total, mb.history[s].loss.total, 1e-6);
}

TEST(Train, ZeroStepsKeepsInitialization) {
  RunConfig c = tiny_run_config(2);
  c.steps = 0;
  const auto r = train(c, make_data(c));
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(flat(r.params), flat(SystemParams::initialize(c.system, 2)));

  const auto dir = scratch_dir("zero");
  save_checkpoint(dir, r.params, c);
  const auto back = params_from_checkpoint(checkpoint::read(dir), c.system);
  EXPECT_EQ(flat(back), flat(SystemParams::initialize(c.system, 2)));
  fs::remove_all(dir);
}

TEST(Train, DeterministicHistory) {
  RunConfig c = tiny_run_config(5);
  c.optimizer = Optimizer::adam;
  c.step_size = 3e-3;
  const auto a = train(c, make_data(c));
  const auto b = train(c, make_data(c));
  ASSERT_EQ(a.history.size(), 5u);
  EXPECT_EQ(report::to_csv(history_table(a.history)), report::to_csv(history_table(b.history)));
  EXPECT_EQ(flat(a.params), flat(b.params));
}

TEST(Train, DivergenceRaises) {
  RunConfig c = tiny_run_config(5);
  c.step_size = 1e30;
  c.steps = 20;
  try {
    train(c, make_data(c));
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_LT(e.step(), 20u);
  }
}

TEST(Train, OneScalarDiceDescent) {
  // A single trainable logit broadcast over a mask; λ_dice = 1, others 0.
  Tensor gt({4, 4});
  for (std::size_t i = 0; i < 10; ++i) gt[i] = 1;
  std::vector<float> theta{-1.0f};
  double prev = INFINITY;
  for (int step = 0; step < 50; ++step) {
    const auto m = losses::mask_losses(Tensor({4, 4}, theta[0]), gt);
    ObjectiveConfig o;
    o.lambda_ce = o.lambda_kl = o.lambda_cl = 0;
    const double total = compose_total(o, m.ce, m.dice, 0, 0);
    EXPECT_LT(total, prev);
    prev = total;
    double g = 0;
    for (float v : m.grad_dice.values()) g += v;
    const std::vector<float> grad{static_cast<float>(g)};
    descend(theta, grad, 1e-1);
  }
}

TEST(Train, ReducesLossByHalf) {
  // Calibrated threshold: 200 Adam steps on 50 small scenes.
  for (std::uint64_t seed : {1, 2, 3}) {
    RunConfig c = tiny_run_config(seed);
    c.train_scenes = 50;
    c.test_scenes = 1;
    c.steps = 200;
    c.batch_size = 8;
    c.optimizer = Optimizer::adam;
    c.step_size = 1e-2;
    const auto r = train(c, make_data(c));
    auto window = [&](std::size_t begin) {
      double s = 0;
      for (std::size_t i = begin; i < begin + 10; ++i) s += r.history[i].loss.total;
      return s / 10;
    };
    EXPECT_LE(window(190), 0.5 * window(0)) << "seed " << seed;
  }
}

TEST(Evaluate, ReportedMetricsRecomputeFromPredictions) {
  RunConfig c = tiny_run_config(7);
  const auto data = make_data(c);
  const auto r = train(c, data);
  const auto eval = evaluate(r.params, c, data.test);
  const auto dir = scratch_dir("preds");
  report::write_text(dir / "predictions.csv", report::to_csv(predictions_table(eval.records)));
  report::write(dir, metrics_table(eval.metrics, c.seed));
  const auto records = read_predictions(dir / "predictions.csv");
  ASSERT_EQ(records.size(), eval.records.size());
  double iou_sum = 0, inter = 0, uni = 0, right = 0;
  std::size_t masks = 0, answers = 0;
  for (const auto& rec : records) {
    if (rec.kind == synth::QueryKind::segment) {
      iou_sum += rec.union_count == 0 ? 1.0 : static_cast<double>(rec.intersection) / rec.union_count;
      inter += rec.intersection;
      uni += rec.union_count;
      ++masks;
    } else {
      right += rec.answer_gt == rec.answer_pred;
      ++answers;
    }
  }
  report::Table expect = metrics_table({iou_sum / masks, inter / uni, right / answers, masks, answers}, c.seed);
  EXPECT_EQ(slurp(dir / "metrics.csv"), report::to_csv(expect));
  fs::remove_all(dir);
}

TEST(Evaluate, EmptyMetricIsNan) {
  const auto m = summarize(std::vector<SampleRecord>{});
  EXPECT_TRUE(std::isnan(m.miou));
  EXPECT_TRUE(std::isnan(m.accuracy));
  EXPECT_EQ(m.mask_samples, 0u);
}

TEST(Report, CsvFormatting) {
  report::Table t{"demo", {"name", "value", "count"}, {}};
  t.add_row({std::string("a"), 0.123456789, std::uint64_t{3}});
  t.add_row({std::string("b"), 1234567.0, std::uint64_t{0}});
  t.add_row({std::string("c"), std::nan(""), std::uint64_t{1}});
  EXPECT_EQ(report::to_csv(t), "name,value,count\na,0.123457,3\nb,1.23457e+06,0\nc,nan,1\n");
  EXPECT_ANY_THROW(t.add_row({std::string("short")}));
  const auto j = report::to_json(t);
  EXPECT_EQ(j.at("rows").at(0).at("value"), 0.123456789);
  EXPECT_EQ(j.at("rows").at(2).at("value"), "nan");
  EXPECT_EQ(t.column("count"), 2u);
}

TEST(Checkpoint, RoundTripBitExact) {
  const RunConfig c = tiny_run_config(8);
  auto params = SystemParams::initialize(c.system, 8);
  params.encoder_sar[0] = -0.0f;
  params.encoder_sar[1] = 1e-38f;
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(dir, params, c);
  const auto contents = checkpoint::read(dir);
  const auto back = params_from_checkpoint(contents, c.system);
  const auto a = flat(params), b = flat(back);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].shape(), b[i].shape());
    EXPECT_EQ(0, std::memcmp(a[i].values().data(), b[i].values().data(), a[i].size() * sizeof(float)));
  }
  EXPECT_EQ(run_config_from_json(contents.extra.at("config")).system, c.system);

  RunConfig wider = c;
  wider.system.width = 16;
  EXPECT_THROW(params_from_checkpoint(contents, wider.system), IoError);
  EXPECT_THROW(checkpoint::read(scratch_dir("none")), IoError);
  EXPECT_THROW(checkpoint::write(dir, {{"x", Tensor({1})}, {"x", Tensor({1})}}), IoError);
  fs::remove_all(dir);
}

TEST(Experiments, SchemasAndNullAblation) {
  RunConfig c = tiny_run_config(3);
  c.query_kinds = {synth::QueryKind::segment};
  c.objective.lambda_kl = 0;
  c.steps = 3;
  const std::vector<std::uint64_t> seeds{3};
  const auto sap = run_ablation_sap(c, seeds);
  EXPECT_EQ(sap.columns, (std::vector<std::string>{"setting", "miou", "oiou", "seed"}));
  ASSERT_EQ(sap.rows.size(), 5u);
  for (std::size_t r = 1; r < 5; ++r) {
    EXPECT_EQ(report::format_cell(sap.rows[r][1]), report::format_cell(sap.rows[0][1]));
    EXPECT_EQ(std::get<double>(sap.rows[r][1]), std::get<double>(sap.rows[0][1]));
    EXPECT_EQ(std::get<double>(sap.rows[r][2]), std::get<double>(sap.rows[0][2]));
  }

  RunConfig f = tiny_run_config(3);
  f.steps = 2;
  const auto fus = run_ablation_fusion(f, seeds);
  EXPECT_EQ(fus.columns, (std::vector<std::string>{"setting", "accuracy", "miou", "seed"}));
  ASSERT_EQ(fus.rows.size(), 6u);
  for (std::size_t r = 0; r < 6; ++r) EXPECT_EQ(std::get<std::string>(fus.rows[r][0]), fusion_settings()[r]);

  const std::vector<double> ratios{0.5, 1.0};
  const auto drop = run_token_drop(f, ratios, seeds);
  EXPECT_EQ(drop.columns, (std::vector<std::string>{"ratio", "strategy", "accuracy", "seed"}));
  ASSERT_EQ(drop.rows.size(), 4u);
  EXPECT_EQ(std::get<double>(drop.rows[2][2]), std::get<double>(drop.rows[3][2]));
  const std::vector<double> bad{0.0};
  EXPECT_ANY_THROW(run_token_drop(f, bad, seeds));
}
