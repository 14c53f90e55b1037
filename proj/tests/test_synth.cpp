#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "sapfuse/dataset_io.hpp"
#include "sapfuse/metrics.hpp"
#include "sapfuse/synth.hpp"

using namespace sapfuse;
using namespace sapfuse::synth;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("sapfuse_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  return dir;
}

SceneSpec quiet_spec() {
  SceneSpec s;
  s.seed = 7;
  return s;
}

}  // namespace

TEST(SceneSpec, Validation) {
  SceneSpec s;
  EXPECT_NO_THROW(s.validate());
  s.p_both = 0.6;
  EXPECT_THROW(s.validate(), DomainError);
  s = {};
  s.max_objects = 5;
  EXPECT_THROW(s.validate(), DomainError);
  s = {};
  s.speckle = 1.0;
  EXPECT_THROW(s.validate(), DomainError);
}

TEST(GenerateScene, EmptySceneOnlyAsksExistence) {
  SceneSpec s = quiet_spec();
  s.min_objects = s.max_objects = 0;
  const auto scene = generate_scene(s, 3);
  EXPECT_TRUE(scene.objects.empty());
  ASSERT_FALSE(scene.queries.empty());
  for (const auto& q : scene.queries) {
    EXPECT_EQ(q.kind, QueryKind::exists);
    EXPECT_EQ(q.answer, vocab::kNo);
  }
}

TEST(GenerateScene, DeterministicInSeedAndIndex) {
  const SceneSpec s = quiet_spec();
  EXPECT_EQ(generate_scene(s, 5), generate_scene(s, 5));
  EXPECT_FALSE(generate_scene(s, 5) == generate_scene(s, 6));
  SceneSpec other = s;
  other.seed = 8;
  EXPECT_FALSE(generate_scene(s, 5) == generate_scene(other, 5));
}

TEST(GenerateScene, InvariantsHold) {
  SceneSpec s = quiet_spec();
  s.cloud_density = 0.2;
  const std::size_t answers = vocab::answer_size(s.max_objects);
  for (std::size_t i = 0; i < 40; ++i) {
    const auto scene = generate_scene(s, i);
    EXPECT_EQ(scene.optical.shape(), (Shape{3, 64, 64}));
    EXPECT_EQ(scene.sar.shape(), (Shape{1, 64, 64}));
    std::vector<bool> seen(s.num_classes, false);
    for (const auto& o : scene.objects) {
      EXPECT_FALSE(seen[o.class_id]);
      seen[o.class_id] = true;
      for (float v : o.mask.values()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
      EXPECT_EQ(metrics::mask_iou(o.mask, rasterize(o.shape, o.box, 64, 64)), 1.0);
      EXPECT_LE(o.box.y1, 64u);
      EXPECT_LE(o.box.x1, 64u);
    }
    for (const auto& q : scene.queries) {
      EXPECT_LT(q.answer, answers);
      if (q.kind == QueryKind::segment) {
        ASSERT_TRUE(q.target.has_value());
        ASSERT_LT(*q.target, scene.objects.size());
        EXPECT_EQ(q.tokens[1], vocab::kClassBase + scene.objects[*q.target].class_id);
      }
      if (q.kind == QueryKind::count) EXPECT_EQ(q.answer, vocab::kCountBase + scene.objects.size());
      if (q.kind == QueryKind::exists) {
        const bool present = seen[q.tokens[1] - vocab::kClassBase];
        EXPECT_EQ(q.answer, present ? vocab::kYes : vocab::kNo);
      }
    }
  }
}

TEST(GenerateScene, SarOnlyObjectsInvisibleInOptical) {
  SceneSpec s = quiet_spec();
  s.p_opt_only = 0;
  s.p_sar_only = 1;
  s.p_both = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto scene = generate_scene(s, i);
    for (const auto& o : scene.objects) {
      double inside = 0, outside = 0;
      std::size_t n_in = 0, n_out = 0;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 64; ++y)
          for (std::size_t x = 0; x < 64; ++x) {
            const float v = scene.optical(c, y, x);
            EXPECT_LE(std::abs(v - kOpticalBackground[c]), s.optical_noise + 1e-6);
            if (o.mask(y, x) > 0.5f) {
              inside += v;
              ++n_in;
            } else {
              outside += v;
              ++n_out;
            }
          }
      // Uniform noise of half-width a has σ = a/√3.
      const double sigma = s.optical_noise / std::sqrt(3.0);
      EXPECT_LE(std::abs(inside / n_in - outside / n_out), 3 * sigma * (1 / std::sqrt(n_in) + 1 / std::sqrt(n_out)));
    }
  }
}

TEST(GenerateScene, CloudsHideOpticalButNotSar) {
  SceneSpec s = quiet_spec();
  s.cloud_density = 0.3;
  s.optical_noise = 0;
  s.speckle = 0;
  SceneSpec clear = s;
  clear.cloud_density = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto cloudy = generate_scene(s, i);
    const auto sunny = generate_scene(clear, i);
    EXPECT_EQ(cloudy.sar, sunny.sar);
    EXPECT_EQ(cloudy.objects, sunny.objects);
    for (const auto& b : cloudy.clouds)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = b.y0; y < b.y1; ++y)
          for (std::size_t x = b.x0; x < b.x1; ++x) EXPECT_EQ(cloudy.optical(c, y, x), kOpticalBackground[c]);
  }
}

TEST(GenerateScene, SpeckleIsUnitMeanMultiplicative) {
  SceneSpec s = quiet_spec();
  SceneSpec clean = s;
  clean.speckle = 0;
  const double sigma_f = s.speckle / std::sqrt(3.0);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto noisy = generate_scene(s, i);
    const auto ref = generate_scene(clean, i);
    for (const auto& o : noisy.objects) {
      double sum_noisy = 0, sum_clean = 0, var = 0;
      std::size_t n = 0;
      for (std::size_t p = 0; p < 64 * 64; ++p) {
        if (o.mask[p] < 0.5f) continue;
        sum_noisy += noisy.sar[p];
        sum_clean += ref.sar[p];
        var += std::pow(ref.sar[p] * sigma_f, 2);
        ++n;
      }
      EXPECT_LE(std::abs(sum_noisy - sum_clean) / n, 3 * std::sqrt(var) / n);
    }
  }
}

TEST(GenerateScene, ComplementarityOfExistenceLabels) {
  SceneSpec s = quiet_spec();
  s.p_opt_only = 0.5;
  s.p_sar_only = 0.5;
  s.p_both = 0;
  std::size_t positives = 0, optical_right = 0, sar_right = 0, both_right = 0;
  for (std::size_t i = 0; i < 300; ++i) {
    const auto scene = generate_scene(s, i);
    for (const auto& q : scene.queries) {
      if (q.kind != QueryKind::exists || q.answer != vocab::kYes) continue;
      const std::size_t cls = q.tokens[1] - vocab::kClassBase;
      for (const auto& o : scene.objects) {
        if (o.class_id != cls) continue;
        ++positives;
        const bool in_opt = visible_in_optical(o.visibility), in_sar = visible_in_sar(o.visibility);
        EXPECT_NE(in_opt, in_sar);  // exactly one modality shows each object
        optical_right += in_opt;
        sar_right += in_sar;
        both_right += in_opt || in_sar;
      }
    }
  }
  EXPECT_EQ(both_right, positives);
  EXPECT_EQ(optical_right + sar_right, positives);
  const double frac = static_cast<double>(optical_right) / positives;
  EXPECT_NEAR(frac, 0.5, 4 * std::sqrt(0.25 / positives));
}

TEST(GenerateScene, InfeasiblePlacementRaises) {
  SceneSpec s;
  s.height = s.width = 26;
  s.min_size = s.max_size = 24;
  s.min_objects = s.max_objects = 2;
  EXPECT_THROW(generate_scene(s, 0), GenerationError);
}

TEST(Rasterize, RectangleAndDisc) {
  const auto r = rasterize(ShapeKind::rectangle, {1, 2, 3, 5}, 6, 6);
  double n = 0;
  for (float v : r.values()) n += v;
  EXPECT_EQ(n, 6.0);
  const auto d = rasterize(ShapeKind::disc, {0, 0, 4, 4}, 4, 4);
  EXPECT_EQ(d(0, 0), 0.0f);
  EXPECT_EQ(d(1, 1), 1.0f);
  EXPECT_EQ(d(0, 1), 1.0f);
}

TEST(Metrics, MaskIouExamples) {
  Tensor a({4, 4}), b({4, 4});
  a(0, 0) = b(0, 0) = 1;
  EXPECT_EQ(metrics::mask_iou(a, a), 1.0);
  Tensor c({4, 4});
  c(3, 3) = 1;
  EXPECT_EQ(metrics::mask_iou(a, c), 0.0);
  Tensor inner({4, 4}), outer({4, 4});
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      outer(y, x) = 1;
      if (x < 2) inner(y, x) = 1;
    }
  EXPECT_EQ(metrics::mask_iou(inner, outer), 0.5);
  EXPECT_EQ(metrics::mask_iou(Tensor({2, 2}), Tensor({2, 2})), 1.0);
  EXPECT_THROW(metrics::mask_iou(Tensor({2, 2}, 0.5f), Tensor({2, 2})), DomainError);
  EXPECT_THROW(metrics::mask_iou(Tensor({2, 2}), a), DimensionError);
}

TEST(Metrics, Aggregate) {
  Tensor full({2, 2}, 1.0f), none({2, 2}), half({2, 2}, {1, 1, 0, 0}), other({2, 2}, {0, 0, 1, 1});
  const std::vector<metrics::MaskRecord> two{{full, full}, {half, other}};
  const std::vector<metrics::LabelRecord> labels{{1, 1}, {0, 1}, {2, 2}};
  const auto s = metrics::aggregate_metrics(two, labels);
  EXPECT_EQ(s.miou, 0.5);
  EXPECT_NEAR(s.accuracy, 2.0 / 3.0, 1e-12);

  const std::vector<metrics::MaskRecord> one{{half, full}};
  const auto s1 = metrics::aggregate_metrics(one, labels);
  EXPECT_EQ(s1.miou, s1.oiou);
  EXPECT_EQ(s1.miou, 0.5);

  // Flat-sum oracle over three samples.
  const std::vector<metrics::MaskRecord> three{{full, half}, {half, other}, {other, other}};
  const auto s3 = metrics::aggregate_metrics(three, labels);
  EXPECT_NEAR(s3.oiou, (2.0 + 0.0 + 2.0) / (4.0 + 4.0 + 2.0), 1e-6);
  EXPECT_NEAR(s3.miou, (0.5 + 0.0 + 1.0) / 3.0, 1e-6);

  EXPECT_THROW(metrics::aggregate_metrics(std::span<const metrics::MaskRecord>{}, labels), DomainError);
  EXPECT_THROW(metrics::aggregate_metrics(one, std::span<const metrics::LabelRecord>{}), DomainError);
  (void)none;
}

TEST(DatasetIo, RoundTripBitExact) {
  SceneSpec s = quiet_spec();
  s.cloud_density = 0.1;
  s.min_objects = 0;
  const Dataset ds{s, 10, generate_scenes(s, 10, 12)};
  const auto dir = scratch_dir("dataset");
  write_dataset(dir, ds);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "data.bin"));
  const auto back = read_dataset(dir);
  EXPECT_EQ(back, ds);
  // Rewriting what was read yields byte-identical files.
  const auto dir2 = scratch_dir("dataset2");
  write_dataset(dir2, back);
  const auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  EXPECT_EQ(slurp(dir / "data.bin"), slurp(dir2 / "data.bin"));
  EXPECT_EQ(slurp(dir / "manifest.json"), slurp(dir2 / "manifest.json"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(DatasetIo, Errors) {
  EXPECT_THROW(read_dataset(scratch_dir("missing")), IoError);
  const auto dir = scratch_dir("corrupt");
  SceneSpec s = quiet_spec();
  write_dataset(dir, {s, 0, generate_scenes(s, 0, 2)});
  fs::resize_file(dir / "data.bin", 100);
  EXPECT_THROW(read_dataset(dir), IoError);
  fs::remove_all(dir);

  EXPECT_THROW(scene_spec_from_json(nlohmann::json{{"heigth", 3}}), ConfigError);
  const auto j = scene_spec_to_json(s);
  EXPECT_EQ(scene_spec_from_json(j), s);
}
