#include "sapfuse/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "sapfuse/rng.hpp"

namespace sapfuse::synth {

std::string to_string(Visibility v) {
  switch (v) {
    case Visibility::optical_only: return "optical_only";
    case Visibility::sar_only: return "sar_only";
    case Visibility::both: return "both";
  }
  return "unknown";
}

Visibility parse_visibility(const std::string& s) {
  if (s == "optical_only") return Visibility::optical_only;
  if (s == "sar_only") return Visibility::sar_only;
  if (s == "both") return Visibility::both;
  throw DomainError("unknown visibility '" + s + "'");
}

std::string to_string(ShapeKind s) { return s == ShapeKind::rectangle ? "rectangle" : "disc"; }

ShapeKind parse_shape(const std::string& s) {
  if (s == "rectangle") return ShapeKind::rectangle;
  if (s == "disc") return ShapeKind::disc;
  throw DomainError("unknown shape '" + s + "'");
}

std::string to_string(QueryKind k) {
  switch (k) {
    case QueryKind::segment: return "segment";
    case QueryKind::exists: return "exists";
    case QueryKind::count: return "count";
  }
  return "unknown";
}

QueryKind parse_query_kind(const std::string& s) {
  if (s == "segment") return QueryKind::segment;
  if (s == "exists") return QueryKind::exists;
  if (s == "count") return QueryKind::count;
  throw DomainError("unknown query kind '" + s + "'");
}

bool visible_in_optical(Visibility v) { return v != Visibility::sar_only; }
bool visible_in_sar(Visibility v) { return v != Visibility::optical_only; }

void SceneSpec::validate() const {
  if (height == 0 || width == 0) throw DomainError("scene size must be positive");
  if (min_objects > max_objects) throw DomainError("min_objects exceeds max_objects");
  if (num_classes == 0 || num_classes > vocab::kMaxClasses) {
    throw DomainError("num_classes must lie in [1, " + std::to_string(vocab::kMaxClasses) + "]");
  }
  if (max_objects > num_classes) throw DomainError("objects have distinct classes: max_objects > num_classes");
  if (min_size == 0 || min_size > max_size || max_size > std::min(height, width)) {
    throw DomainError("object size range invalid for the image size");
  }
  if (p_opt_only < 0 || p_sar_only < 0 || p_both < 0 ||
      std::abs(p_opt_only + p_sar_only + p_both - 1.0) > 1e-9) {
    throw DomainError("visibility fractions must be non-negative and sum to 1");
  }
  if (cloud_density < 0 || cloud_density > 1) throw DomainError("cloud_density must lie in [0, 1]");
  if (speckle < 0 || speckle >= 1) throw DomainError("speckle must lie in [0, 1)");
  if (optical_noise < 0) throw DomainError("optical_noise must be non-negative");
}

std::vector<float> class_color(std::size_t class_id) {
  static constexpr std::array<std::array<float, 3>, vocab::kMaxClasses> kPalette{{
      {0.85f, 0.20f, 0.20f},
      {0.20f, 0.80f, 0.25f},
      {0.20f, 0.30f, 0.85f},
      {0.85f, 0.80f, 0.20f},
      {0.80f, 0.25f, 0.80f},
      {0.20f, 0.80f, 0.80f},
      {0.90f, 0.55f, 0.15f},
      {0.90f, 0.90f, 0.90f},
  }};
  const auto& c = kPalette.at(class_id);
  return {c[0], c[1], c[2]};
}

float class_sar_level(std::size_t class_id, std::size_t num_classes) {
  if (num_classes <= 1) return 0.65f;
  return static_cast<float>(0.4 + 0.5 * static_cast<double>(class_id) / static_cast<double>(num_classes - 1));
}

int sar_texture_sign(std::size_t class_id, std::size_t y, std::size_t x) {
  // Rows, columns or checkerboard at scales 1, 2, 4: distinct Walsh
  // patterns, mutually orthogonal on any 8-aligned 8x8 block.
  static constexpr std::array<std::pair<int, std::size_t>, vocab::kMaxClasses> kPattern{{
      {0, 1}, {1, 1}, {2, 1}, {0, 2}, {1, 2}, {2, 2}, {0, 4}, {1, 4}}};
  const auto [kind, scale] = kPattern.at(class_id);
  const std::size_t bit = kind == 0 ? y / scale : kind == 1 ? x / scale : y / scale + x / scale;
  return bit % 2 == 0 ? 1 : -1;
}

Tensor rasterize(ShapeKind shape, const BoundingBox& box, std::size_t height, std::size_t width) {
  Tensor mask({height, width});
  const double cy = 0.5 * static_cast<double>(box.y0 + box.y1);
  const double cx = 0.5 * static_cast<double>(box.x0 + box.x1);
  const double r = 0.5 * static_cast<double>(std::min(box.y1 - box.y0, box.x1 - box.x0));
  for (std::size_t y = box.y0; y < box.y1; ++y) {
    for (std::size_t x = box.x0; x < box.x1; ++x) {
      bool inside = true;
      if (shape == ShapeKind::disc) {
        const double dy = static_cast<double>(y) + 0.5 - cy;
        const double dx = static_cast<double>(x) + 0.5 - cx;
        inside = dy * dy + dx * dx <= r * r;
      }
      if (inside) mask(y, x) = 1.0f;
    }
  }
  return mask;
}

namespace {

enum Stream : std::uint64_t { kGeometry = 1, kOpticalNoise = 2, kSpeckle = 3, kQueries = 4 };

Rng stream(const SceneSpec& spec, std::size_t index, Stream s) {
  return Rng(spec.seed, static_cast<std::uint64_t>(index) * 16 + s);
}

bool boxes_clash(const BoundingBox& a, const BoundingBox& b, std::size_t gap) {
  return a.y0 < b.y1 + gap && b.y0 < a.y1 + gap && a.x0 < b.x1 + gap && b.x0 < a.x1 + gap;
}

constexpr std::size_t kPlacementRetries = 200;
constexpr std::size_t kObjectGap = 2;
constexpr float kTextureAmplitude = 0.15f;

bool on_edge(const Tensor& mask, std::size_t y, std::size_t x) {
  const std::size_t h = mask.rows(), w = mask.cols();
  if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) return true;
  return mask(y - 1, x) < 0.5f || mask(y + 1, x) < 0.5f || mask(y, x - 1) < 0.5f || mask(y, x + 1) < 0.5f;
}

std::vector<BoundingBox> place_clouds(const SceneSpec& spec, Rng& rng) {
  std::vector<BoundingBox> clouds;
  if (spec.cloud_density <= 0) return clouds;
  const std::size_t h = spec.height, w = spec.width;
  std::vector<char> covered(h * w, 0);
  std::size_t area = 0;
  const double target = spec.cloud_density * static_cast<double>(h * w);
  for (int attempt = 0; attempt < 64 && static_cast<double>(area) < target; ++attempt) {
    const auto ch = static_cast<std::size_t>(rng.between(static_cast<long>(std::max<std::size_t>(1, h / 6)),
                                                         static_cast<long>(std::max<std::size_t>(1, (2 * h) / 5))));
    const auto cw = static_cast<std::size_t>(rng.between(static_cast<long>(std::max<std::size_t>(1, w / 6)),
                                                         static_cast<long>(std::max<std::size_t>(1, (2 * w) / 5))));
    const auto y0 = static_cast<std::size_t>(rng.between(0, static_cast<long>(h - ch)));
    const auto x0 = static_cast<std::size_t>(rng.between(0, static_cast<long>(w - cw)));
    BoundingBox b{y0, x0, y0 + ch, x0 + cw};
    for (std::size_t y = b.y0; y < b.y1; ++y) {
      for (std::size_t x = b.x0; x < b.x1; ++x) {
        if (!covered[y * w + x]) {
          covered[y * w + x] = 1;
          ++area;
        }
      }
    }
    clouds.push_back(b);
  }
  return clouds;
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, std::size_t index) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width;
  Scene scene;

  Rng geo = stream(spec, index, kGeometry);
  const auto count = static_cast<std::size_t>(
      geo.between(static_cast<long>(spec.min_objects), static_cast<long>(spec.max_objects)));
  std::vector<std::size_t> classes(spec.num_classes);
  std::iota(classes.begin(), classes.end(), std::size_t{0});
  std::shuffle(classes.begin(), classes.end(), geo.engine());

  for (std::size_t i = 0; i < count; ++i) {
    SceneObject obj;
    obj.class_id = classes[i];
    obj.shape = geo.uniform() < 0.5 ? ShapeKind::rectangle : ShapeKind::disc;
    bool placed = false;
    for (std::size_t attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
      const auto lo = static_cast<long>(spec.min_size), hi = static_cast<long>(spec.max_size);
      const auto bh = static_cast<std::size_t>(geo.between(lo, hi));
      const auto bw = obj.shape == ShapeKind::disc ? bh : static_cast<std::size_t>(geo.between(lo, hi));
      const auto y0 = static_cast<std::size_t>(geo.between(0, static_cast<long>(h - bh)));
      const auto x0 = static_cast<std::size_t>(geo.between(0, static_cast<long>(w - bw)));
      const BoundingBox box{y0, x0, y0 + bh, x0 + bw};
      placed = std::none_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
        return boxes_clash(o.box, box, kObjectGap);
      });
      if (placed) obj.box = box;
    }
    if (!placed) {
      throw GenerationError("scene " + std::to_string(index) + ": could not place object " +
                            std::to_string(i) + " after " + std::to_string(kPlacementRetries) + " attempts");
    }
    const double u = geo.uniform();
    obj.visibility = u < spec.p_opt_only                      ? Visibility::optical_only
                     : u < spec.p_opt_only + spec.p_sar_only ? Visibility::sar_only
                                                             : Visibility::both;
    obj.mask = rasterize(obj.shape, obj.box, h, w);
    scene.objects.push_back(std::move(obj));
  }
  scene.clouds = place_clouds(spec, geo);

  // Optical: background, textured class colour, then clouds; one noise draw
  // per channel and pixel regardless of what is underneath.
  scene.optical = Tensor({3, h, w});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) scene.optical(c, y, x) = kOpticalBackground[c];
    }
  }
  for (const auto& obj : scene.objects) {
    if (!visible_in_optical(obj.visibility)) continue;
    const auto color = class_color(obj.class_id);
    const std::size_t period = 2 + obj.class_id % 4;
    for (std::size_t y = obj.box.y0; y < obj.box.y1; ++y) {
      for (std::size_t x = obj.box.x0; x < obj.box.x1; ++x) {
        if (obj.mask(y, x) < 0.5f) continue;
        const float tex = ((y / period + x / period) % 2 == 0) ? kTextureAmplitude : -kTextureAmplitude;
        for (std::size_t c = 0; c < 3; ++c) scene.optical(c, y, x) = color[c] * (1.0f + tex);
      }
    }
  }
  for (const auto& cloud : scene.clouds) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = cloud.y0; y < cloud.y1; ++y) {
        for (std::size_t x = cloud.x0; x < cloud.x1; ++x) scene.optical(c, y, x) = kOpticalBackground[c];
      }
    }
  }
  if (spec.optical_noise > 0) {
    Rng noise = stream(spec, index, kOpticalNoise);
    for (float& v : scene.optical.data()) v += static_cast<float>(noise.uniform(-spec.optical_noise, spec.optical_noise));
  }

  // SAR: class intensity modulated by the class backscatter pattern, with
  // brighter edges, times speckle.
  scene.sar = Tensor({1, h, w}, kSarBackground);
  for (const auto& obj : scene.objects) {
    if (!visible_in_sar(obj.visibility)) continue;
    const float level = class_sar_level(obj.class_id, spec.num_classes);
    for (std::size_t y = obj.box.y0; y < obj.box.y1; ++y) {
      for (std::size_t x = obj.box.x0; x < obj.box.x1; ++x) {
        if (obj.mask(y, x) < 0.5f) continue;
        scene.sar(0, y, x) = on_edge(obj.mask, y, x)
                                 ? level * kSarEdgeGain
                                 : level * (1.0f + kSarTextureAmplitude * sar_texture_sign(obj.class_id, y, x));
      }
    }
  }
  if (spec.speckle > 0) {
    Rng speckle = stream(spec, index, kSpeckle);
    for (float& v : scene.sar.data()) v *= static_cast<float>(speckle.uniform(1.0 - spec.speckle, 1.0 + spec.speckle));
  }

  // Queries: one referring query per object, balanced existence questions,
  // and a count question when the scene is not empty.
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const std::size_t c = scene.objects[i].class_id;
    scene.queries.push_back({QueryKind::segment, {vocab::kSegment, vocab::kClassBase + c}, i, vocab::kSegAnswer});
  }
  std::vector<bool> present(spec.num_classes, false);
  for (const auto& o : scene.objects) present[o.class_id] = true;
  std::vector<std::size_t> absent;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    if (!present[c]) absent.push_back(c);
  }
  Rng qrng = stream(spec, index, kQueries);
  std::shuffle(absent.begin(), absent.end(), qrng.engine());
  const std::size_t n_no = std::min(absent.size(), std::max<std::size_t>(1, scene.objects.size()));
  absent.resize(n_no);
  std::vector<std::pair<std::size_t, bool>> exists;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    if (present[c]) exists.emplace_back(c, true);
  }
  for (std::size_t c : absent) exists.emplace_back(c, false);
  std::sort(exists.begin(), exists.end());
  for (const auto& [c, yes] : exists) {
    scene.queries.push_back({QueryKind::exists, {vocab::kExists, vocab::kClassBase + c}, std::nullopt,
                             yes ? vocab::kYes : vocab::kNo});
  }
  if (!scene.objects.empty()) {
    scene.queries.push_back({QueryKind::count, {vocab::kCount}, std::nullopt,
                             vocab::kCountBase + scene.objects.size()});
  }
  return scene;
}

std::vector<Scene> generate_scenes(const SceneSpec& spec, std::size_t first_index, std::size_t count) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(spec, first_index + i));
  return out;
}

}  // namespace sapfuse::synth
