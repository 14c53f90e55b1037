#pragma once

// Seeded paired optical/SAR toy scenes with controllable complementarity.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sapfuse/tensor.hpp"

namespace sapfuse::synth {

enum class Visibility { optical_only, sar_only, both };
enum class ShapeKind { rectangle, disc };
enum class QueryKind { segment, exists, count };

std::string to_string(Visibility v);
Visibility parse_visibility(const std::string& s);
std::string to_string(ShapeKind s);
ShapeKind parse_shape(const std::string& s);
std::string to_string(QueryKind k);
QueryKind parse_query_kind(const std::string& s);

/// Fixed template vocabulary for queries and answers.
namespace vocab {
inline constexpr std::size_t kSegment = 0;
inline constexpr std::size_t kExists = 1;
inline constexpr std::size_t kCount = 2;
inline constexpr std::size_t kClassBase = 3;

inline constexpr std::size_t kNo = 0;
inline constexpr std::size_t kYes = 1;
inline constexpr std::size_t kSegAnswer = 2;
inline constexpr std::size_t kCountBase = 3;

inline constexpr std::size_t kMaxClasses = 8;

inline constexpr std::size_t text_size(std::size_t classes) { return kClassBase + classes; }
inline constexpr std::size_t answer_size(std::size_t max_objects) { return kCountBase + max_objects + 1; }
}  // namespace vocab

struct SceneSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t num_classes = 4;
  std::size_t min_size = 12;
  std::size_t max_size = 24;
  double p_opt_only = 0.25;
  double p_sar_only = 0.25;
  double p_both = 0.5;
  /// Target fraction of the optical image hidden under cloud rectangles.
  double cloud_density = 0.0;
  /// Half-width λ of the multiplicative speckle factor uniform(1−λ, 1+λ).
  double speckle = 0.3;
  /// Half-width of additive uniform optical sensor noise.
  double optical_noise = 0.02;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const SceneSpec&) const = default;
};

/// Half-open pixel box [y0, y1) × [x0, x1).
struct BoundingBox {
  std::size_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  bool operator==(const BoundingBox&) const = default;
};

struct SceneObject {
  std::size_t class_id = 0;
  ShapeKind shape = ShapeKind::rectangle;
  BoundingBox box;
  Tensor mask;  // H×W, {0,1}
  Visibility visibility = Visibility::both;
  bool operator==(const SceneObject&) const = default;
};

struct Query {
  QueryKind kind = QueryKind::segment;
  std::vector<std::size_t> tokens;
  std::optional<std::size_t> target;  // object index for segment queries
  std::size_t answer = 0;
  bool operator==(const Query&) const = default;
};

struct Scene {
  Tensor optical;  // 3×H×W
  Tensor sar;      // 1×H×W
  std::vector<SceneObject> objects;
  std::vector<Query> queries;
  std::vector<BoundingBox> clouds;
  bool operator==(const Scene&) const = default;
};

/// Deterministic in (spec.seed, index).
Scene generate_scene(const SceneSpec& spec, std::size_t index);

std::vector<Scene> generate_scenes(const SceneSpec& spec, std::size_t first_index, std::size_t count);

/// Analytic rasterization: a rectangle fills its box; a disc covers pixels
/// whose centres lie within the inscribed circle of its (square) box.
Tensor rasterize(ShapeKind shape, const BoundingBox& box, std::size_t height, std::size_t width);

/// Optical colour of a class (before texture).
std::vector<float> class_color(std::size_t class_id);
/// Clean SAR intensity of a class interior; edges are brighter.
float class_sar_level(std::size_t class_id, std::size_t num_classes);
/// ±1 backscatter pattern of a class at pixel (y, x); interiors render as
/// level·(1 + kSarTextureAmplitude·sign).
int sar_texture_sign(std::size_t class_id, std::size_t y, std::size_t x);

inline constexpr float kOpticalBackground[3] = {0.35f, 0.35f, 0.35f};
inline constexpr float kSarBackground = 0.15f;
inline constexpr float kSarEdgeGain = 1.4f;
inline constexpr float kSarTextureAmplitude = 0.5f;

bool visible_in_optical(Visibility v);
bool visible_in_sar(Visibility v);

}  // namespace sapfuse::synth
