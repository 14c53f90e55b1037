#pragma once

// Dataset container: <dir>/manifest.json (UTF-8 JSON) + <dir>/data.bin
// (little-endian f32 pixels and int32 masks, addressed by byte offset).

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "sapfuse/synth.hpp"

namespace sapfuse::synth {

struct Dataset {
  SceneSpec spec;
  std::size_t first_index = 0;
  std::vector<Scene> scenes;
  bool operator==(const Dataset&) const = default;
};

nlohmann::json scene_spec_to_json(const SceneSpec& spec);
/// Strict: unknown keys raise ConfigError; absent keys keep `base` values.
SceneSpec scene_spec_from_json(const nlohmann::json& j, const SceneSpec& base = {});

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace sapfuse::synth
