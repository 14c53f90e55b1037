#pragma once

// Named-tensor checkpoints: <dir>/checkpoint.json lists names, shapes and
// byte offsets into <dir>/checkpoint.bin (little-endian f32).

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sapfuse/tensor.hpp"

namespace sapfuse::checkpoint {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// `extra` is stored verbatim in the manifest (e.g. the run configuration).
void write(const std::filesystem::path& dir, const NamedTensors& tensors,
           const nlohmann::json& extra = nlohmann::json::object());

struct Contents {
  NamedTensors tensors;
  nlohmann::json extra;
};

Contents read(const std::filesystem::path& dir);

/// Looks `name` up, requiring the given shape.
const Tensor& find(const Contents& contents, const std::string& name, const Shape& shape);

}  // namespace sapfuse::checkpoint
