#pragma once

// Little-endian binary blobs addressed by byte offset from a JSON manifest.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace sapfuse::blob {

/// Accumulates arrays in memory; offsets are byte offsets into the blob.
class Writer {
 public:
  std::size_t append(std::span<const float> values);
  std::size_t append(std::span<const std::int32_t> values);
  void write(const std::filesystem::path& path) const;
  std::size_t size() const { return bytes_.size(); }

 private:
  std::vector<unsigned char> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path);
  std::vector<float> floats(std::size_t offset, std::size_t count) const;
  std::vector<std::int32_t> ints(std::size_t offset, std::size_t count) const;
  std::size_t size() const { return bytes_.size(); }

 private:
  void check_range(std::size_t offset, std::size_t bytes) const;
  std::vector<unsigned char> bytes_;
};

}  // namespace sapfuse::blob
