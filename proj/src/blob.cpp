#include "sapfuse/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sapfuse/errors.hpp"

namespace sapfuse::blob {

namespace {

template <typename W>
void put_le(std::vector<unsigned char>& out, W word) {
  for (std::size_t b = 0; b < sizeof(W); ++b) out.push_back(static_cast<unsigned char>((word >> (8 * b)) & 0xFFu));
}

template <typename W>
W get_le(const unsigned char* p) {
  W word = 0;
  for (std::size_t b = 0; b < sizeof(W); ++b) word |= static_cast<W>(p[b]) << (8 * b);
  return word;
}

}  // namespace

std::size_t Writer::append(std::span<const float> values) {
  const std::size_t offset = bytes_.size();
  for (float v : values) put_le(bytes_, std::bit_cast<std::uint32_t>(v));
  return offset;
}

std::size_t Writer::append(std::span<const std::int32_t> values) {
  const std::size_t offset = bytes_.size();
  for (std::int32_t v : values) put_le(bytes_, static_cast<std::uint32_t>(v));
  return offset;
}

void Writer::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Reader::Reader(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void Reader::check_range(std::size_t offset, std::size_t bytes) const {
  if (offset > bytes_.size() || bytes > bytes_.size() - offset) {
    throw IoError("blob range [" + std::to_string(offset) + ", +" + std::to_string(bytes) +
                  ") exceeds blob size " + std::to_string(bytes_.size()));
  }
}

std::vector<float> Reader::floats(std::size_t offset, std::size_t count) const {
  check_range(offset, count * 4);
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<float>(get_le<std::uint32_t>(&bytes_[offset + 4 * i]));
  return out;
}

std::vector<std::int32_t> Reader::ints(std::size_t offset, std::size_t count) const {
  check_range(offset, count * 4);
  std::vector<std::int32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<std::int32_t>(get_le<std::uint32_t>(&bytes_[offset + 4 * i]));
  return out;
}

}  // namespace sapfuse::blob
