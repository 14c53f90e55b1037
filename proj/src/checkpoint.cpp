#include "sapfuse/checkpoint.hpp"

#include <fstream>
#include <set>

#include "sapfuse/blob.hpp"
#include "sapfuse/errors.hpp"

namespace sapfuse::checkpoint {

using json = nlohmann::json;

void write(const std::filesystem::path& dir, const NamedTensors& tensors, const json& extra) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  blob::Writer w;
  json entries = json::array();
  std::set<std::string> seen;
  for (const auto& [name, t] : tensors) {
    if (!seen.insert(name).second) throw IoError("duplicate checkpoint tensor '" + name + "'");
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", w.append(t.data())}, {"dtype", "f32"}});
  }
  json manifest{{"format", "sapfuse-checkpoint"},
                {"version", 1},
                {"blob", "checkpoint.bin"},
                {"blob_bytes", w.size()},
                {"tensors", entries},
                {"extra", extra}};
  w.write(dir / "checkpoint.bin");
  std::ofstream out(dir / "checkpoint.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "checkpoint.json").string());
  out << manifest.dump(1) << "\n";
  if (!out) throw IoError("failed writing checkpoint manifest in " + dir.string());
}

Contents read(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw IoError("cannot open " + (dir / "checkpoint.json").string());
  try {
    const json manifest = json::parse(in);
    if (manifest.at("format") != "sapfuse-checkpoint") throw IoError("not a checkpoint manifest");
    const blob::Reader r(dir / manifest.at("blob").get<std::string>());
    Contents c;
    for (const auto& e : manifest.at("tensors")) {
      if (e.at("dtype") != "f32") throw IoError("unsupported checkpoint dtype");
      Shape shape = e.at("shape").get<Shape>();
      const auto n = shape_size(shape);
      c.tensors.emplace_back(e.at("name").get<std::string>(),
                             Tensor(std::move(shape), r.floats(e.at("offset").get<std::size_t>(), n)));
    }
    c.extra = manifest.value("extra", json::object());
    return c;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest: " + std::string(e.what()));
  } catch (const DimensionError& e) {
    throw IoError("malformed checkpoint tensor: " + std::string(e.what()));
  }
}

const Tensor& find(const Contents& contents, const std::string& name, const Shape& shape) {
  for (const auto& [n, t] : contents.tensors) {
    if (n != name) continue;
    if (t.shape() != shape) {
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                    shape_string(shape));
    }
    return t;
  }
  throw IoError("checkpoint lacks tensor '" + name + "'");
}

}  // namespace sapfuse::checkpoint
