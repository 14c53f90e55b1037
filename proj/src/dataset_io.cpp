#include "sapfuse/dataset_io.hpp"

#include <fstream>

#include "sapfuse/blob.hpp"
#include "sapfuse/json_util.hpp"

namespace sapfuse::synth {

using json = nlohmann::json;

json scene_spec_to_json(const SceneSpec& s) {
  return json{{"height", s.height},
              {"width", s.width},
              {"min_objects", s.min_objects},
              {"max_objects", s.max_objects},
              {"num_classes", s.num_classes},
              {"min_size", s.min_size},
              {"max_size", s.max_size},
              {"p_opt_only", s.p_opt_only},
              {"p_sar_only", s.p_sar_only},
              {"p_both", s.p_both},
              {"cloud_density", s.cloud_density},
              {"speckle", s.speckle},
              {"optical_noise", s.optical_noise},
              {"seed", s.seed}};
}

SceneSpec scene_spec_from_json(const json& j, const SceneSpec& base) {
  const std::string ctx = "scene spec";
  json_util::check_keys(j,
                        {"height", "width", "min_objects", "max_objects", "num_classes", "min_size",
                         "max_size", "p_opt_only", "p_sar_only", "p_both", "cloud_density", "speckle",
                         "optical_noise", "seed"},
                        ctx);
  SceneSpec s = base;
  json_util::read(j, "height", s.height, ctx);
  json_util::read(j, "width", s.width, ctx);
  json_util::read(j, "min_objects", s.min_objects, ctx);
  json_util::read(j, "max_objects", s.max_objects, ctx);
  json_util::read(j, "num_classes", s.num_classes, ctx);
  json_util::read(j, "min_size", s.min_size, ctx);
  json_util::read(j, "max_size", s.max_size, ctx);
  json_util::read(j, "p_opt_only", s.p_opt_only, ctx);
  json_util::read(j, "p_sar_only", s.p_sar_only, ctx);
  json_util::read(j, "p_both", s.p_both, ctx);
  json_util::read(j, "cloud_density", s.cloud_density, ctx);
  json_util::read(j, "speckle", s.speckle, ctx);
  json_util::read(j, "optical_noise", s.optical_noise, ctx);
  json_util::read(j, "seed", s.seed, ctx);
  return s;
}

namespace {

json float_blob(blob::Writer& w, const Tensor& t) {
  return json{{"offset", w.append(t.data())}, {"shape", t.shape()}, {"dtype", "f32"}};
}

json mask_blob(blob::Writer& w, const Tensor& mask) {
  std::vector<std::int32_t> bits(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bits[i] = mask[i] >= 0.5f ? 1 : 0;
  return json{{"offset", w.append(std::span<const std::int32_t>(bits))}, {"shape", mask.shape()}, {"dtype", "i32"}};
}

json box_json(const BoundingBox& b) { return json::array({b.y0, b.x0, b.y1, b.x1}); }

BoundingBox box_from(const json& j) {
  return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>(), j.at(2).get<std::size_t>(),
          j.at(3).get<std::size_t>()};
}

Tensor read_floats(const blob::Reader& r, const json& ref) {
  if (ref.at("dtype") != "f32") throw IoError("expected an f32 blob");
  Shape shape = ref.at("shape").get<Shape>();
  return Tensor(shape, r.floats(ref.at("offset").get<std::size_t>(), shape_size(shape)));
}

Tensor read_mask(const blob::Reader& r, const json& ref) {
  if (ref.at("dtype") != "i32") throw IoError("expected an i32 blob");
  Shape shape = ref.at("shape").get<Shape>();
  const auto bits = r.ints(ref.at("offset").get<std::size_t>(), shape_size(shape));
  Tensor mask(shape);
  for (std::size_t i = 0; i < bits.size(); ++i) mask[i] = static_cast<float>(bits[i]);
  return mask;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  blob::Writer w;
  json scenes = json::array();
  for (std::size_t i = 0; i < dataset.scenes.size(); ++i) {
    const Scene& s = dataset.scenes[i];
    json objects = json::array();
    for (const auto& o : s.objects) {
      objects.push_back({{"class", o.class_id},
                         {"shape", to_string(o.shape)},
                         {"bbox", box_json(o.box)},
                         {"visibility", to_string(o.visibility)},
                         {"mask", mask_blob(w, o.mask)}});
    }
    json clouds = json::array();
    for (const auto& c : s.clouds) clouds.push_back(box_json(c));
    json queries = json::array();
    for (const auto& q : s.queries) {
      queries.push_back({{"kind", to_string(q.kind)},
                         {"tokens", q.tokens},
                         {"target", q.target ? json(*q.target) : json(nullptr)},
                         {"answer", q.answer}});
    }
    scenes.push_back({{"index", dataset.first_index + i},
                      {"optical", float_blob(w, s.optical)},
                      {"sar", float_blob(w, s.sar)},
                      {"objects", objects},
                      {"clouds", clouds},
                      {"queries", queries}});
  }
  json manifest{{"format", "sapfuse-dataset"},
                {"version", 1},
                {"scene_count", dataset.scenes.size()},
                {"first_index", dataset.first_index},
                {"spec", scene_spec_to_json(dataset.spec)},
                {"blob", "data.bin"},
                {"blob_bytes", w.size()},
                {"scenes", scenes}};
  w.write(dir / "data.bin");
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(1) << "\n";
  if (!out) throw IoError("failed writing manifest in " + dir.string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot open " + (dir / "manifest.json").string());
  try {
    const json manifest = json::parse(in);
    if (manifest.at("format") != "sapfuse-dataset") throw IoError("not a dataset manifest");
    const blob::Reader r(dir / manifest.at("blob").get<std::string>());
    Dataset d;
    d.spec = scene_spec_from_json(manifest.at("spec"));
    d.first_index = manifest.at("first_index").get<std::size_t>();
    for (const auto& js : manifest.at("scenes")) {
      Scene s;
      s.optical = read_floats(r, js.at("optical"));
      s.sar = read_floats(r, js.at("sar"));
      for (const auto& jo : js.at("objects")) {
        SceneObject o;
        o.class_id = jo.at("class").get<std::size_t>();
        o.shape = parse_shape(jo.at("shape").get<std::string>());
        o.box = box_from(jo.at("bbox"));
        o.visibility = parse_visibility(jo.at("visibility").get<std::string>());
        o.mask = read_mask(r, jo.at("mask"));
        s.objects.push_back(std::move(o));
      }
      for (const auto& jc : js.at("clouds")) s.clouds.push_back(box_from(jc));
      for (const auto& jq : js.at("queries")) {
        Query q;
        q.kind = parse_query_kind(jq.at("kind").get<std::string>());
        q.tokens = jq.at("tokens").get<std::vector<std::size_t>>();
        if (!jq.at("target").is_null()) q.target = jq.at("target").get<std::size_t>();
        q.answer = jq.at("answer").get<std::size_t>();
        s.queries.push_back(std::move(q));
      }
      d.scenes.push_back(std::move(s));
    }
    if (d.scenes.size() != manifest.at("scene_count").get<std::size_t>()) {
      throw IoError("manifest scene_count disagrees with scene list");
    }
    return d;
  } catch (const json::exception& e) {
    throw IoError("malformed dataset manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw IoError("malformed dataset spec: " + std::string(e.what()));
  } catch (const DomainError& e) {
    throw IoError("malformed dataset manifest: " + std::string(e.what()));
  }
}

}  // namespace sapfuse::synth
