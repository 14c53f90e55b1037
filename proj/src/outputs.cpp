#include "sapfuse/outputs.hpp"

#include <fstream>
#include <sstream>

#include "sapfuse/errors.hpp"

namespace sapfuse::harness {

checkpoint::NamedTensors named_tensors(const SystemParams& params) {
  checkpoint::NamedTensors out;
  params.for_each([&out](const std::string& name, const Tensor& t) { out.emplace_back(name, t); });
  return out;
}

SystemParams params_from_checkpoint(const checkpoint::Contents& contents, const SystemConfig& config) {
  SystemParams p = SystemParams::zeros(config);
  p.for_each([&contents](const std::string& name, Tensor& t) { t = checkpoint::find(contents, name, t.shape()); });
  if (contents.tensors.size() != named_tensors(p).size()) {
    throw IoError("checkpoint holds tensors this system does not use");
  }
  return p;
}

void save_checkpoint(const std::filesystem::path& dir, const SystemParams& params, const RunConfig& config) {
  checkpoint::write(dir, named_tensors(params), {{"config", run_config_to_json(config)}});
}

report::Table history_table(std::span<const HistoryRow> history) {
  report::Table t{"history", {"step", "ce", "dice", "kl", "cl", "total"}, {}};
  for (const auto& h : history) {
    t.add_row({static_cast<std::uint64_t>(h.step), h.loss.ce, h.loss.dice, h.loss.kl, h.loss.cl, h.loss.total});
  }
  return t;
}

report::Table predictions_table(std::span<const SampleRecord> records) {
  report::Table t{"predictions", {"scene", "query", "kind", "answer_gt", "answer_pred", "intersection", "union"}, {}};
  for (const auto& r : records) {
    t.add_row({static_cast<std::uint64_t>(r.scene), static_cast<std::uint64_t>(r.query), synth::to_string(r.kind),
               static_cast<std::uint64_t>(r.answer_gt), static_cast<std::uint64_t>(r.answer_pred),
               static_cast<std::uint64_t>(r.intersection), static_cast<std::uint64_t>(r.union_count)});
  }
  return t;
}

std::vector<SampleRecord> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "scene,query,kind,answer_gt,answer_pred,intersection,union") {
    throw IoError(path.string() + ": unexpected header");
  }
  std::vector<SampleRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::vector<std::string> f;
    for (std::string cell; std::getline(row, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw IoError(path.string() + ": malformed row '" + line + "'");
    try {
      SampleRecord r;
      r.scene = std::stoull(f[0]);
      r.query = std::stoull(f[1]);
      r.kind = synth::parse_query_kind(f[2]);
      r.answer_gt = std::stoull(f[3]);
      r.answer_pred = std::stoull(f[4]);
      r.intersection = std::stoull(f[5]);
      r.union_count = std::stoull(f[6]);
      out.push_back(r);
    } catch (const std::exception& e) {
      throw IoError(path.string() + ": malformed row '" + line + "': " + e.what());
    }
  }
  return out;
}

report::Table metrics_table(const EvalMetrics& m, std::uint64_t seed) {
  report::Table t{"metrics", {"miou", "oiou", "accuracy", "mask_samples", "answer_samples", "seed"}, {}};
  t.add_row({m.miou, m.oiou, m.accuracy, static_cast<std::uint64_t>(m.mask_samples),
             static_cast<std::uint64_t>(m.answer_samples), seed});
  return t;
}

}  // namespace sapfuse::harness
