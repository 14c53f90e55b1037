#include "sapfuse/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "sapfuse/errors.hpp"

namespace sapfuse::report {

void Table::add_row(std::vector<Cell> row) {
  if (row.size() != columns.size()) {
    throw DimensionError("table " + name + ": row has " + std::to_string(row.size()) + " cells for " +
                         std::to_string(columns.size()) + " columns");
  }
  rows.push_back(std::move(row));
}

std::size_t Table::column(const std::string& col) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] == col) return i;
  }
  throw std::out_of_range("table " + name + " has no column '" + col + "'");
}

std::string format_cell(const Cell& cell) {
  if (const auto* s = std::get_if<std::string>(&cell)) return *s;
  if (const auto* u = std::get_if<std::uint64_t>(&cell)) return std::to_string(*u);
  const double v = std::get<double>(cell);
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out += (i ? "," : "") + t.columns[i];
  out += "\n";
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + format_cell(row[i]);
    out += "\n";
  }
  return out;
}

nlohmann::json to_json(const Table& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : t.rows) {
    nlohmann::json r = nlohmann::json::object();
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, double>) {
              // JSON has no NaN; keep the CSV spelling for non-finite values.
              if (std::isfinite(v)) {
                r[t.columns[i]] = v;
              } else {
                r[t.columns[i]] = format_cell(v);
              }
            } else {
              r[t.columns[i]] = v;
            }
          },
          row[i]);
    }
    rows.push_back(std::move(r));
  }
  return {{"table", t.name}, {"columns", t.columns}, {"rows", rows}};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write(const std::filesystem::path& dir, const Table& table, const nlohmann::json& extra) {
  write_text(dir / (table.name + ".csv"), to_csv(table));
  nlohmann::json summary = to_json(table);
  for (const auto& item : extra.items()) summary[item.key()] = item.value();
  write_text(dir / "summary.json", summary.dump(1) + "\n");
}

}  // namespace sapfuse::report
