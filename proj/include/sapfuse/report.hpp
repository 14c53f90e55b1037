#pragma once

// Tabular reports: CSV with a header row (floats to 6 significant digits)
// plus a summary.json carrying the same rows.

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace sapfuse::report {

using Cell = std::variant<std::string, double, std::uint64_t>;

struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add_row(std::vector<Cell> row);
  /// Index of a column; throws std::out_of_range when absent.
  std::size_t column(const std::string& name) const;
};

/// "%.6g" for doubles ("nan"/"inf" spelled out), decimal for integers.
std::string format_cell(const Cell& cell);
std::string to_csv(const Table& table);
nlohmann::json to_json(const Table& table);

/// Writes <dir>/<table.name>.csv and <dir>/summary.json.
void write(const std::filesystem::path& dir, const Table& table,
           const nlohmann::json& extra = nlohmann::json::object());

/// Writes a text file, creating parent directories; IoError on failure.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace sapfuse::report
