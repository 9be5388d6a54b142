#pragma once

// Minimal RFC 4180 CSV: header row required, every row the same width.

#include <filesystem>
#include <string>
#include <vector>

namespace tseg::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of a header column; throws IoError when absent.
  std::size_t column(const std::string& name) const;
};

/// Shortest decimal that round-trips the double; "" for NaN.
std::string number(double v);

std::string to_string(const Table& table);
void write(const std::filesystem::path& path, const Table& table);

/// Throws IoError on a missing header, ragged row or unterminated quote.
Table parse(const std::string& text);
Table read(const std::filesystem::path& path);

}  // namespace tseg::csv
