#include "tseg/csv.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "tseg/common.hpp"

namespace tseg::csv {
namespace {

void put_field(std::string& out, const std::string& f) {
  if (f.find_first_of(",\"\r\n") == std::string::npos) {
    out += f;
    return;
  }
  out += '"';
  for (char c : f) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
}

void put_row(std::string& out, const std::vector<std::string>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) out += ',';
    put_field(out, row[i]);
  }
  out += '\n';
}

}  // namespace

std::size_t Table::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw IoError("csv has no column '" + name + "'");
}

std::string number(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string to_string(const Table& table) {
  if (table.header.empty()) throw IoError("csv table has no header");
  std::string out;
  put_row(out, table.header);
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) throw IoError("csv row width differs from header");
    put_row(out, row);
  }
  return out;
}

void write(const std::filesystem::path& path, const Table& table) {
  const auto text = to_string(table);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

Table parse(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      if (!field.empty()) throw IoError("csv: quote inside unquoted field");
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      field_started = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      records.push_back(std::move(row));
      row.clear();
      field_started = false;
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) throw IoError("csv: unterminated quoted field");
  if (field_started || !field.empty()) {
    row.push_back(std::move(field));
    records.push_back(std::move(row));
  }
  if (records.empty()) throw IoError("csv: missing header");
  Table t;
  t.header = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.header.size()) {
      throw IoError("csv: row " + std::to_string(r) + " has " + std::to_string(records[r].size()) +
                    " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(records[r]));
  }
  return t;
}

Table read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse(ss.str());
  } catch (const IoError& e) {
    throw IoError(path.filename().string() + ": " + e.what());
  }
}

}  // namespace tseg::csv
