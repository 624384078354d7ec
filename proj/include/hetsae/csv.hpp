#pragma once

// RFC-4180 CSV reading and writing with round-trip float formatting.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hetsae/errors.hpp"

namespace hetsae::csv {

/// 17 significant digits, so parsing recovers the same double.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "NaN";
  if (std::isinf(x)) return x > 0 ? "Inf" : "-Inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string quote(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> row_line;  // source line of each row, for diagnostics
  std::string source;

  std::size_t column(std::string_view name) const {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (header[j] == name) return j;
    }
    throw InvalidInput(source + ": missing column '" + std::string(name) + "'");
  }
  bool has_column(std::string_view name) const {
    for (const auto& h : header) {
      if (h == name) return true;
    }
    return false;
  }

  double number(std::size_t row, std::size_t col) const {
    const std::string& s = rows[row][col];
    double v = 0.0;
    const char* b = s.data();
    const char* e = b + s.size();
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || ptr != e) {
      if (s == "NaN" || s == "nan") return std::nan("");
      if (s == "Inf" || s == "inf") return INFINITY;
      if (s == "-Inf" || s == "-inf") return -INFINITY;
      throw InvalidInput(source + " line " + std::to_string(row_line[row]) + ", column '" + header[col] +
                         "': not a number: '" + s + "'");
    }
    return v;
  }
  long long integer(std::size_t row, std::size_t col) const {
    const std::string& s = rows[row][col];
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw InvalidInput(source + " line " + std::to_string(row_line[row]) + ", column '" + header[col] +
                         "': not an integer: '" + s + "'");
    }
    return v;
  }
};

/// Parses RFC-4180 text. The first record is the header; every record must
/// have the header's field count.
inline Table parse(std::string_view text, std::string source = "csv") {
  Table t;
  t.source = std::move(source);
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false, field_started = false;
  int line = 1, record_line = 1;
  std::size_t i = 0;

  auto end_record = [&] {
    record.push_back(std::move(field));
    field.clear();
    const bool blank = record.size() == 1 && record[0].empty() && !field_started;
    if (!blank) {
      if (t.header.empty()) {
        t.header = std::move(record);
      } else {
        if (record.size() != t.header.size()) {
          throw InvalidInput(t.source + " line " + std::to_string(record_line) + ": expected " +
                             std::to_string(t.header.size()) + " fields, found " + std::to_string(record.size()));
        }
        t.rows.push_back(std::move(record));
        t.row_line.push_back(record_line);
      }
    }
    record.clear();
    field_started = false;
  };

  if (text.substr(0, 3) == "\xEF\xBB\xBF") i = 3;
  for (; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty()) throw InvalidInput(t.source + " line " + std::to_string(line) + ": stray quote");
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        record.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        end_record();
        ++line;
        record_line = line;
        break;
      default:
        field += c;
        field_started = true;
    }
  }
  if (in_quotes) throw InvalidInput(t.source + ": unterminated quoted field");
  if (field_started || !field.empty() || !record.empty()) end_record();
  if (t.header.empty()) throw InvalidInput(t.source + ": empty file");
  return t;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Table read(const std::string& path) { return parse(read_file(path), path); }

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  Writer& row(const std::vector<std::string>& fields) {
    for (std::size_t j = 0; j < fields.size(); ++j) {
      if (j) out_ << ',';
      out_ << quote(fields[j]);
    }
    out_ << "\r\n";
    return *this;
  }

 private:
  std::ostream& out_;
};

}  // namespace hetsae::csv
