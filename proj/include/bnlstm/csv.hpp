#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "bnlstm/errors.hpp"

namespace bnlstm {

// Minimal RFC-4180 writer. Fields containing commas, quotes or newlines
// are quoted with embedded quotes doubled; numbers print with %.17g so
// files are byte-reproducible.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot open CSV output: " + path);
  }

  void row(const std::vector<std::string>& fields) {
    for (size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << escape(fields[i]);
    }
    out_ << "\r\n";
  }

  static std::string number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
  }

  static std::string number(int64_t v) { return std::to_string(v); }

  static std::string escape(const std::string& field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
    std::string quoted = "\"";
    for (char c : field) {
      if (c == '"') quoted += '"';
      quoted += c;
    }
    quoted += '"';
    return quoted;
  }

 private:
  std::ofstream out_;
};

}  // namespace bnlstm
