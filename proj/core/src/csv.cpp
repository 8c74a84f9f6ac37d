#include "deqrb/csv.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace deqrb::csv {

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char ch : field) {
    if (ch == '"') out += '"';
    out += ch;
  }
  out += '"';
  return out;
}

Writer& Writer::raw(const std::string& s) {
  if (row_started_) out_ << ',';
  out_ << s;
  row_started_ = true;
  return *this;
}

Writer& Writer::field(const std::string& s) { return raw(escape(s)); }

void Writer::end_row() {
  out_ << "\r\n";
  row_started_ = false;
}

void Writer::header(std::initializer_list<const char*> names) {
  for (const char* n : names) field(n);
  end_row();
}

}  // namespace deqrb::csv
