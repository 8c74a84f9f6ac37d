#pragma once

// RFC-4180 framing, '.' decimal point, 17 significant digits.

#include <initializer_list>
#include <iosfwd>
#include <string>
#include <vector>

namespace deqrb::csv {

std::string format_double(double v);
std::string escape(const std::string& field);

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  Writer& field(const std::string& s);
  Writer& field(const char* s) { return field(std::string(s)); }
  Writer& field(double v) { return raw(format_double(v)); }
  Writer& field(long long v) { return raw(std::to_string(v)); }
  Writer& field(unsigned long long v) { return raw(std::to_string(v)); }
  Writer& field(int v) { return raw(std::to_string(v)); }
  Writer& field(unsigned v) { return raw(std::to_string(v)); }
  Writer& field(unsigned long v) { return raw(std::to_string(v)); }
  Writer& field(long v) { return raw(std::to_string(v)); }
  Writer& field(bool v) { return raw(v ? "1" : "0"); }
  void end_row();

  void header(std::initializer_list<const char*> names);

 private:
  Writer& raw(const std::string& s);
  std::ostream& out_;
  bool row_started_ = false;
};

}  // namespace deqrb::csv
