#pragma once

#include <charconv>
#include <string>
#include <system_error>

#include "micl/errors.hpp"

namespace micl {

// Shortest decimal rendering that round-trips the exact 64-bit value.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, long line_for_error) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ParseError("malformed numeric field '" + std::string(s) + "'", line_for_error);
  return v;
}

inline long parse_long(std::string_view s, long line_for_error) {
  long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ParseError("malformed integer field '" + std::string(s) + "'", line_for_error);
  return v;
}

}  // namespace micl
