#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvadapt {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operands of `op` have incompatible shapes.
class ShapeError : public Error {
 public:
  ShapeError(std::string op, const Shape& a, const Shape& b)
      : Error(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)),
        op_(std::move(op)), a_(a), b_(b) {}
  ShapeError(std::string op, std::string what) : Error(op + ": " + what), op_(std::move(op)) {}

  const std::string& op() const { return op_; }
  const Shape& lhs() const { return a_; }
  const Shape& rhs() const { return b_; }

 private:
  std::string op_;
  Shape a_, b_;
};

// NaN/Inf or a degenerate value (zero norm, singular intrinsics, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

// A configuration value is missing or out of range; `field()` names it.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("config field '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// Malformed input file. Line is 1-based, 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(std::string file, std::size_t line, const std::string& what)
      : Error(file + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
        file_(std::move(file)), line_(line) {}
  const std::string& file() const { return file_; }
  std::size_t line() const { return line_; }

 private:
  std::string file_;
  std::size_t line_;
};

}  // namespace mvadapt
