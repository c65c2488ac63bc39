#pragma once

#include <stdexcept>
#include <string>

namespace micl {

// Dimension or layout disagreement between operands.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite value produced by an otherwise well-posed computation.
// Carries the name of the parameter block (or "value") where it appeared.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::string block)
      : std::runtime_error(what + " [block: " + block + "]"), block_(std::move(block)) {}
  const std::string& block() const { return block_; }

 private:
  std::string block_;
};

// Parameter magnitude blew past the guard during iterative optimization.
// step() reports the inner/outer iteration index at which it happened.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long step)
      : std::runtime_error(what + " [step " + std::to_string(step) + "]"), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

class ArgumentError : public std::runtime_error {
 public:
  explicit ArgumentError(const std::string& what) : std::runtime_error(what) {}
};

// Out-of-range class label.
class LabelError : public std::runtime_error {
 public:
  explicit LabelError(const std::string& what) : std::runtime_error(what) {}
};

// Per-class exemplar counts are not all equal where balance is required.
class BalanceError : public std::runtime_error {
 public:
  explicit BalanceError(const std::string& what) : std::runtime_error(what) {}
};

class ScheduleError : public std::runtime_error {
 public:
  explicit ScheduleError(const std::string& what) : std::runtime_error(what) {}
};

class BudgetError : public std::runtime_error {
 public:
  explicit BudgetError(const std::string& what) : std::runtime_error(what) {}
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, long line)
      : std::runtime_error(what + " [line " + std::to_string(line) + "]"), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::string field)
      : std::runtime_error(what + " [field: " + field + "]"), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace micl
