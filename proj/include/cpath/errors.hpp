#pragma once

#include <stdexcept>
#include <string>

namespace cpath {

// Root of the library's error hierarchy. Every precondition violation or
// I/O failure surfaces as a subclass of Error; nothing is silently clamped.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ZeroVectorError : Error {
  explicit ZeroVectorError(const std::string& msg = "vector norm below 1e-12") : Error(msg) {}
};

struct DimensionMismatchError : Error {
  explicit DimensionMismatchError(const std::string& msg) : Error(msg) {}
};

struct ShapeMismatchError : Error {
  explicit ShapeMismatchError(const std::string& msg) : Error(msg) {}
};

struct CountTooLargeError : Error {
  explicit CountTooLargeError(const std::string& msg) : Error(msg) {}
};

struct OverlapError : Error {
  explicit OverlapError(const std::string& msg) : Error(msg) {}
};

struct SelectionNotEmptyError : Error {
  explicit SelectionNotEmptyError(const std::string& msg) : Error(msg) {}
};

struct IndivisibleChannelsError : Error {
  explicit IndivisibleChannelsError(const std::string& msg) : Error(msg) {}
};

struct NonFiniteLossError : Error {
  explicit NonFiniteLossError(const std::string& msg) : Error(msg) {}
};

struct SingleClassError : Error {
  explicit SingleClassError(const std::string& msg = "both classes required") : Error(msg) {}
};

struct NoPositivesError : Error {
  explicit NoPositivesError(const std::string& msg = "at least one positive required") : Error(msg) {}
};

struct InsufficientClassCountError : Error {
  explicit InsufficientClassCountError(const std::string& msg) : Error(msg) {}
};

struct ModeMismatchError : Error {
  explicit ModeMismatchError(const std::string& msg) : Error(msg) {}
};

struct UnknownMppError : Error {
  explicit UnknownMppError(const std::string& msg = "source microns-per-pixel unknown") : Error(msg) {}
};

struct EmptyResultError : Error {
  explicit EmptyResultError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Configuration / CLI parse failure; carries a 1-based line number when the
// source is a file (0 when not applicable).
struct ParseError : Error {
  int line = 0;
  ParseError(const std::string& msg, int line_no = 0)
      : Error(line_no > 0 ? msg + " (line " + std::to_string(line_no) + ")" : msg), line(line_no) {}
};

}  // namespace cpath
