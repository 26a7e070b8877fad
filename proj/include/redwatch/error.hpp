#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace redwatch {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A trace line that cannot be parsed. line_no is 1-based and counts the header.
class MalformedLine : public Error {
 public:
  MalformedLine(uint64_t line_no, const std::string& reason)
      : Error("line " + std::to_string(line_no) + ": " + reason), line_no_(line_no) {}
  uint64_t line_no() const { return line_no_; }

 private:
  uint64_t line_no_;
};

class UnsupportedVersion : public Error {
 public:
  using Error::Error;
};

/// An in-memory event that cannot be serialized (bad width, value overflow, seq gap).
class MalformedEvent : public Error {
 public:
  using Error::Error;
};

class StackDiscipline : public Error {
 public:
  StackDiscipline(uint64_t seq, const std::string& detail)
      : Error("seq " + std::to_string(seq) + ": " + detail), seq_(seq) {}
  uint64_t seq() const { return seq_; }

 private:
  uint64_t seq_;
};

class ObjectLifetime : public Error {
 public:
  ObjectLifetime(uint64_t seq, const std::string& detail)
      : Error("seq " + std::to_string(seq) + ": " + detail), seq_(seq) {}
  uint64_t seq() const { return seq_; }

 private:
  uint64_t seq_;
};

class HybridMismatch : public Error {
 public:
  HybridMismatch(std::size_t eval_frames, std::size_t py_frames)
      : Error("hybrid mismatch: " + std::to_string(eval_frames) + " eval frames vs " +
              std::to_string(py_frames) + " python frames") {}
};

class UnknownPathId : public Error {
 public:
  explicit UnknownPathId(uint64_t id) : Error("unknown path id " + std::to_string(id)) {}
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

class InvalidSpec : public Error {
 public:
  using Error::Error;
};

class UnknownFixture : public Error {
 public:
  using Error::Error;
};

/// Raised when an internal consistency check fails. Always a bug.
class InternalError : public Error {
 public:
  using Error::Error;
};

}  // namespace redwatch
