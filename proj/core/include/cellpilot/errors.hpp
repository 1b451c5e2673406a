#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cellpilot {

// Base of every error thrown by the library. Callers that only care about
// "something went wrong in cellpilot" can catch this one type.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

class EmptyMaskError : public Error {
  public:
    EmptyMaskError() : Error("mask has no foreground pixels") {}
    using Error::Error;
};

class RangeError : public Error {
  public:
    using Error::Error;
};

class ConfigError : public Error {
  public:
    using Error::Error;
};

class NumericError : public Error {
  public:
    using Error::Error;
};

class NotFoundError : public Error {
  public:
    using Error::Error;
};

class IoError : public Error {
  public:
    using Error::Error;
};

class ModelError : public Error {
  public:
    using Error::Error;
};

// Parse failure; `offset` is the byte position where decoding stopped.
class FormatError : public Error {
  public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

  private:
    std::size_t offset_;
};

} // namespace cellpilot
