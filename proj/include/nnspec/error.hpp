#pragma once

#include <stdexcept>
#include <string>

namespace nnspec {

enum class ErrorKind {
  io,
  format,
  validation,
  shape,
  numeric,
  topology,
  domain,
};

// Base of every exception thrown by the library. The C API maps `kind()` onto
// its status codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define NNSPEC_DEFINE_ERROR(Name, Kind)                                        \
  class Name : public Error {                                                  \
   public:                                                                     \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {}   \
  };

NNSPEC_DEFINE_ERROR(IoError, io)
NNSPEC_DEFINE_ERROR(FormatError, format)
NNSPEC_DEFINE_ERROR(ValidationError, validation)
NNSPEC_DEFINE_ERROR(ShapeError, shape)
NNSPEC_DEFINE_ERROR(NumericError, numeric)
NNSPEC_DEFINE_ERROR(TopologyError, topology)
NNSPEC_DEFINE_ERROR(DomainError, domain)

#undef NNSPEC_DEFINE_ERROR

}  // namespace nnspec
