#pragma once

#include <stdexcept>
#include <string>

namespace acd {

// Root of every error thrown by this library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };
struct ParseError : Error { using Error::Error; };
struct ValidationError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct SamplingError : Error { using Error::Error; };
struct LookupError : Error { using Error::Error; };

}  // namespace acd
