#pragma once

#include <stdexcept>
#include <string>

namespace pimap {

// Base of every error the library throws. Subclasses map onto the failure
// classes callers are expected to distinguish (CLI exit codes, HTTP status).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class DomainError : public Error { using Error::Error; };
class DecodeError : public Error { using Error::Error; };
class VocabularyError : public Error { using Error::Error; };
class UsageError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class CorruptFileError : public Error { using Error::Error; };
class VersionError : public Error { using Error::Error; };
class CapacityError : public Error { using Error::Error; };
class DivergenceError : public Error { using Error::Error; };
class NotFoundError : public Error { using Error::Error; };
class ExternalToolError : public Error { using Error::Error; };

}  // namespace pimap
