#pragma once

#include <stdexcept>
#include <string>

namespace adl {

// Exit-code classes used by the CLI: 0 success, 1 validation error,
// 2 upstream-artifact error, 3 external-service failure.
enum class ErrorClass {
  validation = 1,
  upstream_artifact = 2,
  external_service = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorClass cls, std::string msg) : std::runtime_error(std::move(msg)), cls_(cls) {}
  ErrorClass error_class() const noexcept { return cls_; }

 private:
  ErrorClass cls_;
};

/// Bad inputs: invalid configs, out-of-range positions, dimension mismatches.
class ValidationError : public Error {
 public:
  explicit ValidationError(std::string msg) : Error(ErrorClass::validation, std::move(msg)) {}
};

/// A pipeline stage asked for an artifact that no prior stage produced.
class UpstreamArtifactError : public Error {
 public:
  explicit UpstreamArtifactError(std::string msg)
      : Error(ErrorClass::upstream_artifact, std::move(msg)) {}
};

/// Remote LLM/embedding provider failed after retries, or a replay fixture is missing.
class ExternalServiceError : public Error {
 public:
  explicit ExternalServiceError(std::string msg)
      : Error(ErrorClass::external_service, std::move(msg)) {}
};

/// Non-finite activations, zero-norm directions, and similar numeric dead ends.
class NumericError : public Error {
 public:
  explicit NumericError(std::string msg) : Error(ErrorClass::validation, std::move(msg)) {}
};

}  // namespace adl
