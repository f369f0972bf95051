#pragma once

#include <stdexcept>
#include <string>

namespace dpvil {

// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  Config,     // bad configuration or arguments
  Data,       // missing, malformed or corrupt inputs
  Numerical,  // non-finite values, factorization or convergence failures
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define DPVIL_DEFINE_ERROR(Name, Kind)                      \
  class Name : public Error {                                \
   public:                                                   \
    explicit Name(const std::string& what)                   \
        : Error(ErrorKind::Kind, #Name ": " + what) {}       \
  }

DPVIL_DEFINE_ERROR(ConfigError, Config);
DPVIL_DEFINE_ERROR(ShapeMismatch, Data);
DPVIL_DEFINE_ERROR(EmptyDataset, Data);
DPVIL_DEFINE_ERROR(IoError, Data);
DPVIL_DEFINE_ERROR(VersionMismatch, Data);
DPVIL_DEFINE_ERROR(ChecksumMismatch, Data);
DPVIL_DEFINE_ERROR(BandEmpty, Data);
DPVIL_DEFINE_ERROR(DomainError, Numerical);
DPVIL_DEFINE_ERROR(NotPositiveDefinite, Numerical);
DPVIL_DEFINE_ERROR(NoConvergence, Numerical);
DPVIL_DEFINE_ERROR(NonFinite, Numerical);
DPVIL_DEFINE_ERROR(NumericalUnderflow, Numerical);
DPVIL_DEFINE_ERROR(DegenerateSplit, Numerical);
DPVIL_DEFINE_ERROR(UnstableIntegration, Numerical);

#undef DPVIL_DEFINE_ERROR

}  // namespace dpvil
