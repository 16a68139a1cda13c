#pragma once

#include <stdexcept>
#include <string>

namespace sarseg {

// Every error carries a short machine-readable category; the CLI prints it
// verbatim and maps it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}
  const std::string& category() const noexcept { return category_; }

  // Validation errors are detected before any side effect.
  virtual bool is_validation() const noexcept { return true; }

 private:
  std::string category_;
};

#define SARSEG_DEFINE_ERROR(Name, tag, validation)                      \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(tag, what) {}        \
    bool is_validation() const noexcept override { return validation; } \
  };

SARSEG_DEFINE_ERROR(ArgumentError, "argument", true)
SARSEG_DEFINE_ERROR(ConfigError, "config", true)
SARSEG_DEFINE_ERROR(ShapeError, "shape", true)
SARSEG_DEFINE_ERROR(DataError, "data", true)
SARSEG_DEFINE_ERROR(EmptyInputError, "empty-input", true)
SARSEG_DEFINE_ERROR(DegenerateInputError, "degenerate-input", true)
SARSEG_DEFINE_ERROR(FormatError, "format", true)
SARSEG_DEFINE_ERROR(VersionError, "version", true)
SARSEG_DEFINE_ERROR(ManifestError, "manifest", true)
SARSEG_DEFINE_ERROR(IntegrityError, "integrity", true)
SARSEG_DEFINE_ERROR(ContractError, "contract", false)
SARSEG_DEFINE_ERROR(NumericError, "numeric", false)
SARSEG_DEFINE_ERROR(InternalError, "internal", false)
SARSEG_DEFINE_ERROR(IoError, "io", false)

#undef SARSEG_DEFINE_ERROR

}  // namespace sarseg
