#pragma once

#include <stdexcept>
#include <string>

namespace eccdet {

enum class ErrorCode {
  kConfig,
  kParse,
  kIo,
  kShape,
  kCheckpoint,
  kMissingId,
  kNonFinite,
  kUndefined,
};

const char* error_code_name(ErrorCode code);

// All library failures are reported through this type; the CLI turns it into
// an "ERROR <code> <message>" line.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace eccdet
