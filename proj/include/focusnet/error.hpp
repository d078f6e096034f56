#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace focusnet {

// Error categories. The CLI prints them as the first field of its one-line
// error message, so the spellings are part of the external interface.
enum class Errc {
  shape,     // tensor shape / channel / divisibility mismatch
  config,    // invalid model, loss, train or data configuration
  io,        // file missing, unreadable or unwritable
  format,    // malformed FNT1 / JSON payload
  numeric,   // non-finite values where finite ones are required
  argument,  // invalid argument value (range, enum spelling, ...)
  check,     // a verification (gradcheck) failed
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::shape: return "shape";
    case Errc::config: return "config";
    case Errc::io: return "io";
    case Errc::format: return "format";
    case Errc::numeric: return "numeric";
    case Errc::argument: return "argument";
    case Errc::check: return "check";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, Errc code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace focusnet
