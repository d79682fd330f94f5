#include "osediff/errors.hpp"

#include <execinfo.h>

#include <array>
#include <cstdlib>
#include <sstream>

namespace osediff {

namespace {

std::string capture_backtrace() {
  std::array<void*, 48> frames{};
  const int depth = ::backtrace(frames.data(), static_cast<int>(frames.size()));
  char** symbols = ::backtrace_symbols(frames.data(), depth);
  if (symbols == nullptr) {
    return {};
  }
  std::ostringstream out;
  // Skip this helper and the Error constructor.
  for (int i = 2; i < depth; ++i) {
    out << "  #" << (i - 2) << ' ' << symbols[i] << '\n';
  }
  std::free(symbols);
  return out.str();
}

}  // namespace

Error::Error(const std::string& message)
    : std::runtime_error(message), backtrace_(capture_backtrace()) {}

}  // namespace osediff
