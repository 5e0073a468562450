#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace ptk {

// Contract violations throw; callers that can recover catch std::runtime_error.
#define PTK_CHECK(cond, msg)                                  \
  do {                                                        \
    if (!(cond)) {                                            \
      std::ostringstream oss__;                               \
      oss__ << "check failed: " << msg;                       \
      throw std::runtime_error(oss__.str());                  \
    }                                                         \
  } while (0)

#define PTK_FAIL(msg)                                         \
  do {                                                        \
    std::ostringstream oss__;                                 \
    oss__ << msg;                                             \
    throw std::runtime_error(oss__.str());                    \
  } while (0)

using i64 = std::int64_t;
using u64 = std::uint64_t;
using u32 = std::uint32_t;
using u8 = std::uint8_t;

// FNV-1a, used for architecture hashes and seed derivation.
inline u64 fnv1a(const void* data, std::size_t n, u64 h = 1469598103934665603ull) {
  const u8* p = static_cast<const u8*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline u64 fnv1a(const std::string& s, u64 h = 1469598103934665603ull) {
  return fnv1a(s.data(), s.size(), h);
}

// Without this overload a string literal would bind to the (void*, size)
// overload above and read `h` as the length.
inline u64 fnv1a(const char* s, u64 h = 1469598103934665603ull) {
  return fnv1a(std::string(s), h);
}

}  // namespace ptk
