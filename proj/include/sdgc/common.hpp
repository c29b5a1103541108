#pragma once

#include <cstdint>
#include <stdexcept>
#include <sstream>
#include <string>

namespace sdgc {

// Error taxonomy maps onto CLI exit codes: DataError -> 2, NumericError -> 3,
// anything else that escapes -> 1.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_into(std::ostringstream& os, A&& a, Rest&&... rest) {
  os << a;
  format_into(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  detail::format_into(os, std::forward<Args>(args)...);
  return os.str();
}

// FNV-1a, used for config digests and parameter hashing.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a(s.data(), s.size(), seed);
}

}  // namespace sdgc
