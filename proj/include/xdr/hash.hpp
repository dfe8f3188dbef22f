#pragma once

#include <cstdint>
#include <cstddef>
#include <string>
#include <vector>

namespace xdr {

// FNV-1a, 64-bit. Used for content fingerprints in run manifests.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t fnv1a64(const std::vector<double>& v) {
  return fnv1a64(v.data(), v.size() * sizeof(double));
}

inline std::string hex64(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

}  // namespace xdr
