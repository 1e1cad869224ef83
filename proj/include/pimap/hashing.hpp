#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace pimap {

// 64-bit FNV-1a. Used for config hashes, cache keys and RNG stream names; not
// a cryptographic hash.
constexpr std::uint64_t fnv1a64(std::string_view data,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string to_hex(std::uint64_t v);

inline std::string hash_hex(std::string_view data) { return to_hex(fnv1a64(data)); }

}  // namespace pimap
