#pragma once

#include <cstdint>
#include <ios>
#include <ostream>
#include <string_view>

namespace levydg {

inline constexpr const char* kVersion = "0.1.0";

// FNV-1a; stable across platforms and runs, unlike std::hash.
inline std::uint64_t config_hash(std::string_view canonical) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// First line of every output file. `canonical` lists every setting that
// affects the numbers and is echoed after the hash.
inline void write_provenance(std::ostream& os, std::string_view canonical, std::uint64_t seed) {
  os << "# levydg " << kVersion << " config_hash=" << std::hex << config_hash(canonical) << std::dec
     << " seed=" << seed << " config: " << canonical << '\n';
}

}  // namespace levydg
