#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace lmsub {

// Lowercase hex SHA-256 of the input bytes.
std::string sha256_hex(std::string_view data);

// First 64 bits of SHA-256, big-endian. Stable across platforms; used to
// derive seeds and identifiers from text keys.
std::uint64_t hash64(std::string_view data);

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// Uniform double in [0, 1) from a 64-bit value (53 high bits).
double unit_interval(std::uint64_t x);

}  // namespace lmsub
