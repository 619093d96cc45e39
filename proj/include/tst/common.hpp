#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tst {

inline constexpr const char* kVersion = "0.1.0";

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad configuration or usage (CLI exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

// Dataset content violations (CLI exit code 2).
struct DataError : Error {
  using Error::Error;
};

// Tensor shape contract violations.
struct DimensionError : Error {
  using Error::Error;
};

// Checkpoint file problems.
struct FormatError : Error {
  using Error::Error;
};
struct VersionError : Error {
  using Error::Error;
};
struct CorruptionError : Error {
  using Error::Error;
};

// SplitMix64 finalizer; derives independent RNG streams from (seed, stream).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace tst
