#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mmt {

using Token = std::string;
using TokenSeq = std::vector<Token>;
using Rng = std::mt19937_64;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Raised when a metric has no defined value (e.g. no determinate references).
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Per-stage seed derivation: every random stream in the toolkit is
/// derive_seed(global_seed, "<stage name>").
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view stage) {
  return splitmix64(base ^ splitmix64(fnv1a64(stage)));
}

inline Rng make_rng(std::uint64_t base, std::string_view stage) {
  return Rng(derive_seed(base, stage));
}

}  // namespace mmt
