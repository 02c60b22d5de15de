#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace recx {

using ItemId = std::int32_t;
using Sequence = std::vector<ItemId>;
using Rng = std::mt19937_64;

// Error categories map onto distinct CLI exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct BackendError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Independent stream for (seed, stream index). Used for per-user generation so
// results do not depend on the number of workers.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t salt = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  return Rng(seq);
}

// Uniform integer in [0, n). Portable across standard libraries, unlike
// std::uniform_int_distribution, so seeded artifacts stay byte-stable.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("uniform_index: empty range");
  const std::uint64_t limit = Rng::max() - (Rng::max() % n);
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % n;
}

// Uniform real in [0, 1) with 53 random bits.
inline double uniform_real(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace recx
