#pragma once

#include <cstdint>
#include <random>

namespace ibgc {

using Rng = std::mt19937_64;

/// Independent random streams derived from one experiment seed.
enum class Stream : std::uint32_t { data = 1, init = 2, augment = 3, attack = 4, corruption = 5, mixing = 6, test = 7 };

/// Deterministic generator for (seed, stream, counter). Distinct counters give
/// independent sequences, e.g. one per sample index.
inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t counter = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(counter),
                    static_cast<std::uint32_t>(counter >> 32)};
  return Rng(seq);
}

}  // namespace ibgc
