#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace prototransfer {

using Rng = std::mt19937_64;

/// Stream domains keep seeds drawn for different purposes apart.
enum class Stream : std::uint64_t {
  Init = 1,
  Batch = 2,
  Augment = 3,
  Episode = 4,
  FineTune = 5,
  Synthetic = 6,
  Restrict = 7,
  Supervised = 8,
};

/// Seed for the stream addressed by (master, domain, counters...). The value
/// depends only on its arguments, so streams can be created in any order and
/// on any thread.
inline std::uint64_t derive_seed(std::uint64_t master, Stream domain,
                                 std::initializer_list<std::uint64_t> counters = {}) {
  std::vector<std::uint32_t> words;
  words.reserve(4 + 2 * counters.size());
  auto push = [&](std::uint64_t v) {
    words.push_back(static_cast<std::uint32_t>(v));
    words.push_back(static_cast<std::uint32_t>(v >> 32));
  };
  push(master);
  push(static_cast<std::uint64_t>(domain));
  for (std::uint64_t c : counters) push(c);
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
}

inline Rng make_stream(std::uint64_t master, Stream domain,
                       std::initializer_list<std::uint64_t> counters = {}) {
  return Rng(derive_seed(master, domain, counters));
}

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline bool bernoulli(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
}

}  // namespace prototransfer
