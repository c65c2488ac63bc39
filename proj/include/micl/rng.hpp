#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace micl {

// splitmix64: cheap, well-mixed 64-bit stream used to derive sub-seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  return splitmix64(s);
}

// Purpose tags for the per-phase sub-seed discipline. Derivation depends
// only on (master, phase, purpose), never on the strategy, so ablations
// stay paired across strategies.
enum class SeedPurpose : std::uint64_t {
  kModelInit = 1,
  kHeadInit = 2,
  kExemplarInit = 3,
  kRandomSelect = 4,
  kDiscard = 5,
  kAdjustSplit = 6,
  kDataSample = 7,
  kDataPartition = 8,
};

inline std::uint64_t subseed(std::uint64_t master, int phase, SeedPurpose purpose,
                             std::uint64_t extra = 0) {
  std::uint64_t s = mix_seed(master, static_cast<std::uint64_t>(phase) * 0x100000001B3ULL);
  s = mix_seed(s, static_cast<std::uint64_t>(purpose));
  if (extra != 0) s = mix_seed(s, extra);
  return s;
}

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

// m distinct indices from [0, n), uniform without replacement, ascending order.
inline std::vector<long> sample_without_replacement(long n, long m, std::uint64_t seed) {
  std::vector<long> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0L);
  auto rng = make_rng(seed);
  for (long i = 0; i < m; ++i) {
    std::uniform_int_distribution<long> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  idx.resize(static_cast<std::size_t>(m));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<long> shuffled_indices(long n, std::uint64_t seed) {
  std::vector<long> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0L);
  auto rng = make_rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace micl
