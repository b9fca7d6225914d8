#pragma once

// Counter-based random streams. Every random quantity in the library is drawn
// from a stream keyed by (seed, purpose label, index), so the value a task sees
// never depends on scheduling order.

#include <cstdint>
#include <limits>
#include <string_view>

namespace icscope {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// FNV-1a, 64 bit.
constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Derives a child key. Distinct (label, index) pairs give unrelated streams.
constexpr std::uint64_t derive_key(std::uint64_t seed, std::string_view label,
                                   std::uint64_t index = 0) noexcept {
  return splitmix64(splitmix64(seed ^ fnv1a64(label)) + splitmix64(index ^ 0xA0761D6478BD642FULL));
}

/// UniformRandomBitGenerator whose i-th output is a pure function of (key, i).
class CounterRng {
 public:
  using result_type = std::uint64_t;

  constexpr explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}
  CounterRng(std::uint64_t seed, std::string_view label, std::uint64_t index = 0) noexcept
      : key_(derive_key(seed, label, index)) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  constexpr result_type operator()() noexcept {
    return splitmix64(key_ + 0x9E3779B97F4A7C15ULL * (counter_++));
  }

  /// Uniform double in [0, 1) with 53 random bits.
  constexpr double uniform() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  constexpr std::uint64_t key() const noexcept { return key_; }
  constexpr std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace icscope
