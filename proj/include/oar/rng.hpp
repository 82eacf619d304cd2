#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace oar {

/// Counter-based deterministic random stream. Draws are a pure function of
/// (seed, stream id, counter), so identical keys reproduce identical sequences
/// on any platform and substreams derived from distinct keys never interfere.
class SeededStream {
 public:
  SeededStream() : SeededStream(0, 0) {}
  SeededStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_(stream_id), counter_(0) {
    base_ = mix(seed_ + kGolden * mix(stream_ + kGolden));
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

  /// Independent child stream keyed by this stream's id and `child`.
  SeededStream derive(std::uint64_t child) const {
    return SeededStream(seed_, mix(stream_ + kGolden * mix(child + kGolden)));
  }
  SeededStream derive(std::uint64_t a, std::uint64_t b) const {
    return derive(a).derive(b);
  }

  std::uint64_t next_u64() { return mix(base_ + kGolden * ++counter_); }

  /// Uniform in [0, 1).
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform in (0, 1]; safe as a log argument.
  double next_double_open() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  /// Unbiased integer in [0, n) via rejection.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal, Box-Muller. Always consumes two draws (no cached spare).
  double next_gaussian() {
    const double u1 = next_double_open();
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Standard Gumbel(0, 1) noise.
  double next_gumbel() { return -std::log(-std::log(next_double_open())); }

  /// Fisher-Yates shuffle, unbiased.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[next_below(i)]);
    }
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

  // splitmix64 finalizer
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_;
  std::uint64_t base_;
};

}  // namespace oar
