#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace kpo {

/// Reproducible source of Wiener increments for one trajectory. The pair
/// (base_seed, stream_index) fully determines the sequence; distinct indices
/// seed independent engines through std::seed_seq.
class NoiseStream {
 public:
  NoiseStream(std::uint64_t base_seed, std::uint64_t stream_index)
      : base_seed_(base_seed), stream_index_(stream_index), engine_(make_engine(base_seed, stream_index)) {}

  std::uint64_t base_seed() const { return base_seed_; }
  std::uint64_t stream_index() const { return stream_index_; }

  /// Standard normal draw.
  double gaussian() { return normal_(engine_); }

  /// Wiener increment with variance dt.
  double increment(double dt) { return std::sqrt(dt) * normal_(engine_); }

  /// Uniform integer in [0, n).
  std::uint64_t index_below(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }

  /// Derived stream for a sub-task, independent of this one.
  NoiseStream fork(std::uint64_t label) const {
    return NoiseStream(base_seed_ ^ (0x9E3779B97F4A7C15ULL * (label + 1)), stream_index_);
  }

 private:
  static std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                      0x6b706fu};
    return std::mt19937_64(seq);
  }

  std::uint64_t base_seed_;
  std::uint64_t stream_index_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace kpo
