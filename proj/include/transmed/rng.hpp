#pragma once

#include <array>
#include <cstdint>
#include <limits>

namespace transmed::rng {

using Counter = std::array<std::uint64_t, 4>;
using Key = std::array<std::uint64_t, 2>;

/// Philox4x64 with 10 rounds: a keyed bijection on 256-bit counters.
Counter philox4x64(Counter ctr, Key key) noexcept;

/// 53-bit uniform in [0, 1).
inline double to_unit(std::uint64_t x) noexcept {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

/// Sequential stream over one key. Every (key, position) pair maps to a fixed
/// value, so streams keyed by (seed, replicate) are independent of scheduling.
class Stream {
 public:
  using result_type = std::uint64_t;

  Stream(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t start_block = 0) noexcept
      : key_{seed, stream_id}, ctr_{start_block, 0, 0, 0} {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    if (pos_ == 4) {
      block_ = philox4x64(ctr_, key_);
      if (++ctr_[0] == 0) ++ctr_[1];
      pos_ = 0;
    }
    return block_[pos_++];
  }

  double uniform() noexcept { return to_unit((*this)()); }

  /// Unbiased integer in [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound) noexcept {
    const std::uint64_t limit = max() - max() % bound;
    std::uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % bound;
  }

 private:
  Key key_;
  Counter ctr_;
  Counter block_{};
  int pos_ = 4;
};

}  // namespace transmed::rng
