#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>

namespace advlab {

namespace detail {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

}  // namespace detail

/// Counter-based random stream keyed by (master_seed, stream_id).
///
/// The k-th draw is a pure function of the key and k, so streams never share
/// state and can be derived for any task without coordination. Copies are
/// independent cursors over the same sequence.
class RngStream {
 public:
  RngStream(std::uint64_t master_seed, std::uint64_t stream_id)
      : seed_(master_seed),
        stream_(stream_id),
        key_(detail::mix64(master_seed ^ detail::mix64(stream_id + 0x632BE59BD9B4E019ULL))) {}

  std::uint64_t master_seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }
  std::uint64_t position() const { return counter_; }

  /// Child stream identified by `tag`; independent of how far this one advanced.
  RngStream derive(std::uint64_t tag) const {
    return RngStream(seed_, detail::mix64(stream_ ^ detail::mix64(tag + detail::kGolden)));
  }

  template <class... Tags>
  RngStream derive(std::uint64_t tag, Tags... rest) const {
    return derive(tag).derive(static_cast<std::uint64_t>(rest)...);
  }

  std::uint64_t next_u64() {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::kGolden);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  /// Standard normal via the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Well-known stream ids so unrelated consumers of one master seed never collide.
namespace streams {
inline constexpr std::uint64_t kSpectral = 0x5350454354ULL;
inline constexpr std::uint64_t kInit = 0x494E4954ULL;
inline constexpr std::uint64_t kShuffle = 0x53485546ULL;
inline constexpr std::uint64_t kAttack = 0x41545441ULL;
inline constexpr std::uint64_t kEval = 0x4556414CULL;
inline constexpr std::uint64_t kData = 0x44415441ULL;
inline constexpr std::uint64_t kSelect = 0x53454C45ULL;
inline constexpr std::uint64_t kTheory = 0x5448454FULL;
inline constexpr std::uint64_t kCache = 0x43414348ULL;
}  // namespace streams

}  // namespace advlab
