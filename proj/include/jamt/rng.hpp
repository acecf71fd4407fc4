#pragma once

#include <cmath>
#include <cstdint>

namespace jamt {

// Counter-based generator: every draw hashes (seed, stream, counter), so a
// sequence is reproducible across platforms and thread counts and the full
// state serializes as three integers.
class RngStream {
 public:
  RngStream() = default;
  RngStream(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

  uint64_t next_u64() {
    uint64_t h = mix(seed_ + 0x9e3779b97f4a7c15ULL * (stream_ + 1));
    return mix(h ^ (counter_++ + 0x9e3779b97f4a7c15ULL));
  }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // uniform in (0, 1]
  double next_double_open() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

  // standard normal; consumes exactly two draws per call
  double next_normal() {
    double u1 = next_double_open();
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

  bool next_bernoulli(double p) { return next_double() < p; }

  // Derives an independent stream; the parent state is not advanced.
  RngStream fork(uint64_t substream) const {
    RngStream r(seed_, mix(stream_ ^ (0xd1b54a32d192ed03ULL + substream)));
    return r;
  }

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }
  uint64_t counter() const { return counter_; }
  void set_counter(uint64_t c) { counter_ = c; }

 private:
  static uint64_t mix(uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebULL;
    x ^= x >> 31;
    return x;
  }

  uint64_t seed_ = 0;
  uint64_t stream_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace jamt
