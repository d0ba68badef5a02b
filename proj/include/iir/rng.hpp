#pragma once

#include <cstdint>

#include "iir/tensor.hpp"

namespace iir {

// Counter-based generator: the n-th 64-bit draw is splitmix64(key + n * golden),
// so any stream position can be reached without replaying earlier draws and
// two streams with different keys never share state. The integer stream is
// bit-identical on every platform; normals go through Box-Muller and
// therefore also depend on the host libm's log/cos.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  // Independent child stream; the parent's position is untouched.
  Rng fork(std::uint64_t stream) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  Tensor normal_tensor(const Shape& shape, double stddev = 1.0);

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  Rng(std::uint64_t key, std::uint64_t counter, bool) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace iir
