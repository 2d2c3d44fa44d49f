#pragma once

#include <cstdint>

#include "dsatrack/tensor.hpp"

namespace dsa {

/// Counter-based splitmix64 stream. The nth draw depends only on (seed, n),
/// so sequences are bitwise reproducible across platforms and runs.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in the open interval (0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi_inclusive);
  /// Standard Gumbel(0, 1) sample: -log(-log(u)).
  double gumbel();

  /// Independent child stream; does not disturb this stream's sequence beyond one draw.
  RngStream fork();

  Tensor normal_tensor(Shape shape, double stddev);
  Tensor gumbel_tensor(Shape shape);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace dsa
