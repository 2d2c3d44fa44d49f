#include "dsatrack/rng.hpp"

#include <cmath>
#include <numbers>

namespace dsa {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t RngStream::next_u64() {
  const std::uint64_t key = splitmix64(seed_ ^ 0x5851f42d4c957f2dULL);
  return splitmix64(key + (counter_++) * 0x9e3779b97f4a7c15ULL);
}

double RngStream::uniform() {
  // 53 random mantissa bits, shifted by half an ulp to stay off 0.
  const std::uint64_t bits = next_u64() >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

double RngStream::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t RngStream::uniform_int(std::int64_t lo, std::int64_t hi_inclusive) {
  if (hi_inclusive < lo) throw ValidationError("uniform_int: empty range");
  const auto span = static_cast<std::uint64_t>(hi_inclusive - lo) + 1;
  return lo + static_cast<std::int64_t>(next_u64() % span);
}

double RngStream::gumbel() { return -std::log(-std::log(uniform())); }

RngStream RngStream::fork() { return RngStream(next_u64()); }

Tensor RngStream::normal_tensor(Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * normal();
  return t;
}

Tensor RngStream::gumbel_tensor(Shape shape) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = gumbel();
  return t;
}

}  // namespace dsa
