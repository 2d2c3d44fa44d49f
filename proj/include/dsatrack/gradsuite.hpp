#pragma once

#include <cstdint>
#include <vector>

#include "dsatrack/gradcheck.hpp"

namespace dsa {

/// Finite-difference checks of every differentiable building block on small
/// random instances (N_x <= 16, N_z <= 8, l <= 3), binary64, h = 1e-5.
std::vector<GradCheckResult> gradient_suite(std::uint64_t seed);

}  // namespace dsa
