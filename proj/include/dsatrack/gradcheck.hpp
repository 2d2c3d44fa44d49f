#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dsatrack/autograd.hpp"
#include "dsatrack/tensor.hpp"

namespace dsa {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
/// Throws NumericalError if any evaluation is non-finite.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

/// max|a - n| / max(max|a|, max|n|), the worst coordinate error relative to the
/// gradient's overall magnitude. Returns 0 when both are exactly zero.
double relative_error(const Tensor& analytic, const Tensor& numeric);

/// Builds a scalar graph on a fresh tape from differentiable inputs.
using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

/// Compares backward() against finite differences for every input tensor.
GradCheckResult check_gradients(const std::string& name, const GraphFn& graph, const std::vector<Tensor>& inputs,
                                double h = 1e-5);

}  // namespace dsa
