#include "dsatrack/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dsa {

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ValidationError("finite_difference_gradient: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("finite_difference_gradient: non-finite evaluation at coordinate " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double relative_error(const Tensor& analytic, const Tensor& numeric) {
  const double denom = std::max(max_abs(analytic), max_abs(numeric));
  if (denom == 0.0) return 0.0;
  return max_abs_diff(analytic, numeric) / denom;
}

GradCheckResult check_gradients(const std::string& name, const GraphFn& graph, const std::vector<Tensor>& inputs,
                                double h) {
  GradCheckResult result{name, 0.0, 0};
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    Var out = graph(tape, vars);
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(tape.grad(v));
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const Tensor& probe) {
      Tape tape;
      std::vector<Var> vars;
      for (std::size_t j = 0; j < inputs.size(); ++j) vars.push_back(tape.leaf(j == k ? probe : inputs[j], false));
      return graph(tape, vars).value().item();
    };
    const Tensor numeric = finite_difference_gradient(f, inputs[k], h);
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[k], numeric));
    result.coordinates += inputs[k].size();
  }
  return result;
}

}  // namespace dsa
