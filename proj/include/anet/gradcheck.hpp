#pragma once

#include <functional>
#include <string>
#include <vector>

#include "anet/autodiff.hpp"

namespace anet {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  /// Gradients whose magnitude is below this are compared absolutely; the
  /// relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-4;
};

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t elements_checked = 0;
  /// Offending location of the worst element: input (or parameter) index and
  /// flat element index within it.
  std::size_t worst_input = 0;
  Index worst_element = 0;
  std::string worst_label;
  bool passed = true;

  std::string summary() const;
};

double relative_error(double analytic, double numeric, double floor);

/// Builds a scalar from the given leaves on a fresh graph.
using LeafFunction = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

/// Central differences (f(x+h) - f(x-h)) / 2h against reverse-mode gradients
/// for every element of every input.
GradCheckReport grad_check(const std::string& name, const LeafFunction& fn,
                           std::vector<Tensor<double>> inputs, const GradCheckOptions& options);

/// Same check against model parameters perturbed in place. `fn` must be a
/// deterministic function of the parameter values.
using ParamFunction = std::function<Var<double>(Graph<double>&)>;
GradCheckReport grad_check_parameters(const std::string& name, const ParamFunction& fn,
                                      const std::vector<Parameter<double>*>& params,
                                      const GradCheckOptions& options);

}  // namespace anet
