#include "anet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace anet {

std::string GradCheckReport::summary() const {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-28s max_rel=%.3e max_abs=%.3e n=%zu %s", name.c_str(),
                max_rel_error, max_abs_error, elements_checked, passed ? "ok" : "FAIL");
  std::string s = buf;
  if (!passed) s += " (worst at " + worst_label + "[" + std::to_string(worst_element) + "])";
  return s;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

void record(GradCheckReport& report, double analytic, double numeric, const GradCheckOptions& options,
            std::size_t input, Index element, const std::string& label) {
  const double rel = relative_error(analytic, numeric, options.floor);
  report.max_abs_error = std::max(report.max_abs_error, std::abs(analytic - numeric));
  ++report.elements_checked;
  if (rel > report.max_rel_error || report.elements_checked == 1) {
    report.max_rel_error = std::max(rel, report.max_rel_error);
    report.worst_input = input;
    report.worst_element = element;
    report.worst_label = label;
  }
}

}  // namespace

GradCheckReport grad_check(const std::string& name, const LeafFunction& fn,
                           std::vector<Tensor<double>> inputs, const GradCheckOptions& options) {
  GradCheckReport report;
  report.name = name;

  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(g.leaf(t, true));
    Var<double> out = fn(g, leaves);
    g.backward(out);
    for (const auto& leaf : leaves) {
      analytic.push_back(g.has_grad(leaf.id()) ? leaf.grad() : Tensor<double>::zeros(leaf.shape()));
    }
  }

  auto evaluate = [&]() {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (const auto& t : inputs) leaves.push_back(g.leaf(t, true));
    return fn(g, leaves).value().item();
  };

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Index e = 0; e < inputs[i].size(); ++e) {
      const double saved = inputs[i][e];
      inputs[i][e] = saved + options.step;
      const double plus = evaluate();
      inputs[i][e] = saved - options.step;
      const double minus = evaluate();
      inputs[i][e] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      record(report, analytic[i][e], numeric, options, i, e, "input" + std::to_string(i));
    }
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

GradCheckReport grad_check_parameters(const std::string& name, const ParamFunction& fn,
                                      const std::vector<Parameter<double>*>& params,
                                      const GradCheckOptions& options) {
  GradCheckReport report;
  report.name = name;
  for (Parameter<double>* p : params) p->zero_grad();
  {
    Graph<double> g;
    Var<double> out = fn(g);
    g.backward(out);
  }
  std::vector<Tensor<double>> analytic;
  for (Parameter<double>* p : params) analytic.push_back(p->grad);

  auto evaluate = [&]() {
    Graph<double> g;
    return fn(g).value().item();
  };

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<double>& value = params[i]->value;
    for (Index e = 0; e < value.size(); ++e) {
      const double saved = value[e];
      value[e] = saved + options.step;
      const double plus = evaluate();
      value[e] = saved - options.step;
      const double minus = evaluate();
      value[e] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      record(report, analytic[i][e], numeric, options, i, e, params[i]->name);
    }
  }
  report.passed = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace anet
