#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "anet/autodiff.hpp"

namespace anet {

struct AmsgradOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct MomentState {
  Tensor<Scalar> m, v, vmax;
  std::int64_t step = 0;
};

/// One Amsgrad update from p.grad. Parameters that are frozen or received no
/// gradient since the last zero_grad() are left alone, moments included.
template <typename Scalar>
void amsgrad_step(Parameter<Scalar>& p, MomentState<Scalar>& state, double lr, const AmsgradOptions& options);

template <typename Scalar>
class Amsgrad {
 public:
  explicit Amsgrad(AmsgradOptions options = {}) : options_(options) {}

  void step(const std::vector<Parameter<Scalar>*>& params, double lr);

  const AmsgradOptions& options() const { return options_; }
  std::map<std::string, MomentState<Scalar>>& state() { return state_; }
  const std::map<std::string, MomentState<Scalar>>& state() const { return state_; }

 private:
  AmsgradOptions options_;
  std::map<std::string, MomentState<Scalar>> state_;
};

extern template class Amsgrad<float>;
extern template class Amsgrad<double>;

}  // namespace anet
