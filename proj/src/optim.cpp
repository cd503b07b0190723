#include "anet/optim.hpp"

#include <cmath>

namespace anet {

template <typename Scalar>
void amsgrad_step(Parameter<Scalar>& p, MomentState<Scalar>& s, double lr, const AmsgradOptions& o) {
  if (!p.trainable || !p.has_grad) return;
  require_shape(p.grad.shape(), p.value.shape(), p.name.c_str());
  if (s.m.empty()) {
    s.m = Tensor<Scalar>::zeros(p.value.shape());
    s.v = Tensor<Scalar>::zeros(p.value.shape());
    s.vmax = Tensor<Scalar>::zeros(p.value.shape());
  }
  ++s.step;
  const auto b1 = static_cast<Scalar>(o.beta1), b2 = static_cast<Scalar>(o.beta2);
  const double t = static_cast<double>(s.step);
  const auto step_size = static_cast<Scalar>(lr / (1.0 - std::pow(o.beta1, t)));
  const auto bias2 = static_cast<Scalar>(std::sqrt(1.0 - std::pow(o.beta2, t)));
  const auto eps = static_cast<Scalar>(o.eps);
  auto g = p.grad.vec().array();
  auto m = s.m.vec().array();
  auto v = s.v.vec().array();
  auto vmax = s.vmax.vec().array();
  m = b1 * m + (Scalar(1) - b1) * g;
  v = b2 * v + (Scalar(1) - b2) * g * g;
  vmax = vmax.max(v);
  p.value.vec().array() -= step_size * m / (vmax.sqrt() / bias2 + eps);
}

template <typename Scalar>
void Amsgrad<Scalar>::step(const std::vector<Parameter<Scalar>*>& params, double lr) {
  for (Parameter<Scalar>* p : params) {
    if (!p->trainable || !p->has_grad) continue;
    amsgrad_step(*p, state_[p->name], lr, options_);
  }
}

template void amsgrad_step(Parameter<float>&, MomentState<float>&, double, const AmsgradOptions&);
template void amsgrad_step(Parameter<double>&, MomentState<double>&, double, const AmsgradOptions&);
template class Amsgrad<float>;
template class Amsgrad<double>;

}  // namespace anet
