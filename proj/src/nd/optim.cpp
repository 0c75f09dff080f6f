#include "csnet/nd/optim.hpp"

#include <cmath>

#include "csnet/error.hpp"

namespace csnet::nd {

template <typename T>
Adam<T>::Adam(AdamConfig cfg, std::vector<Parameter<T>*> params) : cfg_(cfg), params_(std::move(params)) {
  if (!(cfg_.lr > 0)) throw UsageError("adam: learning rate must be positive");
  for (auto* p : params_) {
    state_.m.emplace_back(p->value.shape, T(0));
    state_.v.emplace_back(p->value.shape, T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  ++state_.step;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(state_.step));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(state_.step));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter<T>& p = *params_[k];
    if (!p.trainable) continue;
    require_same_shape(p.grad.shape, p.value.shape, "adam");
    auto& m = state_.m[k].data;
    auto& v = state_.v[k].data;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      double g = p.grad.data[i];
      double w = p.value.data[i];
      if (cfg_.decoupled)
        w -= cfg_.lr * cfg_.weight_decay * w;
      else
        g += cfg_.weight_decay * w;
      const double mi = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g;
      const double vi = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      w -= cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
      p.value.data[i] = static_cast<T>(w);
    }
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

template <typename T>
void Adam<T>::set_state(AdamState<T> s) {
  if (s.m.size() != params_.size() || s.v.size() != params_.size())
    throw ShapeError("adam: optimizer state has " + std::to_string(s.m.size()) + " moments for " +
                     std::to_string(params_.size()) + " parameters");
  for (std::size_t k = 0; k < params_.size(); ++k) {
    require_same_shape(s.m[k].shape, params_[k]->value.shape, "adam state");
    require_same_shape(s.v[k].shape, params_[k]->value.shape, "adam state");
  }
  if (s.step < 0) throw ShapeError("adam: negative step count");
  state_ = std::move(s);
}

template <typename T>
Tensor<T> kaiming_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / std::max(fan_in, 1));
  std::uniform_real_distribution<double> d(-bound, bound);
  for (auto& v : t.data) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
Tensor<T> uniform_bias(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(std::max(fan_in, 1));
  std::uniform_real_distribution<double> d(-bound, bound);
  for (auto& v : t.data) v = static_cast<T>(d(rng));
  return t;
}

template class Adam<float>;
template class Adam<double>;
template Tensor<float> kaiming_uniform(std::vector<int>, int, std::mt19937_64&);
template Tensor<double> kaiming_uniform(std::vector<int>, int, std::mt19937_64&);
template Tensor<float> uniform_bias(std::vector<int>, int, std::mt19937_64&);
template Tensor<double> uniform_bias(std::vector<int>, int, std::mt19937_64&);

}  // namespace csnet::nd
