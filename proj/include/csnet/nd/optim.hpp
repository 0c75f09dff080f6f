#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "csnet/nd/tensor.hpp"

namespace csnet::nd {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  // false: L2 term added to the gradient; true: AdamW-style decay of weights.
  bool decoupled = false;
};

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::int64_t step = 0;
};

template <typename T>
class Adam {
 public:
  Adam(AdamConfig cfg, std::vector<Parameter<T>*> params);

  // Updates trainable parameters from their accumulated gradients.
  void step();
  void zero_grad();

  const AdamConfig& config() const { return cfg_; }
  AdamConfig& config() { return cfg_; }
  const AdamState<T>& state() const { return state_; }
  // Throws ShapeError when moments do not match the parameters.
  void set_state(AdamState<T> s);
  const std::vector<Parameter<T>*>& params() const { return params_; }

 private:
  AdamConfig cfg_;
  std::vector<Parameter<T>*> params_;
  AdamState<T> state_;
};

// Uniform in +-sqrt(6 / fan_in).
template <typename T>
Tensor<T> kaiming_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& rng);
template <typename T>
Tensor<T> uniform_bias(std::vector<int> shape, int fan_in, std::mt19937_64& rng);

}  // namespace csnet::nd
