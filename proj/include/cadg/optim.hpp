#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cadg/tensor.hpp"

namespace cadg {

/// SGD with momentum and L2 weight decay folded into the gradient.
struct OptimizerState {
  double learning_rate = 3e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<Buffer> velocity;  // one per registered parameter
};

inline OptimizerState make_optimizer(std::span<const Tensor> params, double learning_rate,
                                     double momentum = 0.9, double weight_decay = 1e-4) {
  OptimizerState state{learning_rate, momentum, weight_decay, {}};
  state.velocity.reserve(params.size());
  for (const auto& p : params) state.velocity.emplace_back(p.size(), 0.0);
  return state;
}

/// v <- momentum*v + (g + weight_decay*p);  p <- p - lr*v
inline void sgd_step(std::span<Tensor> params, OptimizerState& state) {
  if (state.velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_step: optimizer registered " +
                                std::to_string(state.velocity.size()) + " parameters, got " +
                                std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) {
      throw std::invalid_argument("sgd_step: parameter " + std::to_string(i) + " has no gradient");
    }
    auto& v = state.velocity[i];
    if (v.size() != p.size()) {
      throw DimensionError("sgd_step: velocity/parameter size mismatch at " + std::to_string(i));
    }
    auto data = p.data();
    auto grad = p.grad();
    for (std::size_t j = 0; j < data.size(); ++j) {
      v[j] = state.momentum * v[j] + (grad[j] + state.weight_decay * data[j]);
      data[j] -= state.learning_rate * v[j];
    }
  }
}

inline void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace cadg
