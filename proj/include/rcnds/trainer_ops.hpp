#pragma once

#include "rcnds/error.hpp"
#include "rcnds/tensor.hpp"

namespace rcnds {

// Classical momentum SGD with optional L2 weight decay:
//   v <- momentum * v - lr * (g + wd * w)
//   w <- w + v
inline void sgd_step(Tensor& weights, const Tensor& grads, Tensor& velocity,
                     double lr, double momentum, double weight_decay) {
  if (!weights.same_shape(grads) || !weights.same_shape(velocity)) {
    throw ShapeError("sgd_step: weights " + Tensor::shape_str(weights.shape) +
                     ", grads " + Tensor::shape_str(grads.shape) +
                     ", velocity " + Tensor::shape_str(velocity.shape) +
                     " must all match");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double g = grads.values[i] + weight_decay * weights.values[i];
    velocity.values[i] = momentum * velocity.values[i] - lr * g;
    weights.values[i] += velocity.values[i];
  }
}

} // namespace rcnds
