#pragma once

#include <cstddef>
#include <vector>

#include "boundless/tensor.hpp"

namespace boundless::num {

/// Adaptive-moment optimizer over a fixed list of parameter tensors.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit Adam(Options options) : opt_(options) {}

  /// Updates params[i] in place from grads[i]. The list must keep the same
  /// shapes across calls.
  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads);

  void set_lr(double lr) { opt_.lr = lr; }
  double lr() const { return opt_.lr; }
  std::size_t steps() const { return t_; }

 private:
  Options opt_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace boundless::num
