#pragma once

#include <cstddef>
#include <vector>

#include "amdet/tensor.hpp"

namespace amdet {

// Adam with bias correction. Parameters are leaves updated in place.
class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);

  // Applies one update from the accumulated gradients, then clears them.
  // Parameters without a gradient are left untouched.
  void step();
  std::size_t steps_taken() const { return t_; }
  double lr() const { return lr_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

}  // namespace amdet
