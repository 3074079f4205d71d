#pragma once

#include <cstdint>
#include <random>

#include "amdet/tensor.hpp"

namespace amdet::testing {

inline Tensor randn(Shape shape, std::uint64_t seed, double std = 1.0, bool requires_grad = true) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

}  // namespace amdet::testing
