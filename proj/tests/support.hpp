#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "undesirable/undesirable.hpp"

namespace test {

using namespace undesirable;

inline Tensor random_tensor(std::uint64_t seed, const Shape& shape, double lo = -1.0,
                            double hi = 1.0) {
  CounterRng rng(seed, 0x7E57);
  return detail::random_tensor(rng, shape, lo, hi);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// 3-class toy model on 4x4x3 inputs with the given class weights.
inline ToyLinearModel toy3(Tensor w0, Tensor w1, Tensor w2,
                           std::vector<double> bias = {0.0, 0.0, 0.0}) {
  return ToyLinearModel({std::move(w0), std::move(w1), std::move(w2)}, std::move(bias));
}

}  // namespace test
