#pragma once

#include <cmath>
#include <random>

#include "vaffect/autodiff/tensor.hpp"

namespace vaffect::init {

using Rng = std::mt19937_64;

// Normal(0, stddev) redrawn until within two standard deviations.
template <class T>
Tensor<T> truncated_normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) {
    double x;
    do {
      x = dist(rng);
    } while (std::abs(x) > 2 * stddev);
    v = static_cast<T>(x);
  }
  return t;
}

template <class T>
Tensor<T> uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return uniform<T>(std::move(shape), -a, a, rng);
}

// He-style uniform for ReLU convolutions: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <class T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
  return uniform<T>(std::move(shape), -a, a, rng);
}

}  // namespace vaffect::init
