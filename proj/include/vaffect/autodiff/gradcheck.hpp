#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "vaffect/autodiff/ops.hpp"

namespace vaffect {

/// Builds a scalar loss from the graph leaves created for each input.
using GradFn = std::function<Var<double>(Graph<double>&, std::span<const Var<double>>)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

/// Compares the analytic gradient of `fn` against central differences
/// (f(x+eps) - f(x-eps)) / 2eps for every element of every input.
/// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
/// near-zero gradients from amplifying round-off.
inline GradCheckResult gradient_check(const GradFn& fn, std::vector<Tensor<double>> inputs, double eps = 1e-5,
                                      double floor = 1e-3) {
  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (auto& t : inputs) leaves.push_back(g.input(t));
    Var<double> loss = fn(g, leaves);
    g.backward(loss);
    for (auto& v : leaves) {
      analytic.push_back(g.node(v.id()).has_grad ? v.grad() : Tensor<double>(v.shape()));
    }
  }
  auto eval = [&]() {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (auto& t : inputs) leaves.push_back(g.input(t, false));
    return fn(g, leaves).value().item();
  };
  GradCheckResult res;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + eps;
      const double up = eval();
      inputs[k][i] = orig - eps;
      const double down = eval();
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      res.max_rel_error = std::max(res.max_rel_error, abs_err / std::max({std::abs(a), std::abs(numeric), floor}));
      ++res.checked;
    }
  }
  return res;
}

/// As gradient_check, but also perturbs every trainable parameter of
/// `params`, which `fn` binds through Graph::param. Analytic parameter
/// gradients are read from Parameter::grad after backward.
inline GradCheckResult gradient_check_params(const GradFn& fn, ParameterSet<double>& params, std::vector<Tensor<double>> inputs,
                                             double eps = 1e-5, double floor = 1e-3) {
  GradCheckResult res = gradient_check(fn, inputs, eps, floor);
  {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (auto& t : inputs) leaves.push_back(g.input(t, false));
    g.backward(fn(g, leaves));
  }
  auto eval = [&]() {
    Graph<double> g;
    std::vector<Var<double>> leaves;
    for (auto& t : inputs) leaves.push_back(g.input(t, false));
    return fn(g, leaves).value().item();
  };
  for (auto& p : params) {
    if (!p.trainable || p.is_state) continue;
    const Tensor<double> analytic = p.grad;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + eps;
      const double up = eval();
      p.value[i] = orig - eps;
      const double down = eval();
      p.value[i] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double abs_err = std::abs(analytic[i] - numeric);
      res.max_abs_error = std::max(res.max_abs_error, abs_err);
      res.max_rel_error = std::max(res.max_rel_error, abs_err / std::max({std::abs(analytic[i]), std::abs(numeric), floor}));
      ++res.checked;
    }
  }
  return res;
}

/// Reduces an arbitrary-shaped node to a scalar through a fixed random
/// projection so every output element contributes a distinct weight.
inline Var<double> project_to_scalar(Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor<double> r(y.shape());
  for (auto& v : r.data()) v = dist(rng);
  return sum(mul(y, y.graph().constant(std::move(r))));
}

}  // namespace vaffect
