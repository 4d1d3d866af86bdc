#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "vaffect/autodiff/graph.hpp"

namespace vaffect {

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam:
///   m = b1 m + (1 - b1) g,  v = b2 v + (1 - b2) g^2
///   theta -= lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// Moment buffers exist only for parameters that have been updated, so
/// frozen parameters never allocate optimizer state.
template <class T>
class Adam {
 public:
  struct Moments {
    Tensor<T> first;
    Tensor<T> second;
  };

  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  const AdamOptions& options() const { return opt_; }
  void set_learning_rate(double lr) { opt_.learning_rate = lr; }
  std::uint64_t step_count() const { return t_; }
  void set_step_count(std::uint64_t t) { t_ = t; }
  const std::map<std::string, Moments>& moments() const { return moments_; }
  std::map<std::string, Moments>& moments() { return moments_; }

  /// Applies one update to every trainable parameter from its `grad`.
  /// Throws before touching anything if a gradient is not finite.
  void step(ParameterSet<T>& params) {
    for (auto& p : params) {
      if (!updatable(p)) continue;
      if (p.grad.shape() != p.value.shape()) throw ShapeError("adam: gradient shape mismatch for " + p.name);
      for (auto g : p.grad.data()) {
        if (!std::isfinite(static_cast<double>(g))) throw ContractError("adam: non-finite gradient in " + p.name);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (auto& p : params) {
      if (!updatable(p)) continue;
      auto it = moments_.find(p.name);
      if (it == moments_.end()) it = moments_.emplace(p.name, Moments{Tensor<T>(p.value.shape()), Tensor<T>(p.value.shape())}).first;
      auto& m = it->second.first;
      auto& v = it->second.second;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        const double mi = opt_.beta1 * static_cast<double>(m[i]) + (1.0 - opt_.beta1) * g;
        const double vi = opt_.beta2 * static_cast<double>(v[i]) + (1.0 - opt_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = opt_.learning_rate * (mi / c1) / (std::sqrt(vi / c2) + opt_.epsilon);
        p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - update);
      }
      if (p.clip_abs) {
        const T lim = *p.clip_abs;
        for (auto& x : p.value.data()) x = std::clamp(x, -lim, lim);
      }
    }
  }

 private:
  static bool updatable(const Parameter<T>& p) { return p.trainable && !p.is_state; }

  AdamOptions opt_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace vaffect
