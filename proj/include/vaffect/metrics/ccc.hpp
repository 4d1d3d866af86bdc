#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "vaffect/autodiff/ops.hpp"

namespace vaffect::metrics {

/// Population (divide-by-N) moments of a prediction/truth pair.
struct MomentSet {
  double mean_pred = 0.0;
  double mean_truth = 0.0;
  double var_pred = 0.0;
  double var_truth = 0.0;
  double covariance = 0.0;
  std::size_t count = 0;

  /// rho_c = 2 s_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2); zero when the
  /// denominator vanishes.
  double ccc() const {
    const double dm = mean_pred - mean_truth;
    const double den = var_pred + var_truth + dm * dm;
    return den == 0.0 ? 0.0 : 2.0 * covariance / den;
  }

  // Mean squared error recovered from the moments.
  double mse() const {
    const double dm = mean_pred - mean_truth;
    return var_pred + var_truth - 2.0 * covariance + dm * dm;
  }
};

inline void require_pair(const char* op, std::size_t a, std::size_t b, std::size_t min_len) {
  if (a != b) throw ContractError(std::string(op) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  if (a < min_len) throw ContractError(std::string(op) + ": need at least " + std::to_string(min_len) + " values");
}

inline MomentSet moments(std::span<const double> pred, std::span<const double> truth) {
  require_pair("moments", pred.size(), truth.size(), 1);
  MomentSet m;
  m.count = pred.size();
  const double n = static_cast<double>(pred.size());
  // Work on data shifted by the first sample, so a constant input has
  // exactly zero spread instead of rounding residue from its mean.
  const double px = pred[0], py = truth[0];
  double sx = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sx += pred[i] - px;
    sy += truth[i] - py;
  }
  sx /= n;
  sy /= n;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double dx = (pred[i] - px) - sx, dy = (truth[i] - py) - sy;
    m.var_pred += dx * dx;
    m.var_truth += dy * dy;
    m.covariance += dx * dy;
  }
  m.mean_pred = px + sx;
  m.mean_truth = py + sy;
  m.var_pred /= n;
  m.var_truth /= n;
  m.covariance /= n;
  return m;
}

inline double ccc(std::span<const double> pred, std::span<const double> truth) {
  require_pair("ccc", pred.size(), truth.size(), 2);
  return moments(pred, truth).ccc();
}

inline double mse(std::span<const double> pred, std::span<const double> truth) {
  require_pair("mse", pred.size(), truth.size(), 1);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

/// Single-pass co-moment accumulator (Welford update). Used by evaluation
/// so a whole split can be scored without holding every prediction.
class StreamingMoments {
 public:
  void add(double pred, double truth) {
    ++n_;
    const double n = static_cast<double>(n_);
    const double dx = pred - mean_x_;
    mean_x_ += dx / n;
    const double dy = truth - mean_y_;
    mean_y_ += dy / n;
    m2x_ += dx * (pred - mean_x_);
    m2y_ += dy * (truth - mean_y_);
    cxy_ += dx * (truth - mean_y_);
    sq_err_ += (pred - truth) * (pred - truth);
  }

  std::size_t count() const { return n_; }

  MomentSet moments() const {
    MomentSet m;
    m.count = n_;
    if (n_ == 0) return m;
    const double n = static_cast<double>(n_);
    m.mean_pred = mean_x_;
    m.mean_truth = mean_y_;
    m.var_pred = m2x_ / n;
    m.var_truth = m2y_ / n;
    m.covariance = cxy_ / n;
    return m;
  }

  double ccc() const { return moments().ccc(); }
  double mse() const { return n_ == 0 ? 0.0 : sq_err_ / static_cast<double>(n_); }

 private:
  std::size_t n_ = 0;
  double mean_x_ = 0.0, mean_y_ = 0.0, m2x_ = 0.0, m2y_ = 0.0, cxy_ = 0.0, sq_err_ = 0.0;
};

/// Differentiable CCC of two N x 1 (or any equal-shaped) nodes.
template <class T>
Var<T> ccc_var(Var<T> pred, Var<T> truth) {
  if (pred.shape() != truth.shape()) throw ShapeError("ccc: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  Var<T> mx = mean(pred), my = mean(truth);
  Var<T> xc = sub_scalar(pred, mx), yc = sub_scalar(truth, my);
  Var<T> sx2 = mean(square(xc)), sy2 = mean(square(yc)), sxy = mean(mul(xc, yc));
  Var<T> den = add(add(sx2, sy2), square(sub(mx, my)));
  return safe_div(scale(sxy, T{2}), den);
}

/// (1 - CCC_valence) / 2 + (1 - CCC_arousal) / 2 over the flattened B*L axis.
template <class T>
Var<T> ccc_loss(Var<T> pred, Var<T> truth) {
  if (pred.shape() != truth.shape()) throw ShapeError("ccc_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  if (pred.shape().back() != 2) throw ShapeError("ccc_loss: last axis must hold (valence, arousal)");
  const std::size_t rows = pred.value().size() / 2;
  Var<T> p2 = reshape(pred, {rows, 2}), t2 = reshape(truth, {rows, 2});
  Var<T> total;
  for (std::size_t d = 0; d < 2; ++d) {
    Var<T> half = scale(one_minus(ccc_var(slice_last(p2, d, d + 1), slice_last(t2, d, d + 1))), T{0.5});
    total = d == 0 ? half : add(total, half);
  }
  return total;
}

}  // namespace vaffect::metrics
