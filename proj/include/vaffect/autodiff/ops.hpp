#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "vaffect/autodiff/graph.hpp"

namespace vaffect {

/// Geometry of a 2-D convolution over N x H x W x C input.
struct ConvSpec {
  std::size_t filter = 3;
  std::size_t stride = 1;
  std::size_t pad_w = 0;  // zeros added left and right
  std::size_t pad_h = 0;  // zeros added top and bottom
  std::size_t in_depth = 1;
  std::size_t out_depth = 1;

  static ConvSpec same3x3(std::size_t in, std::size_t out) { return {3, 1, 1, 1, in, out}; }
  static ConvSpec pointwise(std::size_t in, std::size_t out) { return {1, 1, 0, 0, in, out}; }

  // W2 = (W1 - F + 2P) / S + 1, required to be a positive integer.
  std::size_t out_extent(std::size_t in, std::size_t pad, const char* what) const {
    if (stride == 0 || filter == 0) throw ShapeError("conv2d: zero filter or stride");
    const long span = static_cast<long>(in) + 2 * static_cast<long>(pad) - static_cast<long>(filter);
    if (span < 0 || span % static_cast<long>(stride) != 0) {
      throw ShapeError(std::string("conv2d: ") + what + " extent " + std::to_string(in) + " with F=" +
                       std::to_string(filter) + " S=" + std::to_string(stride) + " P=" + std::to_string(pad) +
                       " is not an integer output size");
    }
    return static_cast<std::size_t>(span / static_cast<long>(stride)) + 1;
  }
  std::size_t out_width(std::size_t w) const { return out_extent(w, pad_w, "width"); }
  std::size_t out_height(std::size_t h) const { return out_extent(h, pad_h, "height"); }
};

// Pooling output extent, W2 = (W1 - F) / S + 1.
inline std::size_t pool_extent(std::size_t in, std::size_t filter, std::size_t stride, const char* op) {
  if (filter == 0 || stride == 0 || filter > in || (in - filter) % stride != 0) {
    throw ShapeError(std::string(op) + ": extent " + std::to_string(in) + " with F=" + std::to_string(filter) +
                     " S=" + std::to_string(stride) + " is not an integer output size");
  }
  return (in - filter) / stride + 1;
}

namespace detail {

template <class T>
void require_same(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <class T>
void require_rank(const char* op, const Var<T>& a, std::size_t rank) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
  }
}

template <class T>
std::size_t last_dim(const Tensor<T>& t) {
  return t.shape().back();
}

// Elementwise unary op given y = f(x) and dy/dx expressed through (x, y).
template <class T, class F, class D>
Var<T> unary(const char* op, Var<T> x, F f, D dfdx) {
  Graph<T>& g = x.graph();
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const auto xi = x.id();
  return g.record(op, std::move(y), {xi}, [xi, dfdx](Graph<T>& gr, std::size_t self) {
    const auto& gy = gr.grad_of(self);
    const auto& yv = gr.value_of(self);
    const auto& xv2 = gr.value_of(xi);
    auto& gx = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * dfdx(xv2[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same("add", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  const auto ai = a.id(), bi = b.id();
  return a.graph().record("add", std::move(y), {ai, bi}, [ai, bi](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    for (auto id : {ai, bi}) {
      if (!g.wants_grad(id)) continue;
      auto& gx = g.grad_buffer(id);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same("sub", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  const auto ai = a.id(), bi = b.id();
  return a.graph().record("sub", std::move(y), {ai, bi}, [ai, bi](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    if (g.wants_grad(ai)) {
      auto& ga = g.grad_buffer(ai);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    }
    if (g.wants_grad(bi)) {
      auto& gb = g.grad_buffer(bi);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same("mul", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  const auto ai = a.id(), bi = b.id();
  return a.graph().record("mul", std::move(y), {ai, bi}, [ai, bi](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    const auto& av = g.value_of(ai);
    const auto& bv = g.value_of(bi);
    if (g.wants_grad(ai)) {
      auto& ga = g.grad_buffer(ai);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (g.wants_grad(bi)) {
      auto& gb = g.grad_buffer(bi);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
  return detail::unary<T>("scale", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_const(Var<T> x, T c) {
  return detail::unary<T>("add_const", x, [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}

// 1 - x
template <class T>
Var<T> one_minus(Var<T> x) {
  return detail::unary<T>("one_minus", x, [](T v) { return T{1} - v; }, [](T, T) { return T{-1}; });
}

template <class T>
Var<T> square(Var<T> x) {
  return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

// x - s for every element, s a one-element node.
template <class T>
Var<T> sub_scalar(Var<T> x, Var<T> s) {
  if (s.value().size() != 1) throw ShapeError("sub_scalar: subtrahend must have one element");
  Tensor<T> y(x.shape());
  const T sv = s.value()[0];
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] - sv;
  const auto xi = x.id(), si = s.id();
  return x.graph().record("sub_scalar", std::move(y), {xi, si}, [xi, si](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    if (g.wants_grad(xi)) {
      auto& gx = g.grad_buffer(xi);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (g.wants_grad(si)) {
      T acc{0};
      for (std::size_t i = 0; i < gy.size(); ++i) acc += gy[i];
      g.grad_buffer(si)[0] -= acc;
    }
  });
}

/// a / b for one-element nodes; defined as 0 (with zero gradient) when b == 0.
template <class T>
Var<T> safe_div(Var<T> a, Var<T> b) {
  if (a.value().size() != 1 || b.value().size() != 1) throw ShapeError("safe_div: operands must have one element");
  const T av = a.value()[0], bv = b.value()[0];
  const T y = bv == T{0} ? T{0} : av / bv;
  const auto ai = a.id(), bi = b.id();
  return a.graph().record("safe_div", Tensor<T>::scalar(y), {ai, bi}, [ai, bi](Graph<T>& g, std::size_t self) {
    const T gy = g.grad_of(self)[0];
    const T den = g.value_of(bi)[0];
    if (den == T{0}) return;
    const T num = g.value_of(ai)[0];
    if (g.wants_grad(ai)) g.grad_buffer(ai)[0] += gy / den;
    if (g.wants_grad(bi)) g.grad_buffer(bi)[0] -= gy * num / (den * den);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Var<T> sum(Var<T> x) {
  T acc{0};
  for (auto v : x.value().data()) acc += v;
  const auto xi = x.id();
  return x.graph().record("sum", Tensor<T>::scalar(acc), {xi}, [xi](Graph<T>& g, std::size_t self) {
    const T gy = g.grad_of(self)[0];
    auto& gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy;
  });
}

template <class T>
Var<T> mean(Var<T> x) {
  const T n = static_cast<T>(x.value().size());
  T acc{0};
  for (auto v : x.value().data()) acc += v;
  const auto xi = x.id();
  return x.graph().record("mean", Tensor<T>::scalar(acc / n), {xi}, [xi, n](Graph<T>& g, std::size_t self) {
    const T gy = g.grad_of(self)[0] / n;
    auto& gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// (M x K) . (K x N) -> M x N
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  Tensor<T> y({m, n});
  const T* A = a.value().ptr();
  const T* B = b.value().ptr();
  T* Y = y.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      for (std::size_t j = 0; j < n; ++j) Y[i * n + j] += av * B[p * n + j];
    }
  }
  const auto ai = a.id(), bi = b.id();
  return a.graph().record("matmul", std::move(y), {ai, bi}, [=](Graph<T>& g, std::size_t self) {
    const T* G = g.grad_of(self).ptr();
    const T* Av = g.value_of(ai).ptr();
    const T* Bv = g.value_of(bi).ptr();
    if (g.wants_grad(ai)) {
      T* GA = g.grad_buffer(ai).ptr();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc{0};
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * Bv[p * n + j];
          GA[i * k + p] += acc;
        }
    }
    if (g.wants_grad(bi)) {
      T* GB = g.grad_buffer(bi).ptr();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = Av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += av * G[i * n + j];
        }
    }
  });
}

namespace detail {

// y = x W^T (+ b). The bias is added after the full dot product.
template <class T>
Var<T> affine(const char* op, Var<T> x, Var<T> w, const Var<T>* b) {
  require_rank(op, x, 2);
  require_rank(op, w, 2);
  const std::size_t rows = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in) throw ShapeError(std::string(op) + ": input width " + std::to_string(in) + " vs weights " + shape_str(w.shape()));
  if (b && b->value().size() != out) {
    throw ShapeError(std::string(op) + ": bias size " + std::to_string(b->value().size()) + " vs " + std::to_string(out));
  }
  Tensor<T> y({rows, out});
  const T* X = x.value().ptr();
  const T* W = w.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < out; ++j) {
      T acc{0};
      for (std::size_t i = 0; i < in; ++i) acc += W[j * in + i] * X[r * in + i];
      y[r * out + j] = b ? acc + b->value()[j] : acc;
    }
  }
  const auto xi = x.id(), wi = w.id();
  const bool has_bias = b != nullptr;
  const auto bi = has_bias ? b->id() : std::size_t{0};
  std::vector<std::size_t> parents{xi, wi};
  if (has_bias) parents.push_back(bi);
  return x.graph().record(op, std::move(y), std::move(parents), [=](Graph<T>& g, std::size_t self) {
    const T* G = g.grad_of(self).ptr();
    const T* Xv = g.value_of(xi).ptr();
    const T* Wv = g.value_of(wi).ptr();
    if (g.wants_grad(xi)) {
      T* GX = g.grad_buffer(xi).ptr();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out; ++j) {
          const T gy = G[r * out + j];
          for (std::size_t i = 0; i < in; ++i) GX[r * in + i] += gy * Wv[j * in + i];
        }
    }
    if (g.wants_grad(wi)) {
      T* GW = g.grad_buffer(wi).ptr();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out; ++j) {
          const T gy = G[r * out + j];
          for (std::size_t i = 0; i < in; ++i) GW[j * in + i] += gy * Xv[r * in + i];
        }
    }
    if (has_bias && g.wants_grad(bi)) {
      T* GB = g.grad_buffer(bi).ptr();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out; ++j) GB[j] += G[r * out + j];
    }
  });
}

}  // namespace detail

/// Fully connected layer: x (N x n), weights (m x n), bias (m) -> N x m with
/// y_j = sum_i w_ji x_i + b_j.
template <class T>
Var<T> dense(Var<T> x, Var<T> w, Var<T> b) {
  return detail::affine("dense", x, w, &b);
}

// Bias-free x W^T, used for recurrent terms.
template <class T>
Var<T> linear(Var<T> x, Var<T> w) {
  return detail::affine<T>("linear", x, w, nullptr);
}

// Adds a vector along the last axis.
template <class T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  const std::size_t c = detail::last_dim(x.value());
  if (b.value().size() != c) throw ShapeError("add_bias: bias size " + std::to_string(b.value().size()) + " vs last dim " + std::to_string(c));
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] + b.value()[i % c];
  const auto xi = x.id(), bi = b.id();
  return x.graph().record("add_bias", std::move(y), {xi, bi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    if (g.wants_grad(xi)) {
      auto& gx = g.grad_buffer(xi);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (g.wants_grad(bi)) {
      auto& gb = g.grad_buffer(bi);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i % c] += gy[i];
    }
  });
}

// Elementwise product with a vector broadcast along the last axis (u ⊙ h).
template <class T>
Var<T> mul_vec(Var<T> x, Var<T> v) {
  const std::size_t c = detail::last_dim(x.value());
  if (v.value().size() != c) throw ShapeError("mul_vec: vector size " + std::to_string(v.value().size()) + " vs last dim " + std::to_string(c));
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] * v.value()[i % c];
  const auto xi = x.id(), vi = v.id();
  return x.graph().record("mul_vec", std::move(y), {xi, vi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    const auto& xv = g.value_of(xi);
    const auto& vv = g.value_of(vi);
    if (g.wants_grad(xi)) {
      auto& gx = g.grad_buffer(xi);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * vv[i % c];
    }
    if (g.wants_grad(vi)) {
      auto& gv = g.grad_buffer(vi);
      for (std::size_t i = 0; i < gy.size(); ++i) gv[i % c] += gy[i] * xv[i];
    }
  });
}

// Scales row r of x (R x C) by w[r], w shaped R x 1.
template <class T>
Var<T> mul_rows(Var<T> x, Var<T> w) {
  detail::require_rank("mul_rows", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (w.value().size() != rows) throw ShapeError("mul_rows: weight count " + std::to_string(w.value().size()) + " vs rows " + std::to_string(rows));
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = x.value()[r * cols + c] * w.value()[r];
  const auto xi = x.id(), wi = w.id();
  return x.graph().record("mul_rows", std::move(y), {xi, wi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    const auto& xv = g.value_of(xi);
    const auto& wv = g.value_of(wi);
    if (g.wants_grad(xi)) {
      auto& gx = g.grad_buffer(xi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gy[r * cols + c] * wv[r];
    }
    if (g.wants_grad(wi)) {
      auto& gw = g.grad_buffer(wi);
      for (std::size_t r = 0; r < rows; ++r) {
        T acc{0};
        for (std::size_t c = 0; c < cols; ++c) acc += gy[r * cols + c] * xv[r * cols + c];
        gw[r] += acc;
      }
    }
  });
}

// Row-wise dot product with a vector: x (R x C), v (C) -> R x 1.
template <class T>
Var<T> row_dot(Var<T> x, Var<T> v) {
  detail::require_rank("row_dot", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (v.value().size() != cols) throw ShapeError("row_dot: vector size " + std::to_string(v.value().size()) + " vs cols " + std::to_string(cols));
  Tensor<T> y({rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    for (std::size_t c = 0; c < cols; ++c) acc += x.value()[r * cols + c] * v.value()[c];
    y[r] = acc;
  }
  const auto xi = x.id(), vi = v.id();
  return x.graph().record("row_dot", std::move(y), {xi, vi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    const auto& xv = g.value_of(xi);
    const auto& vv = g.value_of(vi);
    if (g.wants_grad(xi)) {
      auto& gx = g.grad_buffer(xi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += gy[r] * vv[c];
    }
    if (g.wants_grad(vi)) {
      auto& gv = g.grad_buffer(vi);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) gv[c] += gy[r] * xv[r * cols + c];
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
T sigmoid_scalar(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> relu(Var<T> x) {
  return detail::unary<T>("relu", x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

// Softmax over the last axis, computed with max subtraction.
template <class T>
Var<T> softmax(Var<T> x) {
  const std::size_t c = detail::last_dim(x.value());
  const std::size_t rows = x.value().size() / c;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.value().ptr() + r * c;
    T* out = y.ptr() + r * c;
    const T mx = *std::max_element(in, in + c);
    T total{0};
    for (std::size_t j = 0; j < c; ++j) {
      out[j] = std::exp(in[j] - mx);
      total += out[j];
    }
    for (std::size_t j = 0; j < c; ++j) out[j] /= total;
  }
  const auto xi = x.id();
  return x.graph().record("softmax", std::move(y), {xi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    const auto& yv = g.value_of(self);
    auto& gx = g.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < c; ++j) dot += gy[r * c + j] * yv[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += yv[r * c + j] * (gy[r * c + j] - dot);
    }
  });
}

/// Mean softmax cross-entropy of N x K logits against class labels.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<std::size_t>& labels) {
  detail::require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<T>>(n * k);
  T loss{0};
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= k) throw ContractError("softmax_cross_entropy: label out of range");
    const T* in = logits.value().ptr() + r * k;
    const T mx = *std::max_element(in, in + k);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) total += std::exp(in[j] - mx);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(in[j] - mx) / total;
    loss += -(in[labels[r]] - mx - std::log(total));
  }
  const auto li = logits.id();
  return logits.graph().record("softmax_cross_entropy", Tensor<T>::scalar(loss / static_cast<T>(n)), {li},
                               [=](Graph<T>& g, std::size_t self) {
                                 const T gy = g.grad_of(self)[0] / static_cast<T>(n);
                                 auto& gx = g.grad_buffer(li);
                                 for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t j = 0; j < k; ++j)
                                     gx[r * k + j] += gy * ((*probs)[r * k + j] - (j == labels[r] ? T{1} : T{0}));
                               });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  const auto xi = x.id();
  return x.graph().record("reshape", std::move(y), {xi}, [xi](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    auto& gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

// Concatenation along the last axis; all leading extents must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape l = p.shape();
    widths.push_back(l.back());
    l.pop_back();
    if (l != lead) throw ShapeError("concat: leading extents differ " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    total += widths.back();
  }
  const std::size_t rows = shape_size(lead.empty() ? Shape{1} : lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> y(out_shape);
  std::vector<std::size_t> ids;
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].value().ptr();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(src + r * widths[k], widths[k], y.ptr() + r * total + off);
    off += widths[k];
    ids.push_back(parts[k].id());
  }
  return parts[0].graph().record("concat", std::move(y), ids, [=](Graph<T>& g, std::size_t self) {
    const T* gy = g.grad_of(self).ptr();
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (g.wants_grad(ids[k])) {
        T* gx = g.grad_buffer(ids[k]).ptr();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j) gx[r * widths[k] + j] += gy[r * total + o + j];
      }
      o += widths[k];
    }
  });
}

// Columns [begin, end) along the last axis.
template <class T>
Var<T> slice_last(Var<T> x, std::size_t begin, std::size_t end) {
  const std::size_t c = detail::last_dim(x.value());
  if (begin >= end || end > c) throw ShapeError("slice_last: bad range for " + shape_str(x.shape()));
  const std::size_t rows = x.value().size() / c, w = end - begin;
  Shape s = x.shape();
  s.back() = w;
  Tensor<T> y(s);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.value().ptr() + r * c + begin, w, y.ptr() + r * w);
  const auto xi = x.id();
  return x.graph().record("slice_last", std::move(y), {xi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    auto& gx = g.grad_buffer(xi);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) gx[r * c + begin + j] += gy[r * w + j];
  });
}

/// Rows of one time step from a (B*L) x F matrix laid out batch-major
/// (row b*L + t), giving B x F.
template <class T>
Var<T> time_step_rows(Var<T> x, std::size_t batch, std::size_t length, std::size_t t) {
  detail::require_rank("time_step_rows", x, 2);
  if (x.dim(0) != batch * length || t >= length) throw ShapeError("time_step_rows: bad layout for " + shape_str(x.shape()));
  const std::size_t f = x.dim(1);
  Tensor<T> y({batch, f});
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(x.value().ptr() + (b * length + t) * f, f, y.ptr() + b * f);
  const auto xi = x.id();
  return x.graph().record("time_step_rows", std::move(y), {xi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    auto& gx = g.grad_buffer(xi);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < f; ++j) gx[(b * length + t) * f + j] += gy[b * f + j];
  });
}

// Inverse of time_step_rows: L nodes of B x F -> (B*L) x F, batch-major.
template <class T>
Var<T> stack_time_steps(const std::vector<Var<T>>& steps) {
  if (steps.empty()) throw ShapeError("stack_time_steps: empty sequence");
  const std::size_t length = steps.size(), batch = steps[0].dim(0), f = steps[0].dim(1);
  Tensor<T> y({batch * length, f});
  std::vector<std::size_t> ids;
  for (std::size_t t = 0; t < length; ++t) {
    if (steps[t].shape() != steps[0].shape()) throw ShapeError("stack_time_steps: ragged steps");
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(steps[t].value().ptr() + b * f, f, y.ptr() + (b * length + t) * f);
    ids.push_back(steps[t].id());
  }
  return steps[0].graph().record("stack_time_steps", std::move(y), ids, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    for (std::size_t t = 0; t < length; ++t) {
      if (!g.wants_grad(ids[t])) continue;
      auto& gx = g.grad_buffer(ids[t]);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < f; ++j) gx[b * f + j] += gy[(b * length + t) * f + j];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling (N x H x W x C)

namespace detail {

template <class T>
void im2col(const T* img, std::size_t h, std::size_t w, const ConvSpec& s, std::size_t oh, std::size_t ow, T* cols) {
  const std::size_t c = s.in_depth, f = s.filter, k = f * f * c;
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* row = cols + (oy * ow + ox) * k;
      for (std::size_t fy = 0; fy < f; ++fy) {
        const long iy = static_cast<long>(oy * s.stride + fy) - static_cast<long>(s.pad_h);
        for (std::size_t fx = 0; fx < f; ++fx) {
          const long ix = static_cast<long>(ox * s.stride + fx) - static_cast<long>(s.pad_w);
          T* dst = row + (fy * f + fx) * c;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) {
            std::fill_n(dst, c, T{0});
          } else {
            std::copy_n(img + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c, c, dst);
          }
        }
      }
    }
}

template <class T>
void col2im(const T* cols, std::size_t h, std::size_t w, const ConvSpec& s, std::size_t oh, std::size_t ow, T* img) {
  const std::size_t c = s.in_depth, f = s.filter, k = f * f * c;
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const T* row = cols + (oy * ow + ox) * k;
      for (std::size_t fy = 0; fy < f; ++fy) {
        const long iy = static_cast<long>(oy * s.stride + fy) - static_cast<long>(s.pad_h);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t fx = 0; fx < f; ++fx) {
          const long ix = static_cast<long>(ox * s.stride + fx) - static_cast<long>(s.pad_w);
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          T* dst = img + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
          const T* src = row + (fy * f + fx) * c;
          for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
      }
    }
}

}  // namespace detail

/// Zero-padded 2-D convolution. Weights are F x F x D1 x D2 and shared by
/// every position of a depth slice; bias has D2 entries.
template <class T>
Var<T> conv2d(Var<T> x, const ConvSpec& spec, Var<T> w, Var<T> b) {
  detail::require_rank("conv2d", x, 4);
  const std::size_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
  if (c != spec.in_depth) throw ShapeError("conv2d: input depth " + std::to_string(c) + " vs spec " + std::to_string(spec.in_depth));
  const Shape wshape{spec.filter, spec.filter, spec.in_depth, spec.out_depth};
  if (w.shape() != wshape) throw ShapeError("conv2d: weights " + shape_str(w.shape()) + " vs expected " + shape_str(wshape));
  if (b.value().size() != spec.out_depth) throw ShapeError("conv2d: bias size mismatch");
  const std::size_t oh = spec.out_height(h), ow = spec.out_width(wd);
  const std::size_t d = spec.out_depth, k = spec.filter * spec.filter * c, pix = oh * ow;

  Tensor<T> y({n, oh, ow, d});
  std::vector<T> cols(pix * k);
  const T* W = w.value().ptr();
  const T* Bv = b.value().ptr();
  for (std::size_t img = 0; img < n; ++img) {
    detail::im2col(x.value().ptr() + img * h * wd * c, h, wd, spec, oh, ow, cols.data());
    T* out = y.ptr() + img * pix * d;
    for (std::size_t i = 0; i < pix; ++i) {
      T* o = out + i * d;
      const T* row = cols.data() + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T a = row[p];
        if (a == T{0}) continue;
        const T* wr = W + p * d;
        for (std::size_t j = 0; j < d; ++j) o[j] += a * wr[j];
      }
      for (std::size_t j = 0; j < d; ++j) o[j] += Bv[j];
    }
  }
  const auto xi = x.id(), wi = w.id(), bi = b.id();
  return x.graph().record("conv2d", std::move(y), {xi, wi, bi}, [=](Graph<T>& g, std::size_t self) {
    const T* G = g.grad_of(self).ptr();
    const T* Xv = g.value_of(xi).ptr();
    const T* Wv = g.value_of(wi).ptr();
    const bool gx_on = g.wants_grad(xi), gw_on = g.wants_grad(wi), gb_on = g.wants_grad(bi);
    T* GX = gx_on ? g.grad_buffer(xi).ptr() : nullptr;
    T* GW = gw_on ? g.grad_buffer(wi).ptr() : nullptr;
    T* GB = gb_on ? g.grad_buffer(bi).ptr() : nullptr;
    std::vector<T> col(pix * k);
    std::vector<T> dcol(gx_on ? pix * k : 0);
    for (std::size_t img = 0; img < n; ++img) {
      const T* gout = G + img * pix * d;
      if (gb_on)
        for (std::size_t i = 0; i < pix; ++i)
          for (std::size_t j = 0; j < d; ++j) GB[j] += gout[i * d + j];
      if (gw_on) {
        detail::im2col(Xv + img * h * wd * c, h, wd, spec, oh, ow, col.data());
        for (std::size_t i = 0; i < pix; ++i) {
          const T* row = col.data() + i * k;
          const T* gr = gout + i * d;
          for (std::size_t p = 0; p < k; ++p) {
            const T a = row[p];
            if (a == T{0}) continue;
            T* gw = GW + p * d;
            for (std::size_t j = 0; j < d; ++j) gw[j] += a * gr[j];
          }
        }
      }
      if (gx_on) {
        for (std::size_t i = 0; i < pix; ++i) {
          const T* gr = gout + i * d;
          T* dr = dcol.data() + i * k;
          for (std::size_t p = 0; p < k; ++p) {
            const T* wr = Wv + p * d;
            T acc{0};
            for (std::size_t j = 0; j < d; ++j) acc += gr[j] * wr[j];
            dr[p] = acc;
          }
        }
        detail::col2im(dcol.data(), h, wd, spec, oh, ow, GX + img * h * wd * c);
      }
    }
  });
}

/// Max pooling per depth slice. The gradient of each window goes to the
/// first (lowest flat index) maximal element.
template <class T>
Var<T> maxpool2d(Var<T> x, std::size_t filter, std::size_t stride) {
  detail::require_rank("maxpool2d", x, 4);
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t oh = pool_extent(h, filter, stride, "maxpool2d"), ow = pool_extent(w, filter, stride, "maxpool2d");
  Tensor<T> y({n, oh, ow, c});
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.size());
  const T* X = x.value().ptr();
  for (std::size_t img = 0; img < n; ++img)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((img * h + oy * stride) * w + ox * stride) * c + ch;
          for (std::size_t fy = 0; fy < filter; ++fy)
            for (std::size_t fx = 0; fx < filter; ++fx) {
              const std::size_t idx = ((img * h + oy * stride + fy) * w + ox * stride + fx) * c + ch;
              if (X[idx] > X[best]) best = idx;
            }
          const std::size_t o = ((img * oh + oy) * ow + ox) * c + ch;
          y[o] = X[best];
          (*argmax)[o] = best;
        }
  const auto xi = x.id();
  return x.graph().record("maxpool2d", std::move(y), {xi}, [xi, argmax](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    auto& gx = g.grad_buffer(xi);
    for (std::size_t o = 0; o < gy.size(); ++o) gx[(*argmax)[o]] += gy[o];
  });
}

template <class T>
Var<T> avgpool2d(Var<T> x, std::size_t filter, std::size_t stride) {
  detail::require_rank("avgpool2d", x, 4);
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const std::size_t oh = pool_extent(h, filter, stride, "avgpool2d"), ow = pool_extent(w, filter, stride, "avgpool2d");
  const T inv = T{1} / static_cast<T>(filter * filter);
  Tensor<T> y({n, oh, ow, c});
  const T* X = x.value().ptr();
  for (std::size_t img = 0; img < n; ++img)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch) {
          T acc{0};
          for (std::size_t fy = 0; fy < filter; ++fy)
            for (std::size_t fx = 0; fx < filter; ++fx) acc += X[((img * h + oy * stride + fy) * w + ox * stride + fx) * c + ch];
          y[((img * oh + oy) * ow + ox) * c + ch] = acc * inv;
        }
  const auto xi = x.id();
  return x.graph().record("avgpool2d", std::move(y), {xi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    auto& gx = g.grad_buffer(xi);
    for (std::size_t img = 0; img < n; ++img)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T v = gy[((img * oh + oy) * ow + ox) * c + ch] * inv;
            for (std::size_t fy = 0; fy < filter; ++fy)
              for (std::size_t fx = 0; fx < filter; ++fx) gx[((img * h + oy * stride + fy) * w + ox * stride + fx) * c + ch] += v;
          }
  });
}

// Mean over the spatial axes: N x H x W x C -> N x C.
template <class T>
Var<T> global_avg_pool(Var<T> x) {
  detail::require_rank("global_avg_pool", x, 4);
  const std::size_t n = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor<T> y({n, c});
  for (std::size_t img = 0; img < n; ++img)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) y[img * c + ch] += x.value()[(img * hw + p) * c + ch];
  for (auto& v : y.data()) v /= static_cast<T>(hw);
  const auto xi = x.id();
  return x.graph().record("global_avg_pool", std::move(y), {xi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    auto& gx = g.grad_buffer(xi);
    for (std::size_t img = 0; img < n; ++img)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) gx[(img * hw + p) * c + ch] += gy[img * c + ch] / static_cast<T>(hw);
  });
}

// ---------------------------------------------------------------------------
// Batch normalisation over every axis but the last.

struct BatchNormOptions {
  bool training = true;
  double epsilon = 1e-5;
  double momentum = 0.9;
};

template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, Parameter<T>& running_mean, Parameter<T>& running_var,
                 const BatchNormOptions& opt) {
  const std::size_t c = detail::last_dim(x.value());
  const std::size_t m = x.value().size() / c;
  if (gamma.value().size() != c || beta.value().size() != c || running_mean.value.size() != c || running_var.value.size() != c) {
    throw ShapeError("batchnorm: per-channel parameter size mismatch for " + shape_str(x.shape()));
  }
  const T eps = static_cast<T>(opt.epsilon);
  if (opt.training && m < 2 && eps <= T{0}) {
    throw ContractError("batchnorm: variance of a single sample per channel is degenerate without epsilon");
  }
  std::vector<T> mu(c), var(c);
  const T* X = x.value().ptr();
  if (opt.training) {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < c; ++j) mu[j] += X[r * c + j];
    for (auto& v : mu) v /= static_cast<T>(m);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const T dlt = X[r * c + j] - mu[j];
        var[j] += dlt * dlt;
      }
    for (auto& v : var) v /= static_cast<T>(m);
    const T mom = static_cast<T>(opt.momentum);
    for (std::size_t j = 0; j < c; ++j) {
      running_mean.value[j] = mom * running_mean.value[j] + (T{1} - mom) * mu[j];
      running_var.value[j] = mom * running_var.value[j] + (T{1} - mom) * var[j];
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mu[j] = running_mean.value[j];
      var[j] = running_var.value[j];
    }
  }
  auto inv_std = std::make_shared<std::vector<T>>(c);
  for (std::size_t j = 0; j < c; ++j) (*inv_std)[j] = T{1} / std::sqrt(var[j] + eps);
  auto xhat = std::make_shared<std::vector<T>>(m * c);
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (X[r * c + j] - mu[j]) * (*inv_std)[j];
      (*xhat)[r * c + j] = xh;
      y[r * c + j] = gamma.value()[j] * xh + beta.value()[j];
    }
  const auto xi = x.id(), gi = gamma.id(), bi = beta.id();
  const bool training = opt.training;
  return x.graph().record("batchnorm", std::move(y), {xi, gi, bi}, [=](Graph<T>& g, std::size_t self) {
    const auto& gy = g.grad_of(self);
    const auto& gam = g.value_of(gi);
    std::vector<T> sum_dy(c), sum_dy_xh(c);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        sum_dy[j] += gy[r * c + j];
        sum_dy_xh[j] += gy[r * c + j] * (*xhat)[r * c + j];
      }
    if (g.wants_grad(gi)) {
      auto& gg = g.grad_buffer(gi);
      for (std::size_t j = 0; j < c; ++j) gg[j] += sum_dy_xh[j];
    }
    if (g.wants_grad(bi)) {
      auto& gb = g.grad_buffer(bi);
      for (std::size_t j = 0; j < c; ++j) gb[j] += sum_dy[j];
    }
    if (g.wants_grad(xi)) {
      auto& gx = g.grad_buffer(xi);
      const T mm = static_cast<T>(m);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const T scale_j = gam[j] * (*inv_std)[j];
          if (training) {
            gx[r * c + j] += scale_j * (gy[r * c + j] - sum_dy[j] / mm - (*xhat)[r * c + j] * sum_dy_xh[j] / mm);
          } else {
            gx[r * c + j] += scale_j * gy[r * c + j];
          }
        }
    }
  });
}

}  // namespace vaffect
