// Differentiable operations on Tensor. All kernels are plain loops with fixed
// accumulation order; the inner dimension is contiguous so the compiler can
// vectorize them.

#pragma once

#include <cmath>
#include <cstring>
#include <limits>

#include "ldasr/tensor.hpp"

namespace ldasr {

inline constexpr float kNegInf = -std::numeric_limits<float>::infinity();

namespace detail {

// C(M,N) += A(M,K) * B(K,N)
inline void gemm_nn_acc(const float* a, const float* b, float* c, int64_t m, int64_t k,
                        int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const float av = arow[l];
      if (av == 0.0f) continue;
      const float* brow = b + l * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(M,N) += A(M,K) * B(N,K)^T
inline void gemm_nt_acc(const float* a, const float* b, float* c, int64_t m, int64_t k,
                        int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const float* brow = b + j * k;
      float acc = 0.0f;
      for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// C(K,N) += A(M,K)^T * B(M,N)
inline void gemm_tn_acc(const float* a, const float* b, float* c, int64_t m, int64_t k,
                        int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    const float* brow = b + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const float av = arow[l];
      if (av == 0.0f) continue;
      float* crow = c + l * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

inline Tensor xavier_like(int64_t rows, int64_t cols, Rng& rng) {
  Tensor t = Tensor::zeros({rows, cols});
  const float s = std::sqrt(2.0f / (float)(rows + cols));
  fill_normal(t, rng, s);
  return t;
}

// Folds all but the last dimension.
inline int64_t fold_rows(const Tensor& t) { return t.numel() / t.shape().back(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic

inline Tensor add(Tensor a, Tensor b) {
  detail::check_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.ptr()[i] + b.ptr()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode& self) mutable {
    accumulate_grad(a, self.grad.data());
    accumulate_grad(b, self.grad.data());
  });
}

inline Tensor sub(Tensor a, Tensor b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.ptr()[i] - b.ptr()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode& self) mutable {
    accumulate_grad(a, self.grad.data());
    if (b.defined() && b.node()->needs_grad()) {
      std::vector<float> neg(self.grad.size());
      for (size_t i = 0; i < neg.size(); ++i) neg[i] = -self.grad[i];
      accumulate_grad(b, neg.data());
    }
  });
}

inline Tensor mul(Tensor a, Tensor b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.ptr()[i] * b.ptr()[i];
  return make_op(a.shape(), std::move(out), {a, b}, [a, b](TensorNode& self) mutable {
    if (a.node()->needs_grad()) {
      std::vector<float> g(self.grad.size());
      for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * b.ptr()[i];
      accumulate_grad(a, g.data());
    }
    if (b.node()->needs_grad()) {
      std::vector<float> g(self.grad.size());
      for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * a.ptr()[i];
      accumulate_grad(b, g.data());
    }
  });
}

inline Tensor scale(Tensor a, float c) {
  std::vector<float> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.ptr()[i] * c;
  return make_op(a.shape(), std::move(out), {a}, [a, c](TensorNode& self) mutable {
    if (!a.node()->needs_grad()) return;
    std::vector<float> g(self.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * c;
    accumulate_grad(a, g.data());
  });
}

// x: (..., N) plus bias b: (N,), broadcast over leading dims.
inline Tensor add_bias(Tensor x, Tensor b) {
  const int64_t n = x.shape().back();
  if (b.rank() != 1 || b.dim(0) != n)
    throw DimError("add_bias: bias " + shape_str(b.shape()) + " does not match last dim " +
                   std::to_string(n));
  const int64_t rows = detail::fold_rows(x);
  std::vector<float> out(x.numel());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) out[r * n + j] = x.ptr()[r * n + j] + b.ptr()[j];
  return make_op(x.shape(), std::move(out), {x, b}, [x, b, rows, n](TensorNode& self) mutable {
    accumulate_grad(x, self.grad.data());
    if (b.node()->needs_grad()) {
      std::vector<float> g(n, 0.0f);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
      accumulate_grad(b, g.data());
    }
  });
}

// x: B×T×N plus per-batch rows r: B×N.
inline Tensor add_rows(Tensor x, Tensor r) {
  if (x.rank() != 3 || r.rank() != 2 || x.dim(0) != r.dim(0) || x.dim(2) != r.dim(1))
    throw DimError("add_rows: incompatible shapes " + shape_str(x.shape()) + " and " +
                   shape_str(r.shape()));
  const int64_t b = x.dim(0), t = x.dim(1), n = x.dim(2);
  std::vector<float> out(x.numel());
  for (int64_t i = 0; i < b; ++i)
    for (int64_t s = 0; s < t; ++s)
      for (int64_t j = 0; j < n; ++j)
        out[(i * t + s) * n + j] = x.ptr()[(i * t + s) * n + j] + r.ptr()[i * n + j];
  return make_op(x.shape(), std::move(out), {x, r}, [x, r, b, t, n](TensorNode& self) mutable {
    accumulate_grad(x, self.grad.data());
    if (r.node()->needs_grad()) {
      std::vector<float> g((size_t)b * n, 0.0f);
      for (int64_t i = 0; i < b; ++i)
        for (int64_t s = 0; s < t; ++s)
          for (int64_t j = 0; j < n; ++j) g[i * n + j] += self.grad[(i * t + s) * n + j];
      accumulate_grad(r, g.data());
    }
  });
}

// x: B×T×N plus per-time rows p: T×N (position embeddings).
inline Tensor add_time(Tensor x, Tensor p) {
  if (x.rank() != 3 || p.rank() != 2 || x.dim(1) != p.dim(0) || x.dim(2) != p.dim(1))
    throw DimError("add_time: incompatible shapes " + shape_str(x.shape()) + " and " +
                   shape_str(p.shape()));
  const int64_t b = x.dim(0), t = x.dim(1), n = x.dim(2);
  std::vector<float> out(x.numel());
  for (int64_t i = 0; i < b; ++i)
    for (int64_t s = 0; s < t; ++s)
      for (int64_t j = 0; j < n; ++j)
        out[(i * t + s) * n + j] = x.ptr()[(i * t + s) * n + j] + p.ptr()[s * n + j];
  return make_op(x.shape(), std::move(out), {x, p}, [x, p, b, t, n](TensorNode& self) mutable {
    accumulate_grad(x, self.grad.data());
    if (p.node()->needs_grad()) {
      std::vector<float> g((size_t)t * n, 0.0f);
      for (int64_t i = 0; i < b; ++i)
        for (int64_t s = 0; s < t; ++s)
          for (int64_t j = 0; j < n; ++j) g[s * n + j] += self.grad[(i * t + s) * n + j];
      accumulate_grad(p, g.data());
    }
  });
}

// x: (..., V) plus s: (..., 1) broadcast along the last dimension.
inline Tensor add_bcast_last(Tensor x, Tensor s) {
  if (s.shape().back() != 1 || s.numel() != detail::fold_rows(x))
    throw DimError("add_bcast_last: " + shape_str(x.shape()) + " vs " + shape_str(s.shape()));
  const int64_t rows = detail::fold_rows(x), n = x.shape().back();
  std::vector<float> out(x.numel());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) out[r * n + j] = x.ptr()[r * n + j] + s.ptr()[r];
  return make_op(x.shape(), std::move(out), {x, s}, [x, s, rows, n](TensorNode& self) mutable {
    accumulate_grad(x, self.grad.data());
    if (s.node()->needs_grad()) {
      std::vector<float> g(rows, 0.0f);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < n; ++j) g[r] += self.grad[r * n + j];
      accumulate_grad(s, g.data());
    }
  });
}

// Zeroes padded frames: x B×T×N times a constant per-frame mask of length B*T.
inline Tensor mul_time_mask(Tensor x, const std::vector<float>& mask) {
  if (x.rank() != 3 || (int64_t)mask.size() != x.dim(0) * x.dim(1))
    throw DimError("mul_time_mask: mask length mismatch for " + shape_str(x.shape()));
  const int64_t rows = x.dim(0) * x.dim(1), n = x.dim(2);
  std::vector<float> out(x.numel());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < n; ++j) out[r * n + j] = x.ptr()[r * n + j] * mask[r];
  return make_op(x.shape(), std::move(out), {x}, [x, mask, rows, n](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(self.grad.size());
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < n; ++j) g[r * n + j] = self.grad[r * n + j] * mask[r];
    accumulate_grad(x, g.data());
  });
}

inline Tensor reshape(Tensor x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<float> out = x.data();
  return make_op(std::move(shape), std::move(out), {x},
                 [x](TensorNode& self) mutable { accumulate_grad(x, self.grad.data()); });
}

// ---------------------------------------------------------------------------
// Linear algebra

// x: (..., K) times weight w: K×N.
inline Tensor matmul(Tensor x, Tensor w) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0))
    throw DimError("matmul: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const int64_t m = detail::fold_rows(x), k = w.dim(0), n = w.dim(1);
  std::vector<float> out((size_t)m * n, 0.0f);
  detail::gemm_nn_acc(x.ptr(), w.ptr(), out.data(), m, k, n);
  Shape oshape = x.shape();
  oshape.back() = n;
  return make_op(std::move(oshape), std::move(out), {x, w},
                 [x, w, m, k, n](TensorNode& self) mutable {
                   if (x.node()->needs_grad()) {
                     std::vector<float> gx((size_t)m * k, 0.0f);
                     detail::gemm_nt_acc(self.grad.data(), w.ptr(), gx.data(), m, n, k);
                     accumulate_grad(x, gx.data());
                   }
                   if (w.node()->needs_grad()) {
                     std::vector<float> gw((size_t)k * n, 0.0f);
                     detail::gemm_tn_acc(x.ptr(), self.grad.data(), gw.data(), m, k, n);
                     accumulate_grad(w, gw.data());
                   }
                 });
}

// a: B×M×K, b: B×K×N -> B×M×N
inline Tensor bmm(Tensor a, Tensor b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<float> out((size_t)nb * m * n, 0.0f);
  for (int64_t i = 0; i < nb; ++i)
    detail::gemm_nn_acc(a.ptr() + i * m * k, b.ptr() + i * k * n, out.data() + i * m * n, m, k, n);
  return make_op({nb, m, n}, std::move(out), {a, b},
                 [a, b, nb, m, k, n](TensorNode& self) mutable {
                   if (a.node()->needs_grad()) {
                     std::vector<float> ga((size_t)nb * m * k, 0.0f);
                     for (int64_t i = 0; i < nb; ++i)
                       detail::gemm_nt_acc(self.grad.data() + i * m * n, b.ptr() + i * k * n,
                                           ga.data() + i * m * k, m, n, k);
                     accumulate_grad(a, ga.data());
                   }
                   if (b.node()->needs_grad()) {
                     std::vector<float> gb((size_t)nb * k * n, 0.0f);
                     for (int64_t i = 0; i < nb; ++i)
                       detail::gemm_tn_acc(a.ptr() + i * m * k, self.grad.data() + i * m * n,
                                           gb.data() + i * k * n, m, k, n);
                     accumulate_grad(b, gb.data());
                   }
                 });
}

// a: B×M×K, b: B×N×K -> B×M×N (second operand transposed; attention scores)
inline Tensor bmm_nt(Tensor a, Tensor b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw DimError("bmm_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  std::vector<float> out((size_t)nb * m * n, 0.0f);
  for (int64_t i = 0; i < nb; ++i)
    detail::gemm_nt_acc(a.ptr() + i * m * k, b.ptr() + i * n * k, out.data() + i * m * n, m, k, n);
  return make_op({nb, m, n}, std::move(out), {a, b},
                 [a, b, nb, m, k, n](TensorNode& self) mutable {
                   if (a.node()->needs_grad()) {
                     std::vector<float> ga((size_t)nb * m * k, 0.0f);
                     for (int64_t i = 0; i < nb; ++i)
                       detail::gemm_nn_acc(self.grad.data() + i * m * n, b.ptr() + i * n * k,
                                           ga.data() + i * m * k, m, n, k);
                     accumulate_grad(a, ga.data());
                   }
                   if (b.node()->needs_grad()) {
                     std::vector<float> gb((size_t)nb * n * k, 0.0f);
                     for (int64_t i = 0; i < nb; ++i)
                       detail::gemm_tn_acc(self.grad.data() + i * m * n, a.ptr() + i * m * k,
                                           gb.data() + i * n * k, m, n, k);
                     accumulate_grad(b, gb.data());
                   }
                 });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Tensor relu(Tensor x) {
  std::vector<float> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x.ptr()[i] > 0.0f ? x.ptr()[i] : 0.0f;
  return make_op(x.shape(), std::move(out), {x}, [x](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(self.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = x.ptr()[i] > 0.0f ? self.grad[i] : 0.0f;
    accumulate_grad(x, g.data());
  });
}

inline Tensor tanh_op(Tensor x) {
  std::vector<float> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x.ptr()[i]);
  return make_op(x.shape(), std::move(out), {x}, [x](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(self.grad.size());
    for (size_t i = 0; i < g.size(); ++i) {
      const float y = self.data[i];
      g[i] = self.grad[i] * (1.0f - y * y);
    }
    accumulate_grad(x, g.data());
  });
}

namespace detail {
inline float softplus(float z) {  // log(1 + e^z), stable
  if (z > 20.0f) return z;
  if (z < -20.0f) return std::exp(z);
  return std::log1p(std::exp(z));
}
inline float sigmoid(float z) { return 1.0f / (1.0f + std::exp(-z)); }
}  // namespace detail

// log(sigmoid(x))
inline Tensor log_sigmoid(Tensor x) {
  std::vector<float> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = -detail::softplus(-x.ptr()[i]);
  return make_op(x.shape(), std::move(out), {x}, [x](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(self.grad.size());
    for (size_t i = 0; i < g.size(); ++i)
      g[i] = self.grad[i] * detail::sigmoid(-x.ptr()[i]);
    accumulate_grad(x, g.data());
  });
}

// log(1 - sigmoid(x))
inline Tensor log_one_minus_sigmoid(Tensor x) {
  std::vector<float> out(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = -detail::softplus(x.ptr()[i]);
  return make_op(x.shape(), std::move(out), {x}, [x](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(self.grad.size());
    for (size_t i = 0; i < g.size(); ++i)
      g[i] = -self.grad[i] * detail::sigmoid(x.ptr()[i]);
    accumulate_grad(x, g.data());
  });
}

// Softmax over the last dimension. Entries equal to -inf get probability 0,
// which keeps fully-masked keys out of attention without perturbing the sums
// over the surviving entries.
inline Tensor softmax_lastdim(Tensor x) {
  const int64_t rows = detail::fold_rows(x), n = x.shape().back();
  std::vector<float> out(x.numel());
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = x.ptr() + r * n;
    float* o = out.data() + r * n;
    float mx = kNegInf;
    for (int64_t j = 0; j < n; ++j) mx = std::max(mx, in[j]);
    float denom = 0.0f;
    for (int64_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      denom += o[j];
    }
    const float inv = 1.0f / denom;
    for (int64_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return make_op(x.shape(), std::move(out), {x}, [x, rows, n](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(self.grad.size());
    for (int64_t r = 0; r < rows; ++r) {
      const float* y = self.data.data() + r * n;
      const float* dy = self.grad.data() + r * n;
      float dot = 0.0f;
      for (int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (int64_t j = 0; j < n; ++j) g[r * n + j] = y[j] * (dy[j] - dot);
    }
    accumulate_grad(x, g.data());
  });
}

inline Tensor log_softmax_lastdim(Tensor x) {
  const int64_t rows = detail::fold_rows(x), n = x.shape().back();
  std::vector<float> out(x.numel());
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = x.ptr() + r * n;
    float* o = out.data() + r * n;
    float mx = kNegInf;
    for (int64_t j = 0; j < n; ++j) mx = std::max(mx, in[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) denom += std::exp((double)in[j] - mx);
    const float lse = mx + (float)std::log(denom);
    for (int64_t j = 0; j < n; ++j) o[j] = in[j] - lse;
  }
  return make_op(x.shape(), std::move(out), {x}, [x, rows, n](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(self.grad.size());
    for (int64_t r = 0; r < rows; ++r) {
      const float* y = self.data.data() + r * n;
      const float* dy = self.grad.data() + r * n;
      float dsum = 0.0f;
      for (int64_t j = 0; j < n; ++j) dsum += dy[j];
      for (int64_t j = 0; j < n; ++j) g[r * n + j] = dy[j] - std::exp(y[j]) * dsum;
    }
    accumulate_grad(x, g.data());
  });
}

// ---------------------------------------------------------------------------
// Normalization

// Per-slice layer norm over the last dimension (biased variance).
inline Tensor layer_norm(Tensor x, Tensor gamma, Tensor beta, float eps) {
  const int64_t n = x.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != n || beta.dim(0) != n)
    throw DimError("layer_norm: gamma/beta must be length " + std::to_string(n));
  if (eps <= 0.0f) throw ContractError("layer_norm: eps must be positive");
  const int64_t rows = detail::fold_rows(x);
  std::vector<float> out(x.numel());
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const float* in = x.ptr() + r * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += in[j];
    mean /= n;
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      const double d = in[j] - mean;
      var += d * d;
    }
    var /= n;
    const float istd = (float)(1.0 / std::sqrt(var + (double)eps));
    (*inv_std)[r] = istd;
    for (int64_t j = 0; j < n; ++j) {
      const float xh = ((float)(in[j] - mean)) * istd;
      (*xhat)[r * n + j] = xh;
      out[r * n + j] = gamma.ptr()[j] * xh + beta.ptr()[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat, inv_std, rows, n](TensorNode& self) mutable {
                   if (gamma.node()->needs_grad()) {
                     std::vector<float> gg(n, 0.0f);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t j = 0; j < n; ++j)
                         gg[j] += self.grad[r * n + j] * (*xhat)[r * n + j];
                     accumulate_grad(gamma, gg.data());
                   }
                   if (beta.node()->needs_grad()) {
                     std::vector<float> gb(n, 0.0f);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t j = 0; j < n; ++j) gb[j] += self.grad[r * n + j];
                     accumulate_grad(beta, gb.data());
                   }
                   if (x.node()->needs_grad()) {
                     std::vector<float> gx(self.grad.size());
                     for (int64_t r = 0; r < rows; ++r) {
                       const float* dy = self.grad.data() + r * n;
                       const float* xh = xhat->data() + r * n;
                       float sum_g = 0.0f, sum_gx = 0.0f;
                       for (int64_t j = 0; j < n; ++j) {
                         const float gj = dy[j] * gamma.ptr()[j];
                         sum_g += gj;
                         sum_gx += gj * xh[j];
                       }
                       const float m1 = sum_g / n, m2 = sum_gx / n;
                       for (int64_t j = 0; j < n; ++j) {
                         const float gj = dy[j] * gamma.ptr()[j];
                         gx[r * n + j] = (gj - m1 - xh[j] * m2) * (*inv_std)[r];
                       }
                     }
                     accumulate_grad(x, gx.data());
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions, slicing, gathering

inline Tensor sum_all(Tensor x) {
  double acc = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.ptr()[i];
  return make_op({1}, {(float)acc}, {x}, [x](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(x.numel(), self.grad[0]);
    accumulate_grad(x, g.data());
  });
}

// Contiguous range [from, to) of the last dimension.
inline Tensor slice_last(Tensor x, int64_t from, int64_t to) {
  const int64_t n = x.shape().back();
  if (from < 0 || to > n || from >= to) throw DimError("slice_last: bad range");
  const int64_t rows = detail::fold_rows(x), w = to - from;
  std::vector<float> out((size_t)rows * w);
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * w, x.ptr() + r * n + from, w * sizeof(float));
  Shape oshape = x.shape();
  oshape.back() = w;
  return make_op(std::move(oshape), std::move(out), {x},
                 [x, from, rows, w, n](TensorNode& self) mutable {
                   if (!x.node()->needs_grad()) return;
                   std::vector<float> g(x.numel(), 0.0f);
                   for (int64_t r = 0; r < rows; ++r)
                     for (int64_t j = 0; j < w; ++j) g[r * n + from + j] = self.grad[r * w + j];
                   accumulate_grad(x, g.data());
                 });
}

// Rows of a 2-D table by integer index (embedding lookup).
inline Tensor gather_rows(Tensor table, const std::vector<int>& idx) {
  if (table.rank() != 2) throw DimError("gather_rows: table must be 2-D");
  const int64_t r = table.dim(0), c = table.dim(1);
  for (int i : idx)
    if (i < 0 || i >= r) throw ContractError("gather_rows: index out of range");
  const int64_t n = (int64_t)idx.size();
  std::vector<float> out((size_t)n * c);
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(out.data() + i * c, table.ptr() + (int64_t)idx[i] * c, c * sizeof(float));
  return make_op({n, c}, std::move(out), {table}, [table, idx, c](TensorNode& self) mutable {
    if (!table.node()->needs_grad()) return;
    table.node()->ensure_grad();
    float* g = table.node()->grad.data();
    for (size_t i = 0; i < idx.size(); ++i)
      for (int64_t j = 0; j < c; ++j) g[(int64_t)idx[i] * c + j] += self.grad[i * c + j];
  });
}

// Valid frames [0, len) of batch entry b from a B×T×N tensor.
inline Tensor slice_time(Tensor x, int64_t b, int64_t len) {
  if (x.rank() != 3) throw DimError("slice_time: expects B×T×N");
  const int64_t t = x.dim(1), n = x.dim(2);
  if (b < 0 || b >= x.dim(0) || len < 1 || len > t) throw DimError("slice_time: bad range");
  std::vector<float> out((size_t)len * n);
  std::memcpy(out.data(), x.ptr() + (b * t) * n, (size_t)len * n * sizeof(float));
  return make_op({len, n}, std::move(out), {x}, [x, b, t, n, len](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(x.numel(), 0.0f);
    std::memcpy(g.data() + (b * t) * n, self.grad.data(), (size_t)len * n * sizeof(float));
    accumulate_grad(x, g.data());
  });
}

// B×T×(H·dh) -> (B·H)×T×dh
inline Tensor split_heads(Tensor x, int64_t heads) {
  if (x.rank() != 3 || x.dim(2) % heads != 0) throw DimError("split_heads: bad shape");
  const int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2), dh = d / heads;
  std::vector<float> out(x.numel());
  for (int64_t i = 0; i < b; ++i)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t s = 0; s < t; ++s)
        std::memcpy(out.data() + (((i * heads + h) * t) + s) * dh,
                    x.ptr() + ((i * t + s) * d) + h * dh, dh * sizeof(float));
  return make_op({b * heads, t, dh}, std::move(out), {x},
                 [x, b, t, d, dh, heads](TensorNode& self) mutable {
                   if (!x.node()->needs_grad()) return;
                   std::vector<float> g(x.numel());
                   for (int64_t i = 0; i < b; ++i)
                     for (int64_t h = 0; h < heads; ++h)
                       for (int64_t s = 0; s < t; ++s)
                         std::memcpy(g.data() + ((i * t + s) * d) + h * dh,
                                     self.grad.data() + (((i * heads + h) * t) + s) * dh,
                                     dh * sizeof(float));
                   accumulate_grad(x, g.data());
                 });
}

// (B·H)×T×dh -> B×T×(H·dh)
inline Tensor merge_heads(Tensor x, int64_t heads) {
  if (x.rank() != 3 || x.dim(0) % heads != 0) throw DimError("merge_heads: bad shape");
  const int64_t b = x.dim(0) / heads, t = x.dim(1), dh = x.dim(2), d = dh * heads;
  std::vector<float> out(x.numel());
  for (int64_t i = 0; i < b; ++i)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t s = 0; s < t; ++s)
        std::memcpy(out.data() + ((i * t + s) * d) + h * dh,
                    x.ptr() + (((i * heads + h) * t) + s) * dh, dh * sizeof(float));
  return make_op({b, t, d}, std::move(out), {x},
                 [x, b, t, d, dh, heads](TensorNode& self) mutable {
                   if (!x.node()->needs_grad()) return;
                   std::vector<float> g(x.numel());
                   for (int64_t i = 0; i < b; ++i)
                     for (int64_t h = 0; h < heads; ++h)
                       for (int64_t s = 0; s < t; ++s)
                         std::memcpy(g.data() + (((i * heads + h) * t) + s) * dh,
                                     self.grad.data() + ((i * t + s) * d) + h * dh,
                                     dh * sizeof(float));
                   accumulate_grad(x, g.data());
                 });
}

// a: T×j, b: S×j -> T×S×j with out[t][s] = a[t] + b[s] (joint network lattice).
inline Tensor outer_add(Tensor a, Tensor b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw DimError("outer_add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t t = a.dim(0), s = b.dim(0), j = a.dim(1);
  std::vector<float> out((size_t)t * s * j);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t u = 0; u < s; ++u)
      for (int64_t v = 0; v < j; ++v)
        out[((i * s) + u) * j + v] = a.ptr()[i * j + v] + b.ptr()[u * j + v];
  return make_op({t, s, j}, std::move(out), {a, b}, [a, b, t, s, j](TensorNode& self) mutable {
    if (a.node()->needs_grad()) {
      std::vector<float> g((size_t)t * j, 0.0f);
      for (int64_t i = 0; i < t; ++i)
        for (int64_t u = 0; u < s; ++u)
          for (int64_t v = 0; v < j; ++v) g[i * j + v] += self.grad[((i * s) + u) * j + v];
      accumulate_grad(a, g.data());
    }
    if (b.node()->needs_grad()) {
      std::vector<float> g((size_t)s * j, 0.0f);
      for (int64_t i = 0; i < t; ++i)
        for (int64_t u = 0; u < s; ++u)
          for (int64_t v = 0; v < j; ++v) g[u * j + v] += self.grad[((i * s) + u) * j + v];
      accumulate_grad(b, g.data());
    }
  });
}

// x: T×S×V, tokens: U ints (U <= S) -> T×U with out[t][u] = x[t][u][tokens[u]].
inline Tensor gather_labels(Tensor x, const std::vector<int>& tokens) {
  if (x.rank() != 3) throw DimError("gather_labels: expects T×S×V");
  const int64_t t = x.dim(0), s = x.dim(1), v = x.dim(2), u = (int64_t)tokens.size();
  if (u > s) throw DimError("gather_labels: more tokens than lattice columns");
  for (int tok : tokens)
    if (tok < 0 || tok >= v) throw ContractError("gather_labels: token out of range");
  std::vector<float> out((size_t)t * u);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t k = 0; k < u; ++k) out[i * u + k] = x.ptr()[(i * s + k) * v + tokens[k]];
  return make_op({t, u}, std::move(out), {x}, [x, tokens, t, s, v, u](TensorNode& self) mutable {
    if (!x.node()->needs_grad()) return;
    std::vector<float> g(x.numel(), 0.0f);
    for (int64_t i = 0; i < t; ++i)
      for (int64_t k = 0; k < u; ++k) g[(i * s + k) * v + tokens[k]] = self.grad[i * u + k];
    accumulate_grad(x, g.data());
  });
}

// ---------------------------------------------------------------------------
// Depthwise temporal convolution. Causal layers see [t-k+1, t]; non-causal
// layers see a centered window (kernel width must be odd).

inline Tensor depthwise_conv1d(Tensor x, Tensor kernel, Tensor bias, bool causal) {
  if (x.rank() != 3 || kernel.rank() != 2 || x.dim(2) != kernel.dim(1))
    throw DimError("depthwise_conv1d: " + shape_str(x.shape()) + " with kernel " +
                   shape_str(kernel.shape()));
  const int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2), k = kernel.dim(0);
  if (!causal && k % 2 == 0) throw DimError("depthwise_conv1d: centered kernel must be odd");
  if (bias.rank() != 1 || bias.dim(0) != d) throw DimError("depthwise_conv1d: bad bias");
  const int64_t shift = causal ? k - 1 : (k - 1) / 2;  // input offset of kernel tap 0
  std::vector<float> out(x.numel());
  for (int64_t i = 0; i < b; ++i)
    for (int64_t s = 0; s < t; ++s)
      for (int64_t c = 0; c < d; ++c) {
        float acc = bias.ptr()[c];
        for (int64_t tap = 0; tap < k; ++tap) {
          const int64_t src = s - shift + tap;
          if (src < 0 || src >= t) continue;
          acc += kernel.ptr()[tap * d + c] * x.ptr()[(i * t + src) * d + c];
        }
        out[(i * t + s) * d + c] = acc;
      }
  return make_op(x.shape(), std::move(out), {x, kernel, bias},
                 [x, kernel, bias, b, t, d, k, shift](TensorNode& self) mutable {
                   if (x.node()->needs_grad()) {
                     std::vector<float> g(x.numel(), 0.0f);
                     for (int64_t i = 0; i < b; ++i)
                       for (int64_t s = 0; s < t; ++s)
                         for (int64_t c = 0; c < d; ++c) {
                           const float dy = self.grad[(i * t + s) * d + c];
                           if (dy == 0.0f) continue;
                           for (int64_t tap = 0; tap < k; ++tap) {
                             const int64_t src = s - shift + tap;
                             if (src < 0 || src >= t) continue;
                             g[(i * t + src) * d + c] += dy * kernel.ptr()[tap * d + c];
                           }
                         }
                     accumulate_grad(x, g.data());
                   }
                   if (kernel.node()->needs_grad()) {
                     std::vector<float> g(kernel.numel(), 0.0f);
                     for (int64_t i = 0; i < b; ++i)
                       for (int64_t s = 0; s < t; ++s)
                         for (int64_t c = 0; c < d; ++c) {
                           const float dy = self.grad[(i * t + s) * d + c];
                           if (dy == 0.0f) continue;
                           for (int64_t tap = 0; tap < k; ++tap) {
                             const int64_t src = s - shift + tap;
                             if (src < 0 || src >= t) continue;
                             g[tap * d + c] += dy * x.ptr()[(i * t + src) * d + c];
                           }
                         }
                     accumulate_grad(kernel, g.data());
                   }
                   if (bias.node()->needs_grad()) {
                     std::vector<float> g(d, 0.0f);
                     for (int64_t r = 0; r < b * t; ++r)
                       for (int64_t c = 0; c < d; ++c) g[c] += self.grad[r * d + c];
                     accumulate_grad(bias, g.data());
                   }
                 });
}

}  // namespace ldasr
