#pragma once

// Differentiable primitives over Tensor<T>. Every op validates shapes, computes
// its forward value eagerly, and records a backward closure on the thread's
// tape when grad mode is on and any input requires grad.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "xsmoe/rng.hpp"
#include "xsmoe/tensor.hpp"

namespace xsmoe {

// Row index that gather_rows maps to an all-zero row.
inline constexpr std::size_t kPadRow = std::numeric_limits<std::size_t>::max();

namespace detail {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(const Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto* in : inputs) needs = needs || in->requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->backward = std::move(backward);
    Tape<T>::current().record(n);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                      std::function<void(const Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->backward = std::move(backward);
    Tape<T>::current().record(n);
  }
  return Tensor<T>(std::move(n));
}

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op, const char* name) {
  require(t.rank() == 2, op, std::string(name) + " must be rank 2, got " + shape_str(t.shape()));
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// out[n,m] += a[n,k] * b[k,m]
template <typename T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* o = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* br = b + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

// out[n,m] += a[n,k] * b[m,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
  std::vector<T> bt(k * m);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * m + j] = b[j * k + p];
  gemm_nn(a, bt.data(), out, n, k, m);
}

// out[k,m] += a[n,k]^T * b[n,m]
template <typename T>
void gemm_tn(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const T* br = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      T* o = out + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[n,k] * b[k,m]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul", "lhs");
  detail::require_matrix(b, "matmul", "rhs");
  detail::require(a.dim(1) == b.dim(0), "matmul",
                  "inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<T> out(n * m, T(0));
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>({n, m}, std::move(out), {&a, &b}, [an, bn, n, k, m](const auto& self) {
    if (an->requires_grad)  // dA = dY * B^T
      detail::gemm_nt(self.grad.data(), bn->value.data(), an->ensure_grad().data(), n, m, k);
    if (bn->requires_grad)  // dB = A^T * dY
      detail::gemm_tn(an->value.data(), self.grad.data(), bn->ensure_grad().data(), n, k, m);
  });
}

/// a[n,k] * b[m,k]^T, the row-batched form of applying a weight matrix b.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_nt", "lhs");
  detail::require_matrix(b, "matmul_nt", "rhs");
  detail::require(a.dim(1) == b.dim(1), "matmul_nt",
                  "inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  std::vector<T> out(n * m, T(0));
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), n, k, m);
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>({n, m}, std::move(out), {&a, &b}, [an, bn, n, k, m](const auto& self) {
    if (an->requires_grad)  // dA = dY * B
      detail::gemm_nn(self.grad.data(), bn->value.data(), an->ensure_grad().data(), n, m, k);
    if (bn->requires_grad)  // dB = dY^T * A
      detail::gemm_tn(self.grad.data(), an->value.data(), bn->ensure_grad().data(), n, m, k);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](const auto& self) {
    for (auto* in : {an.get(), bn.get()}) {
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](const auto& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [an, bn](const auto& self) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  auto an = a.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, [an, c](const auto& self) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
}

/// x[n,m] + bias[m] broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_matrix(x, "add_bias", "input");
  detail::require(bias.size() == x.dim(1), "add_bias",
                  "bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] = x[r * m + c] + bias[c];
  auto xn = x.node(), bn = bias.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &bias}, [xn, bn, n, m](const auto& self) {
    if (xn->requires_grad) {
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) g[c] += self.grad[r * m + c];
    }
  });
}

/// Exact-erf GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [xn](const auto& self) {
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xn->value[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [xn](const auto& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.value[i];
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x[i]);
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [xn](const auto& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / xn->value[i];
  });
}

/// Inverted dropout. Identity (same tensor) when !training or rate == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  const T keep_scale = T(1) / T(1.0 - rate);
  std::vector<T> mask(x.size());
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < rate ? T(0) : keep_scale;
    out[i] = x[i] * mask[i];
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x},
                                [xn, mask = std::move(mask)](const auto& self) {
                                  auto& g = xn->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
                                });
}

// ---------------------------------------------------------------------------
// Row-wise reductions and normalizations

/// Softmax over the last dimension of a matrix (or the whole of a vector).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < n; ++r) {
    const T* in = x.data().data() + r * m;
    T* o = out.data() + r * m;
    const T mx = *std::max_element(in, in + m);
    T sum = T(0);
    for (std::size_t c = 0; c < m; ++c) sum += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < m; ++c) o[c] /= sum;
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [xn, n, m](const auto& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < n; ++r) {
      const T* y = self.value.data() + r * m;
      const T* dy = self.grad.data() + r * m;
      T dot = T(0);
      for (std::size_t c = 0; c < m; ++c) dot += dy[c] * y[c];
      for (std::size_t c = 0; c < m; ++c) g[r * m + c] += y[c] * (dy[c] - dot);
    }
  });
}

/// (x - mean) / sqrt(var + eps) * gamma + beta, per row.
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          T eps = T(1e-5)) {
  detail::require_matrix(x, "layer_norm", "input");
  const std::size_t n = x.dim(0), m = x.dim(1);
  detail::require(gamma.size() == m && beta.size() == m, "layer_norm",
                  "affine params " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                      " vs input " + shape_str(x.shape()));
  std::vector<T> out(x.size()), xhat(x.size()), inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* in = x.data().data() + r * m;
    T mean = T(0);
    for (std::size_t c = 0; c < m; ++c) mean += in[c];
    mean /= T(m);
    T var = T(0);
    for (std::size_t c = 0; c < m; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= T(m);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < m; ++c) {
      xhat[r * m + c] = (in[c] - mean) * inv_std[r];
      out[r * m + c] = xhat[r * m + c] * gamma[c] + beta[c];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](const auto& self) {
        if (gn->requires_grad) {
          auto& g = gn->ensure_grad();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) g[c] += self.grad[r * m + c] * xhat[r * m + c];
        }
        if (bn->requires_grad) {
          auto& g = bn->ensure_grad();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) g[c] += self.grad[r * m + c];
        }
        if (xn->requires_grad) {
          auto& g = xn->ensure_grad();
          std::vector<T> dxhat(m);
          for (std::size_t r = 0; r < n; ++r) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t c = 0; c < m; ++c) {
              dxhat[c] = self.grad[r * m + c] * gn->value[c];
              mean_d += dxhat[c];
              mean_dx += dxhat[c] * xhat[r * m + c];
            }
            mean_d /= T(m);
            mean_dx /= T(m);
            for (std::size_t c = 0; c < m; ++c)
              g[r * m + c] += inv_std[r] * (dxhat[c] - mean_d - xhat[r * m + c] * mean_dx);
          }
        }
      });
}

/// Euclidean norm of each row: [n,m] -> [n,1].
template <typename T>
Tensor<T> l2norm_rows(const Tensor<T>& x) {
  const std::size_t n = x.rows(), m = x.cols();
  std::vector<T> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    T s = T(0);
    for (std::size_t c = 0; c < m; ++c) s += x[r * m + c] * x[r * m + c];
    out[r] = std::sqrt(s);
  }
  auto xn = x.node();
  return detail::make_result<T>({n, 1}, std::move(out), {&x}, [xn, n, m](const auto& self) {
    auto& g = xn->ensure_grad();
    for (std::size_t r = 0; r < n; ++r) {
      const T norm = self.value[r];
      if (norm == T(0)) continue;
      for (std::size_t c = 0; c < m; ++c) g[r * m + c] += self.grad[r] * xn->value[r * m + c] / norm;
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  auto xn = x.node();
  return detail::make_result<T>({1}, {s}, {&x}, [xn](const auto& self) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  const T inv = T(1) / T(x.size());
  auto xn = x.node();
  return detail::make_result<T>({1}, {s * inv}, {&x}, [xn, inv](const auto& self) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Indexing and assembly

/// Rows of `table` selected by `index`; kPadRow yields a zero row. Serves as
/// embedding lookup (table = parameter) and as row gather.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::vector<std::size_t> index) {
  detail::require_matrix(table, "gather_rows", "table");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<T> out(index.size() * d, T(0));
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] == kPadRow) continue;
    detail::require(index[r] < v, "gather_rows",
                    "index " + std::to_string(index[r]) + " out of range for " + shape_str(table.shape()));
    std::copy_n(table.data().data() + index[r] * d, d, out.data() + r * d);
  }
  auto tn = table.node();
  const std::size_t n = index.size();
  return detail::make_result<T>({n, d}, std::move(out), {&table},
                                [tn, d, index = std::move(index)](const auto& self) {
                                  auto& g = tn->ensure_grad();
                                  for (std::size_t r = 0; r < index.size(); ++r) {
                                    if (index[r] == kPadRow) continue;
                                    for (std::size_t c = 0; c < d; ++c)
                                      g[index[r] * d + c] += self.grad[r * d + c];
                                  }
                                });
}

/// Column-wise concatenation of matrices with equal row counts.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat", "no inputs");
  const std::size_t n = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat", "input");
    detail::require(p.dim(0) == n, "concat",
                    "row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<T> out(n * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(parts[k].data().data() + r * widths[k], widths[k], out.data() + r * total + off);
    off += widths[k];
  }
  std::vector<detail::NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<T>({n, total}, std::move(out), parts,
                                [nodes, widths, n, total](const auto& self) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                                    if (nodes[k]->requires_grad) {
                                      auto& g = nodes[k]->ensure_grad();
                                      for (std::size_t r = 0; r < n; ++r)
                                        for (std::size_t c = 0; c < widths[k]; ++c)
                                          g[r * widths[k] + c] += self.grad[r * total + off + c];
                                    }
                                    off += widths[k];
                                  }
                                });
}

/// Per-row convex (or arbitrary) combination: out[r] = sum_k alpha[r,k] * xs[k][r].
template <typename T>
Tensor<T> mixture(const Tensor<T>& alpha, const std::vector<Tensor<T>>& xs) {
  detail::require_matrix(alpha, "mixture", "weights");
  detail::require(alpha.dim(1) == xs.size(), "mixture",
                  "weights " + shape_str(alpha.shape()) + " for " + std::to_string(xs.size()) + " inputs");
  const std::size_t n = alpha.dim(0), kk = xs.size();
  const std::size_t d = xs.empty() ? 0 : xs[0].cols();
  for (const auto& x : xs) {
    detail::require(x.rank() == 2 && x.dim(0) == n && x.dim(1) == d, "mixture",
                    "input " + shape_str(x.shape()) + " vs weights " + shape_str(alpha.shape()));
  }
  std::vector<T> out(n * d, T(0));
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t r = 0; r < n; ++r) {
      const T a = alpha[r * kk + k];
      const T* xr = xs[k].data().data() + r * d;
      T* o = out.data() + r * d;
      for (std::size_t c = 0; c < d; ++c) o[c] += a * xr[c];
    }
  std::vector<Tensor<T>> inputs = xs;
  inputs.push_back(alpha);
  std::vector<detail::NodePtr<T>> nodes;
  for (const auto& x : xs) nodes.push_back(x.node());
  auto an = alpha.node();
  return detail::make_result<T>({n, d}, std::move(out), inputs, [an, nodes, n, kk, d](const auto& self) {
    for (std::size_t k = 0; k < kk; ++k) {
      const auto& xn = nodes[k];
      if (an->requires_grad) {
        auto& ga = an->ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
          T s = T(0);
          for (std::size_t c = 0; c < d; ++c) s += self.grad[r * d + c] * xn->value[r * d + c];
          ga[r * kk + k] += s;
        }
      }
      if (xn->requires_grad) {
        auto& gx = xn->ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
          const T a = an->value[r * kk + k];
          for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += a * self.grad[r * d + c];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Sequence and loss primitives

/// Multi-head causal self-attention over `batch` sequences of `len` rows each,
/// stored as [batch*len, dim] for q, k and v. Sequence b's keys before
/// first_valid[b] are masked (left padding). A query with no admissible key
/// produces a zero row.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t batch, std::size_t len, std::size_t heads,
                           std::vector<std::size_t> first_valid) {
  detail::require_same(q, k, "causal_attention");
  detail::require_same(q, v, "causal_attention");
  detail::require_matrix(q, "causal_attention", "q");
  detail::require(q.dim(0) == batch * len, "causal_attention",
                  "rows " + std::to_string(q.dim(0)) + " != batch*len " + std::to_string(batch * len));
  detail::require(heads > 0 && q.dim(1) % heads == 0, "causal_attention",
                  "dim " + std::to_string(q.dim(1)) + " not divisible by heads " + std::to_string(heads));
  detail::require(first_valid.size() == batch, "causal_attention", "first_valid size != batch");
  const std::size_t dim = q.dim(1), dh = dim / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  std::vector<T> out(q.size(), T(0));
  std::vector<T> probs(batch * heads * len * len, T(0));
  const T* Q = q.data().data();
  const T* K = k.data().data();
  const T* V = v.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t s0 = first_valid[b];
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = s0; t < len; ++t) {
        T* p = probs.data() + ((b * heads + h) * len + t) * len;
        const T* qt = Q + (b * len + t) * dim + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t s = s0; s <= t; ++s) {
          const T* ks = K + (b * len + s) * dim + h * dh;
          T dot = T(0);
          for (std::size_t c = 0; c < dh; ++c) dot += qt[c] * ks[c];
          p[s] = dot * sc;
          mx = std::max(mx, p[s]);
        }
        T z = T(0);
        for (std::size_t s = s0; s <= t; ++s) z += (p[s] = std::exp(p[s] - mx));
        T* ot = out.data() + (b * len + t) * dim + h * dh;
        for (std::size_t s = s0; s <= t; ++s) {
          p[s] /= z;
          const T* vs = V + (b * len + s) * dim + h * dh;
          for (std::size_t c = 0; c < dh; ++c) ot[c] += p[s] * vs[c];
        }
      }
    }
  }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return detail::make_result<T>(
      q.shape(), std::move(out), {&q, &k, &v},
      [qn, kn, vn, batch, len, heads, dim, dh, sc, first_valid = std::move(first_valid),
       probs = std::move(probs)](const auto& self) {
        std::vector<T>* gq = qn->requires_grad ? &qn->ensure_grad() : nullptr;
        std::vector<T>* gk = kn->requires_grad ? &kn->ensure_grad() : nullptr;
        std::vector<T>* gv = vn->requires_grad ? &vn->ensure_grad() : nullptr;
        std::vector<T> dp(len);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t s0 = first_valid[b];
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t t = s0; t < len; ++t) {
              const T* p = probs.data() + ((b * heads + h) * len + t) * len;
              const T* dot_ = self.grad.data() + (b * len + t) * dim + h * dh;
              T acc = T(0);
              for (std::size_t s = s0; s <= t; ++s) {
                const T* vs = vn->value.data() + (b * len + s) * dim + h * dh;
                T d = T(0);
                for (std::size_t c = 0; c < dh; ++c) d += dot_[c] * vs[c];
                dp[s] = d;
                acc += p[s] * d;
                if (gv) {
                  T* g = gv->data() + (b * len + s) * dim + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) g[c] += p[s] * dot_[c];
                }
              }
              const T* qt = qn->value.data() + (b * len + t) * dim + h * dh;
              for (std::size_t s = s0; s <= t; ++s) {
                const T ds = p[s] * (dp[s] - acc) * sc;
                if (ds == T(0)) continue;
                const T* ks = kn->value.data() + (b * len + s) * dim + h * dh;
                if (gq) {
                  T* g = gq->data() + (b * len + t) * dim + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) g[c] += ds * ks[c];
                }
                if (gk) {
                  T* g = gk->data() + (b * len + s) * dim + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) g[c] += ds * qt[c];
                }
              }
            }
          }
        }
      });
}

/// Mean over rows of -log softmax(logits[r, mask_r])[target_r], where the
/// softmax runs only over columns with mask set. Max-subtracted.
template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, std::vector<std::uint8_t> mask,
                               std::vector<std::size_t> targets) {
  detail::require_matrix(logits, "masked_cross_entropy", "logits");
  const std::size_t n = logits.dim(0), m = logits.dim(1);
  detail::require(mask.size() == n * m && targets.size() == n && n > 0, "masked_cross_entropy",
                  "mask/targets do not match logits " + shape_str(logits.shape()));
  std::vector<T> probs(n * m, T(0));
  T total = T(0);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t tgt = targets[r];
    if (tgt >= m || !mask[r * m + tgt])
      throw ContractError("masked_cross_entropy: target column must be admissible");
    const T* row = logits.data().data() + r * m;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < m; ++c)
      if (mask[r * m + c]) mx = std::max(mx, row[c]);
    T z = T(0);
    for (std::size_t c = 0; c < m; ++c)
      if (mask[r * m + c]) z += (probs[r * m + c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < m; ++c) probs[r * m + c] /= z;
    total += (mx + std::log(z)) - row[tgt];
  }
  const T inv_n = T(1) / T(n);
  auto ln = logits.node();
  return detail::make_result<T>(
      {1}, {total * inv_n}, {&logits},
      [ln, n, m, inv_n, probs = std::move(probs), targets = std::move(targets)](const auto& self) {
        auto& g = ln->ensure_grad();
        const T up = self.grad[0] * inv_n;
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < m; ++c) g[r * m + c] += up * probs[r * m + c];
          g[r * m + targets[r]] -= up;
        }
      });
}

}  // namespace xsmoe
