#pragma once

#include <mucodec/core/graph.hpp>

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Differentiable primitives. Every op works on the rank-2 view of its inputs
// (see Tensor::rows/cols) and records one node with a closed-form backward.

namespace mucodec::ops {

namespace detail {

template <typename T>
void accumulate(Graph<T>& g, std::size_t id, const Tensor<T>& delta) {
  if (!g.wants_grad(id)) return;
  auto& gb = g.grad_buffer(id);
  for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += delta[i];
}

template <typename T>
Graph<T>& same_graph(const Var<T>& a, const Var<T>& b) {
  if (&a.graph() != &b.graph()) throw std::logic_error("ops: operands from different graphs");
  return a.graph();
}

enum class Broadcast { kSame, kRow, kScalar };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (b.size() == a.size() && b.shape() == a.shape()) return Broadcast::kSame;
  if (b.size() == 1) return Broadcast::kScalar;
  if (b.size() == a.cols()) return Broadcast::kRow;
  if (b.size() == a.size()) return Broadcast::kSame;
  throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                              shape_str(a.shape()));
}

template <typename T>
std::size_t bindex(Broadcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Broadcast::kSame: return i;
    case Broadcast::kRow: return i % cols;
    case Broadcast::kScalar: return 0;
  }
  return 0;
}

template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D dfdx) {
  auto& g = a.graph();
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [ia, dfdx](Graph<T>& g, std::size_t self) {
    const auto& x = g.node(ia).value;
    const auto& y = g.node(self).value;
    const auto& gy = g.node(self).grad;
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] = gy[i] * dfdx(x[i], y[i]);
    accumulate(g, ia, gx);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

/// a + b, where b may match a, be a single row broadcast over rows, or a scalar.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "add");
  const std::size_t cols = av.cols();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[detail::bindex<T>(kind, i, cols)];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib, kind, cols](Graph<T>& g, std::size_t self) {
    const auto& gy = g.node(self).grad;
    detail::accumulate(g, ia, gy);
    if (g.wants_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[detail::bindex<T>(kind, i, cols)] += gy[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "sub");
  const std::size_t cols = av.cols();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[detail::bindex<T>(kind, i, cols)];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib, kind, cols](Graph<T>& g, std::size_t self) {
    const auto& gy = g.node(self).grad;
    detail::accumulate(g, ia, gy);
    if (g.wants_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[detail::bindex<T>(kind, i, cols)] -= gy[i];
    }
  });
}

/// Elementwise product with the same broadcasting rules as add.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  const auto kind = detail::broadcast_kind(av, bv, "mul");
  const std::size_t cols = av.cols();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[detail::bindex<T>(kind, i, cols)];
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib, kind, cols](Graph<T>& g, std::size_t self) {
    const auto& gy = g.node(self).grad;
    const auto& av = g.node(ia).value;
    const auto& bv = g.node(ib).value;
    if (g.wants_grad(ia)) {
      auto& ga = g.grad_buffer(ia);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[detail::bindex<T>(kind, i, cols)];
    }
    if (g.wants_grad(ib)) {
      auto& gb = g.grad_buffer(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[detail::bindex<T>(kind, i, cols)] += gy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  return detail::unary(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return detail::unary(a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return scale(a, T(-1));
}

// ---------------------------------------------------------------- unary

template <typename T>
Var<T> square(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x * x; }, [](T x, T) { return 2 * x; });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::abs(x); },
                       [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return detail::unary(a, [](T x) { return std::tanh(x); }, [](T, T y) { return 1 - y * y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::unary(a, [](T x) { return T(1) / (1 + std::exp(-x)); }, [](T, T y) { return y * (1 - y); });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::unary(a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

/// x·sigmoid(x)
template <typename T>
Var<T> silu(const Var<T>& a) {
  return detail::unary(
      a, [](T x) { return x / (1 + std::exp(-x)); },
      [](T x, T) {
        const T s = T(1) / (1 + std::exp(-x));
        return s * (1 + x * (1 - s));
      });
}

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::unary(
      a, [](T x) { return T(0.5) * x * (1 + std::erf(x * inv_sqrt2)); },
      [](T x, T) { return T(0.5) * (1 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x); });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  auto& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(Tensor<T>::scalar(a.value().sum()), {ia}, [ia](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(ia)) return;
    const T gy = g.node(self).grad[0];
    auto& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / T(a.value().size()));
}

/// Sum over rows: [R, C] -> [1, C].
template <typename T>
Var<T> sum_rows(const Var<T>& a) {
  auto& g = a.graph();
  const auto& av = a.value();
  const std::size_t R = av.rows(), C = av.cols();
  Tensor<T> out(Shape{1, C});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c] += av[r * C + c];
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [ia, R, C](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(ia)) return;
    const auto& gy = g.node(self).grad;
    auto& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += gy[c];
  });
}

// ---------------------------------------------------------------- linear algebra

/// [m,k] x [k,n] -> [m,n]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor<T> out(matrix_shape(av.rows(), bv.cols()));
  out.mat().noalias() = av.mat() * bv.mat();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, std::size_t self) {
    const auto& gy = g.node(self).grad;
    if (g.wants_grad(ia)) g.grad_buffer(ia).mat().noalias() += gy.mat() * g.node(ib).value.mat().transpose();
    if (g.wants_grad(ib)) g.grad_buffer(ib).mat().noalias() += g.node(ia).value.mat().transpose() * gy.mat();
  });
}

/// [m,k] x [n,k]^T -> [m,n]
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  auto& g = detail::same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw std::invalid_argument("matmul_nt: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()) + "^T");
  }
  Tensor<T> out(matrix_shape(av.rows(), bv.rows()));
  out.mat().noalias() = av.mat() * bv.mat().transpose();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, std::size_t self) {
    const auto& gy = g.node(self).grad;
    if (g.wants_grad(ia)) g.grad_buffer(ia).mat().noalias() += gy.mat() * g.node(ib).value.mat();
    if (g.wants_grad(ib)) g.grad_buffer(ib).mat().noalias() += gy.mat().transpose() * g.node(ia).value.mat();
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  auto& g = a.graph();
  const auto& av = a.value();
  Tensor<T> out(matrix_shape(av.cols(), av.rows()));
  out.mat() = av.mat().transpose();
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [ia](Graph<T>& g, std::size_t self) {
    if (g.wants_grad(ia)) g.grad_buffer(ia).mat() += g.node(self).grad.mat().transpose();
  });
}

/// x·W + b with W stored [in, out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b = std::nullopt) {
  Var<T> y = matmul(x, w);
  return b ? add(y, *b) : y;
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape s) {
  auto& g = a.graph();
  if (shape_size(s) != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  const std::size_t ia = a.id();
  return g.record(a.value().reshaped(std::move(s)), {ia}, [ia](Graph<T>& g, std::size_t self) {
    detail::accumulate(g, ia, g.node(self).grad);
  });
}

// ---------------------------------------------------------------- slicing

/// Columns [c0, c1).
template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t c0, std::size_t c1) {
  auto& g = a.graph();
  const auto& av = a.value();
  const std::size_t R = av.rows(), C = av.cols(), W = c1 - c0;
  if (c0 > c1 || c1 > C) throw std::out_of_range("slice_cols: range outside " + shape_str(av.shape()));
  Tensor<T> out(matrix_shape(R, W));
  for (std::size_t r = 0; r < R; ++r)
    std::copy_n(av.data().begin() + std::ptrdiff_t(r * C + c0), W, out.data().begin() + std::ptrdiff_t(r * W));
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [ia, R, C, W, c0](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(ia)) return;
    const auto& gy = g.node(self).grad;
    auto& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < W; ++c) ga[r * C + c0 + c] += gy[r * W + c];
  });
}

/// Rows [r0, r1).
template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t r0, std::size_t r1) {
  auto& g = a.graph();
  const auto& av = a.value();
  const std::size_t C = av.cols();
  if (r0 > r1 || r1 > av.rows()) throw std::out_of_range("slice_rows: range outside " + shape_str(av.shape()));
  Tensor<T> out(matrix_shape(r1 - r0, C),
                std::vector<T>(av.vec().begin() + std::ptrdiff_t(r0 * C), av.vec().begin() + std::ptrdiff_t(r1 * C)));
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [ia, r0, C](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(ia)) return;
    const auto& gy = g.node(self).grad;
    auto& ga = g.grad_buffer(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[r0 * C + i] += gy[i];
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  auto& g = parts.front().graph();
  const std::size_t R = parts.front().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t C = 0;
  for (const auto& p : parts) {
    if (p.rows() != R) throw std::invalid_argument("concat_cols: row mismatch");
    widths.push_back(p.cols());
    ids.push_back(p.id());
    C += p.cols();
  }
  Tensor<T> out(matrix_shape(R, C));
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].value();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out[r * C + off + c] = pv[r * widths[k] + c];
    off += widths[k];
  }
  return g.record(std::move(out), ids, [ids, widths, R, C](Graph<T>& g, std::size_t self) {
    const auto& gy = g.node(self).grad;
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (g.wants_grad(ids[k])) {
        auto& ga = g.grad_buffer(ids[k]);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) ga[r * widths[k] + c] += gy[r * C + off + c];
      }
      off += widths[k];
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  auto& g = parts.front().graph();
  const std::size_t C = parts.front().cols();
  std::vector<std::size_t> sizes, ids;
  std::vector<T> data;
  std::size_t R = 0;
  for (const auto& p : parts) {
    if (p.cols() != C) throw std::invalid_argument("concat_rows: column mismatch");
    sizes.push_back(p.value().size());
    ids.push_back(p.id());
    R += p.rows();
    data.insert(data.end(), p.value().vec().begin(), p.value().vec().end());
  }
  return g.record(Tensor<T>(matrix_shape(R, C), std::move(data)), ids, [ids, sizes](Graph<T>& g, std::size_t self) {
    const auto& gy = g.node(self).grad;
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (g.wants_grad(ids[k])) {
        auto& ga = g.grad_buffer(ids[k]);
        for (std::size_t i = 0; i < sizes[k]; ++i) ga[i] += gy[off + i];
      }
      off += sizes[k];
    }
  });
}

/// Nearest-neighbour temporal upsampling: each row repeated `factor` times.
template <typename T>
Var<T> repeat_rows(const Var<T>& a, std::size_t factor) {
  auto& g = a.graph();
  const auto& av = a.value();
  const std::size_t R = av.rows(), C = av.cols();
  Tensor<T> out(matrix_shape(R * factor, C));
  for (std::size_t r = 0; r < R * factor; ++r)
    std::copy_n(av.data().begin() + std::ptrdiff_t((r / factor) * C), C, out.data().begin() + std::ptrdiff_t(r * C));
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [ia, R, C, factor](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(ia)) return;
    const auto& gy = g.node(self).grad;
    auto& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < R * factor; ++r)
      for (std::size_t c = 0; c < C; ++c) ga[(r / factor) * C + c] += gy[r * C + c];
  });
}

/// out[i] = table[index[i]]
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::vector<std::size_t> index) {
  auto& g = table.graph();
  const auto& tv = table.value();
  const std::size_t C = tv.cols();
  Tensor<T> out(matrix_shape(index.size(), C));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= tv.rows()) throw std::out_of_range("gather_rows: index out of range");
    std::copy_n(tv.data().begin() + std::ptrdiff_t(index[i] * C), C, out.data().begin() + std::ptrdiff_t(i * C));
  }
  const std::size_t it = table.id();
  return g.record(std::move(out), {it}, [it, C, index = std::move(index)](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(it)) return;
    const auto& gy = g.node(self).grad;
    auto& gt = g.grad_buffer(it);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < C; ++c) gt[index[i] * C + c] += gy[i * C + c];
  });
}

/// Row i of the result is `row` where mask[i] is set, a[i] otherwise.
template <typename T>
Var<T> select_rows(const Var<T>& a, const Var<T>& row, const std::vector<bool>& mask) {
  auto& g = detail::same_graph(a, row);
  const auto& av = a.value();
  const std::size_t R = av.rows(), C = av.cols();
  if (row.value().size() != C || mask.size() != R) throw std::invalid_argument("select_rows: shape mismatch");
  Tensor<T> out = av;
  for (std::size_t r = 0; r < R; ++r)
    if (mask[r]) std::copy_n(row.value().data().begin(), C, out.data().begin() + std::ptrdiff_t(r * C));
  const std::size_t ia = a.id(), ir = row.id();
  return g.record(std::move(out), {ia, ir}, [ia, ir, R, C, mask](Graph<T>& g, std::size_t self) {
    const auto& gy = g.node(self).grad;
    for (std::size_t r = 0; r < R; ++r) {
      const std::size_t target = mask[r] ? ir : ia;
      if (!g.wants_grad(target)) continue;
      auto& gt = g.grad_buffer(target);
      const std::size_t base = mask[r] ? 0 : r * C;
      for (std::size_t c = 0; c < C; ++c) gt[base + c] += gy[r * C + c];
    }
  });
}

// ---------------------------------------------------------------- softmax family

template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  auto& g = a.graph();
  const auto& av = a.value();
  const std::size_t R = av.rows(), C = av.cols();
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < R; ++r) {
    const auto x = av.row(r);
    auto y = out.row(r);
    const T m = *std::max_element(x.begin(), x.end());
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) z += (y[c] = std::exp(x[c] - m));
    for (std::size_t c = 0; c < C; ++c) y[c] /= z;
  }
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [ia, R, C](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(ia)) return;
    const auto& y = g.node(self).value;
    const auto& gy = g.node(self).grad;
    auto& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < R; ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < C; ++c) dot += gy[r * C + c] * y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += y[r * C + c] * (gy[r * C + c] - dot);
    }
  });
}

template <typename T>
Var<T> log_softmax_rows(const Var<T>& a) {
  auto& g = a.graph();
  const auto& av = a.value();
  const std::size_t R = av.rows(), C = av.cols();
  Tensor<T> out(av.shape());
  for (std::size_t r = 0; r < R; ++r) {
    const auto x = av.row(r);
    const T m = *std::max_element(x.begin(), x.end());
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(x[c] - m);
    const T lse = m + std::log(z);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = x[c] - lse;
  }
  const std::size_t ia = a.id();
  return g.record(std::move(out), {ia}, [ia, R, C](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(ia)) return;
    const auto& y = g.node(self).value;
    const auto& gy = g.node(self).grad;
    auto& ga = g.grad_buffer(ia);
    for (std::size_t r = 0; r < R; ++r) {
      T s = 0;
      for (std::size_t c = 0; c < C; ++c) s += gy[r * C + c];
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += gy[r * C + c] - std::exp(y[r * C + c]) * s;
    }
  });
}

/// Mean cross-entropy of logits rows against integer labels, restricted to
/// `positions` (all rows when empty).
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& labels,
                     std::vector<std::size_t> positions = {}) {
  const std::size_t R = logits.rows(), C = logits.cols();
  if (labels.size() != R) throw std::invalid_argument("cross_entropy: one label per row required");
  if (positions.empty()) {
    positions.resize(R);
    std::iota(positions.begin(), positions.end(), std::size_t{0});
  }
  auto& g = logits.graph();
  const auto& lv = logits.value();
  Tensor<T> probs(matrix_shape(positions.size(), C));
  T loss = 0;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const std::size_t r = positions[i];
    if (labels[r] >= C) throw std::out_of_range("cross_entropy: label out of range");
    const auto x = lv.row(r);
    const T m = *std::max_element(x.begin(), x.end());
    T z = 0;
    for (std::size_t c = 0; c < C; ++c) z += (probs[i * C + c] = std::exp(x[c] - m));
    for (std::size_t c = 0; c < C; ++c) probs[i * C + c] /= z;
    loss -= x[labels[r]] - m - std::log(z);
  }
  const T inv_n = T(1) / T(positions.size());
  const std::size_t il = logits.id();
  return g.record(Tensor<T>::scalar(loss * inv_n), {il},
                  [il, C, inv_n, labels, positions, probs = std::move(probs)](Graph<T>& g, std::size_t self) {
                    if (!g.wants_grad(il)) return;
                    const T gy = g.node(self).grad[0] * inv_n;
                    auto& gl = g.grad_buffer(il);
                    for (std::size_t i = 0; i < positions.size(); ++i) {
                      const std::size_t r = positions[i];
                      for (std::size_t c = 0; c < C; ++c)
                        gl[r * C + c] += gy * (probs[i * C + c] - (c == labels[r] ? T(1) : T(0)));
                    }
                  });
}

// ---------------------------------------------------------------- losses

/// mean |a - target|
template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& target) {
  return mean(abs(sub(a, target)));
}

/// mean (a - target)^2
template <typename T>
Var<T> mse_loss(const Var<T>& a, const Var<T>& target) {
  return mean(square(sub(a, target)));
}

// ---------------------------------------------------------------- normalization

/// Per-row normalization over the feature axis with optional affine.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const std::optional<Var<T>>& gamma, const std::optional<Var<T>>& beta, T eps) {
  auto& g = x.graph();
  const auto& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(R);
  for (std::size_t r = 0; r < R; ++r) {
    const auto row = xv.row(r);
    T mu = 0;
    for (T v : row) mu += v;
    mu /= T(C);
    T var = 0;
    for (T v : row) var += (v - mu) * (v - mu);
    var /= T(C);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c) xhat[r * C + c] = (row[c] - mu) * inv_std[r];
  }
  const std::size_t ix = x.id();
  Var<T> normed = g.record(xhat, {ix}, [ix, R, C, inv_std](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(ix)) return;
    const auto& y = g.node(self).value;
    const auto& gy = g.node(self).grad;
    auto& gx = g.grad_buffer(ix);
    for (std::size_t r = 0; r < R; ++r) {
      T sg = 0, sgy = 0;
      for (std::size_t c = 0; c < C; ++c) {
        sg += gy[r * C + c];
        sgy += gy[r * C + c] * y[r * C + c];
      }
      const T invC = T(1) / T(C);
      for (std::size_t c = 0; c < C; ++c)
        gx[r * C + c] += inv_std[r] * (gy[r * C + c] - invC * sg - y[r * C + c] * invC * sgy);
    }
  });
  if (gamma) normed = mul(normed, *gamma);
  if (beta) normed = add(normed, *beta);
  return normed;
}

/// Group normalization of a [T, C] sequence: channels split into `groups`
/// contiguous groups, each normalized over (time, channels-in-group).
template <typename T>
Var<T> group_norm(const Var<T>& x, std::size_t groups, const std::optional<Var<T>>& gamma,
                  const std::optional<Var<T>>& beta, T eps) {
  auto& g = x.graph();
  const auto& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  if (groups == 0 || C % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(C) + " channels not divisible into " +
                                std::to_string(groups) + " groups");
  }
  const std::size_t G = C / groups;
  const T n = T(R * G);
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv_std(groups);
  for (std::size_t k = 0; k < groups; ++k) {
    T mu = 0;
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = k * G; c < (k + 1) * G; ++c) mu += xv[r * C + c];
    mu /= n;
    T var = 0;
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = k * G; c < (k + 1) * G; ++c) var += (xv[r * C + c] - mu) * (xv[r * C + c] - mu);
    var /= n;
    inv_std[k] = T(1) / std::sqrt(var + eps);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = k * G; c < (k + 1) * G; ++c) xhat[r * C + c] = (xv[r * C + c] - mu) * inv_std[k];
  }
  const std::size_t ix = x.id();
  Var<T> normed = g.record(xhat, {ix}, [ix, R, C, G, groups, n, inv_std](Graph<T>& g, std::size_t self) {
    if (!g.wants_grad(ix)) return;
    const auto& y = g.node(self).value;
    const auto& gy = g.node(self).grad;
    auto& gx = g.grad_buffer(ix);
    for (std::size_t k = 0; k < groups; ++k) {
      T sg = 0, sgy = 0;
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = k * G; c < (k + 1) * G; ++c) {
          sg += gy[r * C + c];
          sgy += gy[r * C + c] * y[r * C + c];
        }
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = k * G; c < (k + 1) * G; ++c)
          gx[r * C + c] += inv_std[k] * (gy[r * C + c] - sg / n - y[r * C + c] * sgy / n);
    }
  });
  if (gamma) normed = mul(normed, *gamma);
  if (beta) normed = add(normed, *beta);
  return normed;
}

// ---------------------------------------------------------------- convolution

/// 1-D convolution over time of x [T, Cin] with W [K*Cin, Cout] (tap-major)
/// and optional bias [Cout]. Output length (T + pad_l + pad_r - K)/stride + 1.
template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b, std::size_t kernel,
              std::size_t stride, std::size_t pad_left, std::size_t pad_right) {
  auto& g = detail::same_graph(x, w);
  const auto& xv = x.value();
  const std::size_t Tin = xv.rows(), Cin = xv.cols();
  if (w.rows() != kernel * Cin) {
    throw std::invalid_argument("conv1d: weight " + shape_str(w.shape()) + " does not match kernel " +
                                std::to_string(kernel) + " x " + std::to_string(Cin) + " channels");
  }
  if (Tin + pad_left + pad_right < kernel) throw std::invalid_argument("conv1d: input shorter than kernel");
  const std::size_t Tout = (Tin + pad_left + pad_right - kernel) / stride + 1;
  // im2col: [Tout, K*Cin]
  Tensor<T> cols(matrix_shape(Tout, kernel * Cin));
  for (std::size_t t = 0; t < Tout; ++t)
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t src = std::ptrdiff_t(t * stride + k) - std::ptrdiff_t(pad_left);
      if (src < 0 || src >= std::ptrdiff_t(Tin)) continue;
      std::copy_n(xv.data().begin() + src * std::ptrdiff_t(Cin), Cin,
                  cols.data().begin() + std::ptrdiff_t(t * kernel * Cin + k * Cin));
    }
  const std::size_t ix = x.id();
  Var<T> col = g.record(std::move(cols), {ix},
                        [ix, Tin, Cin, Tout, kernel, stride, pad_left](Graph<T>& g, std::size_t self) {
                          if (!g.wants_grad(ix)) return;
                          const auto& gc = g.node(self).grad;
                          auto& gx = g.grad_buffer(ix);
                          for (std::size_t t = 0; t < Tout; ++t)
                            for (std::size_t k = 0; k < kernel; ++k) {
                              const std::ptrdiff_t src = std::ptrdiff_t(t * stride + k) - std::ptrdiff_t(pad_left);
                              if (src < 0 || src >= std::ptrdiff_t(Tin)) continue;
                              for (std::size_t c = 0; c < Cin; ++c)
                                gx[std::size_t(src) * Cin + c] += gc[t * kernel * Cin + k * Cin + c];
                            }
                        });
  return linear(col, w, b);
}

/// Depthwise convolution: x [T, C], W [K, C], 'same' length with
/// symmetric padding (K odd).
template <typename T>
Var<T> depthwise_conv1d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b) {
  auto& g = detail::same_graph(x, w);
  const auto& xv = x.value();
  const auto& wv = w.value();
  const std::size_t Tn = xv.rows(), C = xv.cols(), K = wv.rows();
  if (wv.cols() != C || K % 2 == 0) throw std::invalid_argument("depthwise_conv1d: weight must be [odd K, C]");
  const std::ptrdiff_t pad = std::ptrdiff_t(K / 2);
  Tensor<T> out(xv.shape());
  for (std::size_t t = 0; t < Tn; ++t)
    for (std::size_t k = 0; k < K; ++k) {
      const std::ptrdiff_t src = std::ptrdiff_t(t + k) - pad;
      if (src < 0 || src >= std::ptrdiff_t(Tn)) continue;
      for (std::size_t c = 0; c < C; ++c) out[t * C + c] += wv[k * C + c] * xv[std::size_t(src) * C + c];
    }
  const std::size_t ix = x.id(), iw = w.id();
  Var<T> y = g.record(std::move(out), {ix, iw}, [ix, iw, Tn, C, K, pad](Graph<T>& g, std::size_t self) {
    const auto& gy = g.node(self).grad;
    const auto& xv = g.node(ix).value;
    const auto& wv = g.node(iw).value;
    const bool gxw = g.wants_grad(ix), gww = g.wants_grad(iw);
    Tensor<T>* gx = gxw ? &g.grad_buffer(ix) : nullptr;
    Tensor<T>* gw = gww ? &g.grad_buffer(iw) : nullptr;
    for (std::size_t t = 0; t < Tn; ++t)
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = std::ptrdiff_t(t + k) - pad;
        if (src < 0 || src >= std::ptrdiff_t(Tn)) continue;
        for (std::size_t c = 0; c < C; ++c) {
          const T gv = gy[t * C + c];
          if (gx) (*gx)[std::size_t(src) * C + c] += gv * wv[k * C + c];
          if (gw) (*gw)[k * C + c] += gv * xv[std::size_t(src) * C + c];
        }
      }
  });
  return b ? add(y, *b) : y;
}

}  // namespace mucodec::ops
