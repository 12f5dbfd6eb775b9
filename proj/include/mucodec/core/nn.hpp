#pragma once

#include <mucodec/core/ops.hpp>

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace mucodec {

using Rng = std::mt19937_64;

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Parameter<T>*>>;

template <typename T>
Tensor<T> uniform_tensor(Shape s, T bound, Rng& rng) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> d(-double(bound), double(bound));
  for (auto& v : t.vec()) v = T(d(rng));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape s, T stddev, Rng& rng) {
  Tensor<T> t(std::move(s));
  std::normal_distribution<double> d(0.0, double(stddev));
  for (auto& v : t.vec()) v = T(d(rng));
  return t;
}

namespace nn {

/// y = x W + b, W stored [in, out]. Default init is Glorot-uniform;
/// `gain` rescales it (0 gives a zero-initialized layer).
template <typename T>
struct Linear {
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true, T gain = T(1))
      : weight(uniform_tensor<T>(Shape{in, out}, gain * T(std::sqrt(6.0 / double(in + out))), rng)),
        bias(Tensor<T>(Shape{out})),
        has_bias(bias) {}

  Parameter<T> weight;
  Parameter<T> bias;
  bool has_bias = true;

  std::size_t in_features() const { return weight.value.rows(); }
  std::size_t out_features() const { return weight.value.cols(); }

  Var<T> operator()(const Var<T>& x) {
    auto& g = x.graph();
    Var<T> w = g.param(weight);
    if (!has_bias) return ops::matmul(x, w);
    return ops::linear(x, w, std::optional<Var<T>>(g.param(bias)));
  }

  void collect(NamedParams<T>& out, const std::string& prefix) {
    out.emplace_back(prefix + ".weight", &weight);
    if (has_bias) out.emplace_back(prefix + ".bias", &bias);
  }
};

/// Temporal convolution over [T, Cin] inputs.
template <typename T>
struct Conv1d {
  Conv1d() = default;
  Conv1d(std::size_t in, std::size_t out, std::size_t kernel_, std::size_t stride_, std::size_t pad_left_,
         std::size_t pad_right_, Rng& rng)
      : weight(uniform_tensor<T>(Shape{kernel_ * in, out}, T(std::sqrt(6.0 / double(kernel_ * in + out))), rng)),
        bias(Tensor<T>(Shape{out})),
        kernel(kernel_),
        stride(stride_),
        pad_left(pad_left_),
        pad_right(pad_right_) {}

  /// 'same'-style padding for odd kernels at stride 1, ceil(T/stride) frames otherwise.
  static Conv1d centered(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng) {
    return Conv1d(in, out, kernel, stride, kernel / 2, kernel / 2, rng);
  }

  Parameter<T> weight;
  Parameter<T> bias;
  std::size_t kernel = 1, stride = 1, pad_left = 0, pad_right = 0;

  Var<T> operator()(const Var<T>& x) {
    auto& g = x.graph();
    return ops::conv1d(x, g.param(weight), std::optional<Var<T>>(g.param(bias)), kernel, stride, pad_left,
                       pad_right);
  }

  void collect(NamedParams<T>& out, const std::string& prefix) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

template <typename T>
struct DepthwiseConv1d {
  DepthwiseConv1d() = default;
  DepthwiseConv1d(std::size_t channels, std::size_t kernel, Rng& rng)
      : weight(uniform_tensor<T>(Shape{kernel, channels}, T(std::sqrt(3.0 / double(kernel))), rng)),
        bias(Tensor<T>(Shape{channels})) {}

  Parameter<T> weight;
  Parameter<T> bias;

  Var<T> operator()(const Var<T>& x) {
    auto& g = x.graph();
    return ops::depthwise_conv1d(x, g.param(weight), std::optional<Var<T>>(g.param(bias)));
  }

  void collect(NamedParams<T>& out, const std::string& prefix) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
  }
};

template <typename T>
struct LayerNorm {
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim, T eps_ = T(1e-5), bool affine_ = true)
      : gamma(Tensor<T>(Shape{dim}, T(1))), beta(Tensor<T>(Shape{dim})), eps(eps_), affine(affine_) {}

  Parameter<T> gamma;
  Parameter<T> beta;
  T eps = T(1e-5);
  bool affine = true;

  Var<T> operator()(const Var<T>& x) {
    auto& g = x.graph();
    if (!affine) return ops::layer_norm<T>(x, std::nullopt, std::nullopt, eps);
    return ops::layer_norm<T>(x, g.param(gamma), g.param(beta), eps);
  }

  void collect(NamedParams<T>& out, const std::string& prefix) {
    if (!affine) return;
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
  }
};

template <typename T>
struct GroupNorm {
  GroupNorm() = default;
  GroupNorm(std::size_t groups_, std::size_t channels, T eps_)
      : gamma(Tensor<T>(Shape{channels}, T(1))), beta(Tensor<T>(Shape{channels})), groups(groups_), eps(eps_) {
    if (groups == 0 || channels % groups != 0) {
      throw std::invalid_argument("GroupNorm: channels must be divisible by groups");
    }
  }

  Parameter<T> gamma;
  Parameter<T> beta;
  std::size_t groups = 1;
  T eps = T(1e-6);

  Var<T> operator()(const Var<T>& x) {
    auto& g = x.graph();
    return ops::group_norm<T>(x, groups, g.param(gamma), g.param(beta), eps);
  }

  void collect(NamedParams<T>& out, const std::string& prefix) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
  }
};

/// Scaled dot-product attention with `heads` heads, followed by the output
/// projection. `mask`, when given, is added to the [Tq, Tk] score matrix of
/// every head (use -inf to block a key).
template <typename T>
struct MultiHeadAttention {
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads_, Rng& rng)
      : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), heads(heads_) {
    if (heads == 0 || dim % heads != 0) {
      throw std::invalid_argument("MultiHeadAttention: model dim " + std::to_string(dim) +
                                  " is not divisible by " + std::to_string(heads_) + " heads");
    }
  }

  Linear<T> q, k, v, o;
  std::size_t heads = 1;

  Var<T> operator()(const Var<T>& query, const Var<T>& key, const Var<T>& value,
                    const std::optional<Tensor<T>>& mask = std::nullopt,
                    std::vector<Tensor<T>>* weights = nullptr) {
    auto& g = query.graph();
    const std::size_t dim = q.out_features();
    const std::size_t dh = dim / heads;
    const T inv_scale = T(1) / std::sqrt(T(dh));
    Var<T> Q = q(query), K = k(key), V = v(value);
    std::optional<Var<T>> m;
    if (mask) m = g.constant(*mask);
    std::vector<Var<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Var<T> qh = heads == 1 ? Q : ops::slice_cols(Q, h * dh, (h + 1) * dh);
      Var<T> kh = heads == 1 ? K : ops::slice_cols(K, h * dh, (h + 1) * dh);
      Var<T> vh = heads == 1 ? V : ops::slice_cols(V, h * dh, (h + 1) * dh);
      Var<T> scores = ops::scale(ops::matmul_nt(qh, kh), inv_scale);
      if (m) scores = ops::add(scores, *m);
      Var<T> p = ops::softmax_rows(scores);
      if (weights) weights->push_back(p.value());
      outs.push_back(ops::matmul(p, vh));
    }
    Var<T> cat = heads == 1 ? outs.front() : ops::concat_cols(outs);
    return o(cat);
  }

  void collect(NamedParams<T>& out, const std::string& prefix) {
    q.collect(out, prefix + ".q");
    k.collect(out, prefix + ".k");
    v.collect(out, prefix + ".v");
    o.collect(out, prefix + ".o");
  }
};

/// Two-layer position-wise MLP with GELU (or SiLU) in between.
template <typename T>
struct FeedForward {
  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, Rng& rng, bool use_silu_ = false)
      : up(dim, hidden, rng), down(hidden, dim, rng), use_silu(use_silu_) {}

  Linear<T> up, down;
  bool use_silu = false;

  Var<T> operator()(const Var<T>& x) {
    Var<T> h = up(x);
    h = use_silu ? ops::silu(h) : ops::gelu(h);
    return down(h);
  }

  void collect(NamedParams<T>& out, const std::string& prefix) {
    up.collect(out, prefix + ".up");
    down.collect(out, prefix + ".down");
  }
};

}  // namespace nn
}  // namespace mucodec
