#pragma once

#include <mucodec/core/nn.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace mucodec {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 0.0;
};

/// Bias-corrected Adam over a fixed parameter list.
template <typename T>
class Adam {
 public:
  Adam(NamedParams<T> params, AdamOptions opts) : params_(std::move(params)), opts_(opts) {
    if (!(opts_.lr > 0)) throw std::invalid_argument("adam: lr must be positive");
    for (auto& [name, p] : params_) {
      m_.emplace_back(Tensor<T>::zeros_like(p->value));
      v_.emplace_back(Tensor<T>::zeros_like(p->value));
    }
  }

  /// Applies one update from the accumulated Parameter::grad values and
  /// zeroes them. Returns the name of the first parameter holding a
  /// non-finite gradient (and leaves every parameter untouched) instead.
  std::optional<std::string> step() {
    double sq = 0;
    for (auto& [name, p] : params_) {
      if (!p->trainable) continue;
      if (p->grad.size() != p->value.size()) p->zero_grad();
      for (T g : p->grad.vec()) {
        if (!std::isfinite(g)) {
          zero_grad();
          return name;
        }
        sq += double(g) * double(g);
      }
    }
    double clip = 1.0;
    if (opts_.clip_norm > 0 && std::sqrt(sq) > opts_.clip_norm) clip = opts_.clip_norm / std::sqrt(sq);
    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, double(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto* p = params_[k].second;
      if (!p->trainable) continue;
      auto& m = m_[k].vec();
      auto& v = v_[k].vec();
      auto& w = p->value.vec();
      const auto& gr = p->grad.vec();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = double(gr[i]) * clip;
        m[i] = T(opts_.beta1 * double(m[i]) + (1 - opts_.beta1) * g);
        v[i] = T(opts_.beta2 * double(v[i]) + (1 - opts_.beta2) * g * g);
        const double mhat = double(m[i]) / bc1;
        const double vhat = double(v[i]) / bc2;
        w[i] = T(double(w[i]) - opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
      }
    }
    zero_grad();
    return std::nullopt;
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p->zero_grad();
  }

  std::size_t steps() const { return step_; }
  void set_lr(double lr) { opts_.lr = lr; }
  const AdamOptions& options() const { return opts_; }
  const NamedParams<T>& params() const { return params_; }

 private:
  NamedParams<T> params_;
  AdamOptions opts_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t step_ = 0;
};

}  // namespace mucodec
