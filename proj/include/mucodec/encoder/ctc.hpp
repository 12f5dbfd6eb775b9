#pragma once

#include <mucodec/core/ops.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace mucodec::ctc {

/// Minimum frames for a transcript: one per symbol plus one blank between
/// each pair of equal neighbours.
inline std::size_t min_frames(const std::vector<std::size_t>& y) {
  std::size_t n = y.size();
  for (std::size_t i = 1; i < y.size(); ++i) n += y[i] == y[i - 1];
  return n;
}

namespace detail {

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

struct Lattice {
  double log_p;                    // log of the summed path score
  std::vector<double> occupancy;   // [T, V+1] posterior of each label per frame
};

// Forward-backward over the blank-extended label sequence. `lp` holds T rows
// of V+1 log-potentials (normally log-probabilities).
template <typename T>
Lattice forward_backward(const Tensor<T>& lp, const std::vector<std::size_t>& y, std::size_t blank) {
  const std::size_t Tn = lp.rows(), C = lp.cols(), S = 2 * y.size() + 1;
  constexpr double kNeg = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> ext(S, blank);
  for (std::size_t i = 0; i < y.size(); ++i) ext[2 * i + 1] = y[i];
  auto emit = [&](std::size_t t, std::size_t s) { return double(lp[t * C + ext[s]]); };
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(Tn * S, kNeg), beta(Tn * S, kNeg);
  alpha[0] = emit(0, 0);
  if (S > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < Tn; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = log_add(a, alpha[(t - 1) * S + s - 1]);
      if (can_skip(s)) a = log_add(a, alpha[(t - 1) * S + s - 2]);
      alpha[t * S + s] = a == kNeg ? kNeg : a + emit(t, s);
    }
  // beta excludes the emission at its own frame
  beta[(Tn - 1) * S + S - 1] = 0;
  if (S > 1) beta[(Tn - 1) * S + S - 2] = 0;
  for (std::size_t t = Tn - 1; t-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta[(t + 1) * S + s] + emit(t + 1, s);
      if (s + 1 < S) b = log_add(b, beta[(t + 1) * S + s + 1] + emit(t + 1, s + 1));
      if (s + 2 < S && can_skip(s + 2)) b = log_add(b, beta[(t + 1) * S + s + 2] + emit(t + 1, s + 2));
      beta[t * S + s] = b;
    }
  Lattice out;
  out.log_p = alpha[(Tn - 1) * S + S - 1];
  if (S > 1) out.log_p = log_add(out.log_p, alpha[(Tn - 1) * S + S - 2]);
  out.occupancy.assign(Tn * C, 0.0);
  if (out.log_p == kNeg) return out;
  for (std::size_t t = 0; t < Tn; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      const double v = alpha[t * S + s] + beta[t * S + s];
      if (v != kNeg) out.occupancy[t * C + ext[s]] += std::exp(v - out.log_p);
    }
  return out;
}

inline void check(std::size_t frames, std::size_t classes, const std::vector<std::size_t>& y, std::size_t blank) {
  if (blank >= classes) throw std::invalid_argument("ctc: blank index outside the class range");
  for (auto s : y)
    if (s >= classes || s == blank) throw std::invalid_argument("ctc: transcript symbol outside the vocabulary");
  if (frames == 0) throw std::invalid_argument("ctc: no frames");
  if (min_frames(y) > frames) {
    throw std::invalid_argument("ctc: transcript of length " + std::to_string(y.size()) + " needs " +
                                std::to_string(min_frames(y)) + " frames, got " + std::to_string(frames));
  }
}

}  // namespace detail

/// Negative log-likelihood of `y` under per-frame log-potentials `log_probs`
/// [T, V+1], summed over every CTC alignment.
template <typename T>
double nll(const Tensor<T>& log_probs, const std::vector<std::size_t>& y, std::size_t blank) {
  detail::check(log_probs.rows(), log_probs.cols(), y, blank);
  return -detail::forward_backward(log_probs, y, blank).log_p;
}

/// Graph op on log-potentials. d(-log P)/d lp[t][k] = -occupancy[t][k].
template <typename T>
Var<T> loss(const Var<T>& log_probs, const std::vector<std::size_t>& y, std::size_t blank) {
  detail::check(log_probs.rows(), log_probs.cols(), y, blank);
  auto lat = detail::forward_backward(log_probs.value(), y, blank);
  auto& g = log_probs.graph();
  const std::size_t il = log_probs.id();
  return g.record(Tensor<T>::scalar(T(-lat.log_p)), {il},
                  [il, occ = std::move(lat.occupancy)](Graph<T>& g, std::size_t self) {
                    if (!g.wants_grad(il)) return;
                    const T gy = g.node(self).grad[0];
                    auto& gl = g.grad_buffer(il);
                    for (std::size_t i = 0; i < occ.size(); ++i) gl[i] -= gy * T(occ[i]);
                  });
}

/// ctc_loss on raw logits: log-softmax per frame, then the lattice NLL.
template <typename T>
Var<T> loss_from_logits(const Var<T>& logits, const std::vector<std::size_t>& y, std::size_t blank) {
  return loss(ops::log_softmax_rows(logits), y, blank);
}

/// Best-path decoding: argmax per frame, merge repeats, drop blanks.
template <typename T>
std::vector<std::size_t> greedy_decode(const Tensor<T>& scores, std::size_t blank) {
  std::vector<std::size_t> out;
  std::size_t prev = blank;
  for (std::size_t t = 0; t < scores.rows(); ++t) {
    const auto row = scores.row(t);
    const auto k = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
    if (k != blank && k != prev) out.push_back(k);
    prev = k;
  }
  return out;
}

/// Levenshtein distance between symbol sequences.
inline std::size_t edit_distance(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace mucodec::ctc
