#pragma once

#include <mucodec/dsp/spectral.hpp>

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>

namespace mucodec::pipeline {

/// Log-spectral distance in dB over the first min(len) samples:
/// mean over frames of sqrt(mean over bins of (20 (log10 |S| - log10 |S^|))^2),
/// magnitudes floored at kLogFloor.
inline double log_spectral_distance(std::span<const float> ref, std::span<const float> out, std::size_t n_fft = 1024,
                                    std::size_t hop = 240) {
  const std::size_t n = std::min(ref.size(), out.size());
  if (n == 0) throw std::invalid_argument("lsd: empty signal");
  const auto a = dsp::stft(ref.first(n), n_fft, hop), b = dsp::stft(out.first(n), n_fft, hop);
  double total = 0;
  for (std::size_t t = 0; t < a.frames; ++t) {
    double acc = 0;
    for (std::size_t k = 0; k < a.bins; ++k) {
      const double la = std::log10(std::max(std::abs(a.at(t, k)), dsp::kLogFloor));
      const double lb = std::log10(std::max(std::abs(b.at(t, k)), dsp::kLogFloor));
      acc += (la - lb) * (la - lb) * 400.0;
    }
    total += std::sqrt(acc / double(a.bins));
  }
  return total / double(a.frames);
}

/// Mean absolute log-Mel difference over the common frames.
inline double mel_distortion(const Tensor<double>& ref, const Tensor<double>& out) {
  if (ref.cols() != out.cols()) throw std::invalid_argument("mel_distortion: band count mismatch");
  const std::size_t T = std::min(ref.rows(), out.rows());
  if (T == 0) throw std::invalid_argument("mel_distortion: empty spectrogram");
  double s = 0;
  for (std::size_t i = 0; i < T * ref.cols(); ++i) s += std::abs(ref[i] - out[i]);
  return s / double(T * ref.cols());
}

/// Mean squared difference over the common rows.
inline double latent_mse(const Tensor<double>& ref, const Tensor<double>& out) {
  if (ref.cols() != out.cols()) throw std::invalid_argument("latent_mse: width mismatch");
  const std::size_t T = std::min(ref.rows(), out.rows());
  if (T == 0) throw std::invalid_argument("latent_mse: empty latent");
  double s = 0;
  for (std::size_t i = 0; i < T * ref.cols(); ++i) s += (ref[i] - out[i]) * (ref[i] - out[i]);
  return s / double(T * ref.cols());
}

}  // namespace mucodec::pipeline
