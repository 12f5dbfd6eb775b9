#pragma once

#include <mucodec/core/tensor.hpp>
#include <mucodec/dsp/audio.hpp>
#include <mucodec/dsp/fft.hpp>

#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace mucodec::dsp {

/// Floor applied before every log in spectral features and metrics.
inline constexpr double kLogFloor = 1e-5;

/// Analysis settings shared by the Mel and CQT front-ends. Defaults are the
/// desk configuration: mono 24 kHz, 1024-point Hann frames, 240-sample hop
/// (100 frames/s), 80 Mel bands, 84 semitone CQT bins from C1.
struct SpectralConfig {
  int sample_rate = 24000;
  std::size_t n_fft = 1024;
  std::size_t hop = 240;
  std::size_t n_mels = 80;
  double mel_fmin = 0.0;
  double mel_fmax = 0.0;  // 0 selects Nyquist
  double cqt_fmin = 32.70;
  std::size_t cqt_bins = 84;
  std::size_t bins_per_octave = 12;
  std::size_t cqt_fft = 8192;  // zero-padded length of CQT analysis frames

  double frame_rate() const { return double(sample_rate) / double(hop); }
  std::size_t frames_for(std::size_t samples) const { return samples / hop + 1; }

  void validate() const {
    if (n_fft < 2 || (n_fft & (n_fft - 1)) != 0) throw std::invalid_argument("stft: n_fft must be a power of two");
    if (hop == 0 || hop > n_fft) throw std::invalid_argument("stft: hop must be in [1, n_fft]");
    if (!supported_rate(sample_rate)) {
      throw std::invalid_argument("unsupported sample rate " + std::to_string(sample_rate));
    }
  }
};

/// One-sided complex STFT, frame-major: data[t * bins + k].
struct Spectrogram {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> data;

  std::complex<double>& at(std::size_t t, std::size_t k) { return data[t * bins + k]; }
  const std::complex<double>& at(std::size_t t, std::size_t k) const { return data[t * bins + k]; }
};

/// Log-magnitude Mel spectrogram, [frames, n_mels].
struct MelSpec {
  Tensor<double> frames;
  std::size_t hop = 240;
  int sample_rate = 24000;
  std::size_t n_mels = 80;

  std::size_t num_frames() const { return frames.rows(); }
};

/// Log-magnitude constant-Q spectrogram, [frames, n_bins].
struct CqtSpec {
  Tensor<double> frames;
  std::size_t bins_per_octave = 12;
  double fmin = 32.70;

  double center_frequency(std::size_t k) const { return fmin * std::pow(2.0, double(k) / double(bins_per_octave)); }
};

inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * double(i) / double(n));
  return w;
}

namespace detail {

/// Windowed, center-aligned frame t (zero outside the signal).
inline void frame_at(std::span<const float> x, std::size_t t, std::size_t hop, const std::vector<double>& w,
                     std::vector<double>& out) {
  const std::size_t n = w.size();
  out.assign(out.size() < n ? n : out.size(), 0.0);
  const std::ptrdiff_t start = std::ptrdiff_t(t * hop) - std::ptrdiff_t(n / 2);
  for (std::size_t i = 0; i < n; ++i) {
    const std::ptrdiff_t s = start + std::ptrdiff_t(i);
    out[i] = (s >= 0 && s < std::ptrdiff_t(x.size())) ? double(x[std::size_t(s)]) * w[i] : 0.0;
  }
}

}  // namespace detail

/// Hann-windowed STFT with n_fft/2 zero padding at both ends, giving
/// floor(len / hop) + 1 frames.
inline Spectrogram stft(std::span<const float> x, std::size_t n_fft, std::size_t hop) {
  if (x.empty()) throw std::invalid_argument("stft: empty audio");
  if (n_fft < 2 || (n_fft & (n_fft - 1)) != 0) throw std::invalid_argument("stft: n_fft must be a power of two");
  if (hop == 0 || hop > n_fft) throw std::invalid_argument("stft: hop must be in [1, n_fft]");
  const auto& fft = RealFft::get(n_fft);
  const auto w = hann_window(n_fft);
  Spectrogram s{x.size() / hop + 1, fft.bins(), {}};
  s.data.resize(s.frames * s.bins);
  std::vector<double> buf(n_fft);
  for (std::size_t t = 0; t < s.frames; ++t) {
    detail::frame_at(x, t, hop, w, buf);
    fft.forward(buf, std::span(s.data).subspan(t * s.bins, s.bins));
  }
  return s;
}

/// Weighted overlap-add inverse of stft, normalized by the summed squared
/// window; returns `length` samples.
inline std::vector<float> istft(const Spectrogram& s, std::size_t n_fft, std::size_t hop, std::size_t length) {
  const auto& fft = RealFft::get(n_fft);
  if (s.bins != fft.bins()) throw std::invalid_argument("istft: bin count does not match n_fft");
  const auto w = hann_window(n_fft);
  const std::size_t padded = (s.frames - 1) * hop + n_fft;
  std::vector<double> acc(padded, 0.0), wsum(padded, 0.0), buf(n_fft);
  for (std::size_t t = 0; t < s.frames; ++t) {
    fft.inverse(std::span(s.data).subspan(t * s.bins, s.bins), buf);
    for (std::size_t i = 0; i < n_fft; ++i) {
      acc[t * hop + i] += buf[i] / double(n_fft) * w[i];
      wsum[t * hop + i] += w[i] * w[i];
    }
  }
  std::vector<float> out(length, 0.0f);
  const std::size_t off = n_fft / 2;
  for (std::size_t i = 0; i < length && i + off < padded; ++i) {
    const double ws = wsum[i + off];
    out[i] = ws > 1e-8 ? float(acc[i + off] / ws) : 0.0f;
  }
  return out;
}

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

/// Triangular HTK-scale filterbank, [n_mels, n_fft/2 + 1].
inline Tensor<double> mel_filterbank(const SpectralConfig& cfg) {
  const std::size_t bins = cfg.n_fft / 2 + 1;
  const double fmax = cfg.mel_fmax > 0 ? cfg.mel_fmax : cfg.sample_rate / 2.0;
  const double m0 = hz_to_mel(cfg.mel_fmin), m1 = hz_to_mel(fmax);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = mel_to_hz(m0 + (m1 - m0) * double(i) / double(cfg.n_mels + 1));
  Tensor<double> fb(Shape{cfg.n_mels, bins});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[m], c = edges[m + 1], hi = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = double(k) * cfg.sample_rate / double(cfg.n_fft);
      double v = 0;
      if (f > lo && f <= c) v = (f - lo) / (c - lo);
      else if (f > c && f < hi) v = (hi - f) / (hi - c);
      fb(m, k) = v;
    }
    // Bands narrower than the FFT bin spacing fall back to their nearest bin.
    double s = 0;
    for (std::size_t k = 0; k < bins; ++k) s += fb(m, k);
    if (s == 0) {
      const auto k = std::size_t(std::lround(c * double(cfg.n_fft) / cfg.sample_rate));
      fb(m, std::min(k, bins - 1)) = 1.0;
    }
  }
  return fb;
}

inline Tensor<double> log_compress(const Tensor<double>& lin) {
  Tensor<double> out(lin.shape());
  for (std::size_t i = 0; i < lin.size(); ++i) out[i] = std::log(std::max(lin[i], kLogFloor));
  return out;
}

/// Linear-magnitude Mel energies from a complex STFT, [frames, n_mels].
inline Tensor<double> mel_energies(const Spectrogram& s, const Tensor<double>& fb) {
  Tensor<double> mag(Shape{s.frames, s.bins});
  for (std::size_t i = 0; i < s.data.size(); ++i) mag[i] = std::abs(s.data[i]);
  Tensor<double> out(Shape{s.frames, fb.rows()});
  out.mat().noalias() = mag.mat() * fb.mat().transpose();
  return out;
}

inline MelSpec mel_spectrogram(const AudioBuffer& audio, const SpectralConfig& cfg = {}) {
  cfg.validate();
  audio.validate();
  if (audio.channels != 1) throw std::invalid_argument("mel_spectrogram: expects mono audio");
  if (audio.sample_rate != cfg.sample_rate) {
    throw std::invalid_argument("mel_spectrogram: audio at " + std::to_string(audio.sample_rate) +
                                " Hz, analysis configured for " + std::to_string(cfg.sample_rate) + " Hz");
  }
  const auto spec = stft(audio.samples, cfg.n_fft, cfg.hop);
  return MelSpec{log_compress(mel_energies(spec, mel_filterbank(cfg))), cfg.hop, cfg.sample_rate, cfg.n_mels};
}

/// Log-frequency filterbank over the zero-padded spectrum: bin k is a
/// triangle in log2-frequency spanning one bin to either side of
/// fmin * 2^(k / bins_per_octave), weights normalized to sum to one.
inline Tensor<double> cqt_filterbank(const SpectralConfig& cfg) {
  const double top = cfg.cqt_fmin * std::pow(2.0, double(cfg.cqt_bins) / double(cfg.bins_per_octave));
  if (top > cfg.sample_rate / 2.0) {
    throw std::invalid_argument("cqt: highest bin edge " + std::to_string(top) + " Hz is above Nyquist");
  }
  const std::size_t bins = cfg.cqt_fft / 2 + 1;
  const double df = double(cfg.sample_rate) / double(cfg.cqt_fft);
  const double step = 1.0 / double(cfg.bins_per_octave);
  Tensor<double> fb(Shape{cfg.cqt_bins, bins});
  for (std::size_t k = 0; k < cfg.cqt_bins; ++k) {
    const double lc = std::log2(cfg.cqt_fmin) + double(k) * step;
    double s = 0;
    for (std::size_t j = 1; j < bins; ++j) {
      const double d = std::abs(std::log2(double(j) * df) - lc);
      if (d < step) s += (fb(k, j) = 1.0 - d / step);
    }
    if (s == 0) {
      fb(k, std::min(bins - 1, std::size_t(std::lround(std::exp2(lc) / df)))) = 1.0;
      s = 1.0;
    }
    for (std::size_t j = 0; j < bins; ++j) fb(k, j) /= s;
  }
  return fb;
}

inline CqtSpec cqt(const AudioBuffer& audio, const SpectralConfig& cfg = {}) {
  cfg.validate();
  audio.validate();
  if (audio.channels != 1) throw std::invalid_argument("cqt: expects mono audio");
  if (audio.samples.empty()) throw std::invalid_argument("cqt: empty audio");
  const Tensor<double> fb = cqt_filterbank(cfg);
  const auto& fft = RealFft::get(cfg.cqt_fft);
  const auto w = hann_window(cfg.n_fft);
  const std::size_t T = cfg.frames_for(audio.samples.size());
  Tensor<double> mag(Shape{T, fft.bins()});
  std::vector<double> buf(cfg.cqt_fft);
  std::vector<std::complex<double>> spec(fft.bins());
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(buf.begin(), buf.end(), 0.0);
    detail::frame_at(audio.samples, t, cfg.hop, w, buf);
    fft.forward(buf, spec);
    for (std::size_t k = 0; k < spec.size(); ++k) mag(t, k) = std::abs(spec[k]);
  }
  Tensor<double> out(Shape{T, cfg.cqt_bins});
  out.mat().noalias() = mag.mat() * fb.mat().transpose();
  return CqtSpec{log_compress(out), cfg.bins_per_octave, cfg.cqt_fmin};
}

/// Nonnegative least-squares inverse of the Mel filterbank (multiplicative
/// updates), mapping linear Mel energies [T, n_mels] to magnitudes [T, bins].
inline Tensor<double> mel_to_linear(const Tensor<double>& mel_lin, const Tensor<double>& fb, int iterations = 50) {
  const auto F = fb.mat();
  RowMatrix<double> gram = F.transpose() * F;  // [bins, bins]
  RowMatrix<double> rhs = mel_lin.mat() * F;   // [T, bins]
  RowMatrix<double> colsum = F.colwise().sum();
  RowMatrix<double> S(rhs.rows(), rhs.cols());
  for (Eigen::Index t = 0; t < S.rows(); ++t)
    for (Eigen::Index k = 0; k < S.cols(); ++k) S(t, k) = colsum(0, k) > 0 ? rhs(t, k) / (colsum(0, k) * colsum(0, k) + 1e-12) : 0.0;
  for (int it = 0; it < iterations; ++it) {
    RowMatrix<double> denom = S * gram;
    for (Eigen::Index i = 0; i < S.size(); ++i) S.data()[i] *= rhs.data()[i] / (denom.data()[i] + 1e-12);
  }
  Tensor<double> out(Shape{std::size_t(S.rows()), std::size_t(S.cols())});
  out.mat() = S;
  return out;
}

struct GriffinLimResult {
  AudioBuffer audio;
  /// ||target - |STFT(x_i)||| / ||target|| after each iteration.
  std::vector<double> spectral_convergence;
};

/// Phase reconstruction from a log-Mel spectrogram: pseudo-invert the
/// filterbank to a linear magnitude target, then alternate projections
/// between consistent STFTs and the target magnitude, starting from a
/// seeded random phase.
inline GriffinLimResult griffin_lim(const MelSpec& mel, int iterations, const SpectralConfig& cfg = {},
                                    std::uint64_t seed = 0) {
  if (iterations < 1) throw std::invalid_argument("griffin_lim: iterations must be >= 1");
  cfg.validate();
  const std::size_t T = mel.num_frames();
  if (T == 0) throw std::invalid_argument("griffin_lim: empty mel");
  Tensor<double> lin(mel.frames.shape());
  for (std::size_t i = 0; i < lin.size(); ++i) lin[i] = std::exp(mel.frames[i]);
  const Tensor<double> target = mel_to_linear(lin, mel_filterbank(cfg));
  const std::size_t bins = target.cols();
  const std::size_t length = (T - 1) * cfg.hop;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(-std::numbers::pi, std::numbers::pi);
  Spectrogram s{T, bins, std::vector<std::complex<double>>(T * bins)};
  for (std::size_t i = 0; i < s.data.size(); ++i) s.data[i] = std::polar(target[i], phase(rng));

  const double tnorm = std::sqrt(std::max(target.sq_norm(), 1e-300));
  GriffinLimResult res;
  std::vector<float> x;
  for (int it = 0; it < iterations; ++it) {
    x = istft(s, cfg.n_fft, cfg.hop, std::max<std::size_t>(length, 1));
    const Spectrogram est = stft(x, cfg.n_fft, cfg.hop);
    double err = 0;
    for (std::size_t i = 0; i < s.data.size() && i < est.data.size(); ++i) {
      const double m = std::abs(est.data[i]);
      err += (target[i] - m) * (target[i] - m);
      s.data[i] = m > 1e-12 ? est.data[i] * (target[i] / m) : std::complex<double>(target[i], 0.0);
    }
    res.spectral_convergence.push_back(std::sqrt(err) / tnorm);
  }
  x = istft(s, cfg.n_fft, cfg.hop, std::max<std::size_t>(length, 1));
  res.audio = AudioBuffer{std::move(x), cfg.sample_rate, 1};
  return res;
}

}  // namespace mucodec::dsp
