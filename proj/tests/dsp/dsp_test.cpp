#include <mucodec/dsp/resample.hpp>
#include <mucodec/dsp/spectral.hpp>

#include <gtest/gtest.h>

#include <complex>
#include <numbers>
#include <random>

namespace mucodec::dsp {
namespace {

constexpr double kPi = std::numbers::pi;

AudioBuffer tone(double hz, double seconds, int sr = 24000, double amp = 0.5, double phase = 0.0) {
  AudioBuffer a{{}, sr, 1};
  const auto n = std::size_t(seconds * sr);
  a.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) a.samples[i] = float(amp * std::sin(2 * kPi * hz * double(i) / sr + phase));
  return a;
}

std::size_t argmax_row(const Tensor<double>& m, std::size_t r) {
  auto row = m.row(r);
  return std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
}

// Direct O(N^2) DFT magnitude of one windowed frame, independent of FFTW.
std::vector<double> dft_magnitude(const std::vector<double>& frame) {
  const std::size_t N = frame.size();
  std::vector<double> mag(N / 2 + 1);
  for (std::size_t k = 0; k <= N / 2; ++k) {
    std::complex<double> acc = 0;
    for (std::size_t n = 0; n < N; ++n) acc += frame[n] * std::polar(1.0, -2 * kPi * double(k * n) / double(N));
    mag[k] = std::abs(acc);
  }
  return mag;
}

TEST(Stft, ZeroInputGivesZeroSpectrum) {
  std::vector<float> x(4800, 0.0f);
  auto s = stft(x, 1024, 240);
  EXPECT_EQ(s.frames, 4800u / 240 + 1);
  for (const auto& v : s.data) EXPECT_EQ(std::abs(v), 0.0);
}

TEST(Stft, BinCenteredSinePeaksAtItsBin) {
  const std::size_t k = 37;
  const double hz = double(k) * 24000.0 / 1024.0;
  auto a = tone(hz, 0.5);
  auto s = stft(a.samples, 1024, 240);
  for (std::size_t t = 3; t + 3 < s.frames; ++t) {
    std::size_t best = 0;
    for (std::size_t b = 1; b < s.bins; ++b)
      if (std::abs(s.at(t, b)) > std::abs(s.at(t, best))) best = b;
    EXPECT_EQ(best, k) << "frame " << t;
  }
}

TEST(Stft, WindowedParsevalPerFrame) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> x(3000);
  for (auto& v : x) v = u(rng);
  const std::size_t n_fft = 512, hop = 128;
  auto s = stft(x, n_fft, hop);
  const auto w = hann_window(n_fft);
  for (std::size_t t = 0; t < s.frames; ++t) {
    double energy = 0;
    for (std::size_t i = 0; i < n_fft; ++i) {
      const std::ptrdiff_t idx = std::ptrdiff_t(t * hop + i) - std::ptrdiff_t(n_fft / 2);
      const double xv = (idx >= 0 && idx < std::ptrdiff_t(x.size())) ? x[std::size_t(idx)] : 0.0;
      energy += (w[i] * xv) * (w[i] * xv);
    }
    // full two-sided spectrum from the one-sided half
    double spec = std::norm(s.at(t, 0)) + std::norm(s.at(t, s.bins - 1));
    for (std::size_t k = 1; k + 1 < s.bins; ++k) spec += 2 * std::norm(s.at(t, k));
    EXPECT_NEAR(spec, double(n_fft) * energy, 1e-6 * double(n_fft) * energy + 1e-12);
  }
}

TEST(Stft, RejectsBadArguments) {
  std::vector<float> x(100, 0.1f);
  EXPECT_THROW(stft(std::vector<float>{}, 1024, 240), std::invalid_argument);
  EXPECT_THROW(stft(x, 1000, 240), std::invalid_argument);
  EXPECT_THROW(stft(x, 256, 512), std::invalid_argument);
}

TEST(Mel, SilenceIsAtLogFloor) {
  AudioBuffer a{std::vector<float>(24000, 0.0f), 24000, 1};
  auto m = mel_spectrogram(a);
  EXPECT_EQ(m.num_frames(), 24000u / 240 + 1);
  for (double v : m.frames.vec()) EXPECT_DOUBLE_EQ(v, std::log(kLogFloor));
}

TEST(Mel, FrameRateIsExactlyOneHundredHertz) {
  SpectralConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.frame_rate(), 100.0);
  AudioBuffer a{std::vector<float>(122880, 0.0f), 24000, 1};  // 5.12 s
  EXPECT_EQ(mel_spectrogram(a).num_frames(), 513u);
}

TEST(Mel, FilterbankRowsArePositiveWithContiguousSupport) {
  const auto fb = mel_filterbank(SpectralConfig{});
  ASSERT_EQ(fb.rows(), 80u);
  for (std::size_t m = 0; m < fb.rows(); ++m) {
    double s = 0;
    int runs = 0;
    bool in = false;
    for (std::size_t k = 0; k < fb.cols(); ++k) {
      s += fb(m, k);
      const bool nz = fb(m, k) > 0;
      if (nz && !in) ++runs;
      in = nz;
    }
    EXPECT_GT(s, 0.0) << "row " << m;
    EXPECT_EQ(runs, 1) << "row " << m;
  }
}

TEST(Mel, ToneArgmaxIsStableAndMatchesDirectDftOracle) {
  auto a = tone(440.0, 1.0);
  SpectralConfig cfg;
  auto m = mel_spectrogram(a, cfg);
  const std::size_t expect = argmax_row(m.frames, 50);
  for (std::size_t t = 5; t + 5 < m.num_frames(); ++t) EXPECT_EQ(argmax_row(m.frames, t), expect);

  // oracle: filterbank response to the direct DFT of an interior frame
  const auto fb = mel_filterbank(cfg);
  const auto w = hann_window(cfg.n_fft);
  std::vector<double> frame(cfg.n_fft);
  const std::size_t t = 50;
  for (std::size_t i = 0; i < cfg.n_fft; ++i) frame[i] = a.samples[t * cfg.hop + i - cfg.n_fft / 2] * w[i];
  const auto mag = dft_magnitude(frame);
  std::size_t best = 0;
  double best_v = -1;
  for (std::size_t b = 0; b < fb.rows(); ++b) {
    double v = 0;
    for (std::size_t k = 0; k < mag.size(); ++k) v += fb(b, k) * mag[k];
    if (v > best_v) best_v = v, best = b;
  }
  EXPECT_EQ(expect, best);
}

TEST(Mel, RejectsUnsupportedRate) {
  AudioBuffer a{std::vector<float>(1000, 0.0f), 22050, 1};
  EXPECT_THROW(mel_spectrogram(a), std::invalid_argument);
}

TEST(Cqt, SilenceIsAtLogFloor) {
  AudioBuffer a{std::vector<float>(4800, 0.0f), 24000, 1};
  auto c = cqt(a);
  EXPECT_EQ(c.frames.cols(), 84u);
  for (double v : c.frames.vec()) EXPECT_DOUBLE_EQ(v, std::log(kLogFloor));
}

TEST(Cqt, BinCenterFrequencies) {
  CqtSpec c;
  EXPECT_NEAR(c.center_frequency(45), 440.0, 0.05);
  EXPECT_NEAR(c.center_frequency(57), 880.0, 0.1);
}

TEST(Cqt, A440PeaksAtBin45AndOctaveShiftsByTwelve) {
  for (auto [hz, bin] : {std::pair{440.0, std::size_t{45}}, std::pair{880.0, std::size_t{57}}}) {
    auto c = cqt(tone(hz, 0.6));
    for (std::size_t t = 5; t + 5 < c.frames.rows(); ++t) EXPECT_EQ(argmax_row(c.frames, t), bin) << hz << " Hz";
  }
}

TEST(Cqt, RejectsBinsAboveNyquist) {
  SpectralConfig cfg;
  cfg.sample_rate = 16000;
  cfg.cqt_bins = 120;  // 32.7 * 2^10 > 8 kHz
  AudioBuffer a{std::vector<float>(1600, 0.0f), 16000, 1};
  EXPECT_THROW(cqt(a, cfg), std::invalid_argument);
}

TEST(SpectralFeatures, TimeEquivariantUnderOneHopShift) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0, 0.2f);
  AudioBuffer a{std::vector<float>(24000), 24000, 1};
  for (auto& v : a.samples) v = n(rng);
  AudioBuffer shifted = a;
  shifted.samples.insert(shifted.samples.begin(), 240, 0.0f);
  shifted.samples.resize(a.samples.size());
  auto m0 = mel_spectrogram(a), m1 = mel_spectrogram(shifted);
  auto c0 = cqt(a), c1 = cqt(shifted);
  for (std::size_t t = 5; t + 10 < m0.num_frames(); ++t)
    for (std::size_t k = 0; k < 80; ++k) ASSERT_NEAR(m1.frames(t + 1, k), m0.frames(t, k), 1e-9);
  for (std::size_t t = 5; t + 10 < c0.frames.rows(); ++t)
    for (std::size_t k = 0; k < 84; ++k) ASSERT_NEAR(c1.frames(t + 1, k), c0.frames(t, k), 1e-9);
}

TEST(SpectralFeatures, FiniteForExtremeInputs) {
  AudioBuffer a{std::vector<float>(4800), 24000, 1};
  for (std::size_t i = 0; i < a.samples.size(); ++i) a.samples[i] = (i % 2) ? 1.0f : -1.0f;
  a.samples[100] = 0.0f;
  EXPECT_TRUE(mel_spectrogram(a).frames.all_finite());
  EXPECT_TRUE(cqt(a).frames.all_finite());
}

TEST(GriffinLim, SilenceReconstructsNearSilence) {
  AudioBuffer a{std::vector<float>(12000, 0.0f), 24000, 1};
  auto r = griffin_lim(mel_spectrogram(a), 10);
  double ss = 0;
  for (float v : r.audio.samples) ss += double(v) * v;
  EXPECT_LT(std::sqrt(ss / double(r.audio.samples.size())), 1e-3);
}

TEST(GriffinLim, ToneKeepsDominantMelBin) {
  auto mel = mel_spectrogram(tone(440.0, 1.0));
  auto r = griffin_lim(mel, 30);
  auto re = mel_spectrogram(r.audio);
  const auto want = argmax_row(mel.frames, 50);
  for (std::size_t t = 10; t + 10 < re.num_frames(); ++t) {
    const auto got = argmax_row(re.frames, t);
    EXPECT_LE(std::max(got, want) - std::min(got, want), 1u);
  }
}

TEST(GriffinLim, MoreIterationsReduceSpectralConvergence) {
  AudioBuffer a = tone(330.0, 0.8, 24000, 0.3);
  auto b = tone(523.0, 0.8, 24000, 0.2, 0.4);
  for (std::size_t i = 0; i < a.samples.size(); ++i) a.samples[i] += b.samples[i] * float(i % 4800) / 4800.0f;
  auto mel = mel_spectrogram(a);
  auto r5 = griffin_lim(mel, 5);
  auto r60 = griffin_lim(mel, 60);
  EXPECT_LT(r60.spectral_convergence.back(), r5.spectral_convergence.back());
  const auto& sc = r60.spectral_convergence;
  for (std::size_t w = 0; w + 20 <= sc.size(); w += 10) {
    double m0 = 0, m1 = 0;
    for (std::size_t i = 0; i < 10; ++i) m0 += sc[w + i], m1 += sc[w + 10 + i];
    EXPECT_LE(m1, m0) << "window " << w;
  }
}

TEST(GriffinLim, RejectsZeroIterations) {
  auto mel = mel_spectrogram(tone(440.0, 0.1));
  EXPECT_THROW(griffin_lim(mel, 0), std::invalid_argument);
}

double peak_frequency(const AudioBuffer& a) {
  std::size_t n = 1;
  while (n * 2 <= a.samples.size()) n *= 2;
  const std::size_t len = std::size_t(a.sample_rate) * (a.samples.size() / std::size_t(a.sample_rate));
  std::vector<float> x(a.samples.begin(), a.samples.begin() + std::ptrdiff_t(len));
  // plain DFT scan around the coarse peak at 1 Hz resolution (len = whole seconds)
  double best_f = 0, best = -1;
  for (double f = 10; f < a.sample_rate / 2.0; f += 1.0) {
    if (std::abs(f - 1000.0) > 50) continue;
    std::complex<double> acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += double(x[i]) * std::polar(1.0, -2 * kPi * f * double(i) / a.sample_rate);
    if (std::abs(acc) > best) best = std::abs(acc), best_f = f;
  }
  return best_f;
}

TEST(Resample, IdentityRateIsBitIdentical) {
  auto a = tone(440, 0.1, 48000);
  auto b = resample(a, 48000);
  EXPECT_EQ(a.samples, b.samples);
}

TEST(Resample, ToneFrequencyPreserved) {
  auto a = tone(1000.0, 2.0, 48000);
  auto b = resample(a, 24000);
  EXPECT_EQ(b.sample_rate, 24000);
  EXPECT_LE(std::abs(double(b.frames()) - double(a.frames()) / 2.0), 1.0);
  EXPECT_NEAR(peak_frequency(b), 1000.0, 1.0);
}

TEST(Resample, DcPreserved) {
  for (auto [from, to] : {std::pair{48000, 24000}, std::pair{24000, 48000}, std::pair{48000, 16000}}) {
    AudioBuffer a{std::vector<float>(std::size_t(from / 10), 0.25f), from, 1};
    auto b = resample(a, to);
    for (float v : b.samples) ASSERT_NEAR(v, 0.25, 1e-4);
  }
}

TEST(Resample, StereoChannelsStayIndependent) {
  auto l = tone(500.0, 0.2, 48000), r = tone(700.0, 0.2, 48000);
  auto st = AudioBuffer::interleave({l, r});
  auto out = resample(st, 24000);
  auto lo = resample(l, 24000);
  auto ch0 = out.channel(0);
  ASSERT_EQ(ch0.samples.size(), lo.samples.size());
  for (std::size_t i = 0; i < lo.samples.size(); ++i) ASSERT_FLOAT_EQ(ch0.samples[i], lo.samples[i]);
}

TEST(Resample, RejectsUnsupportedRate) {
  auto a = tone(440, 0.1, 48000);
  EXPECT_THROW(resample(a, 44100), std::invalid_argument);
}

TEST(Wav, RoundTripsPcm16AndFloat) {
  auto a = tone(440, 0.05, 24000, 0.7);
  auto f = decode_wav(encode_wav(a, WavEncoding::kFloat32));
  EXPECT_EQ(f.samples, a.samples);
  auto p = decode_wav(encode_wav(a, WavEncoding::kPcm16));
  ASSERT_EQ(p.samples.size(), a.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_NEAR(p.samples[i], a.samples[i], 1.0 / 32767);
}

TEST(Wav, RejectsOtherEncodings) {
  auto bytes = encode_wav(tone(440, 0.01), WavEncoding::kPcm16);
  bytes[34] = 24;  // bits per sample -> 24
  EXPECT_THROW(decode_wav(bytes), WavFormatError);
  io::Bytes junk{'R', 'I', 'F', 'X'};
  EXPECT_THROW(decode_wav(junk), WavFormatError);
  auto trunc = encode_wav(tone(440, 0.01), WavEncoding::kPcm16);
  trunc.resize(30);
  EXPECT_THROW(decode_wav(trunc), WavFormatError);
}

}  // namespace
}  // namespace mucodec::dsp
