#pragma once

#include <mucodec/data/vocab.hpp>
#include <mucodec/dsp/audio.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace mucodec::data {

inline constexpr double kMinClipSeconds = 2.56;
inline constexpr double kMaxClipSeconds = 35.84;
inline constexpr float kPeakLevel = 0.9f;

/// One synthetic clip. A "vocal" line sings `symbols` one per beat over a
/// looping four-chord background.
struct ClipSpec {
  std::uint64_t seed = 0;
  double duration_s = 5.12;
  std::vector<std::size_t> symbols;
  double tempo_bpm = 160;
  std::size_t chord_pattern = 0;
  float vocal_gain = 1.0f;
  float background_gain = 0.5f;
  int sample_rate = 24000;

  double beat_s() const { return 60.0 / tempo_bpm; }

  void validate() const {
    if (duration_s < kMinClipSeconds - 1e-9 || duration_s > kMaxClipSeconds + 1e-9) {
      throw std::invalid_argument("clip duration must lie in [2.56, 35.84] s");
    }
    if (vocal_gain > 0 && symbols.empty()) throw std::invalid_argument("vocal clips need a symbol sequence");
    if (double(symbols.size()) * beat_s() > duration_s + 1e-9) {
      throw std::invalid_argument("symbol sequence does not fit in the clip at this tempo");
    }
    for (auto s : symbols)
      if (s >= kNumSymbols) throw std::invalid_argument("symbol outside the 16-symbol alphabet");
    if (!dsp::supported_rate(sample_rate)) throw std::invalid_argument("unsupported sample rate");
  }
};

/// Time span of one sung symbol.
struct SymbolSpan {
  double start_s;
  double end_s;
  std::size_t symbol;
};

struct SynthResult {
  dsp::AudioBuffer mix;
  dsp::AudioBuffer vocal;       // isolated stems, same scaling as the mix
  dsp::AudioBuffer background;
  std::vector<std::size_t> transcript;
  std::vector<SymbolSpan> alignment;
};

namespace detail {

// Symbol s = 4 * pitch + vowel. Pitches sit a minor third apart; vowels are
// two-formant (F1, F2) resonances.
inline constexpr std::array<double, 4> kPitchHz = {196.0, 233.1, 277.2, 329.6};
inline constexpr std::array<std::array<double, 2>, 4> kFormants = {{{800, 1200}, {300, 2300}, {350, 800}, {550, 1800}}};

inline double formant_gain(double f, std::size_t vowel) {
  double g = 0.05;
  for (double fc : kFormants[vowel]) {
    const double bw = 90.0 + 0.06 * fc;
    g += 1.0 / (1.0 + ((f - fc) / bw) * ((f - fc) / bw));
  }
  return g;
}

// I-V-vi-IV style progressions as semitone offsets from A2 (110 Hz).
inline constexpr std::array<std::array<std::array<int, 3>, 4>, 4> kProgressions = {{
    {{{0, 4, 7}, {7, 11, 14}, {9, 12, 16}, {5, 9, 12}}},
    {{{0, 3, 7}, {5, 8, 12}, {7, 10, 14}, {3, 7, 10}}},
    {{{2, 5, 9}, {7, 11, 14}, {0, 4, 7}, {0, 4, 7}}},
    {{{0, 4, 7}, {5, 9, 12}, {0, 4, 7}, {7, 11, 14}}},
}};

}  // namespace detail

/// Renders a clip deterministically from its spec. Each symbol occupies the
/// first 80% of its beat (10 ms attack, 30 ms release); the rest is silent
/// so symbol boundaries stay audible.
inline SynthResult synth_clip(const ClipSpec& spec) {
  spec.validate();
  const int sr = spec.sample_rate;
  const auto n = std::size_t(std::llround(spec.duration_s * sr));
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uphase(0.0, 2 * std::numbers::pi);
  std::uniform_real_distribution<double> udetune(-0.004, 0.004);
  constexpr double two_pi = 2 * std::numbers::pi;

  SynthResult out;
  out.vocal = dsp::AudioBuffer{std::vector<float>(n, 0.0f), sr, 1};
  out.background = dsp::AudioBuffer{std::vector<float>(n, 0.0f), sr, 1};

  if (spec.vocal_gain > 0) {
    const double beat = spec.beat_s();
    for (std::size_t i = 0; i < spec.symbols.size(); ++i) {
      const std::size_t s = spec.symbols[i];
      const double f0 = detail::kPitchHz[s / 4] * (1.0 + udetune(rng));
      const std::size_t vowel = s % 4;
      const double t0 = double(i) * beat, t1 = t0 + 0.8 * beat;
      out.alignment.push_back({t0, t1, s});
      const auto a = std::size_t(t0 * sr), b = std::min(n, std::size_t(t1 * sr));
      const std::size_t harmonics = std::size_t(5000.0 / f0);
      std::vector<double> amp(harmonics), ph(harmonics);
      for (std::size_t h = 0; h < harmonics; ++h) {
        amp[h] = detail::formant_gain(f0 * double(h + 1), vowel) / double(h + 1);
        ph[h] = uphase(rng);
      }
      const double vib_phase = uphase(rng);
      double phase = 0;
      for (std::size_t k = a; k < b; ++k) {
        const double t = double(k - a) / sr;
        const double f = f0 * (1.0 + 0.006 * std::sin(two_pi * 5.5 * t + vib_phase));
        phase += two_pi * f / sr;
        double v = 0;
        for (std::size_t h = 0; h < harmonics; ++h) v += amp[h] * std::sin(double(h + 1) * phase + ph[h]);
        const double env = std::min({1.0, t / 0.01, double(b - k) / (0.03 * sr)});
        out.vocal.samples[k] = float(0.25 * spec.vocal_gain * env * v);
      }
    }
    out.transcript = spec.symbols;
  }

  if (spec.background_gain > 0) {
    const auto& prog = detail::kProgressions[spec.chord_pattern % detail::kProgressions.size()];
    const double bar = 4 * spec.beat_s();
    std::array<double, 4> ph{};
    for (auto& p : ph) p = uphase(rng);
    for (std::size_t k = 0; k < n; ++k) {
      const double t = double(k) / sr;
      const auto chord_idx = std::size_t(t / bar) % prog.size();
      const double in_bar = std::fmod(t, bar);
      const auto& chord = prog[chord_idx];
      double v = 0;
      for (std::size_t j = 0; j < 3; ++j) {
        const double f = 110.0 * std::pow(2.0, chord[j] / 12.0);
        for (int h = 1; h <= 4; ++h) v += std::sin(two_pi * f * h * t + ph[j] * h) / (h * h);
      }
      const double bass = 55.0 * std::pow(2.0, chord[0] / 12.0);
      v += 0.8 * std::sin(two_pi * bass * t + ph[3]);
      const double env = 0.6 + 0.4 * std::exp(-3.0 * in_bar);  // soft re-strike each bar
      out.background.samples[k] = float(0.12 * spec.background_gain * env * v);
    }
  }

  out.mix = dsp::AudioBuffer{std::vector<float>(n), sr, 1};
  float peak = 0;
  for (std::size_t k = 0; k < n; ++k) {
    out.mix.samples[k] = out.vocal.samples[k] + out.background.samples[k];
    peak = std::max(peak, std::abs(out.mix.samples[k]));
  }
  if (peak > 0) {
    const float g = kPeakLevel / peak;
    for (auto* buf : {&out.mix, &out.vocal, &out.background})
      for (auto& v : buf->samples) v *= g;
  }
  return out;
}

}  // namespace mucodec::data
