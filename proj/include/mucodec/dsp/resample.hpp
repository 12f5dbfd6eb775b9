#pragma once

#include <mucodec/dsp/audio.hpp>

#include <cmath>
#include <numbers>
#include <numeric>
#include <vector>

namespace mucodec::dsp {

/// Windowed-sinc polyphase resampling between the supported rates. Each of
/// the L output phases has its own tap set normalized to unit DC gain.
inline AudioBuffer resample(const AudioBuffer& in, int target_rate) {
  in.validate();
  if (!supported_rate(target_rate)) {
    throw std::invalid_argument("resample: unsupported rate pair " + std::to_string(in.sample_rate) + " -> " +
                                std::to_string(target_rate));
  }
  if (target_rate == in.sample_rate) return in;

  const int g = std::gcd(in.sample_rate, target_rate);
  const std::size_t up = std::size_t(target_rate / g);    // L
  const std::size_t down = std::size_t(in.sample_rate / g);  // M
  const double cutoff = std::min(1.0, double(target_rate) / double(in.sample_rate)) * 0.95;
  constexpr std::ptrdiff_t kHalf = 32;  // taps either side, in input samples at unit cutoff
  const std::ptrdiff_t half = std::ptrdiff_t(std::ceil(double(kHalf) / cutoff));

  // phase p covers output positions whose fractional input offset is p / L
  std::vector<std::vector<double>> taps(up, std::vector<double>(std::size_t(2 * half + 1)));
  for (std::size_t p = 0; p < up; ++p) {
    const double frac = double(p) / double(up);
    double s = 0;
    for (std::ptrdiff_t j = -half; j <= half; ++j) {
      const double d = double(j) - frac;
      const double x = cutoff * d;
      const double sinc = std::abs(x) < 1e-12 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
      const double u = d / double(half + 1);
      const double win = std::abs(u) < 1.0 ? 0.5 + 0.5 * std::cos(std::numbers::pi * u) : 0.0;
      s += (taps[p][std::size_t(j + half)] = sinc * win);
    }
    for (auto& t : taps[p]) t /= s;
  }

  const std::size_t C = std::size_t(in.channels);
  const std::size_t n_in = in.frames();
  const std::size_t n_out = (n_in * up + down - 1) / down;
  AudioBuffer out{std::vector<float>(n_out * C), target_rate, in.channels};
  for (std::size_t n = 0; n < n_out; ++n) {
    const std::size_t pos = n * down;  // in units of 1/L input samples
    const std::ptrdiff_t base = std::ptrdiff_t(pos / up);
    const auto& h = taps[pos % up];
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0, wsum = 0;
      for (std::ptrdiff_t j = -half; j <= half; ++j) {
        const std::ptrdiff_t k = base + j;
        if (k < 0 || k >= std::ptrdiff_t(n_in)) continue;
        const double w = h[std::size_t(j + half)];
        acc += w * double(in.samples[std::size_t(k) * C + c]);
        wsum += w;
      }
      // renormalize where the kernel hangs over the signal edges
      out.samples[n * C + c] = float(std::abs(wsum) > 1e-3 ? acc / wsum : acc);
    }
  }
  return out;
}

}  // namespace mucodec::dsp
