#pragma once

#include <mucodec/core/binary_io.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mucodec::dsp {

inline bool supported_rate(int sr) { return sr == 16000 || sr == 24000 || sr == 48000; }

/// Interleaved PCM samples in [-1, 1].
struct AudioBuffer {
  std::vector<float> samples;
  int sample_rate = 24000;
  int channels = 1;

  std::size_t frames() const { return channels > 0 ? samples.size() / std::size_t(channels) : 0; }
  double duration_s() const { return double(frames()) / double(sample_rate); }

  void validate() const {
    if (channels != 1 && channels != 2) throw std::invalid_argument("audio: channels must be 1 or 2");
    if (!supported_rate(sample_rate)) {
      throw std::invalid_argument("audio: unsupported sample rate " + std::to_string(sample_rate));
    }
    if (samples.size() % std::size_t(channels) != 0) {
      throw std::invalid_argument("audio: sample count not divisible by channel count");
    }
  }

  /// One channel as a mono buffer.
  AudioBuffer channel(int c) const {
    AudioBuffer out{{}, sample_rate, 1};
    out.samples.reserve(frames());
    for (std::size_t i = 0; i < frames(); ++i) out.samples.push_back(samples[i * std::size_t(channels) + std::size_t(c)]);
    return out;
  }

  static AudioBuffer interleave(const std::vector<AudioBuffer>& mono) {
    if (mono.empty()) throw std::invalid_argument("audio: nothing to interleave");
    AudioBuffer out{{}, mono.front().sample_rate, int(mono.size())};
    std::size_t n = mono.front().samples.size();
    for (const auto& m : mono) n = std::min(n, m.samples.size());
    out.samples.resize(n * mono.size());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < mono.size(); ++c) out.samples[i * mono.size() + c] = mono[c].samples[i];
    return out;
  }
};

enum class WavEncoding { kPcm16, kFloat32 };

class WavFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline io::Bytes encode_wav(const AudioBuffer& a, WavEncoding enc = WavEncoding::kPcm16) {
  a.validate();
  const std::uint16_t bits = enc == WavEncoding::kPcm16 ? 16 : 32;
  const std::uint16_t fmt = enc == WavEncoding::kPcm16 ? 1 : 3;
  const std::uint32_t data_bytes = std::uint32_t(a.samples.size() * (bits / 8));
  io::ByteWriter w;
  w.put_bytes("RIFF", 4);
  w.put(std::uint32_t(36 + data_bytes));
  w.put_bytes("WAVE", 4);
  w.put_bytes("fmt ", 4);
  w.put(std::uint32_t(16));
  w.put(fmt);
  w.put(std::uint16_t(a.channels));
  w.put(std::uint32_t(a.sample_rate));
  w.put(std::uint32_t(a.sample_rate * a.channels * (bits / 8)));
  w.put(std::uint16_t(a.channels * (bits / 8)));
  w.put(bits);
  w.put_bytes("data", 4);
  w.put(data_bytes);
  for (float s : a.samples) {
    if (enc == WavEncoding::kPcm16) {
      const long q = std::lround(double(s) * 32768.0);
      w.put(static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L)));
    } else {
      w.put_f32(s);
    }
  }
  return w.take();
}

/// Parses RIFF/WAVE with 16-bit PCM or 32-bit float samples (plain or
/// WAVE_FORMAT_EXTENSIBLE); any other encoding is rejected.
inline AudioBuffer decode_wav(const io::Bytes& bytes) {
  io::ByteReader r(bytes);
  auto tag = [&r] {
    std::string s(4, '\0');
    r.get_bytes(s.data(), 4);
    return s;
  };
  try {
    if (tag() != "RIFF") throw WavFormatError("wav: missing RIFF header");
    r.get<std::uint32_t>();
    if (tag() != "WAVE") throw WavFormatError("wav: not a WAVE file");
    std::uint16_t fmt = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    bool have_fmt = false;
    while (r.remaining() >= 8) {
      const std::string id = tag();
      const auto size = r.get<std::uint32_t>();
      if (id == "fmt ") {
        io::ByteReader f(r.cursor(), std::min<std::size_t>(size, r.remaining()));
        fmt = f.get<std::uint16_t>();
        channels = f.get<std::uint16_t>();
        rate = f.get<std::uint32_t>();
        f.get<std::uint32_t>();
        f.get<std::uint16_t>();
        bits = f.get<std::uint16_t>();
        if (fmt == 0xFFFE) {
          f.get<std::uint16_t>();  // cbSize
          f.get<std::uint16_t>();  // valid bits
          f.get<std::uint32_t>();  // channel mask
          fmt = f.get<std::uint16_t>();  // first two bytes of the sub-format GUID
        }
        have_fmt = true;
        r.skip(size + (size & 1u));
      } else if (id == "data") {
        if (!have_fmt) throw WavFormatError("wav: data chunk before fmt chunk");
        const bool pcm16 = fmt == 1 && bits == 16;
        const bool f32 = fmt == 3 && bits == 32;
        if (!pcm16 && !f32) {
          throw WavFormatError("wav: unsupported encoding (format " + std::to_string(fmt) + ", " +
                               std::to_string(bits) + " bits); expected 16-bit PCM or 32-bit float");
        }
        AudioBuffer a;
        a.sample_rate = int(rate);
        a.channels = int(channels);
        const std::size_t n = std::min<std::size_t>(size, r.remaining()) / (bits / 8);
        a.samples.resize(n - n % std::max<std::size_t>(channels, 1));
        for (auto& s : a.samples) s = pcm16 ? float(r.get<std::int16_t>()) / 32768.0f : r.get_f32();
        a.validate();
        return a;
      } else {
        r.skip(std::min<std::size_t>(size + (size & 1u), r.remaining()));
      }
    }
  } catch (const io::TruncatedError&) {
    throw WavFormatError("wav: truncated file");
  }
  throw WavFormatError("wav: no data chunk");
}

inline AudioBuffer read_wav(const std::string& path) { return decode_wav(io::read_file(path)); }

inline void write_wav(const std::string& path, const AudioBuffer& a, WavEncoding enc = WavEncoding::kPcm16) {
  io::write_file(path, encode_wav(a, enc));
}

}  // namespace mucodec::dsp
